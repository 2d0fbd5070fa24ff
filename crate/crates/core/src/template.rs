//! Template manifests: document references, the control software identity and
//! the digital-model definition, checked together.
//!
//! ```toml
//! [[documents]]
//! path = "docs/blueprint.md"
//! type = "BLUEPRINT"
//!
//! [software]
//! ref = "<sha256 hex of the build>"
//! path = "bin/control"        # optional; hashed and compared with ref
//! config = "twin.toml"        # optional; twin configuration for a prototype run
//!
//! [model]
//! states = ["STANDBY", "ACTIVE", "OFF"]
//! initial = "STANDBY"
//! final = ["OFF"]
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TwinConfig;
use crate::digital_thread::sha256_file;
use crate::machine::StateMachineDef;
use crate::model::OperatingState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DocType {
    Blueprint,
    TechnicalManual,
    BillOfMaterials,
    Generic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentRef {
    pub path: PathBuf,
    #[serde(rename = "type")]
    pub doc_type: DocType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftwareRef {
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub states: BTreeSet<OperatingState>,
    pub initial: OperatingState,
    #[serde(rename = "final", default)]
    pub finals: BTreeSet<OperatingState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateManifest {
    #[serde(default)]
    pub documents: Vec<DocumentRef>,
    pub software: SoftwareRef,
    pub model: ModelRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("cannot parse manifest: {0}")]
    ParseError(String),
    #[error("missing document {0}")]
    MissingDocument(PathBuf),
    #[error("software ref is empty")]
    EmptySoftwareRef,
    #[error("software build {path} hashes to {actual}, manifest says {expected}")]
    SoftwareRefMismatch { path: PathBuf, expected: String, actual: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid twin configuration {path}: {message}")]
    InvalidConfig { path: PathBuf, message: String },
}

/// Every violation found in one manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateReport {
    pub path: PathBuf,
    pub errors: Vec<TemplateError>,
}

impl fmt::Display for TemplateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} problem(s)", self.path.display(), self.errors.len())?;
        for e in &self.errors {
            write!(f, "\n  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for TemplateReport {}

/// A manifest that passed validation, with its paths resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub manifest: TemplateManifest,
    pub model: StateMachineDef,
    pub config: Option<TwinConfig>,
    pub root: PathBuf,
}

impl ModelRef {
    pub fn load(&self) -> Result<StateMachineDef, TemplateError> {
        StateMachineDef::new(self.states.clone(), self.initial, self.finals.clone())
            .map_err(|e| TemplateError::InvalidModel(e.to_string()))
    }

    pub fn describe(def: &StateMachineDef) -> Self {
        Self { states: def.states().clone(), initial: def.initial(), finals: def.finals().clone() }
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        root.join(p)
    } else {
        p.to_path_buf()
    }
}

/// Checks a manifest file. Relative paths are resolved against its directory.
pub fn validate_template(path: &Path) -> Result<Template, TemplateReport> {
    let fail = |errors| TemplateReport { path: path.to_path_buf(), errors };
    let text = std::fs::read_to_string(path)
        .map_err(|e| fail(vec![TemplateError::ParseError(e.to_string())]))?;
    let manifest: TemplateManifest =
        toml::from_str(&text).map_err(|e| fail(vec![TemplateError::ParseError(e.to_string())]))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut errors = Vec::new();

    for doc in &manifest.documents {
        if !resolve(&root, &doc.path).is_file() {
            errors.push(TemplateError::MissingDocument(doc.path.clone()));
        }
    }

    let reference = manifest.software.reference.trim();
    if reference.is_empty() {
        errors.push(TemplateError::EmptySoftwareRef);
    }
    if let Some(bin) = &manifest.software.path {
        match sha256_file(&resolve(&root, bin)) {
            Ok(actual) if reference.is_empty() || actual == reference.to_ascii_lowercase() => {}
            Ok(actual) => errors.push(TemplateError::SoftwareRefMismatch {
                path: bin.clone(),
                expected: reference.to_string(),
                actual,
            }),
            Err(_) => errors.push(TemplateError::MissingDocument(bin.clone())),
        }
    }

    let config = match &manifest.software.config {
        Some(cfg) => {
            let full = resolve(&root, cfg);
            if !full.is_file() {
                errors.push(TemplateError::MissingDocument(cfg.clone()));
                None
            } else {
                match TwinConfig::load(&full) {
                    Ok(c) => Some(c),
                    Err(e) => {
                        errors.push(TemplateError::InvalidConfig { path: cfg.clone(), message: e.to_string() });
                        None
                    }
                }
            }
        }
        None => None,
    };

    let model = match manifest.model.load() {
        Ok(m) => Some(m),
        Err(e) => {
            errors.push(e);
            None
        }
    };

    match model {
        Some(model) if errors.is_empty() => Ok(Template { manifest, model, config, root }),
        _ => Err(fail(errors)),
    }
}
