//! Embedded control logic and the physical-twin assembly around it.
//!
//! The control logic only relays: commands from the transmitter go to the
//! sensor, responses from the sensor go to the transmitter. It remembers the
//! last commanded period and logs traffic while that period is positive.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;
use thiserror::Error;

use crate::bus::{BusError, Consumer, EventBus, Producer, Topic};
use crate::config::{Backing, TwinConfig};
use crate::device::{
    load_recordings, run_communication, CommandSet, DeviceError, DeviceSpec, DeviceStats, Driver,
    DriverSpec, DriverStats, EmulatorContext, LinkSpec, MeasurementScript, StateProbe, Transmitter,
    TransmitterLinks, TransmitterStats,
};
use crate::digital_thread::{Direction, RecordBody, ThreadError, ThreadLog};
use crate::model::Message;
use crate::sched::{Clock, Step, Task};
use crate::transport::{open_tcp_link, Connection, TransportError, TunnelKind};

const BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub timestamp: u64,
    pub direction: Direction,
    pub message: Message,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ControlState {
    pub period: i16,
    pub data_log: Vec<LogEntry>,
    pub commands_forwarded: u64,
    pub responses_forwarded: u64,
}

impl ControlState {
    fn log(&mut self, timestamp: u64, direction: Direction, message: Message) {
        if self.period > 0 {
            self.data_log.push(LogEntry { timestamp, direction, message });
        }
    }

    /// Writes the data log in thread format. Commands are DT2PT, responses PT2DT.
    pub fn flush_data_log(&self, path: &Path) -> Result<(), ThreadError> {
        let mut log = ThreadLog::create(path)?;
        for e in &self.data_log {
            log.append_record(e.timestamp, e.direction, RecordBody::Message(e.message))?;
        }
        log.flush()
    }
}

pub struct ControlLogic {
    name: String,
    state: Arc<Mutex<ControlState>>,
    clock: Clock,
    from_transmitter: Consumer<Message>,
    from_sensor: Consumer<Message>,
    to_sensor: Producer<Message>,
    to_transmitter: Producer<Message>,
}

impl ControlLogic {
    pub fn new(bus: &EventBus<Message>, topics: &crate::config::Topics, clock: Clock) -> Result<Self, BusError> {
        Ok(Self {
            name: "control".into(),
            state: Arc::new(Mutex::new(ControlState::default())),
            clock,
            from_transmitter: bus.subscribe(&Topic::new(&topics.tx_command)?),
            from_sensor: bus.subscribe(&Topic::new(&topics.sensor_response)?),
            to_sensor: bus.producer(&Topic::new(&topics.ctl_command)?),
            to_transmitter: bus.producer(&Topic::new(&topics.ctl_response)?),
        })
    }

    pub fn state(&self) -> Arc<Mutex<ControlState>> {
        Arc::clone(&self.state)
    }

    fn lock(&self) -> MutexGuard<'_, ControlState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Sets the period from a command, forwards it to the sensor and logs it
    /// when the new period is positive.
    pub fn handle_transmitter_command(&self, cmd: Message) {
        let ts = self.clock.stamp();
        {
            let mut st = self.lock();
            if let Message::Command(period) = cmd {
                st.period = period;
            }
            st.log(ts, Direction::DtToPt, cmd);
            st.commands_forwarded += 1;
        }
        self.to_sensor.emit(cmd);
    }

    /// Forwards a sensor response to the transmitter unchanged.
    pub fn handle_sensor_response(&self, rsp: Message) {
        let ts = self.clock.stamp();
        {
            let mut st = self.lock();
            st.log(ts, Direction::PtToDt, rsp);
            st.responses_forwarded += 1;
        }
        self.to_transmitter.emit(rsp);
    }

    fn step(&mut self) -> Result<bool, BusError> {
        let mut moved = false;
        for _ in 0..BATCH {
            if !self.to_sensor.can_emit() {
                break;
            }
            let Some(cmd) = self.from_transmitter.try_consume()? else { break };
            self.handle_transmitter_command(cmd);
            moved = true;
        }
        for _ in 0..BATCH {
            if !self.to_transmitter.can_emit() {
                break;
            }
            let Some(rsp) = self.from_sensor.try_consume()? else { break };
            self.handle_sensor_response(rsp);
            moved = true;
        }
        Ok(moved)
    }
}

impl Task for ControlLogic {
    fn name(&self) -> &str {
        &self.name
    }

    fn poll(&mut self) -> Step {
        match self.step() {
            Ok(true) => Step::Progress,
            Ok(false) => Step::Idle,
            Err(_) => Step::Done,
        }
    }
}

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("emulated backing needs a recording file{}", .0.as_ref().map(|p| format!(" ({} not found)", p.display())).unwrap_or_default())]
    RecordingMissing(Option<PathBuf>),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AssemblyKind {
    Physical,
    Prototype,
}

/// Connections from the physical twin to the outside world.
#[derive(Default)]
pub struct ExternalLinks {
    pub ingest: Option<Box<dyn Connection>>,
    pub uplink: Option<Box<dyn Connection>>,
    pub operator: Option<Box<dyn Connection>>,
}

#[derive(Debug, Serialize)]
struct DriverDump<'a> {
    port: &'a str,
    protocol: String,
    commands: &'a CommandSet,
}

#[derive(Debug, Serialize)]
struct ControlDump<'a> {
    commands_from: &'a str,
    commands_to: &'a str,
    responses_from: &'a str,
    responses_to: &'a str,
    log_flush: Option<String>,
}

#[derive(Debug, Serialize)]
struct AssemblyDump<'a> {
    control: ControlDump<'a>,
    sensor_driver: DriverDump<'a>,
    transmitter_driver: DriverDump<'a>,
    link_binding: String,
}

/// A running physical twin or prototype: sensor (or emulator) with driver,
/// control logic, transmitter with driver.
pub struct TwinAssembly {
    pub kind: AssemblyKind,
    pub backing: Backing,
    pub tasks: Vec<Box<dyn Task>>,
    pub bus: EventBus<Message>,
    pub sensor_probe: StateProbe,
    pub sensor_stats: Arc<DeviceStats>,
    pub sensor_driver: Arc<DriverStats>,
    pub transmitter: Arc<TransmitterStats>,
    pub control: Arc<Mutex<ControlState>>,
    pub log_flush: Option<PathBuf>,
    config_dump: String,
}

impl TwinAssembly {
    /// Serialized driver and control configuration.
    pub fn config_dump(&self) -> &str {
        &self.config_dump
    }

    /// Writes the control data log if a flush path is configured.
    pub fn flush_data_log(&self) -> Result<(), ThreadError> {
        match &self.log_flush {
            Some(path) => self.control.lock().unwrap_or_else(|e| e.into_inner()).flush_data_log(path),
            None => Ok(()),
        }
    }
}

/// Builds the embedded control system with the sensor backed by the real
/// stand-in or by an emulator over the serial-over-TCP bridge. Everything
/// except the sensor's link binding is configured identically.
pub fn assemble_twin(
    cfg: &TwinConfig,
    backing: Backing,
    clock: &Clock,
    script: MeasurementScript,
    links: ExternalLinks,
) -> Result<TwinAssembly, AssemblyError> {
    let pt = &cfg.pt;
    let mode = clock.mode();
    let bus = EventBus::new();
    let topic = |name: &str| Topic::new(name);

    let (kind, device, link) = match backing {
        Backing::Real => (
            AssemblyKind::Physical,
            DeviceSpec::sensor("sensor", pt.commands.clone(), script),
            LinkSpec::Serial { device_port: pt.device_link.clone(), driver_port: pt.sensor_link.clone() },
        ),
        Backing::Emulated => {
            let path = pt.recording.clone().ok_or(AssemblyError::RecordingMissing(None))?;
            if !path.is_file() {
                return Err(AssemblyError::RecordingMissing(Some(path)));
            }
            let ctx = EmulatorContext::new(load_recordings(&path)?, pt.emulator_mode);
            let tunnel = match mode {
                crate::sched::ClockMode::Lockstep => TunnelKind::Memory,
                crate::sched::ClockMode::Wall => TunnelKind::Loopback,
            };
            (
                AssemblyKind::Prototype,
                DeviceSpec::emulator("sensor.emulator", pt.commands.clone(), ctx),
                LinkSpec::Bridge {
                    name: "sensor-bridge".into(),
                    device_port: pt.device_link.clone(),
                    driver_port: pt.sensor_link.clone(),
                    tunnel,
                },
            )
        }
    };
    let binding = link.binding();

    let driver = DriverSpec {
        name: "sensor.driver".into(),
        commands: pt.commands.clone(),
        emitter: bus.producer(&topic(&pt.topics.sensor_response)?),
        consumer: bus.subscribe(&topic(&pt.topics.ctl_command)?),
    };
    let session = run_communication(device, driver, link, clock)?;
    let sensor_protocol = session.driver_protocol;

    let control = ControlLogic::new(&bus, &pt.topics, clock.clone())?;
    let control_state = control.state();

    let (driver_conn, device_conn) = open_tcp_link(mode, &pt.transmitter_addr, "transmitter.driver", "transmitter")?;
    let tx_protocol = driver_conn.protocol();
    let tx_driver = Driver::new(
        "transmitter.driver",
        driver_conn,
        pt.commands.clone(),
        bus.producer(&topic(&pt.topics.tx_command)?),
        bus.subscribe(&topic(&pt.topics.ctl_response)?),
    );
    let transmitter = Transmitter::new(
        "transmitter",
        TransmitterLinks { driver: device_conn, ingest: links.ingest, uplink: links.uplink, operator: links.operator },
    );
    let transmitter_stats = transmitter.stats();

    let dump = AssemblyDump {
        control: ControlDump {
            commands_from: &pt.topics.tx_command,
            commands_to: &pt.topics.ctl_command,
            responses_from: &pt.topics.sensor_response,
            responses_to: &pt.topics.ctl_response,
            log_flush: pt.log_flush.as_ref().map(|p| p.display().to_string()),
        },
        sensor_driver: DriverDump { port: &pt.sensor_link, protocol: sensor_protocol.to_string(), commands: &pt.commands },
        transmitter_driver: DriverDump {
            port: &pt.transmitter_addr,
            protocol: tx_protocol.to_string(),
            commands: &pt.commands,
        },
        link_binding: binding,
    };
    let config_dump = toml::to_string(&dump).expect("assembly dump serializes");

    let mut tasks = session.tasks;
    tasks.push(Box::new(control));
    tasks.push(Box::new(tx_driver));
    tasks.push(Box::new(transmitter));
    Ok(TwinAssembly {
        kind,
        backing,
        tasks,
        bus,
        sensor_probe: session.probe,
        sensor_stats: session.device_stats,
        sensor_driver: session.driver_stats,
        transmitter: transmitter_stats,
        control: control_state,
        log_flush: pt.log_flush.clone(),
        config_dump,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Topics;
    use crate::digital_thread::read_records;
    use crate::model::{encode_message, OperatingState};

    fn logic() -> (ControlLogic, Consumer<Message>, Consumer<Message>) {
        let bus = EventBus::new();
        let topics = Topics::default();
        let ctl = ControlLogic::new(&bus, &topics, Clock::logical()).unwrap();
        let to_sensor = bus.subscribe(&Topic::new(&topics.ctl_command).unwrap());
        let to_tx = bus.subscribe(&Topic::new(&topics.ctl_response).unwrap());
        (ctl, to_sensor, to_tx)
    }

    #[test]
    fn starts_with_zero_period_and_empty_log() {
        let (ctl, _, _) = logic();
        let st = ctl.state();
        let st = st.lock().unwrap();
        assert_eq!(st.period, 0);
        assert!(st.data_log.is_empty());
    }

    #[test]
    fn commands_set_period_and_log_only_when_positive() {
        let (ctl, to_sensor, _) = logic();
        ctl.handle_transmitter_command(Message::Command(50));
        ctl.handle_transmitter_command(Message::Command(0));
        ctl.handle_transmitter_command(Message::Command(-1));
        let st = ctl.state();
        let st = st.lock().unwrap();
        assert_eq!(st.period, -1);
        assert_eq!(st.data_log.len(), 1);
        assert_eq!(st.data_log[0].message, Message::Command(50));
        let forwarded: Vec<_> = std::iter::from_fn(|| to_sensor.try_consume().unwrap()).collect();
        assert_eq!(forwarded, [Message::Command(50), Message::Command(0), Message::Command(-1)]);
    }

    #[test]
    fn responses_relay_verbatim_and_log_at_positive_period() {
        let (ctl, _, to_tx) = logic();
        ctl.handle_sensor_response(Message::Status(OperatingState::Active));
        ctl.handle_transmitter_command(Message::Command(50));
        ctl.handle_sensor_response(Message::Measurement(7));
        let out: Vec<_> = std::iter::from_fn(|| to_tx.try_consume().unwrap()).collect();
        assert_eq!(out, [Message::Status(OperatingState::Active), Message::Measurement(7)]);
        assert_eq!(encode_message(&out[1]), encode_message(&Message::Measurement(7)));
        let st = ctl.state();
        let st = st.lock().unwrap();
        assert_eq!(st.data_log.len(), 2);
        assert_eq!(st.commands_forwarded + st.responses_forwarded, 3);
    }

    #[test]
    fn data_log_flushes_as_thread() {
        let (ctl, _, _) = logic();
        ctl.handle_transmitter_command(Message::Command(20));
        ctl.handle_sensor_response(Message::Status(OperatingState::Active));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("datalog.thread");
        ctl.state().lock().unwrap().flush_data_log(&path).unwrap();
        let recs = read_records(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].direction, Direction::DtToPt);
    }

    fn recording_file(dir: &Path) -> PathBuf {
        let path = dir.join("sensor.rec");
        let mut log = ThreadLog::create(&path).unwrap();
        log.append_record(0, Direction::PtToDt, RecordBody::Message(Message::Status(OperatingState::Standby)))
            .unwrap();
        path
    }

    #[test]
    fn physical_and_prototype_differ_only_in_link_binding() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TwinConfig::default();
        cfg.pt.recording = Some(recording_file(dir.path()));
        let clock = Clock::logical();
        let real = assemble_twin(&cfg, Backing::Real, &clock, MeasurementScript::default(), ExternalLinks::default())
            .unwrap();
        let emu = assemble_twin(&cfg, Backing::Emulated, &clock, MeasurementScript::default(), ExternalLinks::default())
            .unwrap();
        assert_eq!(real.kind, AssemblyKind::Physical);
        assert_eq!(emu.kind, AssemblyKind::Prototype);
        let diff: Vec<(&str, &str)> = real
            .config_dump()
            .lines()
            .zip(emu.config_dump().lines())
            .filter(|(a, b)| a != b)
            .collect();
        assert_eq!(real.config_dump().lines().count(), emu.config_dump().lines().count());
        assert_eq!(diff.len(), 1, "{diff:?}");
        assert!(diff[0].0.starts_with("link_binding"));
    }

    #[test]
    fn emulated_backing_requires_a_recording() {
        let cfg = TwinConfig::default();
        let r = assemble_twin(&cfg, Backing::Emulated, &Clock::logical(), MeasurementScript::default(), ExternalLinks::default());
        assert!(matches!(r, Err(AssemblyError::RecordingMissing(None))));
        let mut cfg = TwinConfig::default();
        cfg.pt.recording = Some(PathBuf::from("/nonexistent/sensor.rec"));
        let r = assemble_twin(&cfg, Backing::Emulated, &Clock::logical(), MeasurementScript::default(), ExternalLinks::default());
        assert!(matches!(r, Err(AssemblyError::RecordingMissing(Some(_)))));
    }
}
