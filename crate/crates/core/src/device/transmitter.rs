use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::sched::{Step, Task};
use crate::transport::{Connection, TransportError};

const BATCH: usize = 64;

/// Connections attached to the transmitter device.
pub struct TransmitterLinks {
    /// TCP link to the transmitter driver inside the control system.
    pub driver: Box<dyn Connection>,
    /// Outbound link towards the digital side (responses).
    pub ingest: Option<Box<dyn Connection>>,
    /// Inbound link from a digital twin (commands). Absent for shadows.
    pub uplink: Option<Box<dyn Connection>>,
    /// Inbound link from a remote operator (commands).
    pub operator: Option<Box<dyn Connection>>,
}

#[derive(Debug, Default)]
pub struct TransmitterStats {
    pub uplink_commands: AtomicU64,
    pub operator_commands: AtomicU64,
    pub responses: AtomicU64,
    pub dropped_responses: AtomicU64,
}

impl TransmitterStats {
    pub fn uplink_commands(&self) -> u64 {
        self.uplink_commands.load(Ordering::SeqCst)
    }

    pub fn operator_commands(&self) -> u64 {
        self.operator_commands.load(Ordering::SeqCst)
    }

    pub fn responses(&self) -> u64 {
        self.responses.load(Ordering::SeqCst)
    }
}

/// The radio end of the physical twin. Commands from the remote side go to
/// the driver; responses from the driver go out on the ingest link. Frames
/// pass through unchanged.
pub struct Transmitter {
    name: String,
    links: TransmitterLinks,
    stats: Arc<TransmitterStats>,
}

enum Moved {
    Some(usize),
    SourceClosed,
}

fn pump(from: &mut dyn Connection, to: &mut dyn Connection) -> Result<Moved, TransportError> {
    let mut n = 0;
    for _ in 0..BATCH {
        if !to.can_write() {
            break;
        }
        match from.try_read_frame() {
            Ok(Some(frame)) => {
                to.write_frame(&frame)?;
                n += 1;
            }
            Ok(None) => break,
            Err(e) if e.is_closed() => return Ok(Moved::SourceClosed),
            Err(e) => return Err(e),
        }
    }
    Ok(Moved::Some(n))
}

impl Transmitter {
    pub fn new(name: &str, links: TransmitterLinks) -> Self {
        Self { name: name.to_string(), links, stats: Arc::new(TransmitterStats::default()) }
    }

    pub fn stats(&self) -> Arc<TransmitterStats> {
        Arc::clone(&self.stats)
    }

    pub fn has_uplink(&self) -> bool {
        self.links.uplink.is_some()
    }

    fn inbound(
        link: &mut Option<Box<dyn Connection>>,
        driver: &mut dyn Connection,
        counter: &AtomicU64,
    ) -> Result<usize, TransportError> {
        let Some(conn) = link.as_mut() else { return Ok(0) };
        match pump(&mut **conn, driver)? {
            Moved::Some(n) => {
                counter.fetch_add(n as u64, Ordering::SeqCst);
                Ok(n)
            }
            Moved::SourceClosed => {
                *link = None;
                Ok(1)
            }
        }
    }

    fn step(&mut self) -> Result<bool, TransportError> {
        let links = &mut self.links;
        let mut moved = Self::inbound(&mut links.uplink, &mut *links.driver, &self.stats.uplink_commands)?;
        moved += Self::inbound(&mut links.operator, &mut *links.driver, &self.stats.operator_commands)?;
        for _ in 0..BATCH {
            match links.ingest.as_mut() {
                Some(ingest) => {
                    if !ingest.can_write() {
                        break;
                    }
                    let Some(frame) = links.driver.try_read_frame()? else { break };
                    if ingest.write_frame(&frame).is_err() {
                        // Digital side went away; the physical twin keeps running.
                        links.ingest = None;
                        self.stats.dropped_responses.fetch_add(1, Ordering::SeqCst);
                    } else {
                        self.stats.responses.fetch_add(1, Ordering::SeqCst);
                    }
                }
                None => {
                    let Some(_) = links.driver.try_read_frame()? else { break };
                    self.stats.dropped_responses.fetch_add(1, Ordering::SeqCst);
                }
            }
            moved += 1;
        }
        Ok(moved > 0)
    }

    fn shutdown(&mut self) {
        self.links.driver.close();
        for link in [&mut self.links.ingest, &mut self.links.uplink, &mut self.links.operator] {
            if let Some(c) = link.as_mut() {
                c.close();
            }
        }
    }
}

impl Task for Transmitter {
    fn name(&self) -> &str {
        &self.name
    }

    fn poll(&mut self) -> Step {
        match self.step() {
            Ok(true) => Step::Progress,
            Ok(false) => Step::Idle,
            Err(_) => {
                self.shutdown();
                Step::Done
            }
        }
    }
}
