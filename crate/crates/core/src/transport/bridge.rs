//! Serial-over-TCP forwarding in the style of two `socat` instances.
//!
//! ```text
//! emulator ── serial pair ── Relay ══ TCP tunnel ══ Relay ── serial pair ── driver
//! ```
//!
//! Both attached parties keep their RS232 endpoints; only the relays see the
//! tunnel. Payloads are forwarded unchanged and in order per direction.

use std::thread;

use super::pipe::{open_virtual_serial_pair, pipe_pair, PipeEndpoint, DEFAULT_PIPE_CAPACITY};
use super::tcp::loopback_pair;
use super::{Connection, TransportError};
use crate::model::Protocol;
use crate::sched::{Step, Task, WallRunner};

/// Frames moved per direction in one poll.
const RELAY_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TunnelKind {
    /// In-process TCP-tagged pipe; used by lockstep runs.
    Memory,
    /// A real TCP connection over 127.0.0.1.
    Loopback,
}

/// Forwards frames between one serial endpoint and one tunnel end.
pub struct Relay {
    name: String,
    serial: Box<dyn Connection>,
    tunnel: Box<dyn Connection>,
    to_tunnel: u64,
    to_serial: u64,
}

impl Relay {
    pub fn new(name: &str, serial: Box<dyn Connection>, tunnel: Box<dyn Connection>) -> Self {
        Self { name: name.to_string(), serial, tunnel, to_tunnel: 0, to_serial: 0 }
    }

    /// Frames forwarded serial→tunnel and tunnel→serial.
    pub fn forwarded(&self) -> (u64, u64) {
        (self.to_tunnel, self.to_serial)
    }

    fn teardown(&mut self) -> Step {
        self.serial.close();
        self.tunnel.close();
        Step::Done
    }

    fn pump(
        from: &mut dyn Connection,
        to: &mut dyn Connection,
        count: &mut u64,
    ) -> Result<bool, TransportError> {
        let mut moved = false;
        for _ in 0..RELAY_BATCH {
            if !to.can_write() {
                break;
            }
            match from.try_read_frame()? {
                Some(frame) => {
                    to.write_frame(&frame)?;
                    *count += 1;
                    moved = true;
                }
                None => break,
            }
        }
        Ok(moved)
    }
}

impl Task for Relay {
    fn name(&self) -> &str {
        &self.name
    }

    fn poll(&mut self) -> Step {
        let up = Self::pump(&mut *self.serial, &mut *self.tunnel, &mut self.to_tunnel);
        let down = Self::pump(&mut *self.tunnel, &mut *self.serial, &mut self.to_serial);
        match (up, down) {
            (Ok(a), Ok(b)) if a || b => Step::Progress,
            (Ok(_), Ok(_)) => Step::Idle,
            // Either side gone: propagate the close to everything attached.
            _ => self.teardown(),
        }
    }
}

/// The forwarding machinery between an emulated device and its driver.
pub struct EmulatedBridge {
    name: String,
    original_protocol: Protocol,
    device_relay: Relay,
    driver_relay: Relay,
}

impl EmulatedBridge {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn original_protocol(&self) -> Protocol {
        self.original_protocol
    }

    pub fn into_tasks(self) -> Vec<Box<dyn Task>> {
        vec![Box::new(self.device_relay), Box::new(self.driver_relay)]
    }

    /// Runs the relays on their own threads; they stop on teardown.
    pub fn spawn(self) -> WallRunner {
        let mut runner = WallRunner::new();
        for task in self.into_tasks() {
            runner.spawn(task);
        }
        runner
    }

    /// Forwards until either attached party or the tunnel goes away.
    pub fn forward(self) {
        let Self { device_relay, driver_relay, .. } = self;
        let a = thread::spawn(move || run_to_completion(device_relay));
        let b = thread::spawn(move || run_to_completion(driver_relay));
        let _ = a.join();
        let _ = b.join();
    }
}

fn run_to_completion(mut relay: Relay) {
    loop {
        match relay.poll() {
            Step::Progress => {}
            Step::Idle => thread::sleep(std::time::Duration::from_micros(200)),
            Step::Done => return,
        }
    }
}

/// Endpoints handed to the attached parties. Both are RS232-tagged.
pub struct EmulatedLink {
    pub device: PipeEndpoint,
    pub driver: PipeEndpoint,
}

/// Builds the full emulated connection: two virtual serial pairs joined by a
/// tunnel. `device_port` and `driver_port` name the endpoints the attached
/// parties open.
pub fn open_emulated_link(
    name: &str,
    device_port: &str,
    driver_port: &str,
    tunnel: TunnelKind,
) -> Result<(EmulatedLink, EmulatedBridge), TransportError> {
    let (device, device_bridge) =
        open_virtual_serial_pair(device_port, &format!("{name}.device"))?.into_parts();
    let (driver, driver_bridge) =
        open_virtual_serial_pair(driver_port, &format!("{name}.driver"))?.into_parts();
    let (tunnel_a, tunnel_b): (Box<dyn Connection>, Box<dyn Connection>) = match tunnel {
        TunnelKind::Memory => {
            let (a, b) = pipe_pair(
                Protocol::Tcp,
                &format!("{name}.tunnel.device"),
                &format!("{name}.tunnel.driver"),
                DEFAULT_PIPE_CAPACITY,
            );
            (Box::new(a), Box::new(b))
        }
        TunnelKind::Loopback => {
            let (a, b) = loopback_pair()?;
            (Box::new(a), Box::new(b))
        }
    };
    let bridge = EmulatedBridge {
        name: name.to_string(),
        original_protocol: Protocol::Rs232,
        device_relay: Relay::new(&format!("{name}.relay.device"), Box::new(device_bridge), tunnel_a),
        driver_relay: Relay::new(&format!("{name}.relay.driver"), Box::new(driver_bridge), tunnel_b),
    };
    Ok((EmulatedLink { device, driver }, bridge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BitPayload;
    use crate::sched::{Clock, LockstepScheduler};
    use std::time::Duration;

    fn p(bytes: &[u8]) -> BitPayload {
        BitPayload::from(bytes)
    }

    #[test]
    fn forwards_identity_in_lockstep() {
        let (mut link, bridge) =
            open_emulated_link("br", "emuA", "ptyB", TunnelKind::Memory).unwrap();
        assert_eq!(link.driver.protocol(), Protocol::Rs232);
        assert_eq!(link.device.protocol(), Protocol::Rs232);
        let mut sched = LockstepScheduler::new(Clock::logical(), 3);
        for t in bridge.into_tasks() {
            sched.spawn(t);
        }
        link.device.write_frame(&p(&[0x10, 0, 0, 0, 1])).unwrap();
        link.device.write_frame(&p(&[0x10, 0, 0, 0, 2])).unwrap();
        link.driver.write_frame(&p(&[0x01, 0, 50])).unwrap();
        sched.run_tick(0).unwrap();
        assert_eq!(link.driver.try_read_frame().unwrap(), Some(p(&[0x10, 0, 0, 0, 1])));
        assert_eq!(link.driver.try_read_frame().unwrap(), Some(p(&[0x10, 0, 0, 0, 2])));
        assert_eq!(link.device.try_read_frame().unwrap(), Some(p(&[0x01, 0, 50])));
        assert_eq!(link.driver.try_read_frame().unwrap(), None);
    }

    #[test]
    fn forwards_over_loopback_tcp() {
        let (mut link, bridge) =
            open_emulated_link("br", "emuA", "ptyB", TunnelKind::Loopback).unwrap();
        let runner = bridge.spawn();
        link.device.write_frame(&p(&[1, 2, 3])).unwrap();
        assert_eq!(link.driver.read_frame().unwrap(), p(&[1, 2, 3]));
        link.driver.write_frame(&p(&[4])).unwrap();
        assert_eq!(link.device.read_frame().unwrap(), p(&[4]));
        drop(link);
        runner.join();
    }

    #[test]
    fn teardown_propagates_to_both_ends() {
        let (link, bridge) = open_emulated_link("br", "emuA", "ptyB", TunnelKind::Loopback).unwrap();
        let EmulatedLink { mut device, driver } = link;
        let handle = thread::spawn(move || bridge.forward());
        drop(driver);
        let err = device.read_frame_timeout(Duration::from_secs(5));
        assert!(matches!(err, Err(TransportError::ConnectionClosed)));
        handle.join().unwrap();
    }

    #[test]
    fn tunnel_failure_closes_both_endpoints() {
        let (device_pair_dev, device_pair_bridge) =
            open_virtual_serial_pair("emuA", "bridge.device").unwrap().into_parts();
        let (driver_pair_drv, driver_pair_bridge) =
            open_virtual_serial_pair("ptyB", "bridge.driver").unwrap().into_parts();
        let (t1, t2) = pipe_pair(Protocol::Tcp, "t1", "t2", 16);
        let mut relay_a = Relay::new("a", Box::new(device_pair_bridge), Box::new(t1));
        let mut relay_b = Relay::new("b", Box::new(driver_pair_bridge), Box::new(t2));
        let (mut dev, mut drv) = (device_pair_dev, driver_pair_drv);
        dev.write_frame(&p(&[1])).unwrap();
        assert_eq!(relay_a.poll(), Step::Progress);
        assert_eq!(relay_b.poll(), Step::Progress);
        assert_eq!(drv.try_read_frame().unwrap(), Some(p(&[1])));
        // Kill the tunnel under relay_b: both relays finish and both ends error.
        relay_b.tunnel.close();
        assert_eq!(relay_b.poll(), Step::Done);
        assert_eq!(relay_a.poll(), Step::Done);
        assert!(matches!(drv.try_read_frame(), Err(TransportError::ConnectionClosed)));
        assert!(matches!(dev.try_read_frame(), Err(TransportError::ConnectionClosed)));
        assert_eq!(relay_a.forwarded(), (1, 0));
    }
}
