use std::sync::Arc;

use super::{
    CommandSet, DeviceError, DeviceStats, Driver, DriverStats, Emulator, EmulatorContext,
    MeasurementScript, Sensor, StateProbe,
};
use crate::bus::{Consumer, Producer};
use crate::model::{Message, Protocol};
use crate::sched::{Clock, Task, WallRunner};
use crate::transport::{open_emulated_link, open_virtual_serial_pair, Connection, TunnelKind};

pub enum DeviceBehavior {
    Sensor(MeasurementScript),
    Emulator(EmulatorContext),
}

pub struct DeviceSpec {
    pub name: String,
    pub commands: CommandSet,
    pub behavior: DeviceBehavior,
}

impl DeviceSpec {
    pub fn sensor(name: &str, commands: CommandSet, script: MeasurementScript) -> Self {
        Self { name: name.into(), commands, behavior: DeviceBehavior::Sensor(script) }
    }

    pub fn emulator(name: &str, commands: CommandSet, context: EmulatorContext) -> Self {
        Self { name: name.into(), commands, behavior: DeviceBehavior::Emulator(context) }
    }
}

pub struct DriverSpec {
    pub name: String,
    pub commands: CommandSet,
    pub emitter: Producer<Message>,
    pub consumer: Consumer<Message>,
}

/// How device and driver are connected. The driver opens `driver_port` in
/// both cases; only the middle differs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkSpec {
    Serial { device_port: String, driver_port: String },
    Bridge { name: String, device_port: String, driver_port: String, tunnel: TunnelKind },
}

impl LinkSpec {
    pub fn driver_port(&self) -> &str {
        match self {
            Self::Serial { driver_port, .. } | Self::Bridge { driver_port, .. } => driver_port,
        }
    }

    /// Identifies what the driver port is bound to.
    pub fn binding(&self) -> String {
        match self {
            Self::Serial { device_port, driver_port } => format!("serial:{device_port}<->{driver_port}"),
            Self::Bridge { name, .. } => format!("bridge:{name}"),
        }
    }
}

/// A wired device/driver pair, ready to be scheduled.
pub struct CommunicationSession {
    pub tasks: Vec<Box<dyn Task>>,
    pub probe: StateProbe,
    pub device_stats: Arc<DeviceStats>,
    pub driver_stats: Arc<DriverStats>,
    pub binding: String,
    pub driver_protocol: Protocol,
}

impl CommunicationSession {
    pub fn spawn(self) -> WallRunner {
        let mut runner = WallRunner::new();
        for t in self.tasks {
            runner.spawn(t);
        }
        runner
    }
}

/// Wires device serving and driver send/receive over `link`. Refuses to start
/// unless device and driver accept exactly the same commands.
pub fn run_communication(
    device: DeviceSpec,
    driver: DriverSpec,
    link: LinkSpec,
    clock: &Clock,
) -> Result<CommunicationSession, DeviceError> {
    if device.commands != driver.commands {
        return Err(DeviceError::CommandSetMismatch { device: device.commands, driver: driver.commands });
    }
    let binding = link.binding();
    let mut tasks: Vec<Box<dyn Task>> = Vec::new();
    let (device_end, driver_end): (Box<dyn Connection>, Box<dyn Connection>) = match &link {
        LinkSpec::Serial { device_port, driver_port } => {
            let (a, b) = open_virtual_serial_pair(device_port, driver_port)?.into_parts();
            (Box::new(a), Box::new(b))
        }
        LinkSpec::Bridge { name, device_port, driver_port, tunnel } => {
            let (ends, bridge) = open_emulated_link(name, device_port, driver_port, *tunnel)?;
            tasks.extend(bridge.into_tasks());
            (Box::new(ends.device), Box::new(ends.driver))
        }
    };
    let driver_protocol = driver_end.protocol();
    let (probe, device_stats, device_task): (_, _, Box<dyn Task>) = match device.behavior {
        DeviceBehavior::Sensor(script) => {
            let s = Sensor::new(&device.name, device_end, device.commands, script, clock.clone());
            (s.probe(), s.stats(), Box::new(s))
        }
        DeviceBehavior::Emulator(ctx) => {
            let e = Emulator::new(&device.name, device_end, device.commands, ctx, clock.clone());
            (e.probe(), e.stats(), Box::new(e))
        }
    };
    let drv = Driver::new(&driver.name, driver_end, driver.commands, driver.emitter, driver.consumer);
    let driver_stats = drv.stats();
    tasks.push(device_task);
    tasks.push(Box::new(drv));
    Ok(CommunicationSession { tasks, probe, device_stats, driver_stats, binding, driver_protocol })
}
