//! Digital twin runtime: typed messages and codec, framed transports with a
//! serial-over-TCP bridge, an in-process event bus, devices and emulators,
//! the embedded control logic, the state-machine model, the digital thread,
//! the MAPE-K loop and the scenario harness.

pub mod bus;
pub mod config;
pub mod control;
pub mod device;
pub mod harness;
pub mod digital_thread;
pub mod machine;
pub mod mapek;
pub mod model;
pub mod sched;
pub mod template;
pub mod transport;
