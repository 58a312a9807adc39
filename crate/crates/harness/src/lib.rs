//! Tools around bentoframe: a script runner, a reference model, the crash
//! tester, benchmarks and the live-upgrade demo.

pub mod bench;
pub mod crashtest;
pub mod demo;
pub mod fsops;
pub mod model;
pub mod mount;
pub mod script;
