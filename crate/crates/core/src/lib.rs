pub mod capture;
pub mod classifier;
pub mod flowtable;
pub mod pipeline;
pub mod session;
pub mod signatures;
pub mod synth;
pub mod time;
