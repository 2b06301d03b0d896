pub mod audio;
pub mod client;
pub mod clock;
pub mod config;
pub mod control;
pub mod engine;
pub mod fuzz;
pub mod generators;
pub mod latency;
pub mod net;
pub mod sampler;
pub mod server;
pub mod sim;
pub mod stems;
pub mod window;
pub mod wire;
