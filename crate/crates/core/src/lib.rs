pub mod cli;
pub mod distill;
pub mod eval;
pub mod io;
pub mod math;
pub mod models;
pub mod parallel;
pub mod ppo;
pub mod sim;
