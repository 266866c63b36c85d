pub mod admm;
pub mod cli;
pub mod feeder_file;
pub mod grid;
pub mod linalg;
pub mod reconfig;
pub mod scenario;
pub mod socp;
