pub mod dynamics;
pub mod geometry;
pub mod idm;
pub mod observation;
pub mod robustness;
pub mod sampling;
pub mod scenario;
pub mod simulator;
pub mod training;
