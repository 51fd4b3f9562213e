pub mod baselines;
pub mod discriminator;
pub mod env;
pub mod experiment;
pub mod grid;
pub mod harness;
pub mod matrix;
pub mod meta;
pub mod nn;
pub mod powerflow;
pub mod sac;
pub mod scenario;
pub mod seed;
pub mod verify;
