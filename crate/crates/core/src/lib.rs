pub mod architectures;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod modulation;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;
