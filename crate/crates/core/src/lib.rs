pub mod exact;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod perfmodel;
pub mod tensor;
