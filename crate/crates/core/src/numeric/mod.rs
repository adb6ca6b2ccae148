//! Reverse-mode differentiation engine, optimizer, schedule, and initializers.

pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use init::{name_seed, xavier_bound, xavier_uniform};
pub use optim::{lr_at, AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamRegistry};
pub use tape::{Mode, Tape, Var};
pub use tensor::{Real, Tensor};
