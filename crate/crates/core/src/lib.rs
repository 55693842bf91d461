//! Learning PDE dynamics from gridded data with the method of lines and a
//! convolutional neural ODE.
//!
//! The crate covers the whole pipeline: periodic grid fields and stencils,
//! four benchmark PDE systems, explicit ODE integrators, synthetic dataset
//! generation, a convolutional dynamics network with hand-written reverse
//! mode, adjoint and unrolled gradients for the neural ODE, training with
//! Adam, rollout evaluation, and a small binary tensor format.

// `!(x > 0.0)` is how config validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod tensor_grid;
pub mod stencils;
pub mod pde_library;
pub mod ode_solve;
pub mod datagen;
pub mod autodiff_cnn;
pub mod neural_pde;
pub mod train_eval;
pub mod io;

pub use autodiff_cnn::{Activation, ConvNet, Gradients, Layer};
pub use error::{Error, Result};
pub use neural_pde::{LossGrad, ModelSolver, NeuralPdeModel};
pub use ode_solve::{solve, OdeState, SolveConfig, SolverMethod, Trajectory};
pub use pde_library::{lookup_system, PdeParams, PdeSystem};
pub use stencils::StencilSet;
pub use train_eval::{evaluate, train, EvalReport, Model, ModelKind, TrainConfig, TrainReport, TrainSplits, TrainedModel};
pub use tensor_grid::{conv_kernel_grad, conv_periodic, conv_periodic_backward, GridField, Kernel, KernelGrad, Shape};
