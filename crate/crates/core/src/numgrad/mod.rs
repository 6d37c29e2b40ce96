//! Small reverse-mode automatic differentiation engine.
//!
//! Tensors are dense f64. A [`Graph`] records every op of one forward pass;
//! [`Graph::backward`] walks the tape in reverse and
//! [`Graph::accumulate_param_grads`] moves parameter gradients into the
//! [`ParamStore`] for the optimizer.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, Probe, ABS_TOL};
pub use graph::{BatchStats, BnMode, Graph, Var, BATCH_NORM_EPS, LAYER_NORM_EPS, PROB_FLOOR};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
