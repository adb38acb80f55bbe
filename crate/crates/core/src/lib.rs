//! Post-training compression of dense networks that keeps the loss on the
//! calibration data from going up.
//!
//! The pieces, roughly in pipeline order:
//!
//! * [`net`]: MLP forward/backward, perturbed evaluation, SGD for fixtures.
//! * [`calibration`]: mean gradients over a calibration split, HVPs.
//! * [`neighborhood`]: first/second-order loss predictions and their gaps.
//! * [`quant`]: grids, one-sided rounding, per-layer cost matrices.
//! * [`allocator`]: grouped knapsack over bit widths.
//! * [`lowrank`]: rank search with a gradient-sign acceptance test.
//! * [`data_io`]: IDX/CSV loaders, synthetic data, model files, reports.
//! * [`pipeline`]: the stages wired together, as used by the `llc` binary.

pub mod allocator;
pub mod calibration;
pub mod data_io;
pub mod error;
pub mod fixtures;
pub mod lowrank;
pub mod neighborhood;
pub mod net;
pub mod pipeline;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use net::{Dataset, Model};
pub use tensor::Tensor;
