//! Scene labeling with contextual recurrent residual networks.
//!
//! An image is split into a grid of blocks. Four directed sweeps over the
//! grid carry a hidden state from block to block, so every block sees the
//! part of the image that lies "behind" it in each direction. A small
//! residual convolutional branch refines each hidden state, and the four
//! directions are fused into per-pixel class scores.
//!
//! ```
//! use crrn::{gen_synthetic, infer, init_params, SyntheticSpec, TrainConfig, Trainer};
//!
//! let spec = SyntheticSpec::new(16, 3);
//! let images = gen_synthetic(4, 7, &spec)?;
//! let config = TrainConfig {
//!     epochs: 1,
//!     grid_rows: 2,
//!     grid_cols: 2,
//!     hidden_dim: 16,
//!     num_classes: 3,
//!     ..TrainConfig::default()
//! };
//! let mut trainer = Trainer::new(config, images.clone(), None)?;
//! trainer.run_epoch()?;
//! let prediction = infer(&images[0].image, &trainer.params)?;
//! assert_eq!(prediction.labels.len(), 16 * 16);
//! # let _ = init_params;
//! # Ok::<(), crrn::Error>(())
//! ```

pub mod backprop;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

/// The guide's code listings, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sweeps.md")]
    mod sweeps {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

pub use backprop::{grad_check, grad_check_params, loss_and_gradients, GradCheckReport, Gradients, TensorCheck};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use data::{gen_synthetic, load_image, load_labeled, load_labels, ConfusionMatrix, LabeledImage, SyntheticSpec};
pub use error::{Error, Result};
pub use graph::{build_plans, BlockGrid, Connectivity, DagPlan, Direction, IGNORE_LABEL};
pub use model::{forward_image, infer, CrrnParams, ModelConfig, PredictionMap};
pub use tensor::{Mode, Tensor};
pub use train::{init_params, train_loop, EpochRecord, TrainConfig, Trainer};
