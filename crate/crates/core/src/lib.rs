//! Scribble-supervised segmentation with positive-unlabeled learning.
//!
//! The building blocks: a small autodiff engine and convolutional model,
//! EM estimation of class mixture ratios on unlabeled pixels, the ranking
//! partition into predicted positives/negatives, the three training losses,
//! a synthetic cardiac phantom generator, and evaluation metrics.

pub mod augment;
pub mod autodiff;
pub mod blas;
pub mod dihedral;
pub mod distance;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod partition;
pub mod pgm;
pub mod phantom;
pub mod tensor;
pub mod train;

pub use augment::{normalize_intensity, sample_augmentation, CutoutAugmentation};
pub use autodiff::{Graph, Var};
pub use dihedral::Dihedral;
pub use error::{Error, Result};
pub use losses::{ConsistencyOptions, LossReport, LossWeights, NegativeOptions, Phase, Reduction};
pub use metrics::{argmax, dice, evaluate, hausdorff, keep_largest_component, EvalResult};
pub use mixture::{em_estimate, em_init, em_step, EmInputs, EmOutcome, MixtureRatios};
pub use model::{AdamState, Checkpoint, SegModel};
pub use partition::{partition, PartitionResult};
pub use pgm::Pgm;
pub use phantom::{generate_phantom, PhantomSpec, Sample};
pub use tensor::{Grid, Image, LabelMap, ScribbleMask, Tensor, UNLABELED};
pub use train::{fit, predict, train_epoch, Ablation, Example, TrainConfig, Trainer};
