//! HyperVAE: a hyper-level variational autoencoder that emits the full
//! parameter vector of task-level VAEs.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the common instantiations.

pub mod checkpoint;
pub mod data;
pub mod discovery;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod hypernet;
pub mod layers;
pub mod layout;
pub mod mdl;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod vae;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
pub use data::{SyntheticFamily, SyntheticTaskSpec, TaskDataset};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, gradient_suite, GradCheck, SuiteDims};
pub use graph::{backprop, Graph, Layer};
pub use hypernet::{
    HyperArch, HyperParams, HyperVae, IwGradient, IwTerms, JointTerms, KlEstimate,
    MixturePosterior, ObjectiveNoise,
};
pub use layers::{
    dense_equivalent_param_count, dense_forward, matrix_layer_forward, matrix_layer_param_count,
    Activation, LayerGrads,
};
pub use layout::{LayoutEntry, ParamLayout};
pub use mdl::CodeLengthReport;
pub use rng::{sample_standard_normal, RngState};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use training::{train_hypervae, train_vae, AdamState, TrainConfig, TrainOutcome, TrainTrace};
pub use vae::{ElboBreakdown, GaussianDiag, TaskVae, ThetaVector, VaeArch};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Theta64 = ThetaVector<f64>;
pub type Theta32 = ThetaVector<f32>;
pub type Gaussian64 = GaussianDiag<f64>;
pub type HyperParams64 = HyperParams<f64>;
pub type HyperParams32 = HyperParams<f32>;
