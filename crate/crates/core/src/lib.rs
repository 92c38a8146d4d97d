pub mod augmentation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod kernels;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod training;

pub use augmentation::{FeatureAugConfig, ImageAugConfig};
pub use config::RunConfig;
pub use data::{SourceKind, TrainingSource};
pub use discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorDecision, Part};
pub use error::{Error, Result};
pub use evaluation::{
    ConvStackExtractor, Depth, FeatureExtractor, MetricReport, PerceptualDistance,
};
pub use generator::{Generator, GeneratorConfig, LatentBatch};
pub use losses::{DrConfig, LossBreakdown};
pub use tensor::Tensor;
pub use training::{Ablations, TrainSetup, TrainState, TrainingConfig};
