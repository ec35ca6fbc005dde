//! Text-prompted image segmentation.
//!
//! The pipeline runs a dual image/text encoder, turns the text-conditioned
//! relevance of image patches into a saliency map with an information
//! bottleneck, binarizes and filters that map into box/point prompts for a
//! promptable refiner, and finally trains a segmentation network on the
//! resulting pseudo-labels with a checkpoint ensemble for uncertainty.

pub mod attribution;
pub mod embedding;
pub mod error;
pub mod finetune;
pub mod image;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod prompts;
pub mod synthetic;
pub mod losses;
pub mod weak;

pub use attribution::{compute_saliency, saliency_to_image_space, BottleneckConfig, SaliencyMap};
pub use embedding::{
    encode_batch, ensemble_prompt_embedding, EmbeddingBatch, Encoder, EncoderHandle, ImageFeatures,
};
pub use error::{Error, Result};
pub use finetune::{finetune, split_dataset, FinetuneConfig, TrainLog};
pub use image::{preprocess_image, ImageTensor};
pub use losses::{loss_gradient, loss_value, similarity_matrix, LossConfig, LossVariant, Reduction};
pub use mask::{zero_shot_segment, BinaryMask, ComponentSet, PipelineConfig, Refiner, VisualPromptSet};
pub use prompts::{clean_caption, PromptConfig, TextPrompt};
pub use synthetic::{make_synthetic_encoder, PatchRegion, PlantedConcept, SyntheticEncoder};
pub use weak::{CheckpointEnsemble, CycleSchedule, UncertaintyMap};
