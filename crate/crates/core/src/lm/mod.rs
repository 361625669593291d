//! The toy language model: vocabulary, prompt rendering, the transformer,
//! the synthetic transcript corpus and training.

pub mod corpus;
pub mod fast;
pub mod model;
pub mod prompt;
pub mod train;
pub mod vocab;

pub use corpus::{generate_corpus, CorpusConfig, Transcript, TranscriptCorpus};
pub use fast::{FinalLayerCache, ProjectedDirection, SteerPositions};
pub use model::{ForwardOutput, ModelConfig, ResidualHook, TokenDistribution, ToyLm};
pub use prompt::{render_prompt, Persona, PromptRenderer};
pub use train::{train_toy_lm, Optimizer, TrainConfig, TrainOutcome, Trainer};
pub use vocab::{TokenId, Vocabulary};
