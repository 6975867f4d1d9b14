// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small pre-norm multi-head decoder with a KV cache and a steering hook on
//! the normalized attention input of every block.

mod cache;
mod config;
mod decoder;
mod generate;
mod sampling;
mod weights;

pub use cache::{KvCache, PrefillContext, SteeredLayer};
pub use config::ModelConfig;
pub use decoder::{decode_step, prefill, token_embedding, NoHook, Prefill, StepHook, StepOutput};
pub use generate::{generate, GenerateOptions, Generation, Prompt, Session, DEFAULT_MAX_NEW};
pub use sampling::{argmax, nucleus, sample, SamplingPolicy};
pub use weights::{init_model, LayerWeights, ModelWeights};
