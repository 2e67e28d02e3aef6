//! Object-level shape variations for latent diffusion models.
//!
//! The crate mixes prompts across denoising intervals to vary the shape of
//! one object, localizes the change by injecting self-attention from a
//! reference run, segments the reference with attention-guided K-Means, and
//! blends latents to keep the background intact.

pub mod attention;
pub mod backend;
pub mod blending;
pub mod error;
pub mod grid;
pub mod image;
pub mod kmeans;
pub mod latent;
pub mod localization;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod proxy;
pub mod schedule;
pub mod segmentation;
pub mod session;
pub mod tokenizer;
pub mod trace;

pub use attention::{AttentionMap, CrossAttentionMap, InjectionMask, ObjectPixelSet};
pub use backend::{
    Backend, BackendInfo, Generation, IdentityHooks, RunOptions, StepHook, SyntheticBackend,
};
pub use error::{Error, Result};
pub use image::RgbImage;
pub use latent::LatentImage;
pub use prompt::PromptSpec;
pub use schedule::{
    build_general_schedule, build_mix_and_match, resolve_prompt, validate_schedule, KvPolicy,
    MixSchedule, ResolvedPromptPair, ScheduleEntry, TimestepInterval,
};
pub use tokenizer::{Token, Tokenizer, WordTokenizer};
pub use trace::{DenoisingTrace, LayerInfo, StepRecord, TraceBuilder};
