//! Diffusion backends: a trait for capturing and steering denoising runs,
//! a procedural synthetic model, and a subprocess adapter for real models.

use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::latent::LatentImage;
use crate::prompt::PromptSpec;
use crate::schedule::{resolve_prompt, MixSchedule, ResolvedPromptPair};
use crate::tokenizer::Tokenizer;
use crate::trace::{DenoisingTrace, LayerInfo};

pub mod synthetic;
pub mod worker;

pub use synthetic::SyntheticBackend;
pub use worker::{serve_embedder, serve_worker, WorkerBackend, WorkerEmbedder};

pub const DEFAULT_STEPS: u32 = 50;
pub const DEFAULT_GUIDANCE: f32 = 7.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    pub seed: u64,
    pub guidance: f32,
    /// Starting latent `z_T`; drawn from the seed when absent.
    #[serde(skip)]
    pub initial_latent: Option<Arc<LatentImage>>,
    /// Apply hooks to the unconditional branch of classifier-free guidance too.
    pub hook_both_branches: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            guidance: DEFAULT_GUIDANCE,
            initial_latent: None,
            hook_both_branches: false,
        }
    }
}

impl RunOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// Callbacks a hooked run consults at every step.
///
/// Hooks see the trace captured so far and must be pure functions of their
/// inputs and whatever read-only state (such as a reference trace) they hold.
pub trait StepHook: Send + Sync {
    /// Prompts for the Key and Value projections of cross-attention at step `t`.
    fn prompts(&self, t: u32, schedule: &MixSchedule) -> Result<ResolvedPromptPair> {
        resolve_prompt(schedule, t)
    }

    /// The self-attention map the layer should use instead of `fresh`.
    fn on_self_attention(
        &self,
        _t: u32,
        _layer: usize,
        _info: &LayerInfo,
        fresh: Arc<AttentionMap>,
    ) -> Result<Arc<AttentionMap>> {
        Ok(fresh)
    }

    /// The latent step `t` should start from, given the latent the run produced.
    fn on_latent(
        &self,
        _t: u32,
        z: Arc<LatentImage>,
        _partial: &DenoisingTrace,
    ) -> Result<Arc<LatentImage>> {
        Ok(z)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityHooks;

impl StepHook for IdentityHooks {}

/// A finished run: its trace and the decoded final latent.
#[derive(Clone, Debug)]
pub struct Generation {
    pub trace: DenoisingTrace,
    pub image: RgbImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub latent_channels: usize,
    pub latent_side: usize,
    pub image_side: usize,
    pub self_layers: Vec<LayerInfo>,
    pub cross_layers: Vec<LayerInfo>,
    pub default_steps: u32,
}

pub trait Backend: Send + Sync {
    fn describe(&self) -> BackendInfo;

    fn tokenizer(&self) -> Arc<dyn Tokenizer>;

    /// Runs the schedule, consulting `hooks` at every step, and captures the trace.
    fn run_hooked(
        &self,
        schedule: &MixSchedule,
        hooks: &dyn StepHook,
        options: &RunOptions,
    ) -> Result<Generation>;

    /// Plain generation of `prompt`.
    fn run_reference(
        &self,
        prompt: &PromptSpec,
        total_steps: u32,
        options: &RunOptions,
    ) -> Result<Generation> {
        if total_steps == 0 {
            return Err(Error::Backend("a run needs at least one step".into()));
        }
        let schedule = MixSchedule::single(prompt.clone(), total_steps)?;
        self.run_hooked(&schedule, &IdentityHooks, options)
    }

    /// Captures attention along an externally computed trajectory
    /// `z_T, ..., z_0` (for instance from an inversion of a real image).
    /// The trajectory must hold `total_steps + 1` latents.
    fn invert_external(
        &self,
        latents: &[LatentImage],
        prompt: &PromptSpec,
        total_steps: u32,
        options: &RunOptions,
    ) -> Result<Generation>;

    fn decode(&self, z: &LatentImage) -> Result<RgbImage>;

    /// Image-resolution mask of the noun at `noun_pos` in the image decoded
    /// from `z`, for backends that know it exactly.
    fn object_mask(
        &self,
        _z: &LatentImage,
        _prompt: &PromptSpec,
        _noun_pos: usize,
    ) -> Option<Vec<bool>> {
        None
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn describe(&self) -> BackendInfo {
        (**self).describe()
    }

    fn tokenizer(&self) -> Arc<dyn Tokenizer> {
        (**self).tokenizer()
    }

    fn run_hooked(
        &self,
        schedule: &MixSchedule,
        hooks: &dyn StepHook,
        options: &RunOptions,
    ) -> Result<Generation> {
        (**self).run_hooked(schedule, hooks, options)
    }

    fn run_reference(
        &self,
        prompt: &PromptSpec,
        total_steps: u32,
        options: &RunOptions,
    ) -> Result<Generation> {
        (**self).run_reference(prompt, total_steps, options)
    }

    fn invert_external(
        &self,
        latents: &[LatentImage],
        prompt: &PromptSpec,
        total_steps: u32,
        options: &RunOptions,
    ) -> Result<Generation> {
        (**self).invert_external(latents, prompt, total_steps, options)
    }

    fn decode(&self, z: &LatentImage) -> Result<RgbImage> {
        (**self).decode(z)
    }

    fn object_mask(
        &self,
        z: &LatentImage,
        prompt: &PromptSpec,
        noun_pos: usize,
    ) -> Option<Vec<bool>> {
        (**self).object_mask(z, prompt, noun_pos)
    }
}

/// Wraps errors raised inside a hook with the step and layer they came from.
pub(crate) fn hook_error(t: u32, layer: Option<&LayerInfo>, e: Error) -> Error {
    match e {
        e @ Error::Hook { .. } => e,
        e => Error::Hook {
            t,
            layer: layer.map(|l| l.name.clone()),
            message: e.to_string(),
        },
    }
}

/// Admits callers one at a time in arrival order.
#[derive(Debug, Default)]
pub struct FifoGate {
    state: Mutex<(u64, u64)>,
    turn: Condvar,
}

impl FifoGate {
    pub fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        let ticket = {
            let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
            s.0 += 1;
            s.0 - 1
        };
        {
            let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
            while s.1 != ticket {
                s = self.turn.wait(s).unwrap_or_else(|e| e.into_inner());
            }
        }
        struct Release<'a>(&'a FifoGate);
        impl Drop for Release<'_> {
            fn drop(&mut self) {
                let mut s = self.0.state.lock().unwrap_or_else(|e| e.into_inner());
                s.1 += 1;
                self.0.turn.notify_all();
            }
        }
        let _release = Release(self);
        f()
    }

    /// Callers that have arrived but not yet finished.
    pub fn pending(&self) -> u64 {
        let s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        s.0 - s.1
    }
}

/// A backend whose runs execute one at a time, first come first served.
pub struct Serialized<B> {
    inner: B,
    gate: FifoGate,
}

impl<B: Backend> Serialized<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            gate: FifoGate::default(),
        }
    }

    pub fn pending(&self) -> u64 {
        self.gate.pending()
    }
}

impl<B: Backend> Backend for Serialized<B> {
    fn describe(&self) -> BackendInfo {
        self.inner.describe()
    }

    fn tokenizer(&self) -> Arc<dyn Tokenizer> {
        self.inner.tokenizer()
    }

    fn run_hooked(
        &self,
        schedule: &MixSchedule,
        hooks: &dyn StepHook,
        options: &RunOptions,
    ) -> Result<Generation> {
        self.gate
            .run(|| self.inner.run_hooked(schedule, hooks, options))
    }

    fn invert_external(
        &self,
        latents: &[LatentImage],
        prompt: &PromptSpec,
        total_steps: u32,
        options: &RunOptions,
    ) -> Result<Generation> {
        self.gate.run(|| {
            self.inner
                .invert_external(latents, prompt, total_steps, options)
        })
    }

    fn decode(&self, z: &LatentImage) -> Result<RgbImage> {
        self.inner.decode(z)
    }

    fn object_mask(
        &self,
        z: &LatentImage,
        prompt: &PromptSpec,
        noun_pos: usize,
    ) -> Option<Vec<bool>> {
        self.inner.object_mask(z, prompt, noun_pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn gate_runs_callers_one_at_a_time() {
        let gate = Arc::new(FifoGate::default());
        let inside = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let (gate, inside) = (gate.clone(), inside.clone());
                std::thread::spawn(move || {
                    gate.run(|| {
                        assert_eq!(inside.fetch_add(1, Ordering::SeqCst), 0);
                        std::thread::sleep(std::time::Duration::from_millis(5));
                        inside.fetch_sub(1, Ordering::SeqCst);
                    })
                })
            })
            .collect();
        handles.into_iter().for_each(|h| h.join().unwrap());
        assert_eq!(gate.pending(), 0);
    }

    #[test]
    fn hook_errors_keep_their_context() {
        let info = LayerInfo::new("attn1.r32", 32);
        let e = hook_error(7, Some(&info), Error::InvalidValue("x".into()));
        assert!(matches!(&e, Error::Hook { t: 7, layer: Some(l), .. } if l == "attn1.r32"));
        let again = hook_error(3, None, e);
        assert!(matches!(again, Error::Hook { t: 7, .. }));
    }
}
