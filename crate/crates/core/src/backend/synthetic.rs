//! A procedural stand-in for a latent diffusion model.
//!
//! The scene holds one object per prompt noun (at most three), placed at
//! jittered quadrant centers. Latents have four channels:
//!
//! * 0: layout code, `4·(slot + 1)` on object pixels and 0 on background.
//!   It is replaced by the predicted layout at every step.
//! * 1: shape code of the object's Value word. Written while the layout is
//!   still forming, frozen afterwards.
//! * 2: texture code of the current Value word, written at every step.
//! * 3: per-pixel detail seeded by the full Value prompt text. Written while
//!   the layout is forming, frozen afterwards.
//!
//! Self-attention is a softmax over squared code differences, so it is block
//! structured by object membership. The predicted layout is read from the
//! 32×32 self-attention map actually used at each step, cross-attention
//! columns of noun tokens follow their object, and decoding is pointwise.
//! Object positions stick once they appear in the latent, the Value word in
//! the last forming step decides shapes, and the final Value word decides
//! texture.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{hook_error, Backend, BackendInfo, Generation, IdentityHooks, RunOptions, StepHook};
use crate::attention::{AttentionMap, CrossAttentionMap};
use crate::error::{Error, Result};
use crate::grid::mean_pool;
use crate::image::RgbImage;
use crate::latent::LatentImage;
use crate::prompt::PromptSpec;
use crate::schedule::MixSchedule;
use crate::tokenizer::{Tokenizer, WordTokenizer};
use crate::trace::{LayerInfo, StepRecord, TraceBuilder};

pub const LATENT_SIDE: usize = 32;
pub const CHANNELS: usize = 4;
pub const MAX_OBJECTS: usize = 3;
pub const CODE_GAP: f32 = 4.0;
const IMAGE_SCALE: usize = 4;
const QUADRANTS: [(i32, i32); 4] = [(8, 8), (24, 8), (8, 24), (24, 24)];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Sharpness of the self-attention softmax over code differences.
    pub beta: f64,
    /// Steps with `t > lock_fraction · T` still form the layout.
    pub lock_fraction: f64,
    /// Amplitude of the uniform noise on cross-attention logits.
    pub cross_noise: f64,
    pub cross_gain: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            beta: 4.0,
            lock_fraction: 0.68,
            cross_noise: 0.1,
            cross_gain: 6.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticBackend {
    config: SyntheticConfig,
    tokenizer: Arc<WordTokenizer>,
}

impl Default for SyntheticBackend {
    fn default() -> Self {
        Self::new(SyntheticConfig::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rect,
    Diamond,
    Superellipse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub rx: i32,
    pub ry: i32,
}

impl Shape {
    /// Shape a word asks for, before the prompt-wide jitter.
    pub fn of_word(word: &str) -> Self {
        let h = fnv64(&word.to_lowercase());
        let kind = match h % 4 {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Rect,
            2 => ShapeKind::Diamond,
            _ => ShapeKind::Superellipse,
        };
        Self {
            kind,
            rx: 3 + ((h >> 8) % 2) as i32,
            ry: 3 + ((h >> 16) % 2) as i32,
        }
    }

    /// Changing any word of the Value prompt nudges every object a little.
    fn entangled(self, value_text: &str, slot: usize) -> Self {
        let h = mix(fnv64(&value_text.to_lowercase()), slot as u64);
        Self {
            rx: self.rx + (h % 3) as i32 - 1,
            ry: self.ry + ((h >> 8) % 3) as i32 - 1,
            ..self
        }
    }

    pub fn contains(&self, dx: i32, dy: i32) -> bool {
        let (x, y) = (
            f64::from(dx.abs()) / f64::from(self.rx),
            f64::from(dy.abs()) / f64::from(self.ry),
        );
        match self.kind {
            ShapeKind::Ellipse => x * x + y * y <= 1.0,
            ShapeKind::Rect => dx.abs() < self.rx && dy.abs() < self.ry,
            ShapeKind::Diamond => x + y <= 1.0,
            ShapeKind::Superellipse => x.powi(4) + y.powi(4) <= 1.0,
        }
    }

    fn code(&self) -> f32 {
        let kind = match self.kind {
            ShapeKind::Ellipse => 0,
            ShapeKind::Rect => 1,
            ShapeKind::Diamond => 2,
            ShapeKind::Superellipse => 3,
        };
        (kind * 16 + self.rx * 4 + self.ry) as f32 / 32.0
    }
}

/// Per-step prompt-dependent scene description.
struct Scene {
    centers: Vec<(i32, i32)>,
    shapes: Vec<Shape>,
    background_anchor: usize,
}

impl Scene {
    fn layout(&self) -> Vec<u8> {
        let n = LATENT_SIDE as i32;
        let mut out = vec![0u8; LATENT_SIDE * LATENT_SIDE];
        for (slot, (&(cx, cy), shape)) in self.centers.iter().zip(&self.shapes).enumerate() {
            for y in 0..n {
                for x in 0..n {
                    if shape.contains(x - cx, y - cy) {
                        out[(y * n + x) as usize] = slot as u8 + 1;
                    }
                }
            }
        }
        out
    }

    /// Anchor pixel of every label, background first.
    fn anchors(&self) -> Vec<usize> {
        std::iter::once(self.background_anchor)
            .chain(
                self.centers
                    .iter()
                    .map(|&(x, y)| (y as usize) * LATENT_SIDE + x as usize),
            )
            .collect()
    }
}

impl SyntheticBackend {
    pub fn new(config: SyntheticConfig) -> Self {
        Self {
            config,
            tokenizer: Arc::new(WordTokenizer),
        }
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    fn self_layers() -> Vec<LayerInfo> {
        vec![
            LayerInfo::new("attn1.r32", 32),
            LayerInfo::new("attn1.r16", 16),
            LayerInfo::new("attn1.r8", 8),
        ]
    }

    fn cross_layers() -> Vec<LayerInfo> {
        vec![
            LayerInfo::new("attn2.r32", 32),
            LayerInfo::new("attn2.r16", 16),
        ]
    }

    /// The layout planted for `seed` when `key` places the objects and
    /// `value` shapes them: 0 for background, `k + 1` for the object of noun
    /// slot `k`. A plain run of a prompt ends with `planted_layout(p, p, seed)`.
    pub fn planted_layout(&self, key: &PromptSpec, value: &PromptSpec, seed: u64) -> Vec<u8> {
        self.scene(seed, key, value, None).layout()
    }

    pub fn object_count(prompt: &PromptSpec) -> usize {
        prompt.noun_positions.len().min(MAX_OBJECTS)
    }

    fn scene(
        &self,
        seed: u64,
        key: &PromptSpec,
        value: &PromptSpec,
        z: Option<&LatentImage>,
    ) -> Scene {
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 0x5175_6164)));
        let objects = Self::object_count(key);
        let sticky = z.map(sticky_centers).unwrap_or_default();
        let centers = (0..objects)
            .map(|slot| {
                sticky.get(&slot).copied().unwrap_or_else(|| {
                    let (qx, qy) = QUADRANTS[order[slot]];
                    let word = key.slot_word(slot).unwrap_or_default();
                    let h = mix(mix(seed, slot as u64 + 1), fnv64(&word));
                    (qx + (h % 5) as i32 - 2, qy + ((h >> 8) % 5) as i32 - 2)
                })
            })
            .collect();
        let shapes = (0..objects)
            .map(|slot| {
                let word = value.slot_word(slot).unwrap_or_default();
                Shape::of_word(&word).entangled(&value.text, slot)
            })
            .collect();
        let (bx, by) = QUADRANTS[order[3]];
        Scene {
            centers,
            shapes,
            background_anchor: by as usize * LATENT_SIDE + bx as usize,
        }
    }

    fn initial_latent(seed: u64) -> LatentImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..CHANNELS * LATENT_SIDE * LATENT_SIDE)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        LatentImage::new(CHANNELS, LATENT_SIDE, LATENT_SIDE, values)
            .expect("finite gaussian latent")
    }

    fn check_latent(z: &LatentImage) -> Result<()> {
        if z.channels() != CHANNELS || z.side() != LATENT_SIDE {
            return Err(Error::ShapeMismatch(format!(
                "synthetic latents are {CHANNELS}x{LATENT_SIDE}x{LATENT_SIDE}, got {}x{}x{}",
                z.channels(),
                z.height(),
                z.width()
            )));
        }
        Ok(())
    }

    fn is_forming(&self, t: u32, total: u32) -> bool {
        f64::from(t) > self.config.lock_fraction * f64::from(total)
    }

    /// Executes step `t`: computes attention, lets the hooks intervene, and
    /// predicts `z_{t-1}`.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        t: u32,
        total: u32,
        seed: u64,
        key: &PromptSpec,
        value: &PromptSpec,
        cross_tokens: usize,
        z: &LatentImage,
        hooks: &dyn StepHook,
        cache: &mut Vec<Option<(Vec<f32>, Arc<AttentionMap>)>>,
    ) -> Result<(StepRecord, LatentImage)> {
        let forming = self.is_forming(t, total);
        let scene = self.scene(seed, key, value, Some(z));
        let codes: Vec<f32> = if forming {
            scene
                .layout()
                .iter()
                .map(|&l| f32::from(l) * CODE_GAP)
                .collect()
        } else {
            z.channel(0).iter().map(|&v| quantize(v)).collect()
        };

        let self_layers = Self::self_layers();
        let mut used_maps = Vec::with_capacity(self_layers.len());
        for (i, info) in self_layers.iter().enumerate() {
            let pooled: Vec<f32> = if info.resolution == LATENT_SIDE {
                codes.clone()
            } else {
                let wide: Vec<f64> = codes.iter().map(|&c| f64::from(c)).collect();
                mean_pool(&wide, LATENT_SIDE, info.resolution)
                    .into_iter()
                    .map(|v| v as f32)
                    .collect()
            };
            let fresh = match &cache[i] {
                Some((q, map)) if *q == pooled => map.clone(),
                _ => {
                    let map = Arc::new(code_attention(info.resolution, &pooled, self.config.beta));
                    cache[i] = Some((pooled, map.clone()));
                    map
                }
            };
            let used = hooks
                .on_self_attention(t, i, info, fresh)
                .map_err(|e| hook_error(t, Some(info), e))?;
            if used.resolution() != info.resolution {
                return Err(hook_error(
                    t,
                    Some(info),
                    Error::ResolutionMismatch {
                        expected: info.resolution,
                        found: used.resolution(),
                    },
                ));
            }
            used_maps.push(used);
        }

        let layout = read_layout(&used_maps[0], &scene.anchors());

        let token_labels: Vec<u8> = (0..cross_tokens)
            .map(|i| {
                (0..Self::object_count(key))
                    .find(|&slot| key.slot_tokens(slot).is_some_and(|r| r.contains(&i)))
                    .map_or(0, |slot| slot as u8 + 1)
            })
            .collect();
        let cross = Self::cross_layers()
            .iter()
            .enumerate()
            .map(|(li, info)| {
                self.cross_attention(seed, t, li, info.resolution, &layout, &token_labels)
                    .map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;

        let next = self.predict(t, total, seed, value, &scene, &layout, z, forming);
        let record = StepRecord {
            t,
            self_attention: used_maps,
            cross_attention: cross,
        };
        Ok((record, next))
    }

    fn cross_attention(
        &self,
        seed: u64,
        t: u32,
        layer: usize,
        resolution: usize,
        layout: &[u8],
        token_labels: &[u8],
    ) -> Result<CrossAttentionMap> {
        let f = LATENT_SIDE / resolution;
        let area = (f * f) as f64;
        let labels = MAX_OBJECTS + 1;
        let mut frac = vec![0.0f64; resolution * resolution * labels];
        for y in 0..LATENT_SIDE {
            for x in 0..LATENT_SIDE {
                let cell = (y / f) * resolution + x / f;
                frac[cell * labels + layout[y * LATENT_SIDE + x] as usize] += 1.0 / area;
            }
        }
        let tokens = token_labels.len();
        let mut values = Vec::with_capacity(resolution * resolution * tokens);
        let mut logits = vec![0.0f64; tokens];
        for cell in 0..resolution * resolution {
            for (i, &label) in token_labels.iter().enumerate() {
                let h = mix(
                    mix(mix(seed, u64::from(t)), (layer as u64) << 32 | cell as u64),
                    i as u64,
                );
                let noise = (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
                logits[i] = self.config.cross_gain * frac[cell * labels + label as usize]
                    + self.config.cross_noise * noise;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            values.extend(exps.iter().map(|e| (e / sum) as f32));
        }
        CrossAttentionMap::new(resolution, tokens, values)
    }

    #[allow(clippy::too_many_arguments)]
    fn predict(
        &self,
        t: u32,
        total: u32,
        seed: u64,
        value: &PromptSpec,
        scene: &Scene,
        layout: &[u8],
        z: &LatentImage,
        forming: bool,
    ) -> LatentImage {
        let n = LATENT_SIDE * LATENT_SIDE;
        let textures: Vec<f32> = std::iter::once(unit_code(mix(seed, 0x7465_7874)))
            .chain(
                (0..scene.shapes.len())
                    .map(|slot| unit_code(fnv64(&value.slot_word(slot).unwrap_or_default()))),
            )
            .collect();
        let text_hash = fnv64(&value.text.to_lowercase());
        let mut x0 = vec![0.0f32; CHANNELS * n];
        for p in 0..n {
            let label = layout[p] as usize;
            x0[p] = label as f32 * CODE_GAP;
            x0[n + p] = match (forming, label) {
                (false, _) => z.get(1, p),
                (true, 0) => 0.0,
                (true, l) => scene.shapes[l - 1].code(),
            };
            x0[2 * n + p] = textures[label.min(textures.len() - 1)];
            x0[3 * n + p] = if forming {
                0.5 * unit_code(mix(mix(seed, p as u64), text_hash))
            } else {
                z.get(3, p)
            };
        }
        let sigma = |s: u32| (f64::from(s) / f64::from(total)).powi(3);
        let ratio = (sigma(t - 1) / sigma(t)) as f32;
        let mut next = x0.clone();
        for (i, v) in next.iter_mut().enumerate().skip(n) {
            *v += ratio * (z.values()[i] - *v);
        }
        LatentImage::new(CHANNELS, LATENT_SIDE, LATENT_SIDE, next).expect("finite synthetic latent")
    }

    fn run(
        &self,
        schedule: &MixSchedule,
        hooks: &dyn StepHook,
        options: &RunOptions,
        trajectory: Option<&[LatentImage]>,
    ) -> Result<Generation> {
        let total = schedule.total_steps();
        let base = schedule.base_prompt();
        let cross_tokens = base.tokens.len();
        let mut builder = TraceBuilder::new(
            options.seed,
            base.clone(),
            total,
            Self::self_layers(),
            Self::cross_layers(),
            Some(schedule.clone()),
        )?;
        let mut z = match (&trajectory, &options.initial_latent) {
            (Some(tr), _) => Arc::new(tr[0].clone()),
            (None, Some(z)) => z.clone(),
            (None, None) => Arc::new(Self::initial_latent(options.seed)),
        };
        let mut cache = vec![None; Self::self_layers().len()];
        for t in (1..=total).rev() {
            let z_t = match trajectory {
                Some(tr) => Arc::new(tr[(total - t) as usize].clone()),
                None => hooks
                    .on_latent(t, z.clone(), builder.partial())
                    .map_err(|e| hook_error(t, None, e))?,
            };
            Self::check_latent(&z_t)?;
            builder.push_latent(t, z_t.clone())?;
            let pair = hooks
                .prompts(t, schedule)
                .map_err(|e| hook_error(t, None, e))?;
            if pair.key_prompt.tokens.len() > cross_tokens {
                return Err(Error::Backend(format!(
                    "key prompt {:?} at step {t} is longer than the base prompt",
                    pair.key_prompt.text
                )));
            }
            let (record, next) = self.step(
                t,
                total,
                options.seed,
                &pair.key_prompt,
                &pair.value_prompt,
                cross_tokens,
                &z_t,
                hooks,
                &mut cache,
            )?;
            builder.push_step(record)?;
            z = Arc::new(next);
        }
        let z0 = match trajectory {
            Some(tr) => Arc::new(tr[total as usize].clone()),
            None => z,
        };
        Self::check_latent(&z0)?;
        builder.push_latent(0, z0.clone())?;
        let image = self.decode(&z0)?;
        Ok(Generation {
            trace: builder.finish()?,
            image,
        })
    }
}

impl Backend for SyntheticBackend {
    fn describe(&self) -> BackendInfo {
        BackendInfo {
            name: "synthetic".into(),
            latent_channels: CHANNELS,
            latent_side: LATENT_SIDE,
            image_side: LATENT_SIDE * IMAGE_SCALE,
            self_layers: Self::self_layers(),
            cross_layers: Self::cross_layers(),
            default_steps: super::DEFAULT_STEPS,
        }
    }

    fn tokenizer(&self) -> Arc<dyn Tokenizer> {
        self.tokenizer.clone()
    }

    fn run_hooked(
        &self,
        schedule: &MixSchedule,
        hooks: &dyn StepHook,
        options: &RunOptions,
    ) -> Result<Generation> {
        if let Some(z) = &options.initial_latent {
            Self::check_latent(z)?;
        }
        self.run(schedule, hooks, options, None)
    }

    fn invert_external(
        &self,
        latents: &[LatentImage],
        prompt: &PromptSpec,
        total_steps: u32,
        options: &RunOptions,
    ) -> Result<Generation> {
        let expected = total_steps as usize + 1;
        if total_steps == 0 || latents.len() != expected {
            return Err(Error::TrajectoryLength {
                expected,
                found: latents.len(),
            });
        }
        let schedule = MixSchedule::single(prompt.clone(), total_steps)?;
        self.run(&schedule, &IdentityHooks, options, Some(latents))
    }

    fn decode(&self, z: &LatentImage) -> Result<RgbImage> {
        Self::check_latent(z)?;
        const PALETTE: [[f32; 3]; 4] = [
            [0.62, 0.74, 0.86],
            [0.85, 0.45, 0.25],
            [0.35, 0.70, 0.35],
            [0.55, 0.40, 0.75],
        ];
        const TEXTURE_TINT: [f32; 3] = [1.0, 0.6, -0.4];
        let side = LATENT_SIDE * IMAGE_SCALE;
        let mut data = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            for x in 0..side {
                let p = (y / IMAGE_SCALE) * LATENT_SIDE + x / IMAGE_SCALE;
                let label = (quantize(z.get(0, p)) / CODE_GAP) as usize;
                let shade = 0.8 + 0.2 * z.get(1, p).tanh();
                let texture = 0.12 * z.get(2, p).tanh();
                let detail = 0.06 * z.get(3, p).tanh();
                for c in 0..3 {
                    let v = PALETTE[label][c] * shade + texture * TEXTURE_TINT[c] + detail;
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        RgbImage::new(side, side, data)
    }

    fn object_mask(
        &self,
        z: &LatentImage,
        prompt: &PromptSpec,
        noun_pos: usize,
    ) -> Option<Vec<bool>> {
        let slot = prompt.noun_slot(noun_pos).filter(|&s| s < MAX_OBJECTS)?;
        if Self::check_latent(z).is_err() {
            return None;
        }
        let code = (slot + 1) as f32 * CODE_GAP;
        let side = LATENT_SIDE * IMAGE_SCALE;
        Some(
            (0..side * side)
                .map(|i| {
                    quantize(z.get(
                        0,
                        (i / side / IMAGE_SCALE) * LATENT_SIDE + (i % side) / IMAGE_SCALE,
                    )) == code
                })
                .collect(),
        )
    }
}

/// Nearest layout code in `[0, 4·MAX_OBJECTS]`.
fn quantize(v: f32) -> f32 {
    (v / CODE_GAP).round().clamp(0.0, MAX_OBJECTS as f32) * CODE_GAP
}

/// Object centers recovered from the layout channel, for slots present in it.
fn sticky_centers(z: &LatentImage) -> HashMap<usize, (i32, i32)> {
    let mut sums: HashMap<usize, (i64, i64, i64)> = HashMap::new();
    for (p, &v) in z.channel(0).iter().enumerate() {
        for slot in 0..MAX_OBJECTS {
            if v == (slot + 1) as f32 * CODE_GAP {
                let e = sums.entry(slot).or_default();
                e.0 += (p % LATENT_SIDE) as i64;
                e.1 += (p / LATENT_SIDE) as i64;
                e.2 += 1;
            }
        }
    }
    sums.into_iter()
        .map(|(slot, (sx, sy, n))| {
            let round = |s: i64| ((2 * s + n) / (2 * n)) as i32;
            (slot, (round(sx), round(sy)))
        })
        .collect()
}

/// Row-stochastic map with `S[i, j] ∝ exp(-β (q_i - q_j)²)`.
fn code_attention(resolution: usize, q: &[f32], beta: f64) -> AttentionMap {
    let mut distinct: Vec<f32> = q.to_vec();
    distinct.sort_by(f32::total_cmp);
    distinct.dedup();
    let index: Vec<usize> = q
        .iter()
        .map(|v| {
            distinct
                .binary_search_by(|d| d.total_cmp(v))
                .expect("value is present")
        })
        .collect();
    let mut counts = vec![0usize; distinct.len()];
    index.iter().for_each(|&i| counts[i] += 1);
    let d = distinct.len();
    let mut table = vec![0.0f32; d * d];
    for a in 0..d {
        let w: Vec<f64> = (0..d)
            .map(|b| (-beta * f64::from(distinct[a] - distinct[b]).powi(2)).exp())
            .collect();
        let z: f64 = w.iter().zip(&counts).map(|(w, &c)| w * c as f64).sum();
        for b in 0..d {
            table[a * d + b] = (w[b] / z) as f32;
        }
    }
    let n = q.len();
    let mut values = Vec::with_capacity(n * n);
    for &a in &index {
        let row = &table[a * d..(a + 1) * d];
        values.extend(index.iter().map(|&b| row[b]));
    }
    AttentionMap::new_unchecked(resolution, values)
}

/// Label of every pixel: the anchor it attends to most, relative to its
/// strongest attention, with background winning ties and weak matches.
fn read_layout(map: &AttentionMap, anchors: &[usize]) -> Vec<u8> {
    map.rows()
        .map(|row| {
            let max = row.iter().copied().fold(0.0f32, f32::max);
            if max <= 0.0 {
                return 0;
            }
            let mut best = (0usize, row[anchors[0]] / max);
            for (k, &a) in anchors.iter().enumerate().skip(1) {
                let r = row[a] / max;
                if r > best.1 {
                    best = (k, r);
                }
            }
            if best.1 < 0.5 {
                0
            } else {
                best.0 as u8
            }
        })
        .collect()
}

fn unit_code(h: u64) -> f32 {
    (h % 2001) as f32 / 1000.0 - 1.0
}

fn fnv64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// SplitMix64 finalizer over a combination of two words.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(a << 6)
        .wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
