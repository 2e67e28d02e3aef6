//! The object-variation flow: Mix-and-Match per proxy word, self-attention
//! injection to hold the other objects in place, and a one-shot latent blend
//! that restores the background.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::backend::{Backend, RunOptions, StepHook};
use crate::blending::{blend_latents, compute_retention_mask};
use crate::error::{Error, Result};
use crate::image::{save_mask_png, RgbImage};
use crate::latent::LatentImage;
use crate::localization::{injection_plan, InjectionOptions, InjectionPlan};
use crate::prompt::PromptSpec;
use crate::proxy::{find_proxies, EmbeddingProvider, TokenIndex};
use crate::schedule::{
    build_general_schedule, build_mix_and_match, KvPolicy, MixSchedule, TimestepInterval,
};
use crate::segmentation::{segment_trace, SegmentLabel, SegmentationMap, SegmentationOptions};
use crate::trace::{DenoisingTrace, LayerInfo};

pub const DEFAULT_T3: u32 = 44;
pub const DEFAULT_T2: u32 = 34;
pub const DEFAULT_T1: u32 = 15;
/// Blending step suited to images that come from an inversion.
pub const DEFAULT_T1_EXTERNAL: u32 = 35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationOptions {
    pub t3: u32,
    pub t2: u32,
    /// Blending step; injection runs on the steps above it.
    pub t1: u32,
    /// Token positions of the nouns whose shape is held by injection. `None`
    /// uses the nouns the prompt marks as preserved.
    pub preserve_nouns: Option<Vec<usize>>,
    pub localize: bool,
    pub injection: InjectionOptions,
    pub blend: bool,
    /// Labels taken from the reference besides the background.
    pub keep_labels: Vec<SegmentLabel>,
    pub segmentation: SegmentationOptions,
    /// Seed for every variation; `None` reuses the reference seed and its
    /// starting latent.
    pub fresh_seed: Option<u64>,
    pub guidance: f32,
    pub hook_both_branches: bool,
}

impl Default for VariationOptions {
    fn default() -> Self {
        let run = RunOptions::default();
        Self {
            t3: DEFAULT_T3,
            t2: DEFAULT_T2,
            t1: DEFAULT_T1,
            preserve_nouns: None,
            localize: true,
            injection: InjectionOptions::default(),
            blend: true,
            keep_labels: Vec::new(),
            segmentation: SegmentationOptions::default(),
            fresh_seed: None,
            guidance: run.guidance,
            hook_both_branches: run.hook_both_branches,
        }
    }
}

impl VariationOptions {
    /// Checks the options against a run of `total_steps` steps.
    pub fn validate(&self, total_steps: u32) -> Result<()> {
        if !(total_steps > self.t3 && self.t3 > self.t2 && self.t2 > 0) {
            return Err(Error::BadInterval(format!(
                "need T > T3 > T2 > 0, got T={total_steps}, T3={}, T2={}",
                self.t3, self.t2
            )));
        }
        if self.t1 == 0 || self.t1 >= total_steps {
            return Err(Error::BadInterval(format!(
                "T1={} must lie in 1..{total_steps}",
                self.t1
            )));
        }
        if !(0.0..=1.0).contains(&self.injection.threshold)
            || !(0.0..=1.0).contains(&self.segmentation.sigma)
        {
            return Err(Error::InvalidValue("thresholds must lie in [0, 1]".into()));
        }
        if self.segmentation.clusters == 0 {
            return Err(Error::InvalidValue(
                "segmentation needs at least one cluster".into(),
            ));
        }
        if !self.guidance.is_finite() {
            return Err(Error::InvalidValue("guidance must be finite".into()));
        }
        Ok(())
    }
}

/// Machine-readable failure of one gallery item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ItemError {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VariationResult {
    pub id: String,
    pub proxy: String,
    pub image: RgbImage,
    pub trace: DenoisingTrace,
    pub reference_segmentation: Option<Arc<SegmentationMap>>,
    pub segmentation: Option<SegmentationMap>,
    /// Latent pixels copied from the reference at the blending step.
    pub retention_mask: Option<Vec<bool>>,
    /// Image-resolution mask of the varied object, when the backend knows it.
    pub object_mask: Option<Vec<bool>>,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug)]
pub struct VariationOutcome {
    pub id: String,
    pub proxy: String,
    pub result: std::result::Result<VariationResult, ItemError>,
}

impl VariationOutcome {
    pub fn ok(&self) -> Option<&VariationResult> {
        self.result.as_ref().ok()
    }
}

/// Everything that does not depend on the proxy word.
struct Prepared<'a> {
    reference: &'a DenoisingTrace,
    prompt: PromptSpec,
    plan: Option<InjectionPlan>,
    segmentation: Option<Arc<SegmentationMap>>,
    keep: BTreeSet<SegmentLabel>,
}

fn prepare<'a>(
    reference: &'a DenoisingTrace,
    object_pos: usize,
    options: &VariationOptions,
) -> Result<Prepared<'a>> {
    if !reference.is_complete() {
        return Err(Error::Backend("the reference trace is incomplete".into()));
    }
    options.validate(reference.total_steps())?;
    let mut prompt = reference.prompt().with_object_at(object_pos)?;
    if let Some(preserve) = &options.preserve_nouns {
        prompt = prompt.with_preserved(preserve.clone())?;
    }
    let plan = if options.localize {
        let opts = InjectionOptions {
            window_end: options.t1,
            ..options.injection.clone()
        };
        let interest: Vec<usize> = prompt.object_span().collect();
        Some(injection_plan(
            reference,
            &prompt.preserve_nouns,
            &interest,
            &opts,
        )?)
    } else {
        None
    };
    let t1 = options.t1;
    let segmentation = if options.blend {
        Some(Arc::new(segment_trace(
            reference,
            &options.segmentation,
            move |t| t > t1,
        )?))
    } else {
        None
    };
    let keep = std::iter::once(SegmentLabel::Background)
        .chain(options.keep_labels.iter().copied())
        .collect();
    Ok(Prepared {
        reference,
        prompt,
        plan,
        segmentation,
        keep,
    })
}

/// Hooks of one variation run: injection inside the window and the blend at
/// `t1`.
struct VariationHooks<'a> {
    reference: &'a DenoisingTrace,
    plan: Option<&'a InjectionPlan>,
    blend: Option<BlendStep<'a>>,
    captured: Mutex<Option<(SegmentationMap, Vec<bool>)>>,
}

struct BlendStep<'a> {
    t1: u32,
    reference_segmentation: &'a SegmentationMap,
    keep: &'a BTreeSet<SegmentLabel>,
    options: &'a SegmentationOptions,
}

impl StepHook for VariationHooks<'_> {
    fn on_self_attention(
        &self,
        t: u32,
        layer: usize,
        _info: &LayerInfo,
        fresh: Arc<AttentionMap>,
    ) -> Result<Arc<AttentionMap>> {
        let Some(plan) = self.plan else {
            return Ok(fresh);
        };
        if plan.mask(t, layer).is_none() {
            return Ok(fresh);
        }
        let step = self.reference.step(t).ok_or(Error::StepOutOfRange {
            t,
            total: self.reference.total_steps(),
        })?;
        let reference = step.self_attention.get(layer).ok_or_else(|| {
            Error::Backend(format!("reference has no self-attention layer {layer}"))
        })?;
        Ok(plan
            .apply(t, layer, reference, &fresh)?
            .map_or(fresh, Arc::new))
    }

    fn on_latent(
        &self,
        t: u32,
        z: Arc<LatentImage>,
        partial: &DenoisingTrace,
    ) -> Result<Arc<LatentImage>> {
        let Some(blend) = &self.blend else {
            return Ok(z);
        };
        if t != blend.t1 {
            return Ok(z);
        }
        let t1 = blend.t1;
        let seg_new = segment_trace(partial, blend.options, move |s| s > t1)?;
        let retain =
            compute_retention_mask(blend.reference_segmentation, &seg_new, blend.keep, z.side())?;
        let z_ref = self.reference.latent(t).ok_or(Error::StepOutOfRange {
            t,
            total: self.reference.total_steps(),
        })?;
        let blended = blend_latents(z_ref, &z, &retain)?;
        *self.captured.lock().unwrap_or_else(|e| e.into_inner()) = Some((seg_new, retain));
        Ok(Arc::new(blended))
    }
}

fn run_options(reference: &DenoisingTrace, options: &VariationOptions) -> RunOptions {
    let initial_latent = match options.fresh_seed {
        Some(_) => None,
        None => reference.latent(reference.total_steps()).cloned(),
    };
    RunOptions {
        seed: options.fresh_seed.unwrap_or(reference.seed()),
        guidance: options.guidance,
        initial_latent,
        hook_both_branches: options.hook_both_branches,
    }
}

fn run_variation(
    backend: &dyn Backend,
    prep: &Prepared,
    id: String,
    proxy: &str,
    options: &VariationOptions,
) -> Result<VariationResult> {
    let started = Instant::now();
    let tokenizer = backend.tokenizer();
    let schedule = build_mix_and_match(
        tokenizer.as_ref(),
        &prep.prompt,
        proxy,
        prep.reference.total_steps(),
        options.t3,
        options.t2,
    )?;
    let hooks = VariationHooks {
        reference: prep.reference,
        plan: prep.plan.as_ref(),
        blend: prep.segmentation.as_deref().map(|seg| BlendStep {
            t1: options.t1,
            reference_segmentation: seg,
            keep: &prep.keep,
            options: &options.segmentation,
        }),
        captured: Mutex::new(None),
    };
    let generation =
        backend.run_hooked(&schedule, &hooks, &run_options(prep.reference, options))?;
    let captured = hooks
        .captured
        .into_inner()
        .unwrap_or_else(|e| e.into_inner());
    let (segmentation, retention_mask) = match captured {
        Some((s, r)) => (Some(s), Some(r)),
        None => (None, None),
    };
    let object_mask = generation
        .trace
        .final_latent()
        .and_then(|z| backend.object_mask(z, &prep.prompt, prep.prompt.object_token_pos));
    Ok(VariationResult {
        object_mask,
        id,
        proxy: proxy.to_string(),
        image: generation.image,
        trace: generation.trace,
        reference_segmentation: prep.segmentation.clone(),
        segmentation,
        retention_mask,
        elapsed_ms: started.elapsed().as_millis() as u64,
    })
}

/// Generates one variation of the noun at token `object_pos` per proxy word.
///
/// Errors that concern the whole batch (options, object position, reference
/// trace) are returned directly; a proxy that fails only marks its own item.
/// Items are identified `v0`, `v1`, ... in proxy order.
pub fn generate_variations(
    backend: &dyn Backend,
    reference: &DenoisingTrace,
    object_pos: usize,
    proxies: &[String],
    options: &VariationOptions,
) -> Result<Vec<VariationOutcome>> {
    generate_variations_with(backend, reference, object_pos, proxies, options, 0)
}

/// [`generate_variations`] on at most `jobs` threads (0 picks the number of CPUs).
///
/// The variations run on plain threads rather than the rayon pool: a
/// backend that admits one run at a time would otherwise park pool workers
/// that the running variation's own parallel work may be waiting for.
pub fn generate_variations_with(
    backend: &dyn Backend,
    reference: &DenoisingTrace,
    object_pos: usize,
    proxies: &[String],
    options: &VariationOptions,
    jobs: usize,
) -> Result<Vec<VariationOutcome>> {
    let prep = prepare(reference, object_pos, options)?;
    let jobs = match jobs {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(proxies.len())
    .max(1);
    let run = |i: usize| {
        let proxy = &proxies[i];
        let id = format!("v{i}");
        let result = run_variation(backend, &prep, id.clone(), proxy, options).map_err(|e| {
            tracing::warn!(proxy = %proxy, error = %e, "variation failed");
            ItemError::from(&e)
        });
        VariationOutcome {
            id,
            proxy: proxy.clone(),
            result,
        }
    };
    let next = AtomicUsize::new(0);
    let mut outcomes: Vec<(usize, VariationOutcome)> = std::thread::scope(|scope| {
        let workers: Vec<_> = (0..jobs)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= proxies.len() {
                            return done;
                        }
                        done.push((i, run(i)));
                    }
                })
            })
            .collect();
        workers
            .into_iter()
            .flat_map(|w| w.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    outcomes.sort_by_key(|(i, _)| *i);
    Ok(outcomes.into_iter().map(|(_, o)| o).collect())
}

/// Proxy words for the object of `prompt`, best first.
pub fn auto_proxies(
    index: &TokenIndex,
    provider: &dyn EmbeddingProvider,
    prompt: &PromptSpec,
    candidates: usize,
    count: usize,
) -> Result<Vec<String>> {
    Ok(find_proxies(index, provider, prompt, candidates, count)?
        .into_iter()
        .map(|c| c.display)
        .collect())
}

/// The five images of a stage analysis: each word alone, then the first
/// word with the second from `T3` on, then the three words over the three
/// intervals.
#[derive(Clone, Debug)]
pub struct StageStrip {
    pub captions: Vec<String>,
    pub images: Vec<RgbImage>,
}

impl StageStrip {
    pub fn to_image(&self) -> Result<RgbImage> {
        RgbImage::hstack(&self.images)
    }
}

/// Renders the stage analysis of the object of `prompt` replaced by each of
/// `words`, all with the same seed. Later intervals feed only the Values.
pub fn analyze_stages(
    backend: &dyn Backend,
    prompt: &PromptSpec,
    words: [&str; 3],
    seed: u64,
    total_steps: u32,
    t3: u32,
    t2: u32,
) -> Result<StageStrip> {
    if !(total_steps > t3 && t3 > t2 && t2 > 0) {
        return Err(Error::BadInterval(format!(
            "need T > T3 > T2 > 0, got T={total_steps}, T3={t3}, T2={t2}"
        )));
    }
    let tokenizer = backend.tokenizer();
    let prompts = words
        .iter()
        .map(|w| prompt.with_object_replaced(tokenizer.as_ref(), w))
        .collect::<Result<Vec<_>>>()?;
    let options = RunOptions::with_seed(seed);
    let run = |schedule: MixSchedule| {
        backend
            .run_hooked(&schedule, &crate::backend::IdentityHooks, &options)
            .map(|g| g.image)
    };
    let mut images = Vec::with_capacity(5);
    for p in &prompts {
        images.push(run(MixSchedule::single(p.clone(), total_steps)?)?);
    }
    images.push(run(build_general_schedule(
        vec![
            (TimestepInterval::new(total_steps, t3)?, prompts[0].clone()),
            (TimestepInterval::new(t3, 0)?, prompts[1].clone()),
        ],
        total_steps,
        KvPolicy::ValuesOnly,
    )?)?);
    images.push(run(build_general_schedule(
        vec![
            (TimestepInterval::new(total_steps, t3)?, prompts[0].clone()),
            (TimestepInterval::new(t3, t2)?, prompts[1].clone()),
            (TimestepInterval::new(t2, 0)?, prompts[2].clone()),
        ],
        total_steps,
        KvPolicy::ValuesOnly,
    )?)?);
    let captions = vec![
        words[0].to_string(),
        words[1].to_string(),
        words[2].to_string(),
        format!("[{total_steps},{t3}) {} / [{t3},0) {}", words[0], words[1]),
        format!(
            "[{total_steps},{t3}) {} / [{t3},{t2}) {} / [{t2},0) {}",
            words[0], words[1], words[2]
        ),
    ];
    Ok(StageStrip { captions, images })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retention: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_segmentation: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: String,
    pub proxy: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default)]
    pub masks: MaskPaths,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ItemError>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryManifest {
    pub prompt: String,
    pub object: String,
    pub seed: u64,
    pub reference_image: Option<PathBuf>,
    pub variations: Vec<GalleryEntry>,
}

impl GalleryManifest {
    pub fn successes(&self) -> usize {
        self.variations.iter().filter(|v| v.error.is_none()).count()
    }
}

const MASK_SCALE: usize = 4;

/// Writes images and masks of `outcomes` under `dir` and returns the
/// manifest, with paths relative to `dir`. The manifest itself is written to
/// `dir/manifest.json`.
pub fn save_gallery(
    dir: &Path,
    reference: &DenoisingTrace,
    object_pos: usize,
    reference_image: Option<&RgbImage>,
    outcomes: &[VariationOutcome],
) -> Result<GalleryManifest> {
    std::fs::create_dir_all(dir)?;
    let reference_image = match reference_image {
        Some(img) => {
            img.save_png(&dir.join("reference.png"))?;
            Some(PathBuf::from("reference.png"))
        }
        None => None,
    };
    let mut ref_seg_path = None;
    let mut variations = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let entry = match &o.result {
            Err(e) => GalleryEntry {
                id: o.id.clone(),
                proxy: o.proxy.clone(),
                image: None,
                masks: MaskPaths::default(),
                elapsed_ms: None,
                error: Some(e.clone()),
            },
            Ok(v) => {
                let image = PathBuf::from(format!("{}.png", v.id));
                v.image.save_png(&dir.join(&image))?;
                let mut masks = MaskPaths::default();
                if let Some(r) = &v.retention_mask {
                    let side = crate::grid::exact_sqrt(r.len()).ok_or_else(|| {
                        Error::ShapeMismatch("retention mask is not square".into())
                    })?;
                    let p = PathBuf::from(format!("{}.retention.png", v.id));
                    save_mask_png(r, side, MASK_SCALE, &dir.join(&p))?;
                    masks.retention = Some(p);
                }
                if let Some(m) = &v.object_mask {
                    let p = PathBuf::from(format!("{}.object.png", v.id));
                    save_mask_png(m, v.image.width(), 1, &dir.join(&p))?;
                    masks.object = Some(p);
                }
                if let Some(s) = &v.segmentation {
                    let p = PathBuf::from(format!("{}.segmentation.png", v.id));
                    s.save_png(&dir.join(&p), MASK_SCALE)?;
                    masks.segmentation = Some(p);
                }
                if let Some(s) = &v.reference_segmentation {
                    if ref_seg_path.is_none() {
                        let p = PathBuf::from("reference.segmentation.png");
                        s.save_png(&dir.join(&p), MASK_SCALE)?;
                        ref_seg_path = Some(p);
                    }
                    masks.reference_segmentation = ref_seg_path.clone();
                }
                GalleryEntry {
                    id: v.id.clone(),
                    proxy: v.proxy.clone(),
                    image: Some(image),
                    masks,
                    elapsed_ms: Some(v.elapsed_ms),
                    error: None,
                }
            }
        };
        variations.push(entry);
    }
    let prompt = reference.prompt().with_object_at(object_pos)?;
    let manifest = GalleryManifest {
        prompt: prompt.text.clone(),
        object: prompt.object_word().to_string(),
        seed: reference.seed(),
        reference_image,
        variations,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::SyntheticBackend;
    use crate::tokenizer::WordTokenizer;

    fn reference(steps: u32) -> (SyntheticBackend, DenoisingTrace, RgbImage) {
        let b = SyntheticBackend::default();
        let p = PromptSpec::parse(
            &WordTokenizer,
            "A mug next to a lamp",
            "mug",
            Some(&["mug", "lamp"]),
            &["lamp"],
        )
        .unwrap();
        let g = b
            .run_reference(&p, steps, &RunOptions::with_seed(11))
            .unwrap();
        (b, g.trace, g.image)
    }

    fn options(steps: u32) -> VariationOptions {
        VariationOptions {
            t3: steps - 2,
            t2: steps - 4,
            t1: steps / 2,
            ..VariationOptions::default()
        }
    }

    #[test]
    fn no_proxies_no_gallery() {
        let (b, trace, _) = reference(10);
        assert!(generate_variations(&b, &trace, 1, &[], &options(10))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn a_bad_proxy_only_fails_its_item() {
        let (b, trace, _) = reference(10);
        let out =
            generate_variations(&b, &trace, 1, &["cup".into(), "  ".into()], &options(10)).unwrap();
        assert!(out[0].ok().is_some());
        assert_eq!(out[1].result.as_ref().unwrap_err().kind, "unknown_word");
    }

    #[test]
    fn batch_errors_are_reported_up_front() {
        let (b, trace, _) = reference(10);
        assert!(matches!(
            generate_variations(&b, &trace, 0, &["cup".into()], &options(10)),
            Err(Error::UnknownNoun(0))
        ));
        let bad = VariationOptions {
            t2: 9,
            ..options(10)
        };
        assert!(generate_variations(&b, &trace, 1, &["cup".into()], &bad).is_err());
    }

    #[test]
    fn the_gallery_manifest_lists_every_item() {
        let (b, trace, image) = reference(10);
        let out =
            generate_variations(&b, &trace, 1, &["cup".into(), "".into()], &options(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save_gallery(dir.path(), &trace, 1, Some(&image), &out).unwrap();
        assert_eq!(m.variations.len(), 2);
        assert_eq!(m.successes(), 1);
        let first = &m.variations[0];
        for p in [
            first.image.as_ref(),
            first.masks.retention.as_ref(),
            first.masks.segmentation.as_ref(),
        ] {
            assert!(dir.path().join(p.unwrap()).exists());
        }
        let back: GalleryManifest =
            serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(back, m);
    }
}
