use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use pme_core::backend::{serve_embedder, serve_worker};
use pme_core::metrics::{
    diversity, faithfulness_each, preservation, read_csv, summarize, write_csv,
    ColorMomentEmbedder, MaskFiles, MeanAbsoluteDifference, MetricsRow,
};
use pme_core::pipeline::{
    analyze_stages, auto_proxies, generate_variations_with, save_gallery, GalleryManifest,
    VariationOptions,
};
use pme_core::proxy::{
    build_token_index, fill_template, find_proxies, EmbeddingProvider, TokenIndex,
    DEFAULT_CANDIDATES, DEFAULT_PROXIES, DEFAULT_TEMPLATE,
};
use pme_core::segmentation::segment_trace;
use pme_core::{
    Backend, DenoisingTrace, PromptSpec, RgbImage, RunOptions, SyntheticBackend, WordTokenizer,
};
use pme_service::{ServiceBuilder, ServiceConfig};
use serde_json::json;

use crate::config::{make_backend, make_embedder, pick, CliResult, Failure, FileConfig};
use crate::{
    EmbedderArgs, EmbedderWorkerArgs, GenerateArgs, MetricsArgs, PlotArgs, ProxiesArgs,
    SegmentArgs, ServeArgs, StagesArgs,
};

fn print_json(value: &impl serde::Serialize) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

struct Embedding {
    provider: Arc<dyn EmbeddingProvider>,
    index: TokenIndex,
    candidates: usize,
}

fn load_embedding(args: &EmbedderArgs, file: &FileConfig) -> CliResult<Embedding> {
    let spec = args
        .embedder
        .as_deref()
        .or(file.embedder.as_deref())
        .ok_or_else(|| {
            Failure::config(
                "no embedding model (--embedder, PME_EMBEDDER or `embedder` in the config)",
            )
        })?;
    let provider = make_embedder(spec)?;
    let template = pick(
        args.template.clone(),
        file.template.clone(),
        DEFAULT_TEMPLATE.to_string(),
    );
    let cache = args
        .index_cache
        .clone()
        .or_else(|| file.index_cache.clone());
    let index = build_token_index(provider.as_ref(), &template, cache.as_deref())?;
    Ok(Embedding {
        provider,
        index,
        candidates: args.candidates.unwrap_or(DEFAULT_CANDIDATES),
    })
}

fn backend_name(flag: &Option<String>, file: &FileConfig) -> String {
    pick(flag.clone(), file.backend.clone(), "synthetic".to_string())
}

pub fn generate(args: GenerateArgs, file: &FileConfig) -> CliResult<()> {
    let name = backend_name(&args.backend.backend, file);
    let backend = make_backend(
        &name,
        args.backend.worker.as_deref().or(file.worker.as_deref()),
    )?;
    let tokenizer = backend.tokenizer();
    let nouns: Option<Vec<&str>> = args
        .nouns
        .as_ref()
        .map(|v| v.iter().map(String::as_str).collect());
    let preserve: Vec<&str> = args.preserve.iter().map(String::as_str).collect();
    let prompt = PromptSpec::parse(
        tokenizer.as_ref(),
        &args.prompt,
        &args.object,
        nouns.as_deref(),
        &preserve,
    )?;

    let mut options = file.variation.clone().unwrap_or_default();
    options.t1 = args.t1.unwrap_or(options.t1);
    options.t2 = args.t2.unwrap_or(options.t2);
    options.t3 = args.t3.unwrap_or(options.t3);
    options.localize &= !args.no_localize;
    options.blend &= !args.no_blend;
    if let Some(g) = args.guidance.or(file.guidance) {
        options.guidance = g;
    }
    let steps = pick(args.steps, file.steps, backend.describe().default_steps);
    options.validate(steps)?;

    let proxies = match args.auto {
        None => args.proxies.clone(),
        Some(m) => {
            let e = load_embedding(&args.embedding, file)?;
            auto_proxies(&e.index, e.provider.as_ref(), &prompt, e.candidates, m)?
        }
    };
    if proxies.is_empty() {
        return Err(Failure::usage("no proxy words to generate"));
    }

    let seed = pick(args.seed, file.seed, rand_seed());
    let run = RunOptions {
        guidance: options.guidance,
        hook_both_branches: options.hook_both_branches,
        ..RunOptions::with_seed(seed)
    };
    let reference = backend.run_reference(&prompt, steps, &run)?;
    let jobs = pick(args.jobs, file.jobs, 0);
    let outcomes = generate_variations_with(
        backend.as_ref(),
        &reference.trace,
        prompt.object_token_pos,
        &proxies,
        &options,
        jobs,
    )?;
    let manifest = save_gallery(
        &args.out,
        &reference.trace,
        prompt.object_token_pos,
        Some(&reference.image),
        &outcomes,
    )?;
    reference.trace.save(&args.out.join("reference.trc"))?;
    for v in outcomes.iter().filter_map(|o| o.ok()) {
        v.trace.save(&args.out.join(format!("{}.trc", v.id)))?;
    }
    print_json(&manifest)?;
    if manifest.successes() == 0 {
        return Err(Failure::new(
            "all_failed",
            "every variation failed; see the manifest",
        ));
    }
    Ok(())
}

fn rand_seed() -> u64 {
    use std::collections::hash_map::RandomState;
    use std::hash::BuildHasher;
    RandomState::new().hash_one(std::time::SystemTime::now())
}

pub fn segment(args: SegmentArgs, file: &FileConfig) -> CliResult<()> {
    let trace = DenoisingTrace::load(&args.trace)?;
    let mut options = file.variation.clone().unwrap_or_default().segmentation;
    options.clusters = args.clusters.unwrap_or(options.clusters);
    options.sigma = args.sigma.unwrap_or(options.sigma);
    let after = args.after;
    let seg = segment_trace(&trace, &options, move |t| t > after)?;
    std::fs::create_dir_all(&args.out)?;
    seg.save_png(&args.out.join("segmentation.png"), 4)?;
    let legend = seg.legend(Some(trace.prompt()));
    std::fs::write(
        args.out.join("legend.json"),
        serde_json::to_vec_pretty(&legend)?,
    )?;
    print_json(&legend)
}

pub fn proxies(args: ProxiesArgs, file: &FileConfig) -> CliResult<()> {
    let e = load_embedding(&args.embedding, file)?;
    let prompt = PromptSpec::parse(&WordTokenizer, &args.prompt, &args.word, None, &[])?;
    let m = args.count.unwrap_or(DEFAULT_PROXIES);
    let mut ranked = find_proxies(&e.index, e.provider.as_ref(), &prompt, e.candidates, m)?;
    if args.words_only {
        ranked.retain(|c| !c.display.is_empty() && c.display.chars().all(char::is_alphabetic));
    }
    if args.json {
        return print_json(&ranked);
    }
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "{:>4}  {:>10}  {:<20}  {:>12}  {:>12}",
        "rank", "token", "word", "context_free", "in_context"
    )?;
    for c in &ranked {
        writeln!(
            out,
            "{:>4}  {:>10}  {:<20}  {:>12.6}  {:>12.6}",
            c.rank,
            c.token,
            c.display,
            c.context_free_distance,
            c.in_context_distance.unwrap_or(f64::NAN)
        )?;
    }
    Ok(())
}

pub fn stages(args: StagesArgs, file: &FileConfig) -> CliResult<()> {
    let [w0, w1, w2] = <[String; 3]>::try_from(args.words).map_err(|w| {
        Failure::usage(format!(
            "--words needs exactly three words, got {}",
            w.len()
        ))
    })?;
    if !args.template.contains("{t}") {
        return Err(Failure::usage("--template needs a {t} slot"));
    }
    let name = backend_name(&args.backend.backend, file);
    let backend = make_backend(
        &name,
        args.backend.worker.as_deref().or(file.worker.as_deref()),
    )?;
    let tokenizer = backend.tokenizer();
    let prompt = PromptSpec::parse(
        tokenizer.as_ref(),
        &fill_template(&args.template, &w0),
        &w0,
        None,
        &[],
    )?;
    let defaults = VariationOptions::default();
    let steps = pick(args.steps, file.steps, backend.describe().default_steps);
    let seed = pick(args.seed, file.seed, rand_seed());
    let strip = analyze_stages(
        backend.as_ref(),
        &prompt,
        [&w0, &w1, &w2],
        seed,
        steps,
        args.t3.unwrap_or(defaults.t3),
        args.t2.unwrap_or(defaults.t2),
    )?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    strip.to_image()?.save_png(&args.out)?;
    let captions = json!({"image": args.out, "seed": seed, "captions": strip.captions});
    std::fs::write(
        args.out.with_extension("json"),
        serde_json::to_vec_pretty(&captions)?,
    )?;
    print_json(&captions)
}

fn load_manifest(dir: &Path) -> CliResult<GalleryManifest> {
    let path = dir.join("manifest.json");
    let bytes =
        std::fs::read(&path).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn images_in(dir: &Path) -> CliResult<Vec<RgbImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(RgbImage::load(p)?)).collect()
}

/// Scores each gallery: preservation against the original image, diversity
/// over the object masks found next to the variations, and faithfulness to
/// the class images through colour moments.
pub fn metrics(args: MetricsArgs) -> CliResult<()> {
    if !args.method.is_empty() && args.method.len() != args.gallery.len() {
        return Err(Failure::usage("give one --method per --gallery"));
    }
    let class_refs = args.class_refs.as_deref().map(images_in).transpose()?;
    let original = args.original.as_deref().map(RgbImage::load).transpose()?;
    let mut rows = Vec::new();
    for (g, dir) in args.gallery.iter().enumerate() {
        let manifest = load_manifest(dir)?;
        let gallery = dir.file_name().map_or_else(
            || dir.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        let method = args
            .method
            .get(g)
            .cloned()
            .unwrap_or_else(|| gallery.clone());
        let original = match (&original, &manifest.reference_image) {
            (Some(img), _) => img.clone(),
            (None, Some(p)) => RgbImage::load(&dir.join(p))?,
            (None, None) => {
                return Err(Failure::usage(format!(
                    "{}: no reference image, pass --original",
                    dir.display()
                )))
            }
        };
        let items: Vec<(String, String, PathBuf)> = manifest
            .variations
            .iter()
            .filter_map(|v| {
                v.image
                    .as_ref()
                    .map(|p| (v.id.clone(), v.proxy.clone(), dir.join(p)))
            })
            .collect();
        let images = items
            .iter()
            .map(|(_, _, p)| RgbImage::load(p))
            .collect::<pme_core::Result<Vec<_>>>()?;
        let masks: Vec<Vec<bool>> = items
            .iter()
            .zip(&images)
            .filter_map(|((_, _, p), img)| {
                let m = MaskFiles::sibling_of(p);
                m.exists()
                    .then(|| MaskFiles::load(&m, img.width(), img.height()))
            })
            .collect::<pme_core::Result<_>>()?;
        let div = (masks.len() >= 2 && masks.len() == images.len())
            .then(|| diversity(&masks))
            .transpose()?;
        let faith = match &class_refs {
            Some(refs) if !images.is_empty() => {
                Some(faithfulness_each(&images, refs, &ColorMomentEmbedder)?)
            }
            _ => None,
        };
        for (i, ((id, proxy, _), img)) in items.iter().zip(&images).enumerate() {
            rows.push(MetricsRow {
                gallery: gallery.clone(),
                method: method.clone(),
                variation: id.clone(),
                proxy: proxy.clone(),
                preservation: preservation(&original, img, &MeanAbsoluteDifference)?,
                faithfulness: faith.as_ref().map(|f| f[i]),
                diversity: div,
            });
        }
    }
    match &args.csv {
        Some(path) => write_csv(&rows, std::fs::File::create(path)?)?,
        None => write_csv(&rows, std::io::stdout().lock())?,
    }
    if let Some(svg) = &args.plot {
        crate::plot::tradeoff_svg(&summarize(&rows), svg)?;
    }
    Ok(())
}

pub fn plot(args: PlotArgs) -> CliResult<()> {
    let mut rows = Vec::new();
    for path in &args.reports {
        let file = std::fs::File::open(path)
            .map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))?;
        rows.extend(read_csv(file)?);
    }
    let summaries = summarize(&rows);
    crate::plot::tradeoff_svg(&summaries, &args.out)?;
    print_json(&summaries)
}

pub fn serve(args: ServeArgs, file: FileConfig) -> CliResult<()> {
    let mut config = file.service.clone().unwrap_or_default();
    if let Some(bind) = args.bind {
        config.bind = bind;
    }
    if let Some(root) = args.root {
        config.root = root;
    }
    if let Some(t) = &file.template {
        if config.proxy_template == ServiceConfig::default().proxy_template {
            config.proxy_template = t.clone();
        }
    }
    let mut builder =
        ServiceBuilder::new(config).backend("synthetic", Arc::new(SyntheticBackend::default()));
    if let Some(worker) = args.worker.as_deref().or(file.worker.as_deref()) {
        builder = builder.backend("real", make_backend("real", Some(worker))?);
    }
    if let Some(spec) = args.embedder.as_deref().or(file.embedder.as_deref()) {
        builder = builder.embedder(make_embedder(spec)?);
    }
    let state = builder.build()?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(pme_service::serve(state))?;
    Ok(())
}

pub fn worker() -> CliResult<()> {
    let backend: Arc<dyn Backend> = Arc::new(SyntheticBackend::default());
    serve_worker(backend.as_ref(), std::io::stdin(), std::io::stdout())?;
    Ok(())
}

pub fn embedder_worker(args: EmbedderWorkerArgs) -> CliResult<()> {
    if args.embedder.starts_with("cmd:") {
        return Err(Failure::config(
            "an embedding worker serves a local model, not another worker",
        ));
    }
    let provider = make_embedder(&args.embedder)?;
    serve_embedder(
        provider.as_ref(),
        std::io::stdin().lock(),
        std::io::stdout().lock(),
    )?;
    Ok(())
}
