mod common;

use std::path::Path;

use common::{brute_force_proxies, pme, stdout_json, PROMPT};
use pme_core::proxy::FakeEmbedder;
use serde_json::Value;

const FAST: [&str; 8] = ["--steps", "12", "--t3", "10", "--t2", "7", "--t1", "4"];

fn generate(dir: &Path, out: &str, extra: &[&str]) -> std::process::Output {
    pme(dir)
        .args([
            "generate",
            "--prompt",
            PROMPT,
            "--object",
            "basket",
            "--nouns",
            "basket,table,mug",
            "--out",
            out,
        ])
        .args(extra)
        .output()
        .unwrap()
}

/// The manifest without run times and without the masks only an in-process
/// synthetic backend can provide.
fn comparable(mut manifest: Value) -> Value {
    for v in manifest["variations"].as_array_mut().unwrap() {
        let v = v.as_object_mut().unwrap();
        v.remove("elapsed_ms");
        v["masks"].as_object_mut().unwrap().remove("object");
    }
    manifest
}

fn error_of(out: &std::process::Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("{e}: stderr was {line}"))
}

#[test]
fn identity_gallery_reproduces_the_reference() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate(dir.path(), "g", &["--proxies", "basket", "--seed", "11"]);
    let manifest = stdout_json(&out);
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["variations"][0]["proxy"], "basket");
    let g = dir.path().join("g");
    let reference = std::fs::read(g.join("reference.png")).unwrap();
    assert_eq!(std::fs::read(g.join("v0.png")).unwrap(), reference);
    assert!(g.join("reference.trc").exists() && g.join("v0.trc").exists());
    let on_disk: Value =
        serde_json::from_slice(&std::fs::read(g.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk, manifest);
}

#[test]
fn missing_prompt_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pme(dir.path())
        .args(["generate", "--object", "basket", "--proxies", "bowl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let e = error_of(&out);
    assert_eq!(e["error"]["kind"], "usage");
    assert!(e["error"]["message"].as_str().unwrap().contains("--prompt"));
}

#[test]
fn runtime_errors_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate(
        dir.path(),
        "g",
        &["--proxies", "bowl", "--backend", "quantum"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["error"]["kind"], "config");

    let out = pme(dir.path())
        .args([
            "generate",
            "--prompt",
            PROMPT,
            "--object",
            "teapot",
            "--proxies",
            "bowl",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["error"]["kind"], "invalid_prompt");

    let out = generate(dir.path(), "g", &["--proxies", "bowl", "--t2", "60"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["error"]["kind"], "bad_interval");
}

#[test]
fn generation_is_deterministic_given_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args: Vec<&str> = ["--proxies", "bowl,crate", "--seed", "5"]
        .iter()
        .chain(&FAST)
        .copied()
        .collect();
    let a = stdout_json(&generate(dir.path(), "a", &args));
    let b = stdout_json(&generate(
        dir.path(),
        "b",
        &[&args[..], &["--jobs", "1"]].concat(),
    ));
    assert_eq!(comparable(a), comparable(b));
    for f in [
        "reference.png",
        "v0.png",
        "v1.png",
        "v0.retention.png",
        "reference.trc",
        "v1.trc",
    ] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_beat_environment_beats_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("pme.toml"),
        "seed = 5\nsteps = 12\n[variation]\nt3 = 10\nt2 = 7\nt1 = 4\n",
    )
    .unwrap();
    let seed_of = |env: Option<&str>, flag: Option<&str>| {
        let mut c = pme(dir.path());
        c.args([
            "--config",
            "pme.toml",
            "generate",
            "--prompt",
            PROMPT,
            "--object",
            "basket",
            "--proxies",
            "bowl",
        ]);
        c.args(["--out", "g"]);
        if let Some(s) = env {
            c.env("PME_SEED", s);
        }
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        stdout_json(&c.output().unwrap())["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(None, None), 5);
    assert_eq!(seed_of(Some("6"), None), 6);
    assert_eq!(seed_of(Some("6"), Some("7")), 7);

    std::fs::write(dir.path().join("bad.toml"), "colour = 1\n").unwrap();
    let out = pme(dir.path())
        .args([
            "--config",
            "bad.toml",
            "generate",
            "--prompt",
            PROMPT,
            "--object",
            "basket",
            "--proxies",
            "bowl",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["error"]["kind"], "config");
}

#[test]
fn proxies_from_the_environment_embedder_match_a_full_scan() {
    let dir = tempfile::tempdir().unwrap();
    let prompt = "A chair with a dog on it";
    for seed in [1u64, 2, 3] {
        let spec = format!("fake:{seed}:24:400:stool,bed,cart");
        let out = pme(dir.path())
            .env("PME_EMBEDDER", &spec)
            .args([
                "proxies", "--word", "chair", "--prompt", prompt, "-k", "25", "-m", "8", "--json",
            ])
            .output()
            .unwrap();
        let got = stdout_json(&out);
        let provider = FakeEmbedder::generated(seed, 24, 400, &["stool", "bed", "cart"]);
        let want = brute_force_proxies(&provider, "A photo of a {t}", prompt, "chair", 25, 8);
        let got = got.as_array().unwrap();
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            assert_eq!(g["rank"], i + 1);
            assert_eq!(g["token"], w.token);
            assert_eq!(g["display"], w.display.as_str());
            assert!((g["context_free_distance"].as_f64().unwrap() - w.context_free).abs() < 1e-9);
            assert!((g["in_context_distance"].as_f64().unwrap() - w.in_context).abs() < 1e-9);
        }

        let table = pme(dir.path())
            .env("PME_EMBEDDER", &spec)
            .args([
                "proxies", "--word", "chair", "--prompt", prompt, "-k", "25", "-m", "8",
            ])
            .output()
            .unwrap();
        let text = String::from_utf8(table.stdout).unwrap();
        let words: Vec<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.split_whitespace().nth(2).unwrap())
            .collect();
        assert_eq!(
            words,
            want.iter().map(|w| w.display.as_str()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn auto_proxies_use_the_ranked_words() {
    let dir = tempfile::tempdir().unwrap();
    let spec = "fake:4:16:200:bowl,crate";
    let args: Vec<&str> = ["--auto", "3", "--embedder", spec, "--seed", "2"]
        .iter()
        .chain(&FAST)
        .copied()
        .collect();
    let manifest = stdout_json(&generate(dir.path(), "g", &args));
    let provider = FakeEmbedder::generated(4, 16, 200, &["bowl", "crate"]);
    let want = brute_force_proxies(&provider, "A photo of a {t}", PROMPT, "basket", 100, 3);
    let got: Vec<&str> = manifest["variations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["proxy"].as_str().unwrap())
        .collect();
    assert_eq!(
        got,
        want.iter().map(|w| w.display.as_str()).collect::<Vec<_>>()
    );

    let out = generate(dir.path(), "h", &["--auto", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["error"]["kind"], "config");
}

#[test]
fn real_backend_through_a_worker_process_matches_in_process_runs() {
    let dir = tempfile::tempdir().unwrap();
    let worker = format!("'{}' worker", env!("CARGO_BIN_EXE_pme"));
    let args: Vec<&str> = ["--proxies", "basket,bowl", "--seed", "9"]
        .iter()
        .chain(&FAST)
        .copied()
        .collect();
    let local = stdout_json(&generate(dir.path(), "local", &args));
    let remote = stdout_json(&generate(
        dir.path(),
        "remote",
        &[&args[..], &["--backend", "real", "--worker", &worker]].concat(),
    ));
    assert_eq!(comparable(local), comparable(remote));
    for f in ["reference.png", "v0.png", "v1.png"] {
        assert_eq!(
            std::fs::read(dir.path().join("local").join(f)).unwrap(),
            std::fs::read(dir.path().join("remote").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        std::fs::read(dir.path().join("remote/v0.png")).unwrap(),
        std::fs::read(dir.path().join("remote/reference.png")).unwrap()
    );
}

#[test]
fn segment_writes_a_labelled_map() {
    let dir = tempfile::tempdir().unwrap();
    stdout_json(&generate(
        dir.path(),
        "g",
        &["--proxies", "basket", "--seed", "3"],
    ));
    let out = pme(dir.path())
        .args([
            "segment",
            "--trace",
            "g/reference.trc",
            "--out",
            "seg",
            "--clusters",
            "4",
        ])
        .output()
        .unwrap();
    let legend = stdout_json(&out);
    let segments = legend["segments"].as_array().unwrap();
    assert_eq!(segments.len(), 4);
    let pixels: u64 = segments.iter().map(|s| s["pixels"].as_u64().unwrap()).sum();
    let side = legend["side"].as_u64().unwrap();
    assert_eq!(pixels, side * side);
    let names: Vec<&str> = segments.iter().filter_map(|s| s["name"].as_str()).collect();
    assert!(
        names
            .iter()
            .all(|n| ["basket", "table", "mug", "background"].contains(n)),
        "{names:?}"
    );
    assert!(dir.path().join("seg/segmentation.png").exists());
    let on_disk: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("seg/legend.json")).unwrap())
            .unwrap();
    assert_eq!(on_disk, legend);
}

#[test]
fn stages_render_five_panels() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        stdout_json(
            &pme(dir.path())
                .args([
                    "stages",
                    "--template",
                    "A {t} on a table",
                    "--words",
                    "basket,bowl,crate",
                    "--seed",
                    "4",
                ])
                .args(["--out", out])
                .output()
                .unwrap(),
        )
    };
    let a = run("a/strip.png");
    assert_eq!(a["captions"].as_array().unwrap().len(), 5);
    run("b/strip.png");
    let png = std::fs::read(dir.path().join("a/strip.png")).unwrap();
    assert_eq!(png, std::fs::read(dir.path().join("b/strip.png")).unwrap());
    assert!(dir.path().join("a/strip.json").exists());

    let out = pme(dir.path())
        .args([
            "stages",
            "--template",
            "A {t}",
            "--words",
            "basket,bowl",
            "--seed",
            "4",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn metrics_and_plot_report_the_gallery() {
    let dir = tempfile::tempdir().unwrap();
    stdout_json(&generate(
        dir.path(),
        "g",
        &["--proxies", "basket,bowl,crate", "--seed", "8"],
    ));
    let out = pme(dir.path())
        .args([
            "metrics",
            "--gallery",
            "g",
            "--class-refs",
            "g",
            "--method",
            "ours",
            "--csv",
            "r.csv",
            "--plot",
            "r.svg",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = pme_core::metrics::read_csv(std::fs::File::open(dir.path().join("r.csv")).unwrap())
        .unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].proxy, "basket");
    assert_eq!(rows[0].preservation, 0.0);
    assert!(rows
        .iter()
        .all(|r| r.method == "ours" && r.faithfulness.is_some()));
    let d = rows[0].diversity.unwrap();
    assert!((0.0..=1.0).contains(&d) && rows.iter().all(|r| r.diversity == Some(d)));
    let svg = std::fs::read_to_string(dir.path().join("r.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("ours"));

    let summary = stdout_json(
        &pme(dir.path())
            .args(["plot", "r.csv", "--out", "p.svg"])
            .output()
            .unwrap(),
    );
    assert_eq!(summary[0]["variations"], 3);
    assert!(dir.path().join("p.svg").exists());
}
