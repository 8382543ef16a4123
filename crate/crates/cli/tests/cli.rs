use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use procdiff::encoder::{EmbeddingProvider, ToyEncoder};

const BIN: &str = env!("CARGO_BIN_EXE_procdiff");

/// Overrides that shrink the model so a few optimizer steps and a strided
/// sampler finish in seconds.
const TINY: &[&str] = &[
    "model.image_size=8",
    "model.base_channels=4",
    "model.groups=2",
    "model.time_dim=16",
    "model.context_dim=16",
    "encoder.dim=16",
    "memory.dim=8",
    "memory.heads=2",
    "schedule.timesteps=20",
    "train.batch_size=4",
    "train.max_steps=3",
    "train.checkpoint_every=2",
    "train.log_every=1",
    "train.lr=0.001",
    "sampler.kind=ddim",
    "sampler.stride=5",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// The tiny overrides go first so a test's own `--set` wins.
fn run_tiny(args: &[&str]) -> Output {
    let mut all: Vec<&str> = TINY.iter().flat_map(|kv| ["--set", kv]).collect();
    all.extend_from_slice(args);
    run(&all)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const STEPS: [&[&str]; 3] = [
    &[
        "crack the eggs into a bowl",
        "whisk the eggs",
        "bake the omelette",
        "serve warm",
    ],
    &["chop the onion", "fry the onion", "add the rice"],
    &["boil water", "add the pasta", "drain", "toss with sauce"],
];

/// Three synthetic videos: frames every half second, colour drifting with
/// time so each step span has a distinct best frame.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let frames = root.join("frames");
    let mut db = serde_json::Map::new();
    for (v, steps) in STEPS.iter().enumerate() {
        let id = format!("vid{v}");
        let dir = frames.join(&id);
        fs::create_dir_all(&dir).unwrap();
        let duration = 2.0 * steps.len() as f64;
        let mut t = 0.0;
        while t < duration {
            let shade = (t * 40.0) as u8;
            let img = RgbImage::from_fn(16, 16, |x, y| Rgb([shade, (x * 16) as u8 ^ v as u8, (y * 16) as u8]));
            img.save(dir.join(format!("{t:.1}.png"))).unwrap();
            t += 0.5;
        }
        let annotations: Vec<serde_json::Value> = steps
            .iter()
            .enumerate()
            .map(|(j, text)| {
                serde_json::json!({"segment": [2.0 * j as f64, 2.0 * j as f64 + 2.0], "id": j, "sentence": text})
            })
            .collect();
        let subset = if v == 2 { "validation" } else { "training" };
        db.insert(
            id,
            serde_json::json!({"subset": subset, "recipe_type": "101", "annotations": annotations}),
        );
    }
    let ann = root.join("annotations.json");
    fs::write(&ann, serde_json::json!({ "database": db }).to_string()).unwrap();
    (ann, frames)
}

fn preprocess(root: &Path) -> PathBuf {
    let (ann, frames) = fixture(root);
    let out = root.join("data");
    let o = run(&[
        "--out",
        s(&out),
        "preprocess",
        "--annotations",
        s(&ann),
        "--frames-root",
        s(&frames),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn preprocess_builds_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = preprocess(dir.path());
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(out.join("images/vid0/4.png").exists());
    assert!(out.join("config.toml").exists());
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["command"], "preprocess");
    assert_eq!(prov["input_hash"].as_str().unwrap().len(), 64);

    let (ann, frames) = (dir.path().join("annotations.json"), dir.path().join("frames"));
    let again = dir.path().join("again");
    let o = run(&[
        "--out",
        s(&again),
        "preprocess",
        "--annotations",
        s(&ann),
        "--frames-root",
        s(&frames),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(again.join("manifest.jsonl")).unwrap(), manifest);
}

#[test]
fn missing_annotations_exit_1_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = run(&[
        "--out",
        s(dir.path()),
        "preprocess",
        "--annotations",
        s(&missing),
        "--frames-root",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
}

#[test]
fn no_usable_video_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (ann, _) = fixture(dir.path());
    let empty = dir.path().join("no-frames");
    fs::create_dir_all(&empty).unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "--out",
        s(&out),
        "preprocess",
        "--annotations",
        s(&ann),
        "--frames-root",
        s(&empty),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(out.join("skipped.jsonl")).unwrap().lines().count(),
        3
    );
}

#[test]
fn scenario_memory_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = preprocess(dir.path());
    let manifest = data.join("manifest.jsonl");
    let o = run_tiny(&[
        "--out",
        s(&dir.path().join("run")),
        "train",
        "--manifest",
        s(&manifest),
        "--scenario",
        "image_history",
        "--memory",
        "tmn",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let o = run(&["--set", "train.lrr=1", "simulate-scenario", "--manifest", s(&manifest)]);
    assert_eq!(code(&o), 4);
}

fn loss_steps(run_dir: &Path) -> Vec<u64> {
    fs::read_to_string(run_dir.join("losses.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect()
}

#[test]
fn train_resume_generate_manipulate() {
    let dir = tempfile::tempdir().unwrap();
    let data = preprocess(dir.path());
    let manifest = data.join("manifest.jsonl");
    let run_dir = dir.path().join("run");
    let o = run_tiny(&["--seed", "5", "--out", s(&run_dir), "train", "--manifest", s(&manifest)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(loss_steps(&run_dir), vec![1, 2, 3]);
    assert!(run_dir.join("checkpoints/step-0000002/state.json").exists());
    assert!(run_dir.join("checkpoints/step-0000003/optimizer.safetensors").exists());
    assert!(run_dir.join("config.toml").exists());

    let o = run_tiny(&[
        "--seed",
        "5",
        "--out",
        s(&run_dir),
        "--set",
        "train.max_steps=5",
        "train",
        "--manifest",
        s(&manifest),
        "--resume",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(loss_steps(&run_dir), vec![1, 2, 3, 4, 5]);

    let generate = |out: &Path| {
        run_tiny(&[
            "--seed",
            "9",
            "--out",
            s(out),
            "generate",
            "--checkpoint",
            s(&run_dir),
            "--manifest",
            s(&manifest),
        ])
    };
    let (g1, g2) = (dir.path().join("g1"), dir.path().join("g2"));
    for g in [&g1, &g2] {
        let o = generate(g);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for (id, n) in [("vid0", 4), ("vid1", 3)] {
        let files = fs::read_dir(g1.join("gen").join(id)).unwrap().count();
        assert_eq!(files, n);
        for k in 1..=n {
            let name = format!("gen/{id}/{k}.png");
            assert_eq!(fs::read(g1.join(&name)).unwrap(), fs::read(g2.join(&name)).unwrap());
        }
    }
    assert!(
        !g1.join("gen/vid2").exists(),
        "validation recipe generated from the train split"
    );

    let o = run_tiny(&[
        "--out",
        s(&dir.path().join("bad")),
        "generate",
        "--checkpoint",
        s(&run_dir),
        "--manifest",
        s(&manifest),
        "--scenario",
        "image_history",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let edited = dir.path().join("edited");
    let o = run_tiny(&[
        "--out",
        s(&edited),
        "manipulate",
        "--checkpoint",
        s(&run_dir),
        "--manifest",
        s(&manifest),
        "--recipe",
        "vid0",
        "--edit",
        "3:bake->boil",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("vid0 step 3: boil the omelette"));
    let recipe: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(edited.join("gen/vid0/recipe.json")).unwrap()).unwrap();
    assert_eq!(recipe["steps"][2]["text"], "boil the omelette");
    assert_eq!(
        fs::read_dir(edited.join("gen/vid0"))
            .unwrap()
            .filter(|e| { e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png") })
            .count(),
        4
    );
}

/// Avg-PCon by direct loops over the toy encoder's embeddings.
fn oracle_pcon(recipes: &[(Vec<String>, Vec<RgbImage>)], enc: &ToyEncoder) -> f64 {
    let clip = |a: &[f32], b: &[f32]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        100.0 * (dot / (na * nb)).max(0.0)
    };
    let mut total = 0.0;
    for (texts, images) in recipes {
        let t: Vec<Vec<f32>> = texts.iter().map(|x| enc.encode_text(x).unwrap()).collect();
        let v: Vec<Vec<f32>> = images.iter().map(|x| enc.encode_image(x).unwrap()).collect();
        let n = t.len();
        let mut p = 0.0;
        for i in 0..n {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let w = clip(&t[i], &t[j]);
                num += w * clip(&v[i], &t[j]);
                den += w;
            }
            if den == 0.0 {
                // Every text similarity clamped to zero: uniform weights.
                let sum: f64 = (0..n).filter(|&j| j != i).map(|j| clip(&v[i], &t[j])).sum();
                p += sum / (n - 1) as f64;
            } else {
                p += num / den;
            }
        }
        total += p / n as f64;
    }
    total / recipes.len() as f64
}

#[test]
fn evaluate_ground_truth_tree() {
    let dir = tempfile::tempdir().unwrap();
    let data = preprocess(dir.path());
    let manifest = data.join("manifest.jsonl");
    let out = dir.path().join("eval");
    let o = run(&[
        "--out",
        s(&out),
        "evaluate",
        "--manifest",
        s(&manifest),
        "--gen",
        s(&data.join("images")),
        "--by-history-length",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["fid"]["fid"].as_f64().unwrap().abs() <= 1e-6);
    let buckets: Vec<&str> = report["by_history_length"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["history"].as_str().unwrap())
        .collect();
    assert_eq!(buckets, vec!["0", "1", "2", "3"]);

    let enc = ToyEncoder::new(0);
    let recipes: Vec<(Vec<String>, Vec<RgbImage>)> = STEPS[..2]
        .iter()
        .enumerate()
        .map(|(v, steps)| {
            let texts = steps.iter().map(|t| t.to_string()).collect();
            let images = (1..=steps.len())
                .map(|k| {
                    image::open(data.join(format!("images/vid{v}/{k}.png")))
                        .unwrap()
                        .to_rgb8()
                })
                .collect();
            (texts, images)
        })
        .collect();
    let expected = oracle_pcon(&recipes, &enc);
    let got = report["consistency"]["avg_pcon"].as_f64().unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");

    let gen = dir.path().join("partial");
    for (v, n) in [(0, 4), (1, 3)] {
        fs::create_dir_all(gen.join(format!("vid{v}"))).unwrap();
        for k in 1..=n {
            let rel = format!("vid{v}/{k}.png");
            fs::copy(data.join("images").join(&rel), gen.join(&rel)).unwrap();
        }
    }
    fs::remove_file(gen.join("vid1/2.png")).unwrap();
    let o = run(&[
        "--out",
        s(&out),
        "evaluate",
        "--manifest",
        s(&manifest),
        "--gen",
        s(&gen),
    ]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn simulate_multimodal_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = preprocess(dir.path());
    let out = dir.path().join("sim");
    let o = run(&[
        "--out",
        s(&out),
        "--set",
        "memory.kind=mmn",
        "simulate-scenario",
        "--manifest",
        s(&data.join("manifest.jsonl")),
        "--scenario",
        "multimodal",
        "--p",
        "0.5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("vid0: 2 text, 2 image"), "{text}");
    assert!(text.contains("vid1: 1 text, 2 image"), "{text}");
    assert_eq!(
        fs::read_to_string(out.join("scenario.jsonl")).unwrap().lines().count(),
        2
    );
}
