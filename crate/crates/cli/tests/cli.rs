use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lesion_core::config::derive_seed;
use lesion_core::metrics::{attribute_score, AttributePooling};
use lesion_core::pipeline::attribute_masks_from_scores;
use lesion_core::superpixel::{slic_segment, PruneRule, SlicParams};
use lesion_core::synth::{generate_corpus, noisy_oracle, superpixel_truth, SynthConfig};
use serde_json::Value;

fn lesion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesion")).args(args).output().expect("binary runs")
}

/// Runs a command that must succeed and returns its JSON report.
fn report(args: &[&str]) -> Value {
    let out = lesion(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1, "one report line expected: {stdout}");
    serde_json::from_str(&stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) -> Value {
    report(&["synth", "--out", s(dir), "--n", &n.to_string(), "--seed", &seed.to_string()])
}

#[test]
fn eval_seg_on_identical_directories_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    synth(&corpus, 8, 1);
    let masks = corpus.join("masks");
    let r = report(&["eval-seg", "--pred", s(&masks), "--gt", s(&masks)]);
    assert_eq!(r["mean_threshold_jaccard"], 1.0);
    assert_eq!(r["mean_jaccard"], 1.0);
    assert_eq!(r["images"], 8);
}

#[test]
fn split_with_same_seed_writes_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    synth(&corpus, 40, 2);
    let manifest = corpus.join("manifest.csv");
    let (a, b, c) = (tmp.path().join("a.txt"), tmp.path().join("b.txt"), tmp.path().join("c.txt"));
    for out in [&a, &b] {
        report(&["split", "--manifest", s(&manifest), "--seed", "7", "--out", s(out)]);
    }
    report(&["split", "--manifest", s(&manifest), "--seed", "8", "--out", s(&c)]);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_ne!(text, fs::read_to_string(&c).unwrap());
    assert!(text.starts_with("# seed=7\n"));
    assert!(text.contains("# config_hash="));
}

#[test]
fn attribute_pipeline_matches_library_composition() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus_dir = tmp.path().join("c");
    let scores = tmp.path().join("scores.csv");
    report(&[
        "synth", "--out", s(&corpus_dir), "--n", "24", "--seed", "5", "--attribute-scores", s(&scores),
    ]);
    fs::write(tmp.path().join("oracle.json"), r#"{"kind": "file_import", "predictions": "scores.csv"}"#).unwrap();
    let manifest = corpus_dir.join("manifest.csv");
    let pred_dir = tmp.path().join("attr");
    report(&[
        "compose-attr",
        "--manifest",
        s(&manifest),
        "--model",
        s(&tmp.path().join("oracle.json")),
        "--out",
        s(&pred_dir),
        "--seed",
        "5",
    ]);
    let cli = report(&["eval-attr", "--pred", s(&pred_dir), "--gt", s(&corpus_dir.join("attributes"))]);

    let corpus = generate_corpus(&SynthConfig { n_images: 24, seed: 5, ..SynthConfig::default() });
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for sample in &corpus.samples {
        let sp = slic_segment(&sample.image, SlicParams::default()).unwrap();
        let noisy = noisy_oracle(&superpixel_truth(&sp, &sample.attributes), 0.1, derive_seed(5, &sample.image_id));
        let (_, masks) = attribute_masks_from_scores(&sp, noisy.scores.unwrap(), Some(PruneRule::MinCount(30))).unwrap();
        pred.push(masks);
        gt.push(sample.attributes.clone());
    }
    let library = attribute_score(&pred, &gt, AttributePooling::Pooled).unwrap();
    assert_eq!(cli["attribute_jaccard"].as_f64().unwrap(), library);
}

#[test]
fn usage_and_validation_errors_exit_two() {
    assert_eq!(lesion(&["eval-seg", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(lesion(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(lesion(&["split"]).status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let out = lesion(&["eval-seg", "--pred", s(tmp.path()), "--gt", s(tmp.path()), "--tau", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("tau"));
}

#[test]
fn flags_override_config_file_and_unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    synth(&corpus, 8, 1);
    let masks = corpus.join("masks");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, format!("pred={0}\ngt={0}\ntau=0.9\nseed=11\n", masks.display())).unwrap();
    let from_file = report(&["eval-seg", "--config", s(&cfg)]);
    assert_eq!(from_file["tau"], 0.9);
    assert_eq!(from_file["seed"], 11);
    let overridden = report(&["eval-seg", "--config", s(&cfg), "--tau", "0.7"]);
    assert_eq!(overridden["tau"], 0.7);
    assert_ne!(from_file["config_hash"], overridden["config_hash"]);

    fs::write(&cfg, "typo_key=1\n").unwrap();
    assert_eq!(lesion(&["eval-seg", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn artifacts_record_seed_and_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    let r = synth(&corpus, 8, 4);
    let meta: Value = serde_json::from_str(&fs::read_to_string(corpus.join("run.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 4);
    assert_eq!(meta["config_hash"], r["config_hash"]);

    fs::write(tmp.path().join("seg.json"), r#"{"kind": "color_threshold_segmenter", "threshold": 0.5, "softness": 0.05}"#)
        .unwrap();
    let manifest = corpus.join("manifest.csv");
    let probs = tmp.path().join("probs");
    let seg = tmp.path().join("seg");
    report(&["predict", "--manifest", s(&manifest), "--model", s(&tmp.path().join("seg.json")), "--masks-out", s(&probs)]);
    let pp = report(&["postprocess-seg", "--manifest", s(&manifest), "--masks", s(&probs), "--out", s(&seg), "--seed", "9"]);
    let meta: Value = serde_json::from_str(&fs::read_to_string(seg.join("run.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 9);
    assert_eq!(meta["config_hash"], pp["config_hash"]);
    let eval = report(&["eval-seg", "--pred", s(&seg), "--gt", s(&corpus.join("masks"))]);
    assert!(eval["mean_threshold_jaccard"].as_f64().unwrap() > 0.85);
}

#[test]
fn classification_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    synth(&corpus, 60, 6);
    let manifest = corpus.join("manifest.csv");
    let labels = corpus.join("labels.cfg");
    let splits = tmp.path().join("splits.txt");
    report(&["split", "--manifest", s(&manifest), "--config", s(&labels), "--seed", "6", "--folds", "2", "--out", s(&splits)]);
    let models = tmp.path().join("models");
    let trained = report(&[
        "train-baseline", "--manifest", s(&manifest), "--config", s(&labels), "--splits", s(&splits), "--out", s(&models),
        "--max-epochs", "20",
    ]);
    assert_eq!(trained["models"].as_array().unwrap().len(), 2);
    let mut outputs = Vec::new();
    for k in 1..=2 {
        let out = tmp.path().join(format!("p{k}.csv"));
        report(&[
            "tta", "--manifest", s(&manifest), "--config", s(&labels), "--model",
            s(&models.join(format!("fold{k}.json"))), "--replicas", "4", "--out", s(&out),
        ]);
        outputs.push(out);
    }
    let inputs = format!("{},{}", s(&outputs[0]), s(&outputs[1]));
    let ens = tmp.path().join("ens.csv");
    report(&["ensemble", "--inputs", &inputs, "--out", s(&ens)]);
    let score = report(&["eval-cls", "--manifest", s(&manifest), "--config", s(&labels), "--inputs", s(&ens)]);
    assert!(score["balanced_accuracy"].as_f64().unwrap() > 0.9, "{score}");

    let stacker = tmp.path().join("stacker.json");
    let fit = report(&[
        "stack", "fit", "--manifest", s(&manifest), "--config", s(&labels), "--inputs", &inputs, "--out", s(&stacker),
        "--rounds", "5",
    ]);
    assert!(fit["final_loss"].as_f64().unwrap() <= fit["initial_loss"].as_f64().unwrap());
    let stacked = tmp.path().join("stacked.csv");
    report(&["stack", "predict", "--model", s(&stacker), "--inputs", &inputs, "--out", s(&stacked)]);
    assert!(fs::read_to_string(&stacked).unwrap().contains("stacker"));
}
