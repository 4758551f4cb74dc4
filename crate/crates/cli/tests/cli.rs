//! End-to-end runs of the command-line binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_concept-lattice"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A config small enough for smoke tests: tiny nets, 4 samples per node,
/// one constant epoch plus one decay epoch.
fn tiny_config_json(seed: u64, n3: bool) -> String {
    let (n, names, observed, attrs) = if n3 {
        (3, r#"["shape","style","stripe"]"#, "[0,1,2,4]", r#"["shape","style","stripe"]"#)
    } else {
        (2, r#"["shape","style"]"#, "[0,1,2]", r#"["shape","style"]"#)
    };
    format!(
        r#"{{
  "n_concepts": {n},
  "concept_names": {names},
  "observed": {observed},
  "profile": "desk",
  "dataset": {{
    "kind": "synthetic",
    "image_size": 16,
    "channels": 1,
    "samples_per_node": 4,
    "concept_attrs": {attrs}
  }},
  "generator": {{ "base_filters": 2, "n_residual_blocks": 2 }},
  "discriminator": {{ "base_filters": 2 }},
  "train": {{
    "batch_size": 2,
    "constant_epochs": 1,
    "decay_epochs": 1,
    "seed": {seed},
    "checkpoint_every": 1
  }},
  "eval": {{ "test_samples": 6 }}
}}"#
    )
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

#[test]
fn dump_config_prints_valid_json() {
    let out = run(&["--dump-config"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["n_concepts"], 2);
    assert_eq!(v["train"]["batch_size"], 16);
}

#[test]
fn plan_prints_layers_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n3.json", &tiny_config_json(1, true));
    let out = run(&[
        "plan",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("layer 1: 110, 101, 011"), "{text}");
    assert!(text.contains("layer 2: 111"), "{text}");
    assert!(dir.path().join("run/reports/plan.json").is_file());
    assert!(dir.path().join("run/run_manifest.json").is_file());

    let cfg2 = write_config(dir.path(), "n2.json", &tiny_config_json(1, false));
    let out = run(&["plan", "--config", cfg2.to_str().unwrap(), "--out", dir.path().join("r2").to_str().unwrap()]);
    let text = stdout(&out);
    assert!(text.contains("adversarial: 4"), "{text}");
    assert!(text.contains("distance-2: 6"), "{text}");
    assert!(text.contains("distance-4: 3"), "{text}");
    assert!(text.contains("commutativity: 3"), "{text}");
}

#[test]
fn plan_rejects_untoggled_concept() {
    let dir = tempfile::tempdir().unwrap();
    let json = tiny_config_json(1, false).replace("[0,1,2]", "[0,1]");
    let cfg = write_config(dir.path(), "bad.json", &json);
    let out = run(&["plan", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "single-line error: {err}");
    assert!(err.starts_with("error:"), "{err}");
    assert!(err.contains("unlearnable") || err.contains("toggle"), "{err}");
}

#[test]
fn train_twice_is_bit_identical_and_respects_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &tiny_config_json(7, false));
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let out_c = dir.path().join("c");
    for (out_dir, seed) in [(&out_a, "7"), (&out_b, "7"), (&out_c, "8")] {
        let out = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let bytes = |d: &Path| std::fs::read(d.join("checkpoints/checkpoint_final.ck")).unwrap();
    assert_eq!(bytes(&out_a), bytes(&out_b), "same seed, same bytes");
    assert_ne!(bytes(&out_a), bytes(&out_c), "different seed differs");

    for d in [&out_a, &out_b, &out_c] {
        assert!(d.join("logs/run.csv").is_file());
        assert!(d.join("run_manifest.json").is_file());
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join("run_manifest.json")).unwrap())
                .unwrap();
        let outputs = manifest["outputs"].as_array().unwrap();
        assert!(outputs.iter().any(|v| v.as_str().unwrap().contains("checkpoint_final.ck")));
        assert!(outputs.iter().any(|v| v.as_str().unwrap().contains("run.csv")));
    }
}

#[test]
fn ablation_flag_removes_cyc4_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &tiny_config_json(3, false));
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--no-cyc4",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("logs/run.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(!header.contains("cyc4"), "{header}");
    assert!(header.contains("cyc2"), "{header}");
}

#[test]
fn eval_writes_report_and_panels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &tiny_config_json(5, false));
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = out_dir.join("checkpoints/checkpoint_final.ck");
    let eval_dir = dir.path().join("eval");
    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("joint accuracy"), "{text}");
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(eval_dir.join("reports/eval.json")).unwrap(),
    )
    .unwrap();
    assert!(report["joint_accuracy"].is_number());
    assert_eq!(report["validation_accuracy"], 1.0);
    for panel in ["clockwise", "counterclockwise", "commutative"] {
        assert!(eval_dir.join(format!("images/panel_{panel}.ppm")).is_file(), "{panel}");
    }
}

#[test]
fn eval_rejects_corrupt_checkpoint_without_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ck");
    std::fs::write(&bad, b"CLCKgarbage").unwrap();
    let eval_dir = dir.path().join("eval");
    let out = run(&[
        "eval",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert_eq!(stderr(&out).lines().count(), 1);
    assert!(!eval_dir.join("reports/eval.json").exists(), "no partial report");
}

#[test]
fn augment_exports_four_files_per_input_and_synth_lists_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &tiny_config_json(9, false));
    let out_dir = dir.path().join("run");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = out_dir.join("checkpoints/checkpoint_final.ck");

    // a probe image in the source subdomain
    let probe = dir.path().join("probe.ppm");
    {
        use concept_lattice::data::{sample_subdomain, write_ppm_tensor, AttrKind, GlyphGrid, GlyphSpace};
        let space = GlyphSpace::new(
            GlyphGrid::for_image_size(16, 1),
            vec![AttrKind::Shape, AttrKind::Style],
        );
        let ds = sample_subdomain(&space, 0, 1, 42).unwrap();
        write_ppm_tensor(&probe, &ds.samples[0].0).unwrap();
    }

    let aug_dir = dir.path().join("aug");
    let out = run(&[
        "augment",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        probe.to_str().unwrap(),
        "--out",
        aug_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let images: Vec<_> = std::fs::read_dir(aug_dir.join("images"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    assert_eq!(images.len(), 4, "original + 3 nodes: {images:?}");

    let synth_dir = dir.path().join("synth");
    let out = run(&[
        "synth",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        probe.to_str().unwrap(),
        "--target",
        "11",
        "--out",
        synth_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let listing = std::fs::read_to_string(synth_dir.join("reports/synth_manifest.csv")).unwrap();
    assert_eq!(listing.lines().count(), 3, "header + 2 composition paths: {listing}");
}

#[test]
fn synth_reports_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &tiny_config_json(11, false));
    let out_dir = dir.path().join("run");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = out_dir.join("checkpoints/checkpoint_final.ck");
    let out = run(&[
        "synth",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        "nope_a.ppm",
        "--input",
        "nope_b.ppm",
        "--target",
        "11",
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("nope_a.ppm") && err.contains("nope_b.ppm"), "{err}");
}

#[test]
fn synth_across_shared_experiments_yields_twelve_paths() {
    let dir = tempfile::tempdir().unwrap();
    // two init-only experiments sharing the style concept
    let mk = |name: &str, names: &str, attrs: &str, seed: u64| -> PathBuf {
        let json = tiny_config_json(seed, false)
            .replace(r#"["shape","style"]"#, names)
            .replace(
                r#""concept_attrs": ["shape","style"]"#,
                &format!(r#""concept_attrs": {attrs}"#),
            )
            .replace("\"constant_epochs\": 1", "\"constant_epochs\": 0")
            .replace("\"decay_epochs\": 1", "\"decay_epochs\": 0");
        let cfg = write_config(dir.path(), &format!("{name}.json"), &json);
        let out_dir = dir.path().join(name);
        let out =
            run(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        out_dir.join("checkpoints/checkpoint_final.ck")
    };
    let a = mk("a", r#"["shape","style"]"#, r#"["shape","style"]"#, 1);
    let b = mk("b", r#"["style","stripe"]"#, r#"["style","stripe"]"#, 2);

    let probe = dir.path().join("probe.ppm");
    {
        use concept_lattice::data::{
            sample_subdomain, write_ppm_tensor, AttrKind, GlyphGrid, GlyphSpace,
        };
        let space = GlyphSpace::new(
            GlyphGrid::for_image_size(16, 1),
            vec![AttrKind::Shape, AttrKind::Style, AttrKind::Stripe],
        );
        let ds = sample_subdomain(&space, 0, 1, 3).unwrap();
        write_ppm_tensor(&probe, &ds.samples[0].0).unwrap();
    }
    let synth_dir = dir.path().join("synth");
    let out = run(&[
        "synth",
        "--checkpoint",
        a.to_str().unwrap(),
        "--checkpoint",
        b.to_str().unwrap(),
        "--shared",
        "style",
        "--input",
        probe.to_str().unwrap(),
        "--target",
        "111",
        "--out",
        synth_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let images: Vec<_> = std::fs::read_dir(synth_dir.join("images"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(images.len(), 12, "2 x 3! candidate images per input: {images:?}");
}

#[test]
fn baseline_mode_writes_two_unit_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &tiny_config_json(13, false));
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "baseline",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out_dir.join("checkpoints/unit_a.ck").is_file());
    assert!(out_dir.join("checkpoints/unit_b.ck").is_file());
    assert!(out_dir.join("logs/unit_a.csv").is_file());
}
