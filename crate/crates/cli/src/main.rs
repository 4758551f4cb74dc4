//! Command-line entry point: plan, train, eval, synth, augment.
//!
//! One JSON config file describes a run; flags override file values
//! (seed, profile, mode, ablations). Every command writes its artifacts
//! under the output directory (`checkpoints/`, `logs/`, `reports/`,
//! `images/`) plus a `run_manifest.json` listing them, exits 0 on
//! success, and prints a single-line `error: ...` otherwise. All
//! randomness flows from the seed; `CONCEPT_LATTICE_THREADS` caps
//! parallelism.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use concept_lattice::data::read_ppm;
use concept_lattice::eval::{
    enumerate_paths, evaluate_checkpoint, export_augmented, export_panels, synthesize, MappingSet,
};
use concept_lattice::graph::{node_label, plan_inference, NodeId};
use concept_lattice::nn::Profile;
use concept_lattice::tensor::Tensor;
use concept_lattice::trainer::{
    train_baseline, train_observed, Checkpoint, TrainConfig, TrainError, TrainMode,
};

#[derive(Parser)]
#[command(name = "concept-lattice", version, about = "Compositional concept learning over a subdomain lattice")]
struct Cli {
    /// Print the default run config as JSON and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Conceptgan,
    Baseline,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config profile.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Print the inference plan and constraint counts for a config.
    Plan {
        #[command(flatten)]
        common: Common,
    },
    /// Train from a config; writes checkpoints, the run log, and a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Ablation: drop the distance-4 cycle terms.
        #[arg(long)]
        no_cyc4: bool,
        /// Ablation: drop the commutativity terms.
        #[arg(long)]
        no_comm: bool,
        /// Override the training mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Quantitative report and qualitative panels for a checkpoint.
    Eval {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Synthesize every composition path from source to target.
    Synth {
        /// One or more checkpoints (repeat the flag).
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Concept names shared between checkpoints.
        #[arg(long)]
        shared: Vec<String>,
        /// Input images (PPM/PGM).
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Target node label, e.g. "11" or "111".
        #[arg(long)]
        target: String,
        /// Source node label (defaults to all zeros).
        #[arg(long)]
        source: Option<String>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Export originals plus one synthesized variant per lattice node.
    Augment {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        shared: Vec<String>,
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Target node labels; defaults to every node except the source.
        #[arg(long)]
        nodes: Vec<String>,
        #[arg(long)]
        source: Option<String>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    concept_lattice::init_parallelism();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.dump_config {
        let cfg = TrainConfig::desk_default(7);
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    match cli.command {
        None => bail!("no command given (try --help)"),
        Some(Command::Plan { common }) => cmd_plan(common),
        Some(Command::Train { common, no_cyc4, no_comm, mode }) => {
            cmd_train(common, no_cyc4, no_comm, mode)
        }
        Some(Command::Eval { checkpoint, out }) => cmd_eval(&checkpoint, &out),
        Some(Command::Synth { checkpoint, shared, input, target, source, out }) => {
            cmd_synth(&checkpoint, &shared, &input, &target, source.as_deref(), &out)
        }
        Some(Command::Augment { checkpoint, shared, input, nodes, source, out }) => {
            cmd_augment(&checkpoint, &shared, &input, &nodes, source.as_deref(), &out)
        }
    }
}

// ── shared plumbing ────────────────────────────────────────────────────

struct RunManifest {
    command: String,
    config_path: Option<PathBuf>,
    config_hash: Option<String>,
    seed: Option<u64>,
    out: PathBuf,
    outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, out: &Path) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config_path: None,
            config_hash: None,
            seed: None,
            out: out.to_path_buf(),
            outputs: Vec::new(),
        }
    }

    fn add(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.out).unwrap_or(path);
        self.outputs.push(rel.to_string_lossy().into_owned());
    }

    fn write(&mut self) -> Result<()> {
        self.outputs.sort();
        let json = serde_json::json!({
            "command": self.command,
            "config_path": self.config_path,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "outputs": self.outputs,
        });
        let path = self.out.join("run_manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&json)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    let mut cfg = TrainConfig::from_json(&text)
        .with_context(|| format!("config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(profile) = common.profile {
        cfg.profile = match profile {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_layout(out: &Path) -> Result<()> {
    for sub in ["checkpoints", "logs", "reports", "images"] {
        std::fs::create_dir_all(out.join(sub))
            .with_context(|| format!("creating {}", out.join(sub).display()))?;
    }
    Ok(())
}

fn parse_label(label: &str, n: usize) -> Result<NodeId> {
    if label.len() != n || !label.chars().all(|c| c == '0' || c == '1') {
        bail!("node label '{label}' must be {n} binary digits (bit for concept 1 first)");
    }
    Ok(label
        .chars()
        .enumerate()
        .fold(0, |acc, (k, c)| if c == '1' { acc | 1 << k } else { acc }))
}

fn load_inputs(paths: &[PathBuf]) -> Result<Vec<(String, Tensor)>> {
    let missing: Vec<PathBuf> =
        paths.iter().filter(|p| !p.is_file()).cloned().collect();
    if !missing.is_empty() {
        bail!(
            "missing input files: {}",
            missing.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
        );
    }
    let mut out = Vec::new();
    for p in paths {
        let (data, c, h, w) = read_ppm(p)?;
        let name = p
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "input".into());
        out.push((name, Tensor::new(data, &[c, h, w])?));
    }
    Ok(out)
}

fn load_mapping_set(paths: &[PathBuf], shared: &[String]) -> Result<MappingSet> {
    let mut ckpts = Vec::new();
    for p in paths {
        ckpts.push(Checkpoint::load(p).with_context(|| format!("checkpoint {}", p.display()))?);
    }
    let refs: Vec<&Checkpoint> = ckpts.iter().collect();
    Ok(MappingSet::compose(&refs, shared)?)
}

// ── commands ───────────────────────────────────────────────────────────

fn cmd_plan(common: Common) -> Result<()> {
    let cfg = load_config(&common)?;
    let graph = cfg.graph()?;
    let plan = plan_inference(&graph);
    let n = cfg.n_concepts;

    let names = |nodes: &BTreeSet<NodeId>| -> String {
        nodes.iter().map(|&v| node_label(v, n)).collect::<Vec<_>>().join(", ")
    };
    println!("concepts: {}", cfg.concept_names.join(", "));
    println!("observed: {}", names(graph.observed()));
    if plan.layers.is_empty() {
        println!("layers: none (every node observed or unreachable)");
    }
    for (i, layer) in plan.layers.iter().enumerate() {
        println!("layer {}: {}", i + 1, names(layer));
    }
    let (adv, cyc2, cyc4, comm) = plan.constraints.counts();
    println!("adversarial: {adv}");
    println!("distance-2: {cyc2}");
    println!("distance-4: {cyc4}");
    println!("commutativity: {comm}");
    println!("identity: {}", plan.constraints.identity.len());

    std::fs::create_dir_all(common.out.join("reports"))?;
    let mut manifest = RunManifest::new("plan", &common.out);
    manifest.config_path = Some(common.config.clone());
    manifest.config_hash = Some(cfg.hash_hex()?);
    manifest.seed = Some(cfg.train.seed);
    let path = common.out.join("reports/plan.json");
    std::fs::write(&path, serde_json::to_string_pretty(&plan)?)?;
    manifest.add(&path);
    manifest.write()?;
    Ok(())
}

fn cmd_train(common: Common, no_cyc4: bool, no_comm: bool, mode: Option<ModeArg>) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if no_cyc4 {
        cfg.weights.disable_cyc4 = true;
    }
    if no_comm {
        cfg.weights.disable_comm = true;
    }
    if let Some(m) = mode {
        cfg.train.mode = match m {
            ModeArg::Conceptgan => TrainMode::Conceptgan,
            ModeArg::Baseline => TrainMode::BaselineCyclegan,
        };
    }
    cfg.validate()?;
    ensure_layout(&common.out)?;
    let mut manifest = RunManifest::new("train", &common.out);
    manifest.config_path = Some(common.config.clone());
    manifest.config_hash = Some(cfg.hash_hex()?);
    manifest.seed = Some(cfg.train.seed);

    if cfg.train.mode == TrainMode::BaselineCyclegan {
        let (a, b) = train_baseline(&cfg)?;
        for (tag, output) in [("unit_a", a), ("unit_b", b)] {
            let ck = common.out.join(format!("checkpoints/{tag}.ck"));
            output.checkpoint.save(&ck)?;
            manifest.add(&ck);
            let log = common.out.join(format!("logs/{tag}.csv"));
            std::fs::write(&log, output.runlog.to_csv())?;
            manifest.add(&log);
            println!("{tag}: checkpoint {} (digest {})", ck.display(), &output.checkpoint.digest()[..12]);
        }
        manifest.write()?;
        return Ok(());
    }

    let ck_dir = common.out.join("checkpoints");
    let mut cadence_files: Vec<PathBuf> = Vec::new();
    let result = train_observed(&cfg, &mut |epoch, ckpt| {
        let path = ck_dir.join(format!("checkpoint_epoch{epoch:04}.ck"));
        std::fs::write(&path, ckpt.to_bytes())?;
        cadence_files.push(path);
        Ok(())
    });
    let output = match result {
        Ok(o) => o,
        Err(TrainError::NumericAbort { step, last_good }) => {
            let path = ck_dir.join("checkpoint_lastgood.ck");
            last_good.save(&path)?;
            bail!(
                "numeric failure at step {step}; last-good checkpoint saved to {}",
                path.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    // the final cadence callback already wrote the last file; keep a
    // stable name for downstream commands
    let final_path = ck_dir.join("checkpoint_final.ck");
    output.checkpoint.save(&final_path)?;
    for f in &cadence_files {
        manifest.add(f);
    }
    manifest.add(&final_path);
    let log = common.out.join("logs/run.csv");
    std::fs::write(&log, output.runlog.to_csv())?;
    manifest.add(&log);
    let epochs = common.out.join("logs/epochs.csv");
    std::fs::write(&epochs, output.runlog.epochs_to_csv())?;
    manifest.add(&epochs);
    manifest.write()?;
    println!(
        "trained {} epochs, {} steps; checkpoint digest {}",
        cfg.train.constant_epochs + cfg.train.decay_epochs,
        output.runlog.rows.len(),
        &output.checkpoint.digest()[..12]
    );
    println!("checkpoint: {}", final_path.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, out: &Path) -> Result<()> {
    let ckpt =
        Checkpoint::load(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let report = evaluate_checkpoint(&ckpt)?;
    ensure_layout(out)?;
    let mut manifest = RunManifest::new("eval", out);
    manifest.config_hash = Some(report.config_hash.clone());

    let report_path = out.join("reports/eval.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    manifest.add(&report_path);

    // qualitative panels over a small test batch
    let cfg = TrainConfig::from_json(&ckpt.config_json)?;
    if cfg.n_concepts == 2 {
        let space = cfg.glyph_space().ok_or_else(|| anyhow!("panels need a synthetic dataset"))?;
        let ds = concept_lattice::data::sample_subdomain(
            &space,
            0,
            5,
            concept_lattice::eval::test_seed(cfg.train.seed),
        )?;
        let set = MappingSet::from_checkpoint(&ckpt)?;
        for p in export_panels(&set, &ds.full_batch()?, &out.join("images"))? {
            manifest.add(&p);
        }
    }
    manifest.write()?;
    println!("validation accuracy: {:.3}", report.validation_accuracy);
    for (name, acc) in &report.per_concept_accuracy {
        println!("{name} accuracy at {}: {:.3}", report.target_node, acc);
    }
    println!("joint accuracy at {}: {:.3}", report.target_node, report.joint_accuracy);
    println!("report: {}", report_path.display());
    Ok(())
}

fn cmd_synth(
    checkpoints: &[PathBuf],
    shared: &[String],
    inputs: &[PathBuf],
    target: &str,
    source: Option<&str>,
    out: &Path,
) -> Result<()> {
    let set = load_mapping_set(checkpoints, shared)?;
    let n = set.concepts.len();
    let target = parse_label(target, n)?;
    let source = source.map(|s| parse_label(s, n)).transpose()?.unwrap_or(0);
    let probes = load_inputs(inputs)?;
    let paths = enumerate_paths(&set, source, target)?;

    ensure_layout(out)?;
    let mut manifest = RunManifest::new("synth", out);
    let img_dir = out.join("images");
    let mut rows = vec!["file,source,path".to_string()];
    for (name, image) in &probes {
        let stem = name.trim_end_matches(".ppm").trim_end_matches(".pgm");
        let batch = image.reshape(
            &[1, image.shape()[0], image.shape()[1], image.shape()[2]],
            &concept_lattice::tensor::Tape::new(),
        )?;
        for (i, path) in paths.iter().enumerate() {
            let result = synthesize(&set, &batch, path)?;
            let file = img_dir.join(format!("{stem}_{}_p{i:02}.ppm", node_label(target, n)));
            concept_lattice::data::write_ppm_tensor(&file, &result)?;
            manifest.add(&file);
            let desc: Vec<String> = path.iter().map(|s| s.name(&set)).collect();
            rows.push(format!(
                "{},{},{}",
                file.file_name().unwrap().to_string_lossy(),
                name,
                desc.join(">")
            ));
        }
    }
    let listing = out.join("reports/synth_manifest.csv");
    std::fs::write(&listing, rows.join("\n") + "\n")?;
    manifest.add(&listing);
    manifest.write()?;
    println!(
        "wrote {} images per input ({} paths {} -> {})",
        paths.len(),
        paths.len(),
        node_label(source, n),
        node_label(target, n)
    );
    Ok(())
}

fn cmd_augment(
    checkpoints: &[PathBuf],
    shared: &[String],
    inputs: &[PathBuf],
    nodes: &[String],
    source: Option<&str>,
    out: &Path,
) -> Result<()> {
    let set = load_mapping_set(checkpoints, shared)?;
    let n = set.concepts.len();
    let source = source.map(|s| parse_label(s, n)).transpose()?.unwrap_or(0);
    let node_ids: Vec<NodeId> = if nodes.is_empty() {
        (0..1usize << n).filter(|&v| v != source).collect()
    } else {
        nodes.iter().map(|s| parse_label(s, n)).collect::<Result<_>>()?
    };
    let probes = load_inputs(inputs)?;
    ensure_layout(out)?;
    let mut manifest = RunManifest::new("augment", out);
    let records = export_augmented(&set, &probes, source, &node_ids, &out.join("images"))?;
    for r in &records {
        manifest.add(&out.join("images").join(&r.file));
    }
    manifest.add(&out.join("images/manifest.csv"));
    manifest.write()?;
    println!(
        "augmented {} inputs into {} files each",
        probes.len(),
        records.len() / probes.len().max(1)
    );
    Ok(())
}
