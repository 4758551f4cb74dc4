use concept_lattice::eval::evaluate_checkpoint;
use concept_lattice::trainer::{train, TrainConfig, DatasetSpec, GeneratorNet, DiscriminatorNet};
use std::time::Instant;

fn main() {
    concept_lattice::init_parallelism();
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let samples: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(128);
    let base: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2e-4);

    let mut cfg = TrainConfig::desk_default(seed);
    cfg.generator = GeneratorNet { base_filters: base, n_residual_blocks: 2 };
    cfg.discriminator = DiscriminatorNet { base_filters: base };
    if let DatasetSpec::Synthetic { samples_per_node, .. } = &mut cfg.dataset {
        *samples_per_node = samples;
    }
    cfg.train.constant_epochs = epochs;
    cfg.train.decay_epochs = epochs;
    cfg.train.base_lr = lr;
    cfg.train.checkpoint_every = 0;
    cfg.eval.test_samples = 200;

    let t0 = Instant::now();
    let out = train(&cfg).expect("train");
    let train_secs = t0.elapsed().as_secs_f64();
    let steps = out.runlog.rows.len();
    let report = evaluate_checkpoint(&out.checkpoint).expect("eval");
    let first = out.runlog.rows.first().map(|r| r[r.len()-2]).unwrap_or(f64::NAN);
    let last = out.runlog.rows.last().map(|r| r[r.len()-2]).unwrap_or(f64::NAN);
    println!(
        "seed={seed} S={samples} F={base} lr={lr} epochs={}+{} steps={steps} time={train_secs:.1}s ({:.2}s/step) joint={:.3} per={:?} p50res={:.3} gtotal {first:.2}->{last:.2}",
        epochs, epochs, train_secs / steps as f64, report.joint_accuracy,
        report.per_concept_accuracy, report.realism_residuals.p50
    );
}
