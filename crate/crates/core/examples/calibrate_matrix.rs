use concept_lattice::data::{sample_subdomain, AttributeOracle};
use concept_lattice::eval::{eval_joint_accuracy, evaluate_checkpoint, test_seed, MappingSet};
use concept_lattice::trainer::{train, train_baseline, DatasetSpec, TrainConfig};
use std::time::Instant;

fn main() {
    concept_lattice::init_parallelism();
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(11);
    let samples: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(128);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let gen_f: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
    let disc_f: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(8);
    let with_ablations: bool = args.get(6).map(|s| s == "abl").unwrap_or(false);

    let mut cfg = TrainConfig::desk_default(seed);
    if let DatasetSpec::Synthetic { samples_per_node, .. } = &mut cfg.dataset {
        *samples_per_node = samples;
    }
    cfg.train.base_lr = lr;
    cfg.generator.base_filters = gen_f;
    cfg.discriminator.base_filters = disc_f;
    cfg.eval.test_samples = 300;

    let t0 = Instant::now();
    let full = train(&cfg).expect("full");
    let rep = evaluate_checkpoint(&full.checkpoint).expect("eval");
    let cyc4_full: f64 = rep.cycles.cyc4.values().sum::<f64>() / rep.cycles.cyc4.len() as f64;
    println!("[{:.0}s] full     seed={seed} joint={:.3} per={:?} cyc4res={:.3}", t0.elapsed().as_secs_f64(), rep.joint_accuracy, rep.per_concept_accuracy, cyc4_full);

    let t1 = Instant::now();
    let (ua, ub) = train_baseline(&cfg).expect("baseline");
    let set = MappingSet::compose(&[&ua.checkpoint, &ub.checkpoint], &[]).expect("compose");
    let space = cfg.glyph_space().unwrap();
    let oracle = AttributeOracle::build(&space).unwrap();
    let test = sample_subdomain(&space, 0, 300, test_seed(seed)).unwrap();
    let acc = eval_joint_accuracy(&set, &oracle, &test.full_batch().unwrap(), 0, 3).unwrap();
    println!("[{:.0}s] baseline seed={seed} joint={:.3} per={:?}", t1.elapsed().as_secs_f64(), acc.joint, acc.per_concept);

    if !with_ablations { println!("total {:.0}s", t0.elapsed().as_secs_f64()); return; }
    let t2 = Instant::now();
    let mut nc = cfg.clone(); nc.weights.disable_comm = true;
    let rep_nc = evaluate_checkpoint(&train(&nc).expect("nocomm").checkpoint).expect("eval");
    println!("[{:.0}s] no-comm  seed={seed} joint={:.3}", t2.elapsed().as_secs_f64(), rep_nc.joint_accuracy);

    let t3 = Instant::now();
    let mut n4 = cfg.clone(); n4.weights.disable_cyc4 = true;
    let rep_n4 = evaluate_checkpoint(&train(&n4).expect("nocyc4").checkpoint).expect("eval");
    let cyc4_abl: f64 = rep_n4.cycles.cyc4.values().sum::<f64>() / rep_n4.cycles.cyc4.len() as f64;
    println!("[{:.0}s] no-cyc4  seed={seed} joint={:.3} cyc4res={:.3}", t3.elapsed().as_secs_f64(), rep_n4.joint_accuracy, cyc4_abl);
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
