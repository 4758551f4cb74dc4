//! Joint learning of composable image concepts over a subdomain lattice.
//!
//! Each binary concept (e.g. shape, style) is modeled by a forward/inverse
//! generator pair; concepts span a hypercube of subdomains in which some
//! nodes have training data and some do not. Generators are trained
//! adversarially under distance-2/distance-4 cycle consistency and
//! commutativity constraints so that composed mappings synthesize plausible
//! samples in subdomains with no training data at all.
//!
//! Crate layout:
//! - [`tensor`]: dense fp64 tensors with reverse-mode autodiff on a tape
//! - [`nn`]: generator/discriminator networks, Adam, the lr schedule
//! - [`graph`]: the concept hypercube, inference planning, constraint
//!   enumeration
//! - [`data`]: procedural glyph subdomains with an exact attribute oracle,
//!   plus attribute-CSV ingestion for external image datasets
//! - [`losses`]: the adversarial / cycle / commutative / identity loss
//!   families and their weighted total
//! - [`trainer`]: alternating minimax training, checkpointing, the
//!   two-unit baseline pipeline
//! - [`eval`]: oracle-based evaluation, zero-shot synthesis, concept
//!   composition across experiments, augmentation export
//! - [`fdcheck`]: finite-difference gradient checking harness

pub mod data;
pub mod eval;
pub mod fdcheck;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod trainer;

use std::sync::Once;

/// Environment variable capping internal parallelism.
pub const THREADS_ENV: &str = "CONCEPT_LATTICE_THREADS";

static INIT_THREADS: Once = Once::new();

/// Configure the global worker pool from `CONCEPT_LATTICE_THREADS`.
///
/// Idempotent; later calls are no-ops. When the variable is unset or
/// unparsable the default pool size is kept. Results are bit-identical
/// regardless of the thread count.
pub fn init_parallelism() {
    INIT_THREADS.call_once(|| {
        if let Ok(v) = std::env::var(THREADS_ENV) {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}
