//! Synthetic workload generator.
//!
//! Jobs are drawn as a mix of static (fixed size, no actions), malleable
//! (resizable by the system) and evolving (issuing their own GROW/SHRINK at
//! phase boundaries).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::Placement;
use crate::scheduler::{Policy, PolicyName};

use super::scenario::{Action, ClusterSpec, JobSpec, Phase, Scenario};

const SERIAL_FRACTIONS: [f64; 5] = [0.0, 0.02, 0.05, 0.1, 0.25];

/// Deterministic scenario with `jobs` jobs drawn from `seed`.
pub fn generate(jobs: usize, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = rng.random_range(1..=4u32);
    let slots_per_node = rng.random_range(2..=8u32);
    let total = nodes * slots_per_node;
    let mem_per_node = rng.random_bool(0.3).then_some(4096);
    let cluster = ClusterSpec {
        nodes,
        slots_per_node,
        mem_per_node,
        launch_latency: rng.random_range(0..=3),
        term_latency: rng.random_range(0..=2),
        placement: if rng.random_bool(0.5) {
            Placement::Pack
        } else {
            Placement::Spread
        },
        launch_jitter: if rng.random_bool(0.25) { 2 } else { 0 },
    };
    let mut policy = Policy::new(match rng.random_range(0..3) {
        0 => PolicyName::FifoStrict,
        1 => PolicyName::GrowWhenIdle,
        _ => PolicyName::FairShareDelta,
    });
    policy.tick_interval = rng.random_range(1..=2);
    policy.max_defer_ticks = 20;
    policy.allow_system_shrink = rng.random_bool(0.8);
    policy.dynamic_ops = rng.random_bool(0.9);

    let mut arrival = 0;
    let jobs = (0..jobs)
        .map(|i| {
            arrival += rng.random_range(0..=8);
            let initial = rng.random_range(1..=total.clamp(1, 6).min(total));
            let serial = SERIAL_FRACTIONS[rng.random_range(0..SERIAL_FRACTIONS.len())];
            let mem = if mem_per_node.is_some() {
                let fits = (16 / slots_per_node).max(1);
                format!(";mem_per_process={}", 256 * rng.random_range(1..=fits))
            } else {
                String::new()
            };
            let kind = rng.random_range(0..3);
            let max_delta = rng.random_range(1..=4);
            let mut phases = Vec::new();
            let n_phases = rng.random_range(1..=3);
            for _ in 0..n_phases {
                let work = f64::from(rng.random_range(2..=30u32));
                let mut actions = Vec::new();
                if kind == 2 {
                    let d = rng.random_range(1..=max_delta.min(2));
                    let col = format!("num_delta={d}");
                    actions.push(match rng.random_range(0..4) {
                        0 | 1 => Action::Grow { col },
                        2 => Action::Shrink { col },
                        _ => Action::Add { col },
                    });
                }
                phases.push(Phase { work, actions });
            }
            JobSpec {
                id: format!("j{i}"),
                arrival_tick: arrival,
                initial_procs: initial,
                min_procs: (kind == 1).then_some(1),
                max_procs: None,
                malleable: kind == 1,
                urgent: rng.random_bool(0.1),
                col_defaults: format!("amdahl_serial_fraction={serial};max_delta={max_delta}{mem}"),
                phases,
            }
        })
        .collect();
    Scenario {
        seed,
        horizon: 2000,
        cluster,
        policy,
        jobs,
    }
}
