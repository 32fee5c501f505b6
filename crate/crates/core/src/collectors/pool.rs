//! Seeded synthetic job pools with planted anomalies.
//!
//! The generator knows which jobs it made wasteful or NUMA-imbalanced, and
//! which ones a size/queue filter must remove, so it doubles as the oracle
//! for flag recovery and pool-level idle aggregation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synthetic::{SyntheticJob, SyntheticScenario};
use super::Arch;

pub const POOL_EPOCH: u64 = 1_325_721_600;

#[derive(Debug, Clone)]
pub struct PoolSpec {
    pub seed: u64,
    pub nodes: u32,
    pub jobs: usize,
    pub planted_waste: usize,
    pub planted_imbalance: usize,
    pub cores_per_node: u32,
    pub sockets_per_node: u32,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            seed: 2012,
            nodes: 8,
            jobs: 200,
            planted_waste: 12,
            planted_imbalance: 9,
            cores_per_node: 16,
            sockets_per_node: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedPool {
    pub scenario: SyntheticScenario,
    pub waste: BTreeSet<String>,
    pub imbalance: BTreeSet<String>,
    /// Anomalous-looking jobs that are either under one node-hour or in a
    /// non-production queue.
    pub filtered_decoys: BTreeSet<String>,
    pub production_queues: BTreeSet<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Class {
    Waste,
    Imbalance,
    SmallWaste,
    SmallImbalance,
    DebugWaste,
    DebugImbalance,
    /// 16-way, high bandwidth, CoV below 1.
    NearImbalance,
    /// 16-way, extreme skew, bandwidth below 1 GB/s.
    LowBandwidth,
    /// Partial wayness with extreme skew.
    PartialSkewed,
    Normal,
}

pub fn production_queues() -> BTreeSet<String> {
    ["normal", "long", "large", "serial"]
        .iter()
        .map(|q| q.to_string())
        .collect()
}

pub fn planted_pool(spec: &PoolSpec) -> PlantedPool {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cores = spec.cores_per_node;
    let sockets = spec.sockets_per_node as usize;

    let mut classes = Vec::with_capacity(spec.jobs);
    classes.extend(std::iter::repeat_n(Class::Waste, spec.planted_waste));
    classes.extend(std::iter::repeat_n(Class::Imbalance, spec.planted_imbalance));
    for c in [
        Class::SmallWaste,
        Class::SmallImbalance,
        Class::DebugWaste,
        Class::DebugImbalance,
    ] {
        classes.extend(std::iter::repeat_n(c, 3));
    }
    for c in [Class::NearImbalance, Class::LowBandwidth, Class::PartialSkewed] {
        classes.extend(std::iter::repeat_n(c, 6));
    }
    assert!(classes.len() <= spec.jobs, "pool too small for its planted classes");
    classes.resize(spec.jobs, Class::Normal);
    classes.shuffle(&mut rng);

    let uniform = vec![1.0 / sockets as f64; sockets];
    let extreme = |rng: &mut ChaCha8Rng| {
        let mut w = vec![0.05; sockets];
        w[rng.gen_range(0..sockets)] = 1.0 - 0.05 * (sockets - 1) as f64;
        w
    };
    let near_uniform = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..sockets).map(|_| 1.0 + 0.3 * rng.gen::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / sum).collect::<Vec<_>>()
    };
    let hours = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (rng.gen_range(lo..hi) * 3600.0) as u64;

    let users: Vec<String> = (1..=20).map(|i| format!("user{i:02}")).collect();
    let mut free_at = vec![POOL_EPOCH + 3600; spec.nodes as usize];
    let mut jobs = Vec::with_capacity(spec.jobs);
    let mut waste = BTreeSet::new();
    let mut imbalance = BTreeSet::new();
    let mut filtered = BTreeSet::new();

    for (i, class) in classes.iter().enumerate() {
        let job_id = format!("{}", 100_000 + i);
        let mut owner = users[rng.gen_range(0..users.len())].clone();
        let mut queue = "normal".to_string();
        let mut n_nodes = if rng.gen_bool(0.2) { 2 } else { 1 };
        let mut wayness = cores;
        let mut idle_pattern = rng.gen_range(0.0..0.08);
        let mut mem = rng.gen_range(0.1..0.8);
        let mut skew = near_uniform(&mut rng);
        let mut bw = rng.gen_range(0.2..5.0) * 1e9;
        let mut duration = hours(&mut rng, 1.5, 6.0);

        let waste_like = |idle: &mut f64, way: &mut u32, mem: &mut f64, bw: &mut f64, rng: &mut ChaCha8Rng| {
            if rng.gen_bool(0.5) {
                *way = cores;
                *idle = 0.97;
            } else {
                *way = 1;
                *idle = 0.5;
            }
            *mem = 0.02;
            *bw = 0.3e9;
        };
        match class {
            Class::Waste | Class::SmallWaste | Class::DebugWaste => {
                waste_like(&mut idle_pattern, &mut wayness, &mut mem, &mut bw, &mut rng);
                skew = uniform.clone();
                owner = ["bio01", "bio02", "matsci02"][rng.gen_range(0..3)].to_string();
            }
            Class::Imbalance | Class::SmallImbalance | Class::DebugImbalance => {
                skew = extreme(&mut rng);
                bw = rng.gen_range(2.0..6.0) * 1e9;
                idle_pattern = rng.gen_range(0.0..0.05);
                mem = rng.gen_range(0.3..0.7);
                duration = hours(&mut rng, 6.0, 12.0);
                owner = if rng.gen_bool(0.8) { "matsci01" } else { "chem01" }.to_string();
            }
            Class::NearImbalance => {
                skew = vec![0.6, 0.2, 0.1, 0.1];
                skew.rotate_right(rng.gen_range(0..sockets));
                bw = rng.gen_range(2.0..6.0) * 1e9;
            }
            Class::LowBandwidth => {
                skew = extreme(&mut rng);
                bw = rng.gen_range(0.1..0.6) * 1e9;
            }
            Class::PartialSkewed => {
                wayness = [1, 2, 4, 8][rng.gen_range(0..4)];
                skew = extreme(&mut rng);
                bw = rng.gen_range(2.0..6.0) * 1e9;
            }
            Class::Normal => {
                if rng.gen_bool(0.4) {
                    wayness = [1, 2, 4, 8][rng.gen_range(0..4)];
                }
            }
        }
        match class {
            Class::SmallWaste | Class::SmallImbalance => {
                n_nodes = 1;
                duration = 1800;
            }
            Class::DebugWaste | Class::DebugImbalance => queue = "debug".into(),
            _ => {}
        }
        if matches!(class, Class::Imbalance | Class::Waste) {
            n_nodes = 1 + u32::from(rng.gen_bool(0.3));
        }
        if duration > 8 * 3600 && queue == "normal" {
            queue = "long".into();
        }

        // Earliest-free nodes; a short odd-second gap keeps job edges off
        // the cron grid and apart from neighbours.
        let mut order: Vec<usize> = (0..free_at.len()).collect();
        order.sort_by_key(|&n| (free_at[n], n));
        let chosen: Vec<usize> = order[..n_nodes as usize].to_vec();
        let start = chosen.iter().map(|&n| free_at[n]).max().unwrap() + rng.gen_range(300..1800) + 7;
        let end = start + duration;
        for &n in &chosen {
            free_at[n] = end;
        }
        let mut node_list: Vec<u32> = chosen.iter().map(|&n| n as u32).collect();
        node_list.sort_unstable();

        match class {
            Class::Waste => {
                waste.insert(job_id.clone());
            }
            Class::Imbalance => {
                imbalance.insert(job_id.clone());
            }
            Class::SmallWaste | Class::SmallImbalance | Class::DebugWaste | Class::DebugImbalance => {
                filtered.insert(job_id.clone());
            }
            _ => {}
        }
        jobs.push(SyntheticJob {
            job_id,
            owner,
            queue,
            nodes: node_list,
            wayness,
            start,
            end,
            idle_pattern,
            numa_skew: skew,
            mem_used_fraction: mem,
            dram_bytes_per_sec: bw,
        });
    }

    let end = free_at.iter().copied().max().unwrap_or(POOL_EPOCH) + 3600;
    let scenario = SyntheticScenario {
        seed: spec.seed,
        nodes: spec.nodes,
        cores_per_node: cores,
        sockets_per_node: spec.sockets_per_node,
        mem_total_kb: 32 * 1024 * 1024,
        start: POOL_EPOCH,
        end,
        interval: 600,
        arch: Arch::Opteron,
        hostname_prefix: "n".into(),
        wrap_offset: 0,
        jobs,
    };
    debug_assert!(scenario.validate().is_ok());
    PlantedPool {
        scenario,
        waste,
        imbalance,
        filtered_decoys: filtered,
        production_queues: production_queues(),
    }
}

/// Closed-form idle fraction of a job that runs alone on its nodes.
pub fn closed_form_idle(job: &SyntheticJob, cores: u32) -> f64 {
    1.0 - f64::from(job.wayness) * (1.0 - job.idle_pattern) / f64::from(cores)
}

/// Core-second-weighted idle fraction over all jobs of `scenario`.
pub fn closed_form_pool_idle(scenario: &SyntheticScenario) -> f64 {
    let mut idle = 0.0;
    let mut total = 0.0;
    for j in &scenario.jobs {
        let core_secs = (j.nodes.len() as f64) * f64::from(scenario.cores_per_node) * (j.end - j.start) as f64;
        idle += closed_form_idle(j, scenario.cores_per_node) * core_secs;
        total += core_secs;
    }
    if total == 0.0 {
        0.0
    } else {
        idle / total
    }
}
