//! Per-job derived metrics.
//!
//! Every metric returns `Err(Undefined)` when the data cannot support it;
//! callers must not substitute 0.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectors::BYTES_PER_MEM_ACCESS;
use crate::ingest::{CorruptEntry, JobShape, JobStore, JobTimeline, NodeTimeline, StoreError};

#[derive(Error, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Undefined {
    #[error("no cpu data")]
    NoCpuData,
    #[error("no memory data")]
    NoMemData,
    #[error("no performance counter data")]
    NoPmcData,
    #[error("zero denominator")]
    ZeroDenominator,
    #[error("no profiles")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdleFraction {
    pub fraction: f64,
    /// Total core-seconds behind the fraction.
    pub core_seconds: f64,
}

/// Σ idle / Σ all cpu-field deltas over every core, node and usable interval.
pub fn cpu_idle_fraction(tl: &JobTimeline) -> Result<IdleFraction, Undefined> {
    let mut idle = 0.0;
    let mut total = 0.0;
    let mut any = false;
    for node in &tl.nodes {
        let Some(idle_at) = node.schema("cpu").and_then(|s| s.field_index("idle")) else {
            continue;
        };
        for s in node.series_of("cpu") {
            for p in s.points.iter().filter(|p| p.quality.is_usable()) {
                any = true;
                idle += p.weight * p.values[idle_at] as f64;
                total += p.weight * p.values.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
    }
    if !any {
        return Err(Undefined::NoCpuData);
    }
    if total <= 0.0 {
        return Err(Undefined::ZeroDenominator);
    }
    Ok(IdleFraction {
        fraction: (idle / total).clamp(0.0, 1.0),
        core_seconds: total / 100.0,
    })
}

/// Peak over time of the node's summed `used` memory, as a fraction of total.
fn node_peak_used(node: &NodeTimeline) -> Option<f64> {
    let used_at = node.schema("mem")?.field_index("used")?;
    let mut by_time: std::collections::BTreeMap<u64, u64> = Default::default();
    for s in node.series_of("mem") {
        for p in &s.points {
            *by_time.entry(p.t1).or_default() += p.values[used_at];
        }
    }
    let peak = by_time.values().copied().max()?;
    Some(peak as f64 / node.mem_total_kb.max(1) as f64)
}

/// 1 − mean over nodes of peak used fraction.
pub fn unused_memory_fraction(tl: &JobTimeline) -> Result<f64, Undefined> {
    let peaks: Vec<f64> = tl.nodes.iter().filter_map(node_peak_used).collect();
    if peaks.is_empty() {
        return Err(Undefined::NoMemData);
    }
    let used = peaks.iter().sum::<f64>() / peaks.len() as f64;
    Ok((1.0 - used).clamp(0.0, 1.0))
}

pub fn waste_metric(idle: f64, unused: f64) -> f64 {
    idle * unused
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeBandwidth {
    pub hostname: String,
    /// GB/s per socket.
    pub sockets: Vec<f64>,
}

impl NodeBandwidth {
    pub fn total(&self) -> f64 {
        self.sockets.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bandwidth {
    pub nodes: Vec<NodeBandwidth>,
    /// Mean over nodes of per-node total GB/s.
    pub mean_gbps: f64,
}

fn socket_of(node: &NodeTimeline, device: u32) -> usize {
    let per_socket = (node.cores / node.sockets.max(1)).max(1);
    ((device / per_socket) as usize).min(node.sockets.max(1) as usize - 1)
}

/// Per-socket whole-job mem_access totals and per-socket GB/s.
fn node_mem_access(node: &NodeTimeline) -> Option<(Vec<f64>, Vec<f64>, Vec<bool>)> {
    let idx = node.schema("pmc")?.field_index("mem_access")?;
    let n = node.sockets.max(1) as usize;
    let mut totals = vec![0.0; n];
    let mut rates = vec![0.0; n];
    let mut seen = vec![false; n];
    let mut any = false;
    for s in node.series_of("pmc") {
        let mut events = 0.0;
        let mut secs = 0.0;
        for p in s.points.iter().filter(|p| p.quality.is_usable()) {
            events += p.weight * p.values[idx] as f64;
            secs += p.weight * p.seconds();
        }
        if secs > 0.0 {
            let k = socket_of(node, s.device_id);
            any = true;
            seen[k] = true;
            totals[k] += events;
            rates[k] += events * BYTES_PER_MEM_ACCESS as f64 / secs / 1e9;
        }
    }
    any.then_some((totals, rates, seen))
}

pub fn socket_bandwidth(tl: &JobTimeline) -> Result<Bandwidth, Undefined> {
    let nodes: Vec<NodeBandwidth> = tl
        .nodes
        .iter()
        .filter_map(|n| {
            node_mem_access(n).map(|(_, rates, _)| NodeBandwidth {
                hostname: n.hostname.clone(),
                sockets: rates,
            })
        })
        .collect();
    if nodes.is_empty() {
        return Err(Undefined::NoPmcData);
    }
    let mean_gbps = nodes.iter().map(NodeBandwidth::total).sum::<f64>() / nodes.len() as f64;
    Ok(Bandwidth { nodes, mean_gbps })
}

/// Population standard deviation over mean; 0 when the mean is 0.
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Mean over nodes of the CoV of per-socket mem_access totals. Only nodes
/// with counter data for every socket take part.
pub fn numa_cov(tl: &JobTimeline) -> Result<f64, Undefined> {
    let covs: Vec<f64> = tl
        .nodes
        .iter()
        .filter_map(node_mem_access)
        .filter(|(_, _, seen)| seen.iter().all(|&s| s))
        .map(|(totals, _, _)| coefficient_of_variation(&totals))
        .collect();
    if covs.is_empty() {
        return Err(Undefined::NoPmcData);
    }
    Ok(covs.iter().sum::<f64>() / covs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobProfile {
    pub job_id: String,
    pub owner: String,
    pub queue: String,
    pub nodes: u32,
    pub wayness: u32,
    pub cores_per_node: u32,
    pub wall_hours: f64,
    pub idle_fraction: Option<f64>,
    pub cpu_core_seconds: f64,
    pub unused_mem_fraction: Option<f64>,
    pub waste: Option<f64>,
    pub mean_bandwidth_gbps: Option<f64>,
    pub numa_cov: Option<f64>,
    pub coverage: f64,
    pub missing_nodes: Vec<String>,
}

impl JobShape for JobProfile {
    fn node_count(&self) -> u32 {
        self.nodes
    }
    fn wall_hours(&self) -> f64 {
        self.wall_hours
    }
    fn queue(&self) -> &str {
        &self.queue
    }
}

impl JobProfile {
    pub fn full_wayness(&self) -> bool {
        self.cores_per_node > 0 && self.wayness == self.cores_per_node
    }

    pub fn used_mem_fraction(&self) -> Option<f64> {
        self.unused_mem_fraction.map(|u| 1.0 - u)
    }

    /// Looks a numeric field up by name.
    pub fn metric(&self, name: &str) -> Option<Option<f64>> {
        Some(match name {
            "idle_fraction" => self.idle_fraction,
            "unused_mem_fraction" => self.unused_mem_fraction,
            "used_mem_fraction" => self.used_mem_fraction(),
            "waste" => self.waste,
            "mean_bandwidth_gbps" => self.mean_bandwidth_gbps,
            "numa_cov" => self.numa_cov,
            "coverage" => Some(self.coverage),
            "wall_hours" => Some(self.wall_hours),
            "nodes" => Some(f64::from(self.nodes)),
            "wayness" => Some(f64::from(self.wayness)),
            _ => return None,
        })
    }

    pub fn to_kv(&self) -> String {
        struct Opt(Option<f64>);
        impl fmt::Display for Opt {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                match self.0 {
                    Some(v) => write!(f, "{v}"),
                    None => f.write_str("undefined"),
                }
            }
        }
        let missing = if self.missing_nodes.is_empty() {
            "-".to_string()
        } else {
            self.missing_nodes.join(",")
        };
        format!(
            "job_id {}\nowner {}\nqueue {}\nnodes {}\nwayness {}\ncores_per_node {}\nwall_hours {}\n\
             idle_fraction {}\ncpu_core_seconds {}\nunused_mem_fraction {}\nwaste {}\n\
             mean_bandwidth_gbps {}\nnuma_cov {}\ncoverage {}\nmissing_nodes {}\n",
            self.job_id,
            self.owner,
            self.queue,
            self.nodes,
            self.wayness,
            self.cores_per_node,
            self.wall_hours,
            Opt(self.idle_fraction),
            self.cpu_core_seconds,
            Opt(self.unused_mem_fraction),
            Opt(self.waste),
            Opt(self.mean_bandwidth_gbps),
            Opt(self.numa_cov),
            self.coverage,
            missing,
        )
    }

    pub fn from_kv(text: &str) -> Result<JobProfile, String> {
        let mut map = std::collections::BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| format!("line {}: expected `key value`", n + 1))?;
            if map.insert(k, v).is_some() {
                return Err(format!("line {}: repeated key {k}", n + 1));
            }
        }
        let get = |k: &str| map.get(k).copied().ok_or_else(|| format!("missing key {k}"));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{k}: bad value {v:?}"))
        }
        let opt = |k: &str| -> Result<Option<f64>, String> {
            match get(k)? {
                "undefined" => Ok(None),
                v => num(k, v).map(Some),
            }
        };
        let missing = get("missing_nodes")?;
        Ok(JobProfile {
            job_id: get("job_id")?.to_string(),
            owner: get("owner")?.to_string(),
            queue: get("queue")?.to_string(),
            nodes: num("nodes", get("nodes")?)?,
            wayness: num("wayness", get("wayness")?)?,
            cores_per_node: num("cores_per_node", get("cores_per_node")?)?,
            wall_hours: num("wall_hours", get("wall_hours")?)?,
            idle_fraction: opt("idle_fraction")?,
            cpu_core_seconds: num("cpu_core_seconds", get("cpu_core_seconds")?)?,
            unused_mem_fraction: opt("unused_mem_fraction")?,
            waste: opt("waste")?,
            mean_bandwidth_gbps: opt("mean_bandwidth_gbps")?,
            numa_cov: opt("numa_cov")?,
            coverage: num("coverage", get("coverage")?)?,
            missing_nodes: if missing == "-" {
                Vec::new()
            } else {
                missing.split(',').map(str::to_string).collect()
            },
        })
    }
}

pub fn profile(tl: &JobTimeline) -> JobProfile {
    let idle = cpu_idle_fraction(tl).ok();
    let unused = unused_memory_fraction(tl).ok();
    JobProfile {
        job_id: tl.job.job_id.clone(),
        owner: tl.job.owner.clone(),
        queue: tl.job.queue.clone(),
        nodes: tl.job.nodes,
        wayness: tl.job.wayness,
        cores_per_node: tl.nodes.first().map_or(0, |n| n.cores),
        wall_hours: tl.job.wall_hours(),
        idle_fraction: idle.map(|i| i.fraction),
        cpu_core_seconds: idle.map_or(0.0, |i| i.core_seconds),
        unused_mem_fraction: unused,
        waste: idle.zip(unused).map(|(i, u)| waste_metric(i.fraction, u)),
        mean_bandwidth_gbps: socket_bandwidth(tl).ok().map(|b| b.mean_gbps),
        numa_cov: numa_cov(tl).ok(),
        coverage: tl.coverage,
        missing_nodes: tl.missing_nodes.clone(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalyzeReport {
    pub profiles: usize,
    pub undefined_waste: usize,
    pub corrupt: Vec<CorruptEntry>,
}

/// Recomputes and stores the profile of every timeline in `store`.
pub fn analyze_store(store: &mut JobStore) -> Result<AnalyzeReport, StoreError> {
    let mut report = AnalyzeReport::default();
    let ids: Vec<String> = store.job_ids().map(str::to_string).collect();
    for id in ids {
        let tl = match store.get_timeline(&id) {
            Ok(tl) => tl,
            Err(e @ (StoreError::Corrupt { .. } | StoreError::NotFound { .. })) => {
                log::warn!("skipping {id}: {e}");
                report.corrupt.push(CorruptEntry {
                    job_id: id,
                    reason: e.to_string(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let p = profile(&tl);
        report.undefined_waste += usize::from(p.waste.is_none());
        store.put_profile(&p)?;
        report.profiles += 1;
    }
    store.flush()?;
    Ok(report)
}

/// Core-second-weighted pool idle fraction.
pub fn aggregate_idle(profiles: &[JobProfile]) -> Result<f64, Undefined> {
    let mut idle = 0.0;
    let mut total = 0.0;
    for p in profiles {
        if let Some(f) = p.idle_fraction {
            idle += f * p.cpu_core_seconds;
            total += p.cpu_core_seconds;
        }
    }
    if total <= 0.0 {
        return Err(Undefined::Empty);
    }
    Ok(idle / total)
}
