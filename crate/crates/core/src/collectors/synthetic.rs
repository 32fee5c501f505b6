//! Deterministic synthetic cluster source.
//!
//! Counter values are floors of closed-form integrals of piecewise-constant
//! rates, so a reading is a pure function of `(scenario, node, t)` and
//! per-interval rounding error never accumulates.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    canonical_schema, synthetic_device_count, Arch, CounterEventSet, Source, SourceDescriptor,
    SourceError, BYTES_PER_MEM_ACCESS, CANONICAL_TYPES,
};
use crate::record_format::{FieldKind, FileHeader, RecordGroup, Sample, SCHEMA_VERSION};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SynthError {
    #[error("node {node} out of range (scenario has {nodes})")]
    NodeOutOfRange { node: u32, nodes: u32 },

    #[error("invalid scenario: {0}")]
    Invalid(String),

    #[error("scenario config: {0}")]
    Config(String),
}

fn default_interval() -> u64 {
    600
}

fn default_prefix() -> String {
    "n".into()
}

fn default_owner() -> String {
    "user".into()
}

fn default_queue() -> String {
    "normal".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticJob {
    pub job_id: String,
    #[serde(default = "default_owner")]
    pub owner: String,
    #[serde(default = "default_queue")]
    pub queue: String,
    /// Node indices the job runs on.
    pub nodes: Vec<u32>,
    /// Processes per node; each keeps one of the lowest-indexed cores busy.
    pub wayness: u32,
    pub start: u64,
    pub end: u64,
    /// Fraction of the job's own core time spent idle.
    #[serde(default)]
    pub idle_pattern: f64,
    /// Per-socket share of memory traffic; empty means uniform.
    #[serde(default)]
    pub numa_skew: Vec<f64>,
    #[serde(default)]
    pub mem_used_fraction: f64,
    /// Per-node DRAM traffic.
    #[serde(default)]
    pub dram_bytes_per_sec: f64,
}

impl SyntheticJob {
    fn skew(&self, sockets: u32, socket: u32) -> f64 {
        if self.numa_skew.is_empty() {
            1.0 / f64::from(sockets)
        } else {
            self.numa_skew[socket as usize]
        }
    }

    fn overlap(&self, from: u64, to: u64) -> f64 {
        let lo = self.start.max(from);
        let hi = self.end.min(to);
        hi.saturating_sub(lo) as f64
    }

    fn active_at(&self, t: u64) -> bool {
        self.start <= t && t <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScenario {
    pub seed: u64,
    pub nodes: u32,
    pub cores_per_node: u32,
    pub sockets_per_node: u32,
    pub mem_total_kb: u64,
    /// Boot time of every node; counters integrate from here.
    #[serde(default)]
    pub start: u64,
    /// End of the simulated window.
    pub end: u64,
    #[serde(default = "default_interval")]
    pub interval: u64,
    #[serde(default)]
    pub arch: Arch,
    #[serde(default = "default_prefix")]
    pub hostname_prefix: String,
    /// Added (mod 2^64) to every counter, to exercise wrap handling.
    #[serde(default)]
    pub wrap_offset: u64,
    #[serde(default, rename = "job")]
    pub jobs: Vec<SyntheticJob>,
}

impl SyntheticScenario {
    /// One node, 4 sockets, 32 GiB, one job on node 0.
    pub fn single_job(
        job_id: &str,
        cores: u32,
        wayness: u32,
        idle_pattern: f64,
        start: u64,
        end: u64,
    ) -> Self {
        SyntheticScenario {
            seed: 1,
            nodes: 1,
            cores_per_node: cores,
            sockets_per_node: 4.min(cores),
            mem_total_kb: 32 * 1024 * 1024,
            start: start.saturating_sub(3600),
            end: end + 3600,
            interval: 600,
            arch: Arch::Synthetic,
            hostname_prefix: "n".into(),
            wrap_offset: 0,
            jobs: vec![SyntheticJob {
                job_id: job_id.into(),
                owner: default_owner(),
                queue: default_queue(),
                nodes: vec![0],
                wayness,
                start,
                end,
                idle_pattern,
                numa_skew: vec![],
                mem_used_fraction: 0.5,
                dram_bytes_per_sec: 1e9,
            }],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let s: SyntheticScenario =
            toml::from_str(text).map_err(|e| SynthError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.nodes == 0 || self.sockets_per_node == 0 || self.mem_total_kb == 0 {
            return bad("nodes, sockets and memory must be positive".into());
        }
        if self.cores_per_node < self.sockets_per_node {
            return bad("cores_per_node must be >= sockets_per_node".into());
        }
        if self.end <= self.start || self.interval == 0 {
            return bad("window must be non-empty and interval positive".into());
        }
        let mut ids = BTreeSet::new();
        for j in &self.jobs {
            let id = &j.job_id;
            if !crate::record_format::is_job_id(id) || !ids.insert(id.as_str()) {
                return bad(format!("job id {id:?} invalid or repeated"));
            }
            if j.wayness == 0 || j.wayness > self.cores_per_node {
                return bad(format!("job {id}: wayness must be in 1..={}", self.cores_per_node));
            }
            if j.end <= j.start || j.start < self.start {
                return bad(format!("job {id}: bad interval"));
            }
            if j.nodes.is_empty() || j.nodes.iter().any(|&n| n >= self.nodes) {
                return bad(format!("job {id}: node index out of range"));
            }
            let frac = |f: f64| (0.0..=1.0).contains(&f);
            if !frac(j.idle_pattern) || !frac(j.mem_used_fraction) {
                return bad(format!("job {id}: fractions must lie in [0,1]"));
            }
            if !(j.dram_bytes_per_sec >= 0.0 && j.dram_bytes_per_sec.is_finite()) {
                return bad(format!("job {id}: bad dram rate"));
            }
            if !j.numa_skew.is_empty() {
                let sum: f64 = j.numa_skew.iter().sum();
                if j.numa_skew.len() != self.sockets_per_node as usize
                    || j.numa_skew.iter().any(|w| *w < 0.0)
                    || (sum - 1.0).abs() > 1e-6
                {
                    return bad(format!("job {id}: numa_skew needs one non-negative weight per socket summing to 1"));
                }
            }
        }
        Ok(())
    }

    pub fn hostname(&self, node: u32) -> String {
        format!("{}{:03}", self.hostname_prefix, node + 1)
    }

    pub fn node_of_hostname(&self, host: &str) -> Option<u32> {
        let n: u32 = host.strip_prefix(&self.hostname_prefix)?.parse().ok()?;
        (1..=self.nodes).contains(&n).then(|| n - 1)
    }

    pub fn header(&self, node: u32) -> FileHeader {
        FileHeader {
            schema_version: SCHEMA_VERSION.into(),
            hostname: self.hostname(node),
            cores: self.cores_per_node,
            sockets: self.sockets_per_node,
            mem_total_kb: self.mem_total_kb,
            extras: vec![("interval".into(), self.interval.to_string())],
            schemas: CANONICAL_TYPES
                .iter()
                .map(|t| canonical_schema(t, self.arch).expect("canonical"))
                .collect(),
        }
    }

    pub fn descriptors(&self) -> Vec<SourceDescriptor> {
        CANONICAL_TYPES
            .iter()
            .map(|t| SourceDescriptor {
                type_name: t.to_string(),
                schema: canonical_schema(t, self.arch).expect("canonical"),
                device_count: synthetic_device_count(t, self.cores_per_node, self.sockets_per_node),
                availability: super::Availability::Synthetic,
            })
            .collect()
    }

    pub fn node_jobs(&self, node: u32) -> impl Iterator<Item = &SyntheticJob> {
        self.jobs.iter().filter(move |j| j.nodes.contains(&node))
    }

    pub fn active_jobs(&self, node: u32, t: u64) -> BTreeSet<String> {
        self.node_jobs(node)
            .filter(|j| j.active_at(t))
            .map(|j| j.job_id.clone())
            .collect()
    }

    fn socket_of_core(&self, core: u32) -> u32 {
        core / (self.cores_per_node / self.sockets_per_node)
    }

    fn first_core_of_socket(&self, socket: u32) -> u32 {
        socket * (self.cores_per_node / self.sockets_per_node)
    }
}

/// Busy centiseconds accrued on `core` of `node` from boot to `t`.
fn busy_cs(scenario: &SyntheticScenario, jobs: &[&SyntheticJob], core: u32, t: u64) -> f64 {
    // Sweep job boundaries; the per-core rate is capped at 100 cs/s.
    let mut edges: Vec<(u64, f64)> = Vec::new();
    for j in jobs.iter().filter(|j| core < j.wayness) {
        let rate = (1.0 - j.idle_pattern) * 100.0;
        let lo = j.start.max(scenario.start);
        let hi = j.end.min(t);
        if hi > lo {
            edges.push((lo, rate));
            edges.push((hi, -rate));
        }
    }
    if edges.is_empty() {
        return 0.0;
    }
    edges.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut total = 0.0;
    let mut rate = 0.0_f64;
    let mut prev = edges[0].0;
    for (at, d) in edges {
        total += rate.clamp(0.0, 100.0) * (at - prev) as f64;
        rate += d;
        prev = at;
    }
    total
}

/// Memory-access events on `socket` from boot to `t`.
fn mem_access_events(scenario: &SyntheticScenario, jobs: &[&SyntheticJob], socket: u32, t: u64) -> f64 {
    jobs.iter()
        .map(|j| {
            j.skew(scenario.sockets_per_node, socket) * j.dram_bytes_per_sec
                / BYTES_PER_MEM_ACCESS as f64
                * j.overlap(scenario.start, t)
        })
        .sum()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A seeded per-(node, type, device, field) rate in `[lo, hi)`.
fn seeded_rate(s: &SyntheticScenario, node: u32, key: &str, dev: u32, field: usize, lo: f64, hi: f64) -> f64 {
    let mut h = splitmix(s.seed ^ u64::from(node).wrapping_mul(0x1000_0001));
    for b in key.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    h = splitmix(h ^ (u64::from(dev) << 16) ^ field as u64);
    lo + (hi - lo) * ((h >> 11) as f64 / (1u64 << 53) as f64)
}

fn floor_u64(x: f64) -> u64 {
    x.max(0.0).floor() as u64
}

/// Samples of one record type at time `t`.
pub fn synth_type(
    s: &SyntheticScenario,
    node: u32,
    type_name: &str,
    t: u64,
) -> Result<Vec<Sample>, SynthError> {
    if node >= s.nodes {
        return Err(SynthError::NodeOutOfRange {
            node,
            nodes: s.nodes,
        });
    }
    let t = t.max(s.start);
    let elapsed = (t - s.start) as f64;
    let schema = canonical_schema(type_name, s.arch)
        .ok_or_else(|| SynthError::Invalid(format!("unknown type {type_name}")))?;
    let devices = synthetic_device_count(type_name, s.cores_per_node, s.sockets_per_node);
    let jobs: Vec<&SyntheticJob> = s.node_jobs(node).collect();
    let mut node_busy_cache = None;
    let mut node_busy = || -> f64 {
        *node_busy_cache
            .get_or_insert_with(|| (0..s.cores_per_node).map(|c| busy_cs(s, &jobs, c, t)).sum())
    };

    let mut out = Vec::with_capacity(devices as usize);
    for dev in 0..devices {
        let values: Vec<u64> = match type_name {
            "cpu" => {
                let busy = busy_cs(s, &jobs, dev, t);
                let total = 100.0 * elapsed;
                vec![floor_u64(busy), 0, 0, floor_u64(total - busy), 0, 0, 0]
            }
            "mem" => {
                let per_socket = s.mem_total_kb / u64::from(s.sockets_per_node);
                let total = if dev == 0 {
                    per_socket + s.mem_total_kb % u64::from(s.sockets_per_node)
                } else {
                    per_socket
                };
                let frac: f64 = jobs
                    .iter()
                    .filter(|j| j.active_at(t))
                    .map(|j| j.mem_used_fraction)
                    .sum::<f64>()
                    .min(1.0);
                let used = floor_u64(frac * s.mem_total_kb as f64 / f64::from(s.sockets_per_node)).min(total);
                let cached = floor_u64(seeded_rate(s, node, "mem", dev, 0, 0.0, 0.01) * total as f64)
                    .min(total - used);
                vec![total, total - used - cached, used, cached]
            }
            "load" => {
                let active: Vec<&&SyntheticJob> = jobs.iter().filter(|j| j.active_at(t)).collect();
                let busy: f64 = active
                    .iter()
                    .map(|j| f64::from(j.wayness) * (1.0 - j.idle_pattern))
                    .sum::<f64>()
                    .min(f64::from(s.cores_per_node));
                let procs: u32 = active.iter().map(|j| j.wayness).sum();
                let l = floor_u64(busy * 100.0);
                vec![l, l, l, u64::from(procs.min(s.cores_per_node)), 150 + 2 * u64::from(procs)]
            }
            "ipc" => (0..3)
                .map(|f| floor_u64(seeded_rate(s, node, "ipc", dev, f, 0.0, 16.0)))
                .collect(),
            "pmc" => {
                let busy = busy_cs(s, &jobs, dev, t);
                let socket = s.socket_of_core(dev);
                // Northbridge-style events count on the socket's first core.
                let nb = if dev == s.first_core_of_socket(socket) {
                    mem_access_events(s, &jobs, socket, t)
                } else {
                    0.0
                };
                CounterEventSet::for_arch(s.arch)
                    .events
                    .iter()
                    .map(|e| match e.as_str() {
                        "flops" => floor_u64(busy * 2.0e7),
                        "mem_access" => floor_u64(nb),
                        "dcache_fill" => floor_u64(busy * 1.0e5 + nb * 0.5),
                        "numa_traffic" => floor_u64(nb * 0.25),
                        "l1d_hits" => floor_u64(busy * 1.0e6),
                        _ => 0,
                    })
                    .collect()
            }
            other => {
                // Background rates plus a component proportional to node busy time.
                let busy = node_busy();
                (0..schema.fields.len())
                    .map(|f| {
                        let base = seeded_rate(s, node, other, dev, f, 1.0, 1000.0);
                        let per_busy = seeded_rate(s, node, other, dev, f + 100, 0.0, 10.0);
                        floor_u64(base * elapsed + per_busy * busy)
                    })
                    .collect()
            }
        };
        let values = values
            .into_iter()
            .zip(&schema.fields)
            .map(|(v, f)| match f.kind {
                FieldKind::Counter => v.wrapping_add(s.wrap_offset),
                FieldKind::Gauge => v,
            })
            .collect();
        out.push(Sample {
            type_name: type_name.to_string(),
            device_id: dev,
            values,
        });
    }
    Ok(out)
}

/// The full record group node `node` would emit at `t`.
pub fn synth_sample(s: &SyntheticScenario, node: u32, t: u64) -> Result<RecordGroup, SynthError> {
    let mut samples = Vec::new();
    for type_name in CANONICAL_TYPES {
        samples.extend(synth_type(s, node, type_name, t)?);
    }
    Ok(RecordGroup {
        timestamp: t,
        job_ids: s.active_jobs(node, t),
        samples,
    })
}

pub struct SyntheticSource {
    descriptor: SourceDescriptor,
    scenario: Arc<SyntheticScenario>,
    node: u32,
}

impl SyntheticSource {
    pub fn new(descriptor: SourceDescriptor, scenario: Arc<SyntheticScenario>, node: u32) -> Self {
        SyntheticSource {
            descriptor,
            scenario,
            node,
        }
    }
}

impl Source for SyntheticSource {
    fn descriptor(&self) -> &SourceDescriptor {
        &self.descriptor
    }

    fn read(&self, t: u64) -> Result<Vec<Sample>, SourceError> {
        let mut samples = synth_type(&self.scenario, self.node, &self.descriptor.type_name, t)?;
        samples.truncate(self.descriptor.device_count as usize);
        Ok(samples)
    }
}
