//! Node file loading and per-job timeline assembly.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::accounting::AccountingRecord;
use super::delta::{delta_series, DeltaConfig, DeltaPoint, RawSample};
use super::IngestError;
use crate::record_format::{Entry, FileHeader, MarkKind, ParseMode, RecordGroup, RecordReader, TypeSchema};

/// Every group recorded on one node, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeData {
    pub header: FileHeader,
    pub groups: Vec<RecordGroup>,
    /// `boundaries[i]`: a file start or `%rotate` precedes group `i`.
    pub boundaries: Vec<bool>,
    pub files: usize,
    pub skipped_lines: usize,
}

impl NodeData {
    pub fn hostname(&self) -> &str {
        &self.header.hostname
    }

    /// Header `$interval`, if recorded.
    pub fn interval(&self) -> Option<u64> {
        self.header.extra("interval").and_then(|v| v.parse().ok()).filter(|&v| v > 0)
    }

    /// Builds node data from already parsed files, ordered by first timestamp.
    pub fn from_files(mut files: Vec<(FileHeader, Vec<Entry>)>) -> Option<NodeData> {
        files.sort_by_key(|(_, entries)| entries.iter().map(entry_time).next().unwrap_or(u64::MAX));
        let header = files.first()?.0.clone();
        let mut data = NodeData {
            header,
            groups: Vec::new(),
            boundaries: Vec::new(),
            files: files.len(),
            skipped_lines: 0,
        };
        for (i, (_, entries)) in files.into_iter().enumerate() {
            let mut boundary = i > 0;
            for e in entries {
                data.push(e, &mut boundary);
            }
        }
        Some(data)
    }

    fn push(&mut self, entry: Entry, boundary: &mut bool) {
        match entry {
            Entry::Group(g) => {
                if self.groups.last().is_some_and(|last| g.timestamp <= last.timestamp) {
                    log::warn!("{}: group at {} out of order; dropped", self.header.hostname, g.timestamp);
                    return;
                }
                self.groups.push(g);
                self.boundaries.push(std::mem::take(boundary));
            }
            Entry::Mark(m) if m.kind == MarkKind::Rotate => *boundary = true,
            Entry::Mark(_) | Entry::Meta { .. } => {}
        }
    }
}

fn entry_time(e: &Entry) -> u64 {
    match e {
        Entry::Group(g) => g.timestamp,
        Entry::Mark(m) => m.timestamp,
        Entry::Meta { .. } => u64::MAX,
    }
}

/// Raw files in a node directory.
pub fn node_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let io = |e| IngestError::Io {
        path: dir.to_path_buf(),
        source: e,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "stats"))
        .collect();
    files.sort();
    Ok(files)
}

/// Streams every raw file of one node directory.
pub fn load_node_dir(dir: &Path, mode: ParseMode) -> Result<Option<NodeData>, IngestError> {
    let mut parsed = Vec::new();
    let mut skipped = 0;
    for path in node_files(dir)? {
        let file = File::open(&path).map_err(|e| IngestError::Io {
            path: path.clone(),
            source: e,
        })?;
        let parse_err = |source| IngestError::Parse {
            path: path.clone(),
            source,
        };
        let mut reader = RecordReader::new(BufReader::new(file), mode).map_err(parse_err)?;
        let mut entries = Vec::new();
        for e in reader.by_ref() {
            entries.push(e.map_err(parse_err)?);
        }
        skipped += reader.skipped();
        parsed.push((reader.header().clone(), entries));
    }
    let mut data = NodeData::from_files(parsed);
    if let Some(d) = data.as_mut() {
        d.skipped_lines = skipped;
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub type_name: String,
    pub device_id: u32,
    pub points: Vec<DeltaPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTimeline {
    pub hostname: String,
    pub cores: u32,
    pub sockets: u32,
    pub mem_total_kb: u64,
    pub schemas: Vec<TypeSchema>,
    /// Ordered by (type, device).
    pub series: Vec<Series>,
}

impl NodeTimeline {
    pub fn schema(&self, type_name: &str) -> Option<&TypeSchema> {
        self.schemas.iter().find(|s| s.type_name == type_name)
    }

    pub fn series_of<'a>(&'a self, type_name: &'a str) -> impl Iterator<Item = &'a Series> + 'a {
        self.series.iter().filter(move |s| s.type_name == type_name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTimeline {
    pub job: AccountingRecord,
    /// Nominal sampling interval used for padding and gap detection.
    pub tick: u64,
    pub nodes: Vec<NodeTimeline>,
    pub missing_nodes: Vec<String>,
    /// Mean over listed nodes of the fraction of wall time covered by
    /// ok/wrapped intervals.
    pub coverage: f64,
}

impl JobTimeline {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn overlap(a0: u64, a1: u64, b0: u64, b1: u64) -> u64 {
    a1.min(b1).saturating_sub(a0.max(b0))
}

/// Cuts one job out of its nodes' data. `cfg.nominal_tick` is used unless
/// a node header records its own interval.
pub fn assemble_job(job: &AccountingRecord, nodes: &BTreeMap<String, NodeData>, cfg: &DeltaConfig) -> JobTimeline {
    let mut timeline = JobTimeline {
        job: job.clone(),
        tick: cfg.nominal_tick,
        nodes: Vec::new(),
        missing_nodes: Vec::new(),
        coverage: 0.0,
    };
    let wall = job.wall_seconds().max(1) as f64;
    let mut covered_sum = 0.0;
    for host in &job.node_list {
        let node_tl = nodes.get(host).and_then(|data| {
            let tick = data.interval().unwrap_or(cfg.nominal_tick);
            timeline.tick = tick;
            let cfg = DeltaConfig {
                nominal_tick: tick,
                ..cfg.clone()
            };
            assemble_node(job, data, &cfg)
        });
        match node_tl {
            Some(ntl) => {
                let reference = ntl
                    .series_of("cpu")
                    .next()
                    .or_else(|| ntl.series.first())
                    .map(|s| {
                        s.points
                            .iter()
                            .filter(|p| p.quality.is_covered())
                            .map(|p| overlap(p.t0, p.t1, job.start, job.end) as f64)
                            .sum::<f64>()
                    })
                    .unwrap_or(0.0);
                covered_sum += (reference / wall).min(1.0);
                timeline.nodes.push(ntl);
            }
            None => timeline.missing_nodes.push(host.clone()),
        }
    }
    timeline.coverage = covered_sum / job.node_list.len().max(1) as f64;
    timeline
}

fn assemble_node(job: &AccountingRecord, data: &NodeData, cfg: &DeltaConfig) -> Option<NodeTimeline> {
    let lo = job.start.saturating_sub(cfg.nominal_tick);
    let hi = job.end.saturating_add(cfg.nominal_tick);
    // boundary_prefix[i] = boundaries among groups[..i]
    let mut boundary_prefix = Vec::with_capacity(data.groups.len() + 1);
    boundary_prefix.push(0usize);
    for &b in &data.boundaries {
        boundary_prefix.push(boundary_prefix.last().unwrap() + usize::from(b));
    }
    let crossed = |from: usize, to: usize| boundary_prefix[to + 1] > boundary_prefix[from + 1];

    let mut raw: BTreeMap<(&str, u32), (usize, Vec<RawSample>)> = BTreeMap::new();
    let mut any = false;
    for (gi, g) in data.groups.iter().enumerate() {
        if g.timestamp < lo || g.timestamp > hi || !g.job_ids.contains(&job.job_id) {
            continue;
        }
        any = true;
        for s in &g.samples {
            let entry = raw
                .entry((s.type_name.as_str(), s.device_id))
                .or_insert((usize::MAX, Vec::new()));
            let boundary = entry.0 != usize::MAX && crossed(entry.0, gi);
            entry.0 = gi;
            entry.1.push(RawSample {
                t: g.timestamp,
                values: s.values.clone(),
                boundary,
            });
        }
    }
    if !any {
        return None;
    }

    let mut series = Vec::new();
    let mut used_types: Vec<&str> = Vec::new();
    for ((type_name, device_id), (_, samples)) in raw {
        let Some(schema) = data.header.schema(type_name) else {
            continue;
        };
        let points: Vec<DeltaPoint> = delta_series(schema, &samples, cfg)
            .into_iter()
            .filter_map(|mut p| {
                let inside = overlap(p.t0, p.t1, job.start, job.end);
                if inside == 0 {
                    return None;
                }
                p.weight = inside as f64 / p.seconds();
                Some(p)
            })
            .collect();
        if used_types.last() != Some(&type_name) {
            used_types.push(type_name);
        }
        series.push(Series {
            type_name: type_name.to_string(),
            device_id,
            points,
        });
    }
    Some(NodeTimeline {
        hostname: data.header.hostname.clone(),
        cores: data.header.cores,
        sockets: data.header.sockets,
        mem_total_kb: data.header.mem_total_kb,
        schemas: used_types
            .iter()
            .filter_map(|t| data.header.schema(t).cloned())
            .collect(),
        series,
    })
}
