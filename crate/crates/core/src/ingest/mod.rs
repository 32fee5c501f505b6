//! Raw files + accounting → per-job timelines in the job store.

pub mod accounting;
pub mod delta;
pub mod store;
pub mod timeline;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use accounting::{load_accounting, scenario_accounting, write_accounting_csv, Accounting, AccountingRecord, RowError};
pub use delta::{delta_series, DeltaConfig, DeltaPoint, PlausibilityBounds, Quality, RawSample};
pub use store::{CorruptEntry, JobStore, StoreError};
pub use timeline::{assemble_job, load_node_dir, JobTimeline, NodeData, NodeTimeline, Series};

use crate::record_format::{ParseError, ParseMode};

#[derive(Error, Debug)]
pub enum IngestError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Accounting(#[from] accounting::AccountingError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Anything with a size and a queue.
pub trait JobShape {
    fn node_count(&self) -> u32;
    fn wall_hours(&self) -> f64;
    fn queue(&self) -> &str;

    fn node_hours(&self) -> f64 {
        f64::from(self.node_count()) * self.wall_hours()
    }
}

impl JobShape for AccountingRecord {
    fn node_count(&self) -> u32 {
        self.nodes
    }
    fn wall_hours(&self) -> f64 {
        AccountingRecord::wall_hours(self)
    }
    fn queue(&self) -> &str {
        &self.queue
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobFilter {
    pub min_node_hours: f64,
    pub production_queues: BTreeSet<String>,
}

impl Default for JobFilter {
    fn default() -> Self {
        JobFilter {
            min_node_hours: 1.0,
            production_queues: crate::collectors::pool::production_queues(),
        }
    }
}

impl JobFilter {
    pub fn keeps<J: JobShape>(&self, j: &J) -> bool {
        j.node_hours() >= self.min_node_hours && self.production_queues.contains(j.queue())
    }
}

/// Keeps jobs of at least `min_node_hours` submitted to a production queue.
pub fn filter_jobs<J: JobShape + Clone>(jobs: &[J], filter: &JobFilter) -> Vec<J> {
    jobs.iter().filter(|j| filter.keeps(*j)).cloned().collect()
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub mode: ParseMode,
    pub delta: DeltaConfig,
    pub threads: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            mode: ParseMode::Lenient,
            delta: DeltaConfig::default(),
            threads: std::thread::available_parallelism().map_or(4, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub node_dirs: usize,
    pub files: usize,
    pub skipped_lines: usize,
    pub rejected_rows: Vec<RowError>,
    pub jobs: usize,
    pub empty_jobs: Vec<String>,
    pub missing_nodes: usize,
}

/// Loads every node directory named in `records`, assembles each job and
/// stores its timeline.
pub fn ingest(
    stats_dir: &Path,
    accounting: &Accounting,
    store: &mut JobStore,
    opts: &IngestOptions,
) -> Result<IngestReport, IngestError> {
    let mut report = IngestReport {
        rejected_rows: accounting.rejected.clone(),
        ..Default::default()
    };
    let hosts: BTreeSet<&str> = accounting
        .records
        .iter()
        .flat_map(|r| r.node_list.iter().map(String::as_str))
        .collect();
    let hosts: Vec<&str> = hosts.into_iter().filter(|h| stats_dir.join(h).is_dir()).collect();
    let loaded = parallel_map(&hosts, opts.threads, |h| load_node_dir(&stats_dir.join(h), opts.mode))?;
    let mut nodes = BTreeMap::new();
    for (h, data) in hosts.iter().zip(loaded) {
        report.node_dirs += 1;
        if let Some(d) = data {
            report.files += d.files;
            report.skipped_lines += d.skipped_lines;
            nodes.insert(h.to_string(), d);
        }
    }

    let mut records = accounting.records.clone();
    records.sort_by(|a, b| a.job_id.cmp(&b.job_id));
    let timelines = parallel_map(&records, opts.threads, |r| {
        Ok::<_, IngestError>(assemble_job(r, &nodes, &opts.delta))
    })?;
    for tl in timelines {
        if tl.is_empty() {
            log::warn!("job {} has no data on any listed node", tl.job.job_id);
            report.empty_jobs.push(tl.job.job_id.clone());
        }
        report.missing_nodes += tl.missing_nodes.len();
        store.put_timeline(&tl)?;
        report.jobs += 1;
    }
    store.flush()?;
    Ok(report)
}

/// Order-preserving map over scoped worker threads.
pub(crate) fn parallel_map<T, U, E, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync,
{
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = items.len().div_ceil(threads.max(1));
    let parts: Vec<Result<Vec<U>, E>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>, E>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
