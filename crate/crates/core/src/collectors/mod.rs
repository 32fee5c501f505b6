//! Pluggable metric sources and the per-tick collection loop.
//!
//! Every source serves exactly one record type. Host sources parse kernel
//! text from a proc-style root, fixture sources parse captured copies of the
//! same text from a directory, and the synthetic source integrates a
//! [`SyntheticScenario`]'s rate model.

pub mod pool;
pub mod procfs;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::PathBuf;
use std::sync::{mpsc, Arc};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record_format::{FieldSpec, RecordGroup, Sample, TypeSchema, Unit};

pub use synthetic::{synth_sample, SynthError, SyntheticJob, SyntheticScenario};

/// Env var naming the fixture root.
pub const FIXTURE_ENV: &str = "JOBSTATS_FIXTURE_DIR";

/// Bytes moved per `mem_access` event (one cache line).
pub const BYTES_PER_MEM_ACCESS: u64 = 64;

pub const DEFAULT_SOURCE_TIMEOUT: Duration = Duration::from_secs(2);

/// Record types in emission order.
pub const CANONICAL_TYPES: [&str; 11] = [
    "cpu", "mem", "vm", "load", "net", "block", "ipc", "irq", "fs", "ib", "pmc",
];

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SourceError {
    #[error("{type_name}: cannot read {path}: {reason}")]
    Read {
        type_name: String,
        path: String,
        reason: String,
    },

    #[error("{type_name}: unrecognized line {line:?}")]
    Layout { type_name: String, line: String },

    #[error("{type_name}: {reason}")]
    Invalid { type_name: String, reason: String },

    #[error("{0}: timed out")]
    Timeout(String),

    #[error(transparent)]
    Synthetic(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Availability {
    Host,
    Synthetic,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceDescriptor {
    pub type_name: String,
    pub schema: TypeSchema,
    pub device_count: u32,
    pub availability: Availability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Opteron,
    NehalemWestmere,
    #[default]
    Synthetic,
}

impl Arch {
    pub fn parse(s: &str) -> Option<Arch> {
        Some(match s {
            "opteron" => Arch::Opteron,
            "nehalem_westmere" | "nehalem" | "westmere" => Arch::NehalemWestmere,
            "synthetic" => Arch::Synthetic,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Opteron => "opteron",
            Arch::NehalemWestmere => "nehalem_westmere",
            Arch::Synthetic => "synthetic",
        }
    }
}

/// The fixed hardware event set programmed at job start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterEventSet {
    pub arch: Arch,
    pub events: Vec<String>,
}

impl CounterEventSet {
    pub fn for_arch(arch: Arch) -> Self {
        let events: &[&str] = match arch {
            Arch::Opteron | Arch::Synthetic => &["flops", "mem_access", "dcache_fill", "numa_traffic"],
            Arch::NehalemWestmere => &["flops", "numa_traffic", "l1d_hits"],
        };
        CounterEventSet {
            arch,
            events: events.iter().map(|e| e.to_string()).collect(),
        }
    }

    /// Value of the `$pmc_events` metadata line.
    pub fn metadata_value(&self) -> String {
        self.events.join(",")
    }
}

pub fn canonical_schema(type_name: &str, arch: Arch) -> Option<TypeSchema> {
    use FieldSpec as F;
    let fields = match type_name {
        "cpu" => ["user", "nice", "system", "idle", "iowait", "irq", "softirq"]
            .iter()
            .map(|f| F::counter(f, Unit::Cs))
            .collect(),
        "mem" => ["total", "free", "used", "cached"]
            .iter()
            .map(|f| F::gauge(f, Unit::Kb))
            .collect(),
        "vm" => ["pgpgin", "pgpgout", "pswpin", "pswpout", "pgfault", "pgmajfault"]
            .iter()
            .map(|f| F::counter(f, Unit::Ev))
            .collect(),
        // Load averages are scaled by 100.
        "load" => ["load1", "load5", "load15", "running", "threads"]
            .iter()
            .map(|f| F::gauge(f, Unit::None))
            .collect(),
        "net" | "ib" => vec![
            F::counter("rx_bytes", Unit::B),
            F::counter("rx_packets", Unit::P),
            F::counter("tx_bytes", Unit::B),
            F::counter("tx_packets", Unit::P),
        ],
        "block" => ["rd_ios", "rd_sectors", "wr_ios", "wr_sectors"]
            .iter()
            .map(|f| F::counter(f, Unit::Ev))
            .collect(),
        "ipc" => ["msg_queues", "shm_segments", "sem_arrays"]
            .iter()
            .map(|f| F::gauge(f, Unit::None))
            .collect(),
        "irq" => vec![F::counter("hard", Unit::Ev), F::counter("soft", Unit::Ev)],
        "fs" => vec![
            F::counter("read_bytes", Unit::B),
            F::counter("write_bytes", Unit::B),
            F::counter("read_ops", Unit::Ev),
            F::counter("write_ops", Unit::Ev),
        ],
        "pmc" => CounterEventSet::for_arch(arch)
            .events
            .iter()
            .map(|e| F::counter(e, Unit::Ev))
            .collect(),
        _ => return None,
    };
    Some(TypeSchema::new(type_name, fields))
}

/// Device counts of a synthetic node for each canonical type.
pub fn synthetic_device_count(type_name: &str, cores: u32, sockets: u32) -> u32 {
    match type_name {
        "cpu" | "pmc" => cores,
        "mem" => sockets,
        "fs" => 2,
        _ => 1,
    }
}

/// What the current environment can serve.
#[derive(Debug, Clone)]
pub struct Probe {
    pub linux: bool,
    pub proc_root: PathBuf,
    pub sys_root: PathBuf,
    pub fixture_dir: Option<PathBuf>,
    pub arch: Arch,
}

impl Probe {
    pub fn detect() -> Self {
        Probe {
            linux: cfg!(target_os = "linux"),
            proc_root: PathBuf::from("/proc"),
            sys_root: PathBuf::from("/sys"),
            fixture_dir: std::env::var_os(FIXTURE_ENV).map(PathBuf::from),
            arch: Arch::Synthetic,
        }
    }

    pub fn synthetic_only() -> Self {
        Probe {
            linux: false,
            proc_root: PathBuf::new(),
            sys_root: PathBuf::new(),
            fixture_dir: None,
            arch: Arch::Synthetic,
        }
    }
}

/// Returns one descriptor per canonical type, preferring fixture over host
/// over synthetic. Types no real source can serve fall back to synthetic.
pub fn list_sources(probe: &Probe, cores: u32, sockets: u32) -> Vec<SourceDescriptor> {
    CANONICAL_TYPES
        .iter()
        .map(|&type_name| {
            let schema = canonical_schema(type_name, probe.arch).expect("canonical type");
            let fixture = probe
                .fixture_dir
                .as_ref()
                .map(|d| d.join(type_name))
                .filter(|p| p.is_file())
                .and_then(|p| procfs::fixture_device_count(type_name, &p).ok());
            if let Some(device_count) = fixture {
                return SourceDescriptor {
                    type_name: type_name.into(),
                    schema,
                    device_count,
                    availability: Availability::Fixture,
                };
            }
            if probe.linux {
                if let Ok(device_count) = procfs::host_device_count(type_name, probe) {
                    return SourceDescriptor {
                        type_name: type_name.into(),
                        schema,
                        device_count,
                        availability: Availability::Host,
                    };
                }
            }
            SourceDescriptor {
                type_name: type_name.into(),
                schema,
                device_count: synthetic_device_count(type_name, cores, sockets),
                availability: Availability::Synthetic,
            }
        })
        .collect()
}

/// A single-type metric source.
pub trait Source: Send + Sync {
    fn descriptor(&self) -> &SourceDescriptor;

    fn read(&self, t: u64) -> Result<Vec<Sample>, SourceError>;
}

/// Instantiates the sources named by `descriptors`. Synthetic descriptors
/// are served from `scenario`'s node `node`.
pub fn build_sources(
    descriptors: &[SourceDescriptor],
    probe: &Probe,
    scenario: &Arc<SyntheticScenario>,
    node: u32,
) -> Vec<Arc<dyn Source>> {
    descriptors
        .iter()
        .map(|d| -> Arc<dyn Source> {
            match d.availability {
                Availability::Synthetic => Arc::new(synthetic::SyntheticSource::new(
                    d.clone(),
                    Arc::clone(scenario),
                    node,
                )),
                Availability::Host => Arc::new(procfs::ProcSource::host(d.clone(), probe)),
                Availability::Fixture => Arc::new(procfs::ProcSource::fixture(
                    d.clone(),
                    probe.fixture_dir.clone().unwrap_or_default(),
                )),
            }
        })
        .collect()
}

/// Polls sources sequentially, one tick at a time.
pub struct Collector {
    sources: Vec<Arc<dyn Source>>,
    timeout: Option<Duration>,
    errors: BTreeMap<String, u64>,
}

impl Collector {
    /// `timeout = None` reads sources inline on the calling thread.
    pub fn new(sources: Vec<Arc<dyn Source>>, timeout: Option<Duration>) -> Self {
        Collector {
            sources,
            timeout,
            errors: BTreeMap::new(),
        }
    }

    pub fn schemas(&self) -> Vec<TypeSchema> {
        self.sources
            .iter()
            .map(|s| s.descriptor().schema.clone())
            .collect()
    }

    /// Per-source error counts, keyed by type name.
    pub fn error_counts(&self) -> &BTreeMap<String, u64> {
        &self.errors
    }

    pub fn collect_once(&mut self, t: u64, active_jobs: &BTreeSet<String>) -> RecordGroup {
        let mut samples = Vec::new();
        for i in 0..self.sources.len() {
            let source = Arc::clone(&self.sources[i]);
            let result = self.read_source(&source, t).and_then(|s| check_samples(&source, s));
            match result {
                Ok(s) => samples.extend(s),
                Err(e) => {
                    log::warn!("{e}");
                    *self
                        .errors
                        .entry(source.descriptor().type_name.clone())
                        .or_default() += 1;
                }
            }
        }
        RecordGroup {
            timestamp: t,
            job_ids: active_jobs.clone(),
            samples,
        }
    }

    fn read_source(&self, source: &Arc<dyn Source>, t: u64) -> Result<Vec<Sample>, SourceError> {
        let Some(timeout) = self.timeout else {
            return source.read(t);
        };
        let (tx, rx) = mpsc::channel();
        let worker = Arc::clone(source);
        std::thread::spawn(move || {
            let _ = tx.send(worker.read(t));
        });
        rx.recv_timeout(timeout)
            .unwrap_or_else(|_| Err(SourceError::Timeout(source.descriptor().type_name.clone())))
    }
}

fn check_samples(source: &Arc<dyn Source>, samples: Vec<Sample>) -> Result<Vec<Sample>, SourceError> {
    let d = source.descriptor();
    let mut devices = HashSet::new();
    for s in &samples {
        let reason = if s.type_name != d.type_name {
            Some(format!("sample of foreign type {}", s.type_name))
        } else if s.values.len() != d.schema.fields.len() {
            Some(format!("device {} has {} values", s.device_id, s.values.len()))
        } else if !devices.insert(s.device_id) {
            Some(format!("device {} repeated", s.device_id))
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(SourceError::Invalid {
                type_name: d.type_name.clone(),
                reason,
            });
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicBool, Ordering};

    struct Broken(SourceDescriptor);

    impl Source for Broken {
        fn descriptor(&self) -> &SourceDescriptor {
            &self.0
        }
        fn read(&self, _t: u64) -> Result<Vec<Sample>, SourceError> {
            Err(SourceError::Invalid {
                type_name: self.0.type_name.clone(),
                reason: "broken on purpose".into(),
            })
        }
    }

    struct Slow(SourceDescriptor, Arc<AtomicBool>);

    impl Source for Slow {
        fn descriptor(&self) -> &SourceDescriptor {
            &self.0
        }
        fn read(&self, _t: u64) -> Result<Vec<Sample>, SourceError> {
            std::thread::sleep(Duration::from_millis(500));
            self.1.store(true, Ordering::SeqCst);
            Ok(vec![])
        }
    }

    fn scenario() -> Arc<SyntheticScenario> {
        Arc::new(SyntheticScenario::single_job(
            "271828", 16, 16, 0.0, 1000, 4600,
        ))
    }

    fn synthetic_collector() -> Collector {
        let descriptors = list_sources(&Probe::synthetic_only(), 16, 4);
        let sources = build_sources(&descriptors, &Probe::synthetic_only(), &scenario(), 0);
        Collector::new(sources, None)
    }

    #[test]
    fn event_sets() {
        assert_eq!(
            CounterEventSet::for_arch(Arch::Opteron).metadata_value(),
            "flops,mem_access,dcache_fill,numa_traffic"
        );
        assert_eq!(
            CounterEventSet::for_arch(Arch::NehalemWestmere).metadata_value(),
            "flops,numa_traffic,l1d_hits"
        );
    }

    #[test]
    fn non_linux_is_synthetic_only() {
        let d = list_sources(&Probe::synthetic_only(), 16, 4);
        assert_eq!(d.len(), CANONICAL_TYPES.len());
        assert!(d.iter().all(|d| d.availability == Availability::Synthetic));
        assert!(d.iter().all(|d| d.schema.type_name == d.type_name));
        let cpu = d.iter().find(|d| d.type_name == "cpu").unwrap();
        assert_eq!(cpu.device_count, 16);
    }

    #[test]
    fn fixture_directory_detected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("cpu"),
            "cpu 1 2 3 4 5 6 7 8\ncpu0 430 0 120 93000 50 0 3 0\ncpu1 1 0 1 1 0 0 0 0\n",
        )
        .unwrap();
        let mut probe = Probe::synthetic_only();
        probe.fixture_dir = Some(dir.path().to_path_buf());
        let d = list_sources(&probe, 2, 1);
        let cpu = d.iter().find(|d| d.type_name == "cpu").unwrap();
        assert_eq!(cpu.availability, Availability::Fixture);
        assert_eq!(cpu.device_count, 2);
        assert!(d
            .iter()
            .filter(|d| d.type_name != "cpu")
            .all(|d| d.availability == Availability::Synthetic));
    }

    #[cfg(target_os = "linux")]
    #[test]
    fn linux_host_sources() {
        let probe = Probe {
            linux: true,
            ..Probe::detect()
        };
        let probe = Probe {
            fixture_dir: None,
            ..probe
        };
        if !std::path::Path::new("/proc/stat").exists() {
            return;
        }
        let d = list_sources(&probe, 1, 1);
        for t in ["cpu", "mem", "net", "block"] {
            let desc = d.iter().find(|d| d.type_name == t).unwrap();
            assert_eq!(desc.availability, Availability::Host, "{t}");
        }
        let sources = build_sources(&d, &probe, &scenario(), 0);
        let mut c = Collector::new(sources, Some(DEFAULT_SOURCE_TIMEOUT));
        let g = c.collect_once(100, &BTreeSet::new());
        assert!(g.samples.iter().any(|s| s.type_name == "cpu"));
    }

    #[test]
    fn tags_follow_active_jobs() {
        let mut c = synthetic_collector();
        let jobs: BTreeSet<String> = ["271828".to_string()].into();
        let g = c.collect_once(2000, &jobs);
        assert_eq!(g.job_ids, jobs);
        let g = c.collect_once(9000, &BTreeSet::new());
        assert!(g.job_ids.is_empty());
        assert_eq!(g.samples.len() as u32, 16 + 4 + 1 + 1 + 1 + 1 + 1 + 1 + 2 + 1 + 16);
    }

    #[test]
    fn failing_source_is_isolated() {
        let descriptors = list_sources(&Probe::synthetic_only(), 16, 4);
        let mut sources = build_sources(&descriptors, &Probe::synthetic_only(), &scenario(), 0);
        let net = descriptors.iter().position(|d| d.type_name == "net").unwrap();
        sources[net] = Arc::new(Broken(descriptors[net].clone()));
        let mut c = Collector::new(sources, None);
        let g = c.collect_once(2000, &BTreeSet::new());
        assert!(g.samples.iter().all(|s| s.type_name != "net"));
        assert!(g.samples.iter().any(|s| s.type_name == "cpu"));
        assert_eq!(c.error_counts().get("net"), Some(&1));
        assert_eq!(c.error_counts().len(), 1);
    }

    #[test]
    fn all_sources_failing_still_emits() {
        let d = list_sources(&Probe::synthetic_only(), 1, 1);
        let sources: Vec<Arc<dyn Source>> =
            d.iter().map(|d| Arc::new(Broken(d.clone())) as Arc<dyn Source>).collect();
        let mut c = Collector::new(sources, None);
        let g = c.collect_once(5, &BTreeSet::new());
        assert_eq!(g.timestamp, 5);
        assert!(g.samples.is_empty());
    }

    #[test]
    fn slow_source_times_out() {
        let d = list_sources(&Probe::synthetic_only(), 1, 1);
        let done = Arc::new(AtomicBool::new(false));
        let sources: Vec<Arc<dyn Source>> = vec![Arc::new(Slow(d[0].clone(), Arc::clone(&done)))];
        let mut c = Collector::new(sources, Some(Duration::from_millis(50)));
        let start = std::time::Instant::now();
        let g = c.collect_once(5, &BTreeSet::new());
        assert!(start.elapsed() < Duration::from_millis(400));
        assert!(g.samples.is_empty());
        assert_eq!(c.error_counts().get("cpu"), Some(&1));
        assert!(!done.load(Ordering::SeqCst));
    }
}
