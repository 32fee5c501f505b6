//! Prolog/epilog/rotation entry points and the per-node appender.
//!
//! Each node owns a directory `<stats_dir>/<hostname>/` holding daily raw
//! files, a small `state.json` with the active job set and register-file
//! state, and a `.lock` file used as an advisory lock so that cron ticks and
//! scheduler hooks serialize through one appender at a time.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectors::{Arch, Collector, CounterEventSet, SyntheticScenario};
use crate::record_format::{self, Entry, FileHeader, FormatError, Mark};

/// Env var fallback for the stats directory.
pub const STATS_DIR_ENV: &str = "JOBSTATS_DIR";

const STATE_FILE: &str = "state.json";
const LOCK_FILE: &str = ".lock";
const WRITE_ATTEMPTS: u32 = 4;

#[derive(Error, Debug)]
pub enum HookError {
    #[error("storage error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("corrupt hook state {path}: {reason}")]
    State { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HookError + '_ {
    move |source| HookError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The virtual counter register file of one node.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegisterFile {
    pub programmed: Option<CounterEventSet>,
    /// Job whose prolog programmed the current event set.
    pub owner_job: Option<String>,
    pub program_count: u64,
}

impl RegisterFile {
    fn program(&mut self, events: CounterEventSet, job_id: &str) {
        self.programmed = Some(events);
        self.owner_job = Some(job_id.to_string());
        self.program_count += 1;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HookState {
    pub active_jobs: BTreeSet<String>,
    pub current_file: Option<String>,
    pub last_group_ts: Option<u64>,
    pub registers: RegisterFile,
}

/// What a hook invocation did, besides appending to the current file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookOutcome {
    pub warnings: Vec<String>,
    /// Set when this call programmed the counters.
    pub programmed: Option<CounterEventSet>,
}

/// Single appender for one node's raw files.
pub struct NodeAppender {
    dir: PathBuf,
    header: FileHeader,
    collector: Collector,
    state: HookState,
    writer: Option<BufWriter<File>>,
    retry_base: Duration,
    _lock: File,
}

impl NodeAppender {
    /// Opens `<stats_dir>/<header.hostname>/`, taking the node's advisory
    /// lock and loading persisted hook state.
    pub fn open(stats_dir: &Path, header: FileHeader, collector: Collector) -> Result<Self, HookError> {
        header.validate()?;
        let dir = stats_dir.join(&header.hostname);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let lock_path = dir.join(LOCK_FILE);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        lock.lock().map_err(io_err(&lock_path))?;

        let state_path = dir.join(STATE_FILE);
        let state = match fs::read_to_string(&state_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| HookError::State {
                path: state_path.clone(),
                reason: e.to_string(),
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => HookState::default(),
            Err(e) => return Err(io_err(&state_path)(e)),
        };
        Ok(NodeAppender {
            dir,
            header,
            collector,
            state,
            writer: None,
            retry_base: Duration::from_millis(10),
            _lock: lock,
        })
    }

    pub fn state(&self) -> &HookState {
        &self.state
    }

    pub fn node_dir(&self) -> &Path {
        &self.dir
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    pub fn current_file(&self) -> Option<PathBuf> {
        self.state.current_file.as_ref().map(|f| self.dir.join(f))
    }

    /// Prolog: mark the job, program the counters if the node is free, and
    /// take a first sample burst tagged with the job.
    pub fn begin_job(&mut self, job_id: &str, arch: Arch, t: u64) -> Result<HookOutcome, HookError> {
        let mut out = HookOutcome::default();
        if self.state.active_jobs.contains(job_id) {
            out.warnings.push(format!("duplicate begin for job {job_id}"));
            let mut mark = Mark::begin(job_id, t);
            mark.warning = Some("duplicate_begin".into());
            self.append(&[Entry::Mark(mark)], t)?;
            return Ok(out);
        }
        let events = CounterEventSet::for_arch(arch);
        if let Some(schema) = self.header.schema("pmc") {
            let names: Vec<&str> = schema.fields.iter().map(|f| f.name.as_str()).collect();
            if names != events.events.iter().map(String::as_str).collect::<Vec<_>>() {
                out.warnings.push(format!(
                    "pmc schema of {} does not match {} events",
                    self.header.hostname,
                    arch.as_str()
                ));
            }
        }
        // Counters already in use by a running job are only read, never
        // reprogrammed.
        let recorded = if self.state.active_jobs.is_empty() {
            self.state.registers.program(events.clone(), job_id);
            out.programmed = Some(events.clone());
            events
        } else {
            self.state.registers.programmed.clone().unwrap_or(events)
        };
        self.state.active_jobs.insert(job_id.to_string());
        let mut entries = vec![
            Entry::Mark(Mark::begin(job_id, t)),
            Entry::Meta {
                key: "pmc_events".into(),
                value: recorded.metadata_value(),
            },
        ];
        entries.extend(self.sample(t));
        self.append(&entries, t)?;
        Ok(out)
    }

    /// Epilog: a final sample burst, then the end mark.
    pub fn end_job(&mut self, job_id: &str, t: u64) -> Result<HookOutcome, HookError> {
        let mut out = HookOutcome::default();
        let mut mark = Mark::end(job_id, t);
        if !self.state.active_jobs.contains(job_id) {
            log::warn!("end for job {job_id} without a matching begin");
            out.warnings.push(format!("end without begin for job {job_id}"));
            mark.warning = Some("end_without_begin".into());
        }
        let mut entries: Vec<Entry> = self.sample(t).into_iter().collect();
        entries.push(Entry::Mark(mark));
        self.append(&entries, t)?;
        self.state.active_jobs.remove(job_id);
        if self.state.registers.owner_job.as_deref() == Some(job_id) {
            self.state.registers.owner_job = None;
        }
        Ok(out)
    }

    /// Periodic tick.
    pub fn collect(&mut self, t: u64) -> Result<HookOutcome, HookError> {
        let mut out = HookOutcome::default();
        match self.sample(t) {
            Some(g) => self.append(&[g], t)?,
            None => out.warnings.push(format!("tick at {t} not after previous sample; skipped")),
        }
        Ok(out)
    }

    /// Closes the current file with `%rotate` and starts a freshly headered one.
    pub fn rotate(&mut self, t: u64) -> Result<HookOutcome, HookError> {
        self.append(&[Entry::Mark(Mark::rotate(t))], t)?;
        self.flush()?;
        self.writer = None;
        self.state.current_file = None;
        self.open_file(t)?;
        self.save_state()?;
        Ok(HookOutcome::default())
    }

    /// Flushes buffered records and persists hook state.
    pub fn finish(mut self) -> Result<(), HookError> {
        self.flush()?;
        self.save_state()
    }

    fn sample(&mut self, t: u64) -> Option<Entry> {
        if self.state.last_group_ts.is_some_and(|last| t <= last) {
            return None;
        }
        self.state.last_group_ts = Some(t);
        Some(Entry::Group(self.collector.collect_once(t, &self.state.active_jobs)))
    }

    fn append(&mut self, entries: &[Entry], t: u64) -> Result<(), HookError> {
        let mut text = String::new();
        for e in entries {
            text.push_str(&record_format::write_entry(&self.header, e)?);
        }
        if self.writer.is_none() {
            self.open_file(t)?;
        }
        let path = self.current_file().expect("file opened");
        let writer = self.writer.as_mut().expect("file opened");
        writer.write_all(text.as_bytes()).map_err(io_err(&path))
    }

    fn open_file(&mut self, t: u64) -> Result<(), HookError> {
        let reusable = self
            .state
            .current_file
            .as_ref()
            .filter(|name| self.header_matches(&self.dir.join(name)));
        let name = match reusable {
            Some(name) => name.clone(),
            None => {
                let name = self.fresh_name(t);
                let header = record_format::write_header(&self.header)?;
                let path = self.dir.join(&name);
                self.with_retry(&path, |p| fs::write(p, header.as_bytes()))?;
                self.state.current_file = Some(name.clone());
                name
            }
        };
        let path = self.dir.join(&name);
        let file = self.with_retry(&path, |p| OpenOptions::new().append(true).open(p))?;
        self.writer = Some(BufWriter::new(file));
        Ok(())
    }

    /// True if `path` exists and was written with this appender's header.
    fn header_matches(&self, path: &Path) -> bool {
        let Ok(file) = File::open(path) else {
            return false;
        };
        match record_format::RecordReader::new(std::io::BufReader::new(file), record_format::ParseMode::Strict) {
            Ok(r) => *r.header() == self.header,
            Err(_) => false,
        }
    }

    fn fresh_name(&self, t: u64) -> String {
        let day = chrono::DateTime::from_timestamp(t as i64, 0)
            .unwrap_or_default()
            .format("%Y%m%d")
            .to_string();
        let mut name = format!("{day}.stats");
        let mut n = 1;
        while self.dir.join(&name).exists() {
            name = format!("{day}.{n}.stats");
            n += 1;
        }
        name
    }

    fn with_retry<T>(
        &self,
        path: &Path,
        mut op: impl FnMut(&Path) -> std::io::Result<T>,
    ) -> Result<T, HookError> {
        let mut delay = self.retry_base;
        let mut attempt = 1;
        loop {
            match op(path) {
                Ok(v) => return Ok(v),
                Err(e) if attempt >= WRITE_ATTEMPTS => {
                    log::error!("giving up on {} after {attempt} attempts: {e}", path.display());
                    return Err(io_err(path)(e));
                }
                Err(e) => {
                    log::warn!("retrying {}: {e}", path.display());
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }

    fn flush(&mut self) -> Result<(), HookError> {
        if let Some(w) = self.writer.as_mut() {
            let path = self.dir.join(self.state.current_file.as_deref().unwrap_or_default());
            w.flush().map_err(io_err(&path))?;
        }
        Ok(())
    }

    fn save_state(&self) -> Result<(), HookError> {
        let path = self.dir.join(STATE_FILE);
        let tmp = self.dir.join(format!("{STATE_FILE}.tmp"));
        let text = serde_json::to_string_pretty(&self.state).expect("state serializes");
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

/// How to describe the local machine when hooks run on a real node.
#[derive(Debug, Clone)]
pub struct LocalNode {
    pub hostname: Option<String>,
    pub interval: u64,
    pub arch: Arch,
    pub source_timeout: Option<Duration>,
}

impl Default for LocalNode {
    fn default() -> Self {
        LocalNode {
            hostname: None,
            interval: 600,
            arch: Arch::Synthetic,
            source_timeout: Some(crate::collectors::DEFAULT_SOURCE_TIMEOUT),
        }
    }
}

fn local_hostname() -> String {
    let raw = fs::read_to_string("/proc/sys/kernel/hostname")
        .ok()
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_default();
    let name: String = raw.trim().chars().filter(|c| !c.is_whitespace()).collect();
    if name.is_empty() {
        "localhost".into()
    } else {
        name
    }
}

/// Appender for this machine: host/fixture sources where available,
/// synthetic stand-ins for the rest.
pub fn open_local(stats_dir: &Path, node: &LocalNode) -> Result<NodeAppender, HookError> {
    use crate::collectors::{build_sources, list_sources, procfs, Probe};

    let mut probe = Probe::detect();
    probe.arch = node.arch;
    let (cores, sockets, mem_total_kb) = if probe.linux {
        procfs::host_topology(&probe).unwrap_or((16, 4, 32 * 1024 * 1024))
    } else {
        (16, 4, 32 * 1024 * 1024)
    };
    let hostname = node.hostname.clone().unwrap_or_else(local_hostname);
    let descriptors = list_sources(&probe, cores, sockets);
    let stand_in = Arc::new(SyntheticScenario {
        seed: 0,
        nodes: 1,
        cores_per_node: cores,
        sockets_per_node: sockets,
        mem_total_kb,
        start: 0,
        end: u64::MAX / 2,
        interval: node.interval,
        arch: node.arch,
        hostname_prefix: "n".into(),
        wrap_offset: 0,
        jobs: Vec::new(),
    });
    let header = FileHeader {
        schema_version: record_format::SCHEMA_VERSION.into(),
        hostname,
        cores,
        sockets,
        mem_total_kb,
        extras: vec![("interval".into(), node.interval.to_string())],
        schemas: descriptors.iter().map(|d| d.schema.clone()).collect(),
    };
    let sources = build_sources(&descriptors, &probe, &stand_in, 0);
    NodeAppender::open(stats_dir, header, Collector::new(sources, node.source_timeout))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum SimEvent {
    Rotate,
    End(usize),
    Begin(usize),
    Tick,
}

/// Drives the hooks for every node of `scenario` over its whole window,
/// writing raw files under `stats_dir`: a tick every `interval` seconds,
/// prolog/epilog at job edges and a rotation at each UTC midnight.
/// Nodes are generated in parallel.
pub fn simulate(scenario: &SyntheticScenario, stats_dir: &Path) -> Result<Vec<PathBuf>, HookError> {
    let scenario = Arc::new(scenario.clone());
    let results: Vec<Result<Vec<PathBuf>, HookError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..scenario.nodes)
            .map(|node| {
                let scenario = Arc::clone(&scenario);
                scope.spawn(move || simulate_node(&scenario, node, stats_dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let mut files = Vec::new();
    for r in results {
        files.extend(r?);
    }
    files.sort();
    Ok(files)
}

pub fn simulate_node(
    scenario: &Arc<SyntheticScenario>,
    node: u32,
    stats_dir: &Path,
) -> Result<Vec<PathBuf>, HookError> {
    let sources = crate::collectors::build_sources(
        &scenario.descriptors(),
        &crate::collectors::Probe::synthetic_only(),
        scenario,
        node,
    );
    let collector = Collector::new(sources, None);
    let mut appender = NodeAppender::open(stats_dir, scenario.header(node), collector)?;

    let mut events: Vec<(u64, SimEvent)> = Vec::new();
    let mut t = scenario.start;
    while t <= scenario.end {
        events.push((t, SimEvent::Tick));
        t += scenario.interval;
    }
    let mut midnight = (scenario.start / 86_400 + 1) * 86_400;
    while midnight <= scenario.end {
        events.push((midnight, SimEvent::Rotate));
        midnight += 86_400;
    }
    for (i, j) in scenario.jobs.iter().enumerate() {
        if j.nodes.contains(&node) {
            events.push((j.start, SimEvent::Begin(i)));
            events.push((j.end, SimEvent::End(i)));
        }
    }
    events.sort();

    for (t, ev) in events {
        match ev {
            SimEvent::Tick => {
                appender.collect(t)?;
            }
            SimEvent::Rotate => {
                appender.rotate(t)?;
            }
            SimEvent::Begin(i) => {
                appender.begin_job(&scenario.jobs[i].job_id, scenario.arch, t)?;
            }
            SimEvent::End(i) => {
                appender.end_job(&scenario.jobs[i].job_id, t)?;
            }
        }
    }
    let dir = appender.node_dir().to_path_buf();
    appender.finish()?;
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "stats"))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collectors::{build_sources, Probe};
    use crate::record_format::{parse_file, MarkKind, ParseMode};

    const T0: u64 = 1_325_808_000;

    fn appender(dir: &Path, scenario: &SyntheticScenario) -> NodeAppender {
        let s = Arc::new(scenario.clone());
        let sources = build_sources(&s.descriptors(), &Probe::synthetic_only(), &s, 0);
        NodeAppender::open(dir, s.header(0), Collector::new(sources, None)).unwrap()
    }

    fn scenario() -> SyntheticScenario {
        SyntheticScenario::single_job("271828", 16, 16, 0.0, T0 + 100, T0 + 7300)
    }

    fn entries(path: &Path) -> Vec<Entry> {
        let text = fs::read_to_string(path).unwrap();
        parse_file(&text, ParseMode::Strict).unwrap().entries
    }

    #[test]
    fn begin_records_event_set_and_programs() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = appender(dir.path(), &scenario());
        let out = a.begin_job("271828", Arch::Opteron, T0 + 100).unwrap();
        assert_eq!(out.programmed, Some(CounterEventSet::for_arch(Arch::Opteron)));
        let path = a.current_file().unwrap();
        a.finish().unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("%begin 271828\n$pmc_events flops,mem_access,dcache_fill,numa_traffic\n"));
        assert!(path.ends_with("n001/20120106.stats"));
    }

    #[test]
    fn nehalem_event_set_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = appender(dir.path(), &scenario());
        let out = a.begin_job("9", Arch::NehalemWestmere, T0).unwrap();
        // The synthetic node's pmc schema is the Opteron-style set.
        assert_eq!(out.warnings.len(), 1);
        let path = a.current_file().unwrap();
        a.finish().unwrap();
        assert!(fs::read_to_string(path)
            .unwrap()
            .contains("$pmc_events flops,numa_traffic,l1d_hits\n"));
    }

    #[test]
    fn duplicate_begin_is_annotated() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = appender(dir.path(), &scenario());
        a.begin_job("271828", Arch::Synthetic, T0 + 100).unwrap();
        let out = a.begin_job("271828", Arch::Synthetic, T0 + 110).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.programmed.is_none());
        let path = a.current_file().unwrap();
        a.finish().unwrap();
        let marks: Vec<Mark> = entries(&path)
            .into_iter()
            .filter_map(|e| match e {
                Entry::Mark(m) => Some(m),
                _ => None,
            })
            .collect();
        assert_eq!(marks.len(), 2);
        assert_eq!(marks[1].warning.as_deref(), Some("duplicate_begin"));
    }

    #[test]
    fn begin_final_group_end_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = appender(dir.path(), &scenario());
        a.begin_job("271828", Arch::Synthetic, T0 + 100).unwrap();
        a.collect(T0 + 600).unwrap();
        a.end_job("271828", T0 + 700).unwrap();
        let path = a.current_file().unwrap();
        a.finish().unwrap();
        let e = entries(&path);
        let kinds: Vec<String> = e
            .iter()
            .map(|e| match e {
                Entry::Mark(m) => m.kind.to_string(),
                Entry::Group(g) => format!("group@{}", g.timestamp - T0),
                Entry::Meta { key, .. } => key.clone(),
            })
            .collect();
        assert_eq!(
            kinds,
            ["begin", "pmc_events", "group@100", "group@600", "group@700", "end"]
        );
        let Entry::Group(last) = &e[4] else { panic!() };
        assert!(last.job_ids.contains("271828"));
    }

    #[test]
    fn end_without_begin_warns() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = appender(dir.path(), &scenario());
        let out = a.end_job("5", T0).unwrap();
        assert_eq!(out.warnings.len(), 1);
        let path = a.current_file().unwrap();
        a.finish().unwrap();
        assert!(fs::read_to_string(path).unwrap().contains("%end 5 warn=end_without_begin\n"));
    }

    #[test]
    fn overlapping_jobs_share_tags_and_counters() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = appender(dir.path(), &scenario());
        let first = a.begin_job("1", Arch::Synthetic, T0).unwrap();
        let second = a.begin_job("2", Arch::Synthetic, T0 + 10).unwrap();
        assert!(first.programmed.is_some());
        assert!(second.programmed.is_none());
        a.collect(T0 + 600).unwrap();
        a.end_job("1", T0 + 700).unwrap();
        a.collect(T0 + 1200).unwrap();
        let path = a.current_file().unwrap();
        a.finish().unwrap();
        let groups: Vec<RecordGroupTags> = entries(&path)
            .into_iter()
            .filter_map(|e| match e {
                Entry::Group(g) => Some((g.timestamp - T0, g.job_ids.into_iter().collect())),
                _ => None,
            })
            .collect();
        let both: Vec<String> = vec!["1".into(), "2".into()];
        assert_eq!(groups[1], (10, both.clone()));
        assert_eq!(groups[2], (600, both.clone()));
        assert_eq!(groups[3], (700, both));
        assert_eq!(groups[4], (1200, vec!["2".to_string()]));
    }

    type RecordGroupTags = (u64, Vec<String>);

    #[test]
    fn rotate_keeps_tags_and_headers() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = appender(dir.path(), &scenario());
        a.begin_job("271828", Arch::Synthetic, T0).unwrap();
        let first = a.current_file().unwrap();
        a.rotate(T0 + 50).unwrap();
        let second = a.current_file().unwrap();
        a.rotate(T0 + 60).unwrap();
        let third = a.current_file().unwrap();
        a.collect(T0 + 600).unwrap();
        a.finish().unwrap();
        assert_ne!(first, second);
        assert_ne!(second, third);

        let e1 = entries(&first);
        assert!(matches!(e1.last(), Some(Entry::Mark(m)) if m.kind == MarkKind::Rotate));
        let e2 = entries(&second);
        assert_eq!(e2.len(), 1, "second file holds only its rotate mark");
        let e3 = entries(&third);
        let Entry::Group(g) = &e3[0] else { panic!() };
        assert!(g.job_ids.contains("271828"));
    }

    #[test]
    fn state_survives_process_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let s = scenario();
        let mut a = appender(dir.path(), &s);
        a.begin_job("271828", Arch::Synthetic, T0).unwrap();
        a.finish().unwrap();
        let mut b = appender(dir.path(), &s);
        assert!(b.state().active_jobs.contains("271828"));
        b.collect(T0 + 600).unwrap();
        let path = b.current_file().unwrap();
        b.finish().unwrap();
        let e = entries(&path);
        assert_eq!(e.iter().filter(|e| matches!(e, Entry::Group(_))).count(), 2);
    }

    #[test]
    fn changed_header_starts_new_file() {
        let dir = tempfile::tempdir().unwrap();
        let s = scenario();
        let mut a = appender(dir.path(), &s);
        a.collect(T0).unwrap();
        let first = a.current_file().unwrap();
        a.finish().unwrap();
        let mut other = s.clone();
        other.interval = 300;
        let mut b = appender(dir.path(), &other);
        b.collect(T0 + 300).unwrap();
        let second = b.current_file().unwrap();
        b.finish().unwrap();
        assert_ne!(first, second);
        assert!(second.ends_with("20120106.1.stats"));
        let text = fs::read_to_string(&second).unwrap();
        assert!(parse_file(&text, ParseMode::Strict).is_ok());
    }

    #[test]
    fn unwritable_storage_fails() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let s = Arc::new(scenario());
        let sources = build_sources(&s.descriptors(), &Probe::synthetic_only(), &s, 0);
        let r = NodeAppender::open(&blocker, s.header(0), Collector::new(sources, None));
        assert!(matches!(r, Err(HookError::Io { .. })));
    }

    #[test]
    fn three_days_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = SyntheticScenario::single_job("7", 4, 4, 0.0, T0 + 3600, T0 + 7200);
        s.start = T0;
        s.end = T0 + 3 * 86_400 - 1;
        s.interval = 3600;
        let files = simulate(&s, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for f in &files {
            let text = fs::read_to_string(f).unwrap();
            assert!(parse_file(&text, ParseMode::Strict).is_ok());
        }
    }

    #[test]
    fn programming_only_at_uncontended_begins() {
        use rand::{Rng, SeedableRng};
        let dir = tempfile::tempdir().unwrap();
        let mut a = appender(dir.path(), &scenario());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut t = T0;
        let mut running: BTreeSet<String> = BTreeSet::new();
        for _ in 0..300 {
            t += rng.gen_range(1..400);
            let job = format!("{}", rng.gen_range(0..4));
            let before = a.state().registers.program_count;
            let out = match rng.gen_range(0..3) {
                0 => {
                    let free = running.is_empty();
                    let o = a.begin_job(&job, Arch::Synthetic, t).unwrap();
                    assert_eq!(o.programmed.is_some(), free && !running.contains(&job));
                    running.insert(job);
                    o
                }
                1 => {
                    running.remove(&job);
                    a.end_job(&job, t).unwrap()
                }
                _ => a.collect(t).unwrap(),
            };
            let after = a.state().registers.program_count;
            assert_eq!(after - before, u64::from(out.programmed.is_some()));
        }
        a.finish().unwrap();
    }
}
