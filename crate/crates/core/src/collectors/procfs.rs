//! Readers for kernel accounting text (`/proc/stat`, `/proc/meminfo`, ...)
//! and for fixture directories holding captured copies of it.
//!
//! Types without a kernel text layout (`ipc`, `fs`, `ib`, `pmc`) are served
//! from fixtures in pre-rendered form: one `<device> <v1> <v2> ...` line per
//! device.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Probe, Source, SourceDescriptor, SourceError};
use crate::record_format::Sample;

fn layout(type_name: &str, line: &str) -> SourceError {
    SourceError::Layout {
        type_name: type_name.to_string(),
        line: line.to_string(),
    }
}

fn numbers<'a>(type_name: &str, line: &str, it: impl Iterator<Item = &'a str>) -> Result<Vec<u64>, SourceError> {
    it.map(|v| v.parse::<u64>().map_err(|_| layout(type_name, line)))
        .collect()
}

/// Parses per-cpu lines of `/proc/stat`. The aggregate `cpu` line and
/// non-cpu lines are ignored; values are in USER_HZ (centiseconds).
pub fn parse_cpu_lines(text: &str) -> Result<Vec<Sample>, SourceError> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let Some(label) = parts.next() else { continue };
        let Some(index) = label.strip_prefix("cpu") else { continue };
        if index.is_empty() {
            continue;
        }
        let device_id: u32 = index.parse().map_err(|_| layout("cpu", line))?;
        let values = numbers("cpu", line, parts)?;
        if values.len() < 7 {
            return Err(layout("cpu", line));
        }
        out.push(Sample {
            type_name: "cpu".into(),
            device_id,
            values: values[..7].to_vec(),
        });
    }
    Ok(out)
}

/// Parses `/proc/meminfo` (one device) or concatenated per-node
/// `node*/meminfo` files (`Node N Key: value kB`).
pub fn parse_meminfo(text: &str) -> Result<Vec<Sample>, SourceError> {
    let mut nodes: BTreeMap<u32, BTreeMap<String, u64>> = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (node, rest) = match line.strip_prefix("Node ") {
            Some(rest) => {
                let (n, rest) = rest.trim_start().split_once(' ').ok_or_else(|| layout("mem", line))?;
                (n.parse::<u32>().map_err(|_| layout("mem", line))?, rest)
            }
            None => (0, line),
        };
        let (key, value) = rest.split_once(':').ok_or_else(|| layout("mem", line))?;
        let value = value
            .split_whitespace()
            .next()
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| layout("mem", line))?;
        nodes.entry(node).or_default().insert(key.trim().to_string(), value);
    }
    nodes
        .into_iter()
        .map(|(device_id, kv)| {
            let get = |k: &str| kv.get(k).copied();
            let (Some(total), Some(free)) = (get("MemTotal"), get("MemFree")) else {
                return Err(SourceError::Invalid {
                    type_name: "mem".into(),
                    reason: format!("node {device_id} lacks MemTotal/MemFree"),
                });
            };
            let cached = get("Cached").unwrap_or(0) + get("Buffers").unwrap_or(0);
            let used = total.saturating_sub(free).saturating_sub(cached);
            Ok(Sample {
                type_name: "mem".into(),
                device_id,
                values: vec![total, free, used, cached],
            })
        })
        .collect()
}

pub fn parse_vmstat(text: &str) -> Result<Vec<Sample>, SourceError> {
    const KEYS: [&str; 6] = ["pgpgin", "pgpgout", "pswpin", "pswpout", "pgfault", "pgmajfault"];
    let mut values = [None; 6];
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let (Some(k), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(layout("vm", line));
        };
        if let Some(i) = KEYS.iter().position(|key| *key == k) {
            values[i] = Some(v.parse::<u64>().map_err(|_| layout("vm", line))?);
        }
    }
    if values.iter().all(Option::is_none) {
        return Err(SourceError::Invalid {
            type_name: "vm".into(),
            reason: "no paging counters found".into(),
        });
    }
    Ok(vec![Sample {
        type_name: "vm".into(),
        device_id: 0,
        values: values.iter().map(|v| v.unwrap_or(0)).collect(),
    }])
}

/// Parses `/proc/loadavg`; load averages are scaled by 100.
pub fn parse_loadavg(text: &str) -> Result<Vec<Sample>, SourceError> {
    let line = text.lines().next().unwrap_or_default();
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() < 4 {
        return Err(layout("load", line));
    }
    let mut values = Vec::with_capacity(5);
    for p in &parts[..3] {
        let v: f64 = p.parse().map_err(|_| layout("load", line))?;
        values.push((v * 100.0).round() as u64);
    }
    let (running, threads) = parts[3].split_once('/').ok_or_else(|| layout("load", line))?;
    values.push(running.parse().map_err(|_| layout("load", line))?);
    values.push(threads.parse().map_err(|_| layout("load", line))?);
    Ok(vec![Sample {
        type_name: "load".into(),
        device_id: 0,
        values,
    }])
}

/// Parses `/proc/net/dev`, skipping the loopback interface. Devices are
/// numbered in file order.
pub fn parse_net_dev(text: &str) -> Result<Vec<Sample>, SourceError> {
    let mut out = Vec::new();
    for line in text.lines() {
        let Some((name, rest)) = line.split_once(':') else {
            if line.contains('|') || line.trim().is_empty() {
                continue;
            }
            return Err(layout("net", line));
        };
        if name.trim() == "lo" {
            continue;
        }
        let v = numbers("net", line, rest.split_whitespace())?;
        if v.len() < 10 {
            return Err(layout("net", line));
        }
        out.push(Sample {
            type_name: "net".into(),
            device_id: out.len() as u32,
            values: vec![v[0], v[1], v[8], v[9]],
        });
    }
    Ok(out)
}

/// Parses `/proc/diskstats`, skipping loop and ram devices.
pub fn parse_diskstats(text: &str) -> Result<Vec<Sample>, SourceError> {
    let mut out = Vec::new();
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        if parts.len() < 10 {
            return Err(layout("block", line));
        }
        if parts[2].starts_with("loop") || parts[2].starts_with("ram") {
            continue;
        }
        let v = numbers("block", line, parts[3..10].iter().copied())?;
        out.push(Sample {
            type_name: "block".into(),
            device_id: out.len() as u32,
            values: vec![v[0], v[2], v[4], v[6]],
        });
    }
    Ok(out)
}

/// Interrupt totals from the `intr` and `softirq` lines of `/proc/stat`.
pub fn parse_irq(text: &str) -> Result<Vec<Sample>, SourceError> {
    let mut hard = None;
    let mut soft = None;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let slot = match parts.next() {
            Some("intr") => &mut hard,
            Some("softirq") => &mut soft,
            _ => continue,
        };
        let total = parts
            .next()
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| layout("irq", line))?;
        *slot = Some(total);
    }
    match (hard, soft) {
        (Some(h), Some(s)) => Ok(vec![Sample {
            type_name: "irq".into(),
            device_id: 0,
            values: vec![h, s],
        }]),
        _ => Err(SourceError::Invalid {
            type_name: "irq".into(),
            reason: "intr/softirq lines missing".into(),
        }),
    }
}

/// Parses pre-rendered `<device> <v1> ...` fixture lines.
pub fn parse_rendered(type_name: &str, text: &str) -> Result<Vec<Sample>, SourceError> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let device_id = parts
            .next()
            .and_then(|d| d.parse::<u32>().ok())
            .ok_or_else(|| layout(type_name, line))?;
        out.push(Sample {
            type_name: type_name.to_string(),
            device_id,
            values: numbers(type_name, line, parts)?,
        });
    }
    Ok(out)
}

/// Parses fixture or host text for `type_name` in its native layout.
pub fn parse_type(type_name: &str, text: &str) -> Result<Vec<Sample>, SourceError> {
    match type_name {
        "cpu" => parse_cpu_lines(text),
        "mem" => parse_meminfo(text),
        "vm" => parse_vmstat(text),
        "load" => parse_loadavg(text),
        "net" => parse_net_dev(text),
        "block" => parse_diskstats(text),
        "irq" => parse_irq(text),
        other => parse_rendered(other, text),
    }
}

fn read(type_name: &str, path: &Path) -> Result<String, SourceError> {
    fs::read_to_string(path).map_err(|e| SourceError::Read {
        type_name: type_name.to_string(),
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn read_host(type_name: &str, probe: &Probe) -> Result<String, SourceError> {
    let proc_file = |name: &str| probe.proc_root.join(name);
    match type_name {
        "cpu" | "irq" => read(type_name, &proc_file("stat")),
        "vm" => read(type_name, &proc_file("vmstat")),
        "load" => read(type_name, &proc_file("loadavg")),
        "net" => read(type_name, &proc_file("net/dev")),
        "block" => read(type_name, &proc_file("diskstats")),
        "mem" => {
            let nodes = numa_meminfo_paths(&probe.sys_root);
            if nodes.is_empty() {
                return read(type_name, &proc_file("meminfo"));
            }
            let mut text = String::new();
            for p in nodes {
                text.push_str(&read(type_name, &p)?);
            }
            Ok(text)
        }
        other => Err(SourceError::Invalid {
            type_name: other.to_string(),
            reason: "no host reader for this type".into(),
        }),
    }
}

fn numa_meminfo_paths(sys_root: &Path) -> Vec<PathBuf> {
    let dir = sys_root.join("devices/system/node");
    let Ok(entries) = fs::read_dir(&dir) else {
        return vec![];
    };
    let mut nodes: Vec<(u32, PathBuf)> = entries
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n = name.strip_prefix("node")?.parse().ok()?;
            let p = e.path().join("meminfo");
            p.is_file().then_some((n, p))
        })
        .collect();
    nodes.sort();
    nodes.into_iter().map(|(_, p)| p).collect()
}

pub(super) fn host_device_count(type_name: &str, probe: &Probe) -> Result<u32, SourceError> {
    let samples = parse_type(type_name, &read_host(type_name, probe)?)?;
    if samples.is_empty() {
        return Err(SourceError::Invalid {
            type_name: type_name.to_string(),
            reason: "no devices".into(),
        });
    }
    Ok(samples.len() as u32)
}

pub(super) fn fixture_device_count(type_name: &str, path: &Path) -> Result<u32, SourceError> {
    Ok(parse_type(type_name, &read(type_name, path)?)?.len() as u32)
}

/// Host node topology: (cores, sockets, mem_total_kb).
pub fn host_topology(probe: &Probe) -> Result<(u32, u32, u64), SourceError> {
    let cores = parse_cpu_lines(&read("cpu", &probe.proc_root.join("stat"))?)?.len() as u32;
    let mem_total_kb = parse_meminfo(&read("mem", &probe.proc_root.join("meminfo"))?)?
        .first()
        .map(|s| s.values[0])
        .unwrap_or(0);
    let mut packages = std::collections::BTreeSet::new();
    for cpu in 0..cores {
        let p = probe
            .sys_root
            .join(format!("devices/system/cpu/cpu{cpu}/topology/physical_package_id"));
        if let Ok(id) = fs::read_to_string(p) {
            packages.insert(id.trim().to_string());
        }
    }
    let sockets = (packages.len() as u32).clamp(1, cores.max(1));
    Ok((cores.max(1), sockets, mem_total_kb.max(1)))
}

enum Origin {
    Host(Probe),
    Fixture(PathBuf),
}

/// Reads one type from the live host or from a fixture directory.
pub struct ProcSource {
    descriptor: SourceDescriptor,
    origin: Origin,
}

impl ProcSource {
    pub fn host(descriptor: SourceDescriptor, probe: &Probe) -> Self {
        ProcSource {
            descriptor,
            origin: Origin::Host(probe.clone()),
        }
    }

    pub fn fixture(descriptor: SourceDescriptor, dir: PathBuf) -> Self {
        ProcSource {
            descriptor,
            origin: Origin::Fixture(dir),
        }
    }
}

impl Source for ProcSource {
    fn descriptor(&self) -> &SourceDescriptor {
        &self.descriptor
    }

    fn read(&self, _t: u64) -> Result<Vec<Sample>, SourceError> {
        let type_name = self.descriptor.type_name.as_str();
        let text = match &self.origin {
            Origin::Host(probe) => read_host(type_name, probe)?,
            Origin::Fixture(dir) => read(type_name, &dir.join(type_name))?,
        };
        parse_type(type_name, &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const STAT_16: &str = include_str!("../../tests/fixtures/proc/stat");

    #[test]
    fn cpu_line_maps_fields() {
        let s = parse_cpu_lines("cpu0 430 0 120 93000 50 0 3 0\n").unwrap();
        assert_eq!(
            s,
            vec![Sample {
                type_name: "cpu".into(),
                device_id: 0,
                values: vec![430, 0, 120, 93000, 50, 0, 3],
            }]
        );
    }

    #[test]
    fn aggregate_line_ignored() {
        assert!(parse_cpu_lines("cpu 1 2 3 4 5 6 7 8 9 10\n").unwrap().is_empty());
    }

    #[test]
    fn sixteen_core_fixture() {
        let s = parse_cpu_lines(STAT_16).unwrap();
        assert_eq!(s.len(), 16);
        assert!(s.iter().enumerate().all(|(i, s)| s.device_id == i as u32));
        let irq = parse_irq(STAT_16).unwrap();
        assert_eq!(irq[0].values.len(), 2);
    }

    #[test]
    fn bad_cpu_layout_names_line() {
        let err = parse_cpu_lines("cpu0 12 x\n").unwrap_err();
        match err {
            SourceError::Layout { line, .. } => assert_eq!(line, "cpu0 12 x"),
            other => panic!("{other:?}"),
        }
        assert!(parse_cpu_lines("cpu0 1 2 3\n").is_err());
    }

    #[test]
    fn meminfo_single_and_numa() {
        let single = "MemTotal:       32000 kB\nMemFree:        10000 kB\nBuffers:   1000 kB\nCached:          5000 kB\n";
        let s = parse_meminfo(single).unwrap();
        assert_eq!(s[0].values, vec![32000, 10000, 16000, 6000]);

        let numa = include_str!("../../tests/fixtures/proc/node_meminfo");
        let s = parse_meminfo(numa).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[3].device_id, 3);
        assert_eq!(s[0].values[0], 8388608);
    }

    #[test]
    fn other_host_layouts() {
        let load = parse_loadavg("0.52 0.58 1.59 3/467 12345\n").unwrap();
        assert_eq!(load[0].values, vec![52, 58, 159, 3, 467]);

        let net = parse_net_dev(include_str!("../../tests/fixtures/proc/net_dev")).unwrap();
        assert_eq!(net.len(), 2);
        assert_eq!(net[0].values, vec![1000, 10, 2000, 20]);

        let block = parse_diskstats(include_str!("../../tests/fixtures/proc/diskstats")).unwrap();
        assert_eq!(block.len(), 2);
        assert_eq!(block[0].values, vec![100, 2000, 50, 800]);

        let vm = parse_vmstat("pgpgin 5\npgpgout 6\npswpin 0\npswpout 0\npgfault 99\npgmajfault 1\nnr_free_pages 3\n").unwrap();
        assert_eq!(vm[0].values, vec![5, 6, 0, 0, 99, 1]);
    }

    #[test]
    fn rendered_fixture() {
        let s = parse_rendered("pmc", "# core flops mem dc numa\n0 1 2 3 4\n1 5 6 7 8\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].values, vec![5, 6, 7, 8]);
        assert!(parse_rendered("pmc", "x 1\n").is_err());
    }

    #[test]
    fn fixture_source_reads_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cpu"), STAT_16).unwrap();
        let d = SourceDescriptor {
            type_name: "cpu".into(),
            schema: super::super::canonical_schema("cpu", super::super::Arch::Synthetic).unwrap(),
            device_count: 16,
            availability: super::super::Availability::Fixture,
        };
        let src = ProcSource::fixture(d, dir.path().to_path_buf());
        assert_eq!(src.read(0).unwrap().len(), 16);
    }
}
