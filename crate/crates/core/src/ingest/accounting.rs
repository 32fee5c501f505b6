//! Scheduler accounting records.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectors::SyntheticScenario;
use crate::record_format::is_job_id;

pub const ACCOUNTING_COLUMNS: [&str; 8] = [
    "job_id", "owner", "queue", "nodes", "wayness", "start", "end", "node_list",
];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AccountingRecord {
    pub job_id: String,
    pub owner: String,
    pub queue: String,
    pub nodes: u32,
    /// MPI processes per node.
    pub wayness: u32,
    pub start: u64,
    pub end: u64,
    pub node_list: Vec<String>,
}

impl AccountingRecord {
    pub fn wall_seconds(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn wall_hours(&self) -> f64 {
        self.wall_seconds() as f64 / 3600.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if !is_job_id(&self.job_id) {
            return Err(format!("invalid job id {:?}", self.job_id));
        }
        for (name, v) in [("owner", &self.owner), ("queue", &self.queue)] {
            if v.is_empty() || v.chars().any(|c| c.is_whitespace() || c == ',') {
                return Err(format!("invalid {name} {v:?}"));
            }
        }
        if self.end <= self.start {
            return Err(format!("end {} not after start {}", self.end, self.start));
        }
        if self.nodes == 0 || self.wayness == 0 {
            return Err("nodes and wayness must be positive".into());
        }
        if self.node_list.len() != self.nodes as usize {
            return Err(format!(
                "node_list has {} names but nodes={}",
                self.node_list.len(),
                self.nodes
            ));
        }
        let distinct: BTreeSet<&String> = self.node_list.iter().collect();
        if distinct.len() != self.node_list.len() || self.node_list.iter().any(|n| n.is_empty()) {
            return Err("node_list has empty or repeated names".into());
        }
        Ok(())
    }
}

#[derive(Error, Debug)]
pub enum AccountingError {
    #[error("accounting header lacks column {0}")]
    MissingColumn(&'static str),
    #[error("accounting csv: {0}")]
    Csv(#[from] csv::Error),
}

/// A rejected data row; `row` counts lines from 1, the header being row 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub row: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Accounting {
    pub records: Vec<AccountingRecord>,
    pub rejected: Vec<RowError>,
}

#[derive(Deserialize)]
struct RawRow {
    job_id: String,
    owner: String,
    queue: String,
    nodes: String,
    wayness: String,
    start: String,
    end: String,
    node_list: String,
}

pub fn load_accounting(text: &str) -> Result<Accounting, AccountingError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    for col in ACCOUNTING_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(AccountingError::MissingColumn(col));
        }
    }
    let mut out = Accounting::default();
    let mut seen = BTreeSet::new();
    for result in rdr.records() {
        let (row, parsed) = match result {
            Ok(rec) => {
                let row = rec.position().map_or(0, |p| p.line());
                let parsed = rec
                    .deserialize::<RawRow>(Some(&headers))
                    .map_err(|e| e.to_string())
                    .and_then(to_record);
                (row, parsed)
            }
            Err(e) => {
                let row = e.position().map_or(0, |p| p.line());
                (row, Err(e.to_string()))
            }
        };
        match parsed {
            Ok(r) if !seen.insert(r.job_id.clone()) => out.rejected.push(RowError {
                row,
                reason: format!("duplicate job id {}", r.job_id),
            }),
            Ok(r) => out.records.push(r),
            Err(reason) => {
                log::warn!("accounting row {row} rejected: {reason}");
                out.rejected.push(RowError { row, reason });
            }
        }
    }
    Ok(out)
}

fn to_record(raw: RawRow) -> Result<AccountingRecord, String> {
    fn num<T: std::str::FromStr>(name: &str, v: &str) -> Result<T, String> {
        v.parse().map_err(|_| format!("{name}: not a non-negative integer: {v:?}"))
    }
    let r = AccountingRecord {
        nodes: num("nodes", &raw.nodes)?,
        wayness: num("wayness", &raw.wayness)?,
        start: num("start", &raw.start)?,
        end: num("end", &raw.end)?,
        node_list: if raw.node_list.is_empty() {
            Vec::new()
        } else {
            raw.node_list.split(';').map(|s| s.trim().to_string()).collect()
        },
        job_id: raw.job_id,
        owner: raw.owner,
        queue: raw.queue,
    };
    r.validate()?;
    Ok(r)
}

pub fn write_accounting_csv(records: &[AccountingRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ACCOUNTING_COLUMNS).expect("in-memory write");
    for r in records {
        w.write_record([
            r.job_id.clone(),
            r.owner.clone(),
            r.queue.clone(),
            r.nodes.to_string(),
            r.wayness.to_string(),
            r.start.to_string(),
            r.end.to_string(),
            r.node_list.join(";"),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Accounting rows a scheduler would have produced for `scenario`.
pub fn scenario_accounting(scenario: &SyntheticScenario) -> Vec<AccountingRecord> {
    let mut records: Vec<AccountingRecord> = scenario
        .jobs
        .iter()
        .map(|j| AccountingRecord {
            job_id: j.job_id.clone(),
            owner: j.owner.clone(),
            queue: j.queue.clone(),
            nodes: j.nodes.len() as u32,
            wayness: j.wayness,
            start: j.start,
            end: j.end,
            node_list: j.nodes.iter().map(|&n| scenario.hostname(n)).collect(),
        })
        .collect();
    records.sort_by(|a, b| a.job_id.cmp(&b.job_id));
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "job_id,owner,queue,nodes,wayness,start,end,node_list\n";

    #[test]
    fn direct_mapping() {
        let a = load_accounting(&format!("{HEADER}271828,alice,normal,2,16,1000,8200,n001;n002\n")).unwrap();
        assert!(a.rejected.is_empty());
        let r = &a.records[0];
        assert_eq!(r.nodes, 2);
        assert_eq!(r.wayness, 16);
        assert_eq!(r.node_list, ["n001", "n002"]);
        assert_eq!(r.wall_seconds(), 7200);
    }

    #[test]
    fn bad_rows_are_reported_by_number() {
        let text = format!(
            "{HEADER}1,a,normal,1,16,1000,2000,n001\n2,a,normal,1,16,3000,3000,n001\n3,a,normal,2,16,1000,2000,n001\n4,a,normal,x,16,1000,2000,n001\n"
        );
        let a = load_accounting(&text).unwrap();
        assert_eq!(a.records.len(), 1);
        let rows: Vec<u64> = a.rejected.iter().map(|e| e.row).collect();
        assert_eq!(rows, [3, 4, 5]);
        assert!(a.rejected[1].reason.contains("node_list"));
    }

    #[test]
    fn missing_column_is_fatal() {
        let e = load_accounting("job_id,owner,queue,nodes,wayness,start,end\n1,a,b,1,1,1,2\n").unwrap_err();
        assert!(matches!(e, AccountingError::MissingColumn("node_list")));
    }

    #[test]
    fn column_order_is_free_and_round_trips() {
        let text = "node_list,job_id,owner,queue,nodes,wayness,start,end\nn001,7,bob,long,1,4,10,20\n";
        let a = load_accounting(text).unwrap();
        let again = load_accounting(&write_accounting_csv(&a.records)).unwrap();
        assert_eq!(a.records, again.records);
    }

    #[test]
    fn duplicate_job_rejected() {
        let text = format!("{HEADER}1,a,normal,1,16,1000,2000,n001\n1,a,normal,1,16,1000,2000,n001\n");
        let a = load_accounting(&text).unwrap();
        assert_eq!(a.records.len(), 1);
        assert_eq!(a.rejected[0].row, 3);
    }
}
