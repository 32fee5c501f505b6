//! Flag rules, per-user summaries and scatter output.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::metrics::JobProfile;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ReportError {
    #[error("threshold {name}={value} outside its domain")]
    BadThreshold { name: &'static str, value: f64 },
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WasteRule {
    pub threshold: f64,
}

impl Default for WasteRule {
    fn default() -> Self {
        WasteRule { threshold: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImbalanceRule {
    pub min_bw_gbps: f64,
    pub min_cov: f64,
    pub require_full_wayness: bool,
}

impl Default for ImbalanceRule {
    fn default() -> Self {
        ImbalanceRule {
            min_bw_gbps: 1.0,
            min_cov: 1.0,
            require_full_wayness: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlaggedJob {
    pub job_id: String,
    pub owner: String,
    pub nodes: u32,
    pub wall_hours: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlagReport {
    pub rule: String,
    pub params: Vec<(String, f64)>,
    pub evaluated: usize,
    pub flagged: Vec<FlaggedJob>,
    /// Jobs whose metrics are undefined.
    pub unevaluable: Vec<String>,
    /// Jobs sitting exactly on a threshold, hence not flagged.
    pub boundary: Vec<String>,
    pub users: UserSummary,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserSummary {
    /// Descending by count, then by owner.
    pub counts: Vec<(String, usize)>,
    /// Top owner's share of flagged jobs; `None` when nothing is flagged.
    pub top_share: Option<f64>,
}

fn check(name: &'static str, value: f64, lo: f64, hi: f64) -> Result<(), ReportError> {
    if value.is_finite() && (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(ReportError::BadThreshold { name, value })
    }
}

fn flagged(p: &JobProfile) -> FlaggedJob {
    FlaggedJob {
        job_id: p.job_id.clone(),
        owner: p.owner.clone(),
        nodes: p.nodes,
        wall_hours: p.wall_hours,
    }
}

fn sorted(profiles: &[JobProfile]) -> Vec<&JobProfile> {
    let mut v: Vec<&JobProfile> = profiles.iter().collect();
    v.sort_by(|a, b| a.job_id.cmp(&b.job_id));
    v
}

/// Flags jobs with waste strictly above the threshold.
pub fn flag_waste(profiles: &[JobProfile], rule: WasteRule) -> Result<FlagReport, ReportError> {
    check("threshold", rule.threshold, 0.0, 1.0)?;
    let mut r = FlagReport {
        rule: "waste".into(),
        params: vec![("threshold".into(), rule.threshold)],
        evaluated: 0,
        flagged: Vec::new(),
        unevaluable: Vec::new(),
        boundary: Vec::new(),
        users: UserSummary::default(),
    };
    for p in sorted(profiles) {
        match p.waste {
            None => r.unevaluable.push(p.job_id.clone()),
            Some(w) => {
                r.evaluated += 1;
                if w > rule.threshold {
                    r.flagged.push(flagged(p));
                } else if w == rule.threshold {
                    r.boundary.push(p.job_id.clone());
                }
            }
        }
    }
    r.users = summarize_users(&r.flagged);
    Ok(r)
}

/// Flags full-wayness jobs whose bandwidth and NUMA CoV both exceed
/// their thresholds.
pub fn flag_imbalance(profiles: &[JobProfile], rule: ImbalanceRule) -> Result<FlagReport, ReportError> {
    check("min_bw_gbps", rule.min_bw_gbps, 0.0, f64::MAX)?;
    check("min_cov", rule.min_cov, 0.0, f64::MAX)?;
    let mut r = FlagReport {
        rule: "imbalance".into(),
        params: vec![
            ("min_bw_gbps".into(), rule.min_bw_gbps),
            ("min_cov".into(), rule.min_cov),
            ("require_full_wayness".into(), f64::from(u8::from(rule.require_full_wayness))),
        ],
        evaluated: 0,
        flagged: Vec::new(),
        unevaluable: Vec::new(),
        boundary: Vec::new(),
        users: UserSummary::default(),
    };
    for p in sorted(profiles) {
        let (Some(bw), Some(cov)) = (p.mean_bandwidth_gbps, p.numa_cov) else {
            r.unevaluable.push(p.job_id.clone());
            continue;
        };
        r.evaluated += 1;
        if rule.require_full_wayness && !p.full_wayness() {
            continue;
        }
        if bw > rule.min_bw_gbps && cov > rule.min_cov {
            r.flagged.push(flagged(p));
        } else if bw >= rule.min_bw_gbps && cov >= rule.min_cov {
            r.boundary.push(p.job_id.clone());
        }
    }
    r.users = summarize_users(&r.flagged);
    Ok(r)
}

pub fn summarize_users(flagged: &[FlaggedJob]) -> UserSummary {
    let mut by_user: BTreeMap<&str, usize> = BTreeMap::new();
    for f in flagged {
        *by_user.entry(&f.owner).or_default() += 1;
    }
    let mut counts: Vec<(String, usize)> = by_user.into_iter().map(|(u, n)| (u.to_string(), n)).collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let top_share = counts.first().map(|(_, n)| *n as f64 / flagged.len() as f64);
    UserSummary { counts, top_share }
}

impl FlagReport {
    pub fn job_ids(&self) -> impl Iterator<Item = &str> {
        self.flagged.iter().map(|f| f.job_id.as_str())
    }

    /// `job_id,owner,nodes,wall_hours`, one row per flagged job.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["job_id", "owner", "nodes", "wall_hours"]).expect("in-memory write");
        for f in &self.flagged {
            w.write_record([f.job_id.clone(), f.owner.clone(), f.nodes.to_string(), f.wall_hours.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Key-value summary: parameters, counts, boundary jobs, per-user counts.
    pub fn to_kv(&self) -> String {
        let list = |v: &[String]| if v.is_empty() { "-".to_string() } else { v.join(",") };
        let mut s = format!("rule {}\n", self.rule);
        for (k, v) in &self.params {
            let _ = writeln!(s, "{k} {v}");
        }
        let _ = writeln!(s, "evaluated {}", self.evaluated);
        let _ = writeln!(s, "flagged {}", self.flagged.len());
        let _ = writeln!(s, "unevaluable {}", list(&self.unevaluable));
        let _ = writeln!(s, "boundary_jobs {}", list(&self.boundary));
        match (self.users.counts.first(), self.users.top_share) {
            (Some((u, _)), Some(share)) => {
                let _ = writeln!(s, "top_user {u}\ntop_share {share}");
            }
            _ => s.push_str("top_user -\ntop_share undefined\n"),
        }
        for (u, n) in &self.users.counts {
            let _ = writeln!(s, "user {u} {n}");
        }
        for f in &self.flagged {
            let _ = writeln!(s, "shape {} nodes={} wall_hours={}", f.job_id, f.nodes, f.wall_hours);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub job_id: String,
    pub x: f64,
    pub y: f64,
    pub full_wayness: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scatter {
    pub x_metric: String,
    pub y_metric: String,
    /// Job id order.
    pub rows: Vec<ScatterRow>,
    /// Jobs with either metric undefined.
    pub undefined: Vec<String>,
}

pub fn emit_scatter(profiles: &[JobProfile], x_metric: &str, y_metric: &str) -> Result<Scatter, ReportError> {
    let probe = crate::metrics::JobProfile::metric;
    let mut out = Scatter {
        x_metric: x_metric.into(),
        y_metric: y_metric.into(),
        rows: Vec::new(),
        undefined: Vec::new(),
    };
    for p in sorted(profiles) {
        let x = probe(p, x_metric).ok_or_else(|| ReportError::UnknownMetric(x_metric.into()))?;
        let y = probe(p, y_metric).ok_or_else(|| ReportError::UnknownMetric(y_metric.into()))?;
        match x.zip(y) {
            Some((x, y)) => out.rows.push(ScatterRow {
                job_id: p.job_id.clone(),
                x,
                y,
                full_wayness: p.full_wayness(),
            }),
            None => out.undefined.push(p.job_id.clone()),
        }
    }
    Ok(out)
}

impl Scatter {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["job_id", "x", "y", "group"]).expect("in-memory write");
        for r in &self.rows {
            let group = if r.full_wayness { "full_wayness" } else { "partial_wayness" };
            w.write_record([r.job_id.clone(), r.x.to_string(), r.y.to_string(), group.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Sidecar listing rows left out for undefined metrics.
    pub fn undefined_sidecar(&self) -> String {
        let mut s = String::from("job_id\n");
        for id in &self.undefined {
            s.push_str(id);
            s.push('\n');
        }
        s
    }

    /// Plain SVG: full-wayness jobs as blue dots, the rest red.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 480.0;
        const M: f64 = 50.0;
        let span = |vals: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if lo.is_finite() && hi > lo {
                (lo.min(0.0), hi)
            } else {
                (0.0, 1.0)
            }
        };
        let (x0, x1) = span(&mut self.rows.iter().map(|r| r.x));
        let (y0, y1) = span(&mut self.rows.iter().map(|r| r.y));
        let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
        let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"12\">{xm} [{x0:.3}, {x1:.3}]</text>\n\
             <text x=\"12\" y=\"{cy}\" font-size=\"12\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">{ym} [{y0:.3}, {y1:.3}]</text>\n",
            b = H - M,
            r = W - M,
            cx = W / 2.0,
            ty = H - 12.0,
            cy = H / 2.0,
            xm = self.x_metric,
            ym = self.y_metric,
        );
        for r in &self.rows {
            let color = if r.full_wayness { "blue" } else { "red" };
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"><title>{}</title></circle>",
                sx(r.x),
                sy(r.y),
                r.job_id
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
