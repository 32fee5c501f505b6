//! Counter differencing with wrap, reset and gap handling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::record_format::{FieldKind, TypeSchema, Unit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Ok,
    Wrapped,
    Gap,
    ResetDropped,
}

impl Quality {
    /// Intervals that count towards coverage.
    pub fn is_covered(self) -> bool {
        matches!(self, Quality::Ok | Quality::Wrapped)
    }

    /// Intervals whose deltas feed metrics.
    pub fn is_usable(self) -> bool {
        self != Quality::ResetDropped
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPoint {
    pub t0: u64,
    pub t1: u64,
    /// Counter deltas, or gauge values at `t1`. Counter slots are zero when
    /// the point is `reset_dropped`.
    pub values: Vec<u64>,
    pub quality: Quality,
    /// Fraction of `[t0, t1]` inside the job window.
    pub weight: f64,
}

impl DeltaPoint {
    pub fn seconds(&self) -> f64 {
        (self.t1 - self.t0) as f64
    }
}

/// One raw reading of a (type, device) stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub t: u64,
    pub values: Vec<u64>,
    /// A rotation or file header lies between this sample and the previous one.
    pub boundary: bool,
}

/// Largest believable per-second increase of a counter.
#[derive(Debug, Clone, PartialEq)]
pub struct PlausibilityBounds {
    pub per_unit: BTreeMap<Unit, f64>,
    /// Keyed `type.field`; takes precedence over the unit rate.
    pub per_field: BTreeMap<String, f64>,
}

impl Default for PlausibilityBounds {
    fn default() -> Self {
        PlausibilityBounds {
            per_unit: [
                (Unit::Cs, 200.0),
                (Unit::B, 1e12),
                (Unit::P, 1e10),
                (Unit::Ev, 1e12),
                (Unit::Kb, 1e10),
                (Unit::None, 1e12),
            ]
            .into_iter()
            .collect(),
            per_field: BTreeMap::new(),
        }
    }
}

impl PlausibilityBounds {
    pub fn max_delta(&self, type_name: &str, field: &str, unit: Unit, seconds: u64) -> f64 {
        let rate = self
            .per_field
            .get(&format!("{type_name}.{field}"))
            .or_else(|| self.per_unit.get(&unit))
            .copied()
            .unwrap_or(f64::INFINITY);
        rate * seconds.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaConfig {
    pub nominal_tick: u64,
    /// Intervals longer than this many ticks are gaps.
    pub gap_factor: u64,
    pub bounds: PlausibilityBounds,
}

impl DeltaConfig {
    pub fn with_tick(nominal_tick: u64) -> Self {
        DeltaConfig {
            nominal_tick,
            gap_factor: 3,
            bounds: PlausibilityBounds::default(),
        }
    }
}

impl Default for DeltaConfig {
    fn default() -> Self {
        DeltaConfig::with_tick(600)
    }
}

/// Differences consecutive samples of one (type, device) stream. Samples
/// whose time does not advance are skipped. Weights are 1.
pub fn delta_series(schema: &TypeSchema, samples: &[RawSample], cfg: &DeltaConfig) -> Vec<DeltaPoint> {
    let mut out = Vec::with_capacity(samples.len().saturating_sub(1));
    let mut prev: Option<&RawSample> = None;
    let mut boundary_pending = false;
    for s in samples {
        boundary_pending |= s.boundary;
        let Some(p) = prev else {
            prev = Some(s);
            boundary_pending = false;
            continue;
        };
        if s.t <= p.t || s.values.len() != schema.fields.len() || p.values.len() != schema.fields.len() {
            continue;
        }
        let dt = s.t - p.t;
        let mut quality = if dt > cfg.gap_factor.saturating_mul(cfg.nominal_tick) {
            Quality::Gap
        } else {
            Quality::Ok
        };
        let mut values = Vec::with_capacity(s.values.len());
        for (i, f) in schema.fields.iter().enumerate() {
            let (prev_v, cur_v) = (p.values[i], s.values[i]);
            match f.kind {
                FieldKind::Gauge => values.push(cur_v),
                FieldKind::Counter if cur_v >= prev_v => values.push(cur_v - prev_v),
                FieldKind::Counter if boundary_pending => {
                    quality = Quality::ResetDropped;
                    values.push(0);
                }
                FieldKind::Counter => {
                    let d = cur_v.wrapping_sub(prev_v);
                    let bound = cfg.bounds.max_delta(&schema.type_name, &f.name, f.unit, dt);
                    if d as f64 > bound {
                        quality = Quality::ResetDropped;
                    } else if quality == Quality::Ok {
                        quality = Quality::Wrapped;
                    }
                    values.push(d);
                }
            }
        }
        if quality == Quality::ResetDropped {
            for (v, f) in values.iter_mut().zip(&schema.fields) {
                if f.kind == FieldKind::Counter {
                    *v = 0;
                }
            }
        }
        out.push(DeltaPoint {
            t0: p.t,
            t1: s.t,
            values,
            quality,
            weight: 1.0,
        });
        prev = Some(s);
        boundary_pending = false;
    }
    out
}
