//! Job-oriented cluster resource measurement and analysis.
//!
//! A per-node collector writes job-tagged, self-describing plain-text
//! records ([`record_format`]) from pluggable metric sources
//! ([`collectors`]), driven by scheduler hooks ([`jobhooks`]). Offline,
//! [`ingest`] joins those files with accounting data into per-job
//! timelines, [`metrics`] derives efficiency profiles, and [`report`]
//! flags the wasteful and NUMA-imbalanced jobs.

pub mod collectors;
pub mod ingest;
pub mod jobhooks;
pub mod metrics;
pub mod record_format;
pub mod report;
