//! The unified, self-describing plain-text record format.
//!
//! A file is a header followed by a stream of entries:
//!
//! ```text
//! $schema_version 1
//! $hostname n001
//! $cores 16
//! $sockets 4
//! $mem_total_kb 33554432
//! !cpu user:c:cs nice:c:cs system:c:cs idle:c:cs iowait:c:cs irq:c:cs softirq:c:cs
//! 100 -
//! %begin 271828
//! $pmc_events flops,mem_access,dcache_fill,numa_traffic
//! 100 271828
//! cpu 0 430 0 120 93000 50 0 3
//! ```
//!
//! `$key value` lines carry metadata, `!type field:kind:unit ...` lines declare
//! schemas, `<timestamp> <job,ids|->` lines open a record group whose sample
//! lines (`<type> <device> <v1> ...`) follow, and `%` lines are job marks,
//! each preceded by its own timestamp line with job field `-`. The grammar is
//! UTF-8, `\n`-terminated, single-space separated, and must stay bit-exact.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt::{self, Write as _};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("invalid identifier {0:?}")]
    InvalidIdentifier(String),

    #[error("invalid job id {0:?}")]
    InvalidJobId(String),

    #[error("invalid value for ${key}: {value:?}")]
    InvalidHeaderValue { key: String, value: String },

    #[error("header requires cores >= sockets >= 1 (cores {cores}, sockets {sockets})")]
    InvalidTopology { cores: u32, sockets: u32 },

    #[error("schema {0} has no fields")]
    EmptySchema(String),

    #[error("schema {schema} declares field {field} twice")]
    DuplicateField { schema: String, field: String },

    #[error("schema {0} declared twice")]
    DuplicateSchema(String),

    #[error("type {0} is not declared in the header")]
    UnknownType(String),

    #[error("sample {type_name}/{device} has {got} values, schema expects {expected}")]
    ArityMismatch {
        type_name: String,
        device: u32,
        expected: usize,
        got: usize,
    },

    #[error("group at {timestamp} repeats sample {type_name}/{device}")]
    DuplicateSample {
        timestamp: u64,
        type_name: String,
        device: u32,
    },

    #[error("{0:?} mark requires a job id")]
    MissingMarkJob(MarkKind),

    #[error("rotate mark must not carry a job id or warning")]
    RotateWithJob,

    #[error("a metadata entry cannot open a file body; it would read back as header")]
    LeadingMeta,
}

#[derive(Error, Debug)]
pub enum ParseError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("missing header before line {line}: {reason}")]
    MissingHeader { line: usize, reason: String },

    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ParseMode {
    #[default]
    Lenient,
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Counter,
    Gauge,
}

impl FieldKind {
    fn as_char(self) -> char {
        match self {
            FieldKind::Counter => 'c',
            FieldKind::Gauge => 'g',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    /// Centiseconds.
    Cs,
    /// Kibibytes.
    Kb,
    /// Bytes.
    B,
    /// Packets.
    P,
    /// Events.
    Ev,
    None,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Cs => "cs",
            Unit::Kb => "kb",
            Unit::B => "b",
            Unit::P => "p",
            Unit::Ev => "ev",
            Unit::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Unit> {
        Some(match s {
            "cs" => Unit::Cs,
            "kb" => Unit::Kb,
            "b" => Unit::B,
            "p" => Unit::P,
            "ev" => Unit::Ev,
            "none" => Unit::None,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub unit: Unit,
}

impl FieldSpec {
    pub fn counter(name: &str, unit: Unit) -> Self {
        FieldSpec {
            name: name.to_string(),
            kind: FieldKind::Counter,
            unit,
        }
    }

    pub fn gauge(name: &str, unit: Unit) -> Self {
        FieldSpec {
            name: name.to_string(),
            kind: FieldKind::Gauge,
            unit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TypeSchema {
    pub type_name: String,
    pub fields: Vec<FieldSpec>,
}

impl TypeSchema {
    pub fn new(type_name: &str, fields: Vec<FieldSpec>) -> Self {
        TypeSchema {
            type_name: type_name.to_string(),
            fields,
        }
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    fn validate(&self) -> Result<(), FormatError> {
        check_identifier(&self.type_name)?;
        if self.fields.is_empty() {
            return Err(FormatError::EmptySchema(self.type_name.clone()));
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            check_identifier(&f.name)?;
            if !seen.insert(f.name.as_str()) {
                return Err(FormatError::DuplicateField {
                    schema: self.type_name.clone(),
                    field: f.name.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHeader {
    pub schema_version: String,
    pub hostname: String,
    pub cores: u32,
    pub sockets: u32,
    pub mem_total_kb: u64,
    /// Metadata beyond the five required keys, in file order.
    pub extras: Vec<(String, String)>,
    pub schemas: Vec<TypeSchema>,
}

impl FileHeader {
    pub fn schema(&self, type_name: &str) -> Option<&TypeSchema> {
        self.schemas.iter().find(|s| s.type_name == type_name)
    }

    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extras
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        check_token("schema_version", &self.schema_version)?;
        check_token("hostname", &self.hostname)?;
        if self.sockets == 0 || self.cores < self.sockets {
            return Err(FormatError::InvalidTopology {
                cores: self.cores,
                sockets: self.sockets,
            });
        }
        if self.mem_total_kb == 0 {
            return Err(FormatError::InvalidHeaderValue {
                key: "mem_total_kb".into(),
                value: "0".into(),
            });
        }
        for (k, v) in &self.extras {
            check_identifier(k)?;
            if REQUIRED_KEYS.contains(&k.as_str()) {
                return Err(FormatError::InvalidHeaderValue {
                    key: k.clone(),
                    value: v.clone(),
                });
            }
            check_meta_value(k, v)?;
        }
        let mut names = HashSet::new();
        for s in &self.schemas {
            s.validate()?;
            if !names.insert(s.type_name.as_str()) {
                return Err(FormatError::DuplicateSchema(s.type_name.clone()));
            }
        }
        Ok(())
    }
}

const REQUIRED_KEYS: [&str; 5] = [
    "schema_version",
    "hostname",
    "cores",
    "sockets",
    "mem_total_kb",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub type_name: String,
    pub device_id: u32,
    pub values: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordGroup {
    pub timestamp: u64,
    pub job_ids: BTreeSet<String>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkKind {
    Begin,
    End,
    Rotate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mark {
    pub kind: MarkKind,
    pub job_id: Option<String>,
    pub timestamp: u64,
    /// Set on marks written despite a hook misfire, e.g. `duplicate_begin`.
    pub warning: Option<String>,
}

impl Mark {
    pub fn begin(job_id: &str, timestamp: u64) -> Self {
        Mark {
            kind: MarkKind::Begin,
            job_id: Some(job_id.to_string()),
            timestamp,
            warning: None,
        }
    }

    pub fn end(job_id: &str, timestamp: u64) -> Self {
        Mark {
            kind: MarkKind::End,
            job_id: Some(job_id.to_string()),
            timestamp,
            warning: None,
        }
    }

    pub fn rotate(timestamp: u64) -> Self {
        Mark {
            kind: MarkKind::Rotate,
            job_id: None,
            timestamp,
            warning: None,
        }
    }
}

/// One item of a file body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Entry {
    Group(RecordGroup),
    Mark(Mark),
    /// A `$key value` line after the header, e.g. `$pmc_events`.
    Meta { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedFile {
    pub header: FileHeader,
    pub entries: Vec<Entry>,
    /// Malformed lines dropped in lenient mode.
    pub skipped: usize,
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('a'..='z'))
        && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
}

/// Job ids start alphanumeric and may contain `_ . - [ ]` afterwards. They
/// double as store path components, so separators and `..` are excluded.
pub fn is_job_id(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphanumeric())
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-' | '[' | ']'))
}

fn check_identifier(s: &str) -> Result<(), FormatError> {
    if is_identifier(s) {
        Ok(())
    } else {
        Err(FormatError::InvalidIdentifier(s.to_string()))
    }
}

fn check_job_id(s: &str) -> Result<(), FormatError> {
    if is_job_id(s) {
        Ok(())
    } else {
        Err(FormatError::InvalidJobId(s.to_string()))
    }
}

fn check_token(key: &str, value: &str) -> Result<(), FormatError> {
    if value.is_empty() || value.chars().any(char::is_whitespace) {
        return Err(FormatError::InvalidHeaderValue {
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(())
}

fn check_meta_value(key: &str, value: &str) -> Result<(), FormatError> {
    if value.contains(['\n', '\r']) {
        return Err(FormatError::InvalidHeaderValue {
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(())
}

pub fn write_header(header: &FileHeader) -> Result<String, FormatError> {
    header.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "$schema_version {}", header.schema_version);
    let _ = writeln!(out, "$hostname {}", header.hostname);
    let _ = writeln!(out, "$cores {}", header.cores);
    let _ = writeln!(out, "$sockets {}", header.sockets);
    let _ = writeln!(out, "$mem_total_kb {}", header.mem_total_kb);
    for (k, v) in &header.extras {
        let _ = writeln!(out, "${k} {v}");
    }
    for schema in &header.schemas {
        out.push('!');
        out.push_str(&schema.type_name);
        for f in &schema.fields {
            let _ = write!(out, " {}:{}:{}", f.name, f.kind.as_char(), f.unit.as_str());
        }
        out.push('\n');
    }
    Ok(out)
}

/// Serializes one body entry, checking it against the header's schemas.
pub fn write_entry(header: &FileHeader, entry: &Entry) -> Result<String, FormatError> {
    let mut out = String::new();
    match entry {
        Entry::Group(g) => {
            write_group_line(&mut out, g.timestamp, &g.job_ids)?;
            let mut seen = HashSet::new();
            for s in &g.samples {
                let schema = header
                    .schema(&s.type_name)
                    .ok_or_else(|| FormatError::UnknownType(s.type_name.clone()))?;
                if schema.fields.len() != s.values.len() {
                    return Err(FormatError::ArityMismatch {
                        type_name: s.type_name.clone(),
                        device: s.device_id,
                        expected: schema.fields.len(),
                        got: s.values.len(),
                    });
                }
                if !seen.insert((s.type_name.as_str(), s.device_id)) {
                    return Err(FormatError::DuplicateSample {
                        timestamp: g.timestamp,
                        type_name: s.type_name.clone(),
                        device: s.device_id,
                    });
                }
                let _ = write!(out, "{} {}", s.type_name, s.device_id);
                for v in &s.values {
                    let _ = write!(out, " {v}");
                }
                out.push('\n');
            }
        }
        Entry::Mark(m) => {
            let _ = writeln!(out, "{} -", m.timestamp);
            match (m.kind, &m.job_id) {
                (MarkKind::Rotate, None) if m.warning.is_none() => out.push_str("%rotate"),
                (MarkKind::Rotate, _) => return Err(FormatError::RotateWithJob),
                (kind, Some(job)) => {
                    check_job_id(job)?;
                    let word = if kind == MarkKind::Begin { "begin" } else { "end" };
                    let _ = write!(out, "%{word} {job}");
                    if let Some(w) = &m.warning {
                        check_identifier(w)?;
                        let _ = write!(out, " warn={w}");
                    }
                }
                (kind, None) => return Err(FormatError::MissingMarkJob(kind)),
            }
            out.push('\n');
        }
        Entry::Meta { key, value } => {
            check_identifier(key)?;
            check_meta_value(key, value)?;
            let _ = writeln!(out, "${key} {value}");
        }
    }
    Ok(out)
}

fn write_group_line(
    out: &mut String,
    timestamp: u64,
    job_ids: &BTreeSet<String>,
) -> Result<(), FormatError> {
    let _ = write!(out, "{timestamp} ");
    if job_ids.is_empty() {
        out.push('-');
    } else {
        for (i, j) in job_ids.iter().enumerate() {
            check_job_id(j)?;
            if i > 0 {
                out.push(',');
            }
            out.push_str(j);
        }
    }
    out.push('\n');
    Ok(())
}

/// Serializes a whole file.
pub fn serialize(header: &FileHeader, entries: &[Entry]) -> Result<String, FormatError> {
    if matches!(entries.first(), Some(Entry::Meta { .. })) {
        return Err(FormatError::LeadingMeta);
    }
    let mut out = write_header(header)?;
    for e in entries {
        out.push_str(&write_entry(header, e)?);
    }
    Ok(out)
}

/// Parses a complete in-memory file.
pub fn parse_file(text: &str, mode: ParseMode) -> Result<ParsedFile, ParseError> {
    let mut reader = RecordReader::new(text.as_bytes(), mode)?;
    let mut entries = Vec::new();
    for entry in reader.by_ref() {
        entries.push(entry?);
    }
    Ok(ParsedFile {
        header: reader.header().clone(),
        entries,
        skipped: reader.skipped(),
    })
}

struct OpenGroup {
    line: usize,
    timestamp: u64,
    job_ids: BTreeSet<String>,
    samples: Vec<Sample>,
    seen: HashSet<(String, u32)>,
    lines: usize,
    /// The previous line was this group's timestamp line.
    fresh: bool,
}

/// Streaming parser: holds at most one record group in memory.
pub struct RecordReader<R> {
    input: R,
    mode: ParseMode,
    header: FileHeader,
    line_no: usize,
    buf: String,
    /// First body line, read while scanning for the end of the header.
    pending_line: Option<String>,
    open: Option<OpenGroup>,
    last_group_ts: Option<u64>,
    queue: VecDeque<Entry>,
    skipped: usize,
    done: bool,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(mut input: R, mode: ParseMode) -> Result<Self, ParseError> {
        let mut line_no = 0;
        let mut buf = String::new();
        let mut skipped = 0;
        let mut meta: Vec<(String, String)> = Vec::new();
        let mut schemas: Vec<TypeSchema> = Vec::new();
        let mut pending_line = None;

        loop {
            buf.clear();
            if input.read_line(&mut buf)? == 0 {
                break;
            }
            line_no += 1;
            let line = buf.strip_suffix('\n').unwrap_or(&buf);
            if let Some(rest) = line.strip_prefix('$') {
                match rest.split_once(' ') {
                    Some((k, v)) if is_identifier(k) && !v.contains('\r') => {
                        meta.push((k.to_string(), v.to_string()))
                    }
                    _ => {
                        lenient_skip(mode, &mut skipped, line_no, "malformed metadata line")?;
                    }
                }
            } else if let Some(rest) = line.strip_prefix('!') {
                match parse_schema(rest) {
                    Ok(s) if schemas.iter().all(|x| x.type_name != s.type_name) => schemas.push(s),
                    Ok(s) => {
                        let reason = format!("schema {} declared twice", s.type_name);
                        lenient_skip(mode, &mut skipped, line_no, &reason)?;
                    }
                    Err(reason) => lenient_skip(mode, &mut skipped, line_no, &reason)?,
                }
            } else {
                pending_line = Some(line.to_string());
                break;
            }
        }

        let header = build_header(meta, schemas).map_err(|reason| ParseError::MissingHeader {
            line: line_no.max(1),
            reason,
        })?;

        // The body line that ended the header scan is re-read by the iterator.
        if pending_line.is_some() {
            line_no -= 1;
        }
        Ok(RecordReader {
            input,
            mode,
            header,
            line_no,
            buf,
            pending_line,
            open: None,
            last_group_ts: None,
            queue: VecDeque::new(),
            skipped,
            done: false,
        })
    }

    pub fn header(&self) -> &FileHeader {
        &self.header
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn next_line(&mut self) -> Result<Option<String>, ParseError> {
        if let Some(l) = self.pending_line.take() {
            self.line_no += 1;
            return Ok(Some(l));
        }
        self.buf.clear();
        if self.input.read_line(&mut self.buf)? == 0 {
            return Ok(None);
        }
        self.line_no += 1;
        let line = self.buf.strip_suffix('\n').unwrap_or(&self.buf);
        Ok(Some(line.to_string()))
    }

    fn skip(&mut self, reason: &str) -> Result<(), ParseError> {
        lenient_skip(self.mode, &mut self.skipped, self.line_no, reason)
    }

    fn close_group(&mut self) -> Result<(), ParseError> {
        let Some(g) = self.open.take() else {
            return Ok(());
        };
        if let Some(last) = self.last_group_ts {
            if g.timestamp <= last {
                let reason = format!("timestamp {} does not increase past {last}", g.timestamp);
                if self.mode == ParseMode::Strict {
                    return Err(ParseError::Malformed {
                        line: g.line,
                        reason,
                    });
                }
                self.skipped += g.lines;
                return Ok(());
            }
        }
        self.last_group_ts = Some(g.timestamp);
        self.queue.push_back(Entry::Group(RecordGroup {
            timestamp: g.timestamp,
            job_ids: g.job_ids,
            samples: g.samples,
        }));
        Ok(())
    }

    fn handle_line(&mut self, line: &str) -> Result<(), ParseError> {
        let fresh = self.open.as_ref().is_some_and(|g| g.fresh);
        if let Some(g) = self.open.as_mut() {
            g.fresh = false;
        }

        match line.as_bytes().first() {
            Some(b'0'..=b'9') => {
                self.close_group()?;
                match parse_group_line(line) {
                    Ok((timestamp, job_ids)) => {
                        self.open = Some(OpenGroup {
                            line: self.line_no,
                            timestamp,
                            job_ids,
                            samples: Vec::new(),
                            seen: HashSet::new(),
                            lines: 1,
                            fresh: true,
                        })
                    }
                    Err(reason) => self.skip(&reason)?,
                }
            }
            Some(b'a'..=b'z') => {
                if self.open.is_none() {
                    return self.skip("sample line outside a record group");
                }
                match parse_sample(line, &self.header) {
                    Ok(s) => {
                        let g = self.open.as_mut().expect("checked above");
                        if g.seen.insert((s.type_name.clone(), s.device_id)) {
                            g.samples.push(s);
                            g.lines += 1;
                        } else {
                            let reason =
                                format!("duplicate sample {}/{}", s.type_name, s.device_id);
                            self.skip(&reason)?;
                        }
                    }
                    Err(reason) => self.skip(&reason)?,
                }
            }
            Some(b'%') => {
                let stamp = match &self.open {
                    Some(g) if fresh && g.job_ids.is_empty() => Some(g.timestamp),
                    _ => None,
                };
                let Some(timestamp) = stamp else {
                    self.close_group()?;
                    return self.skip("mark without its own timestamp line");
                };
                match parse_mark(&line[1..], timestamp) {
                    Ok(mark) => {
                        self.open = None;
                        self.queue.push_back(Entry::Mark(mark));
                    }
                    Err(reason) => {
                        // The timestamp line belonged to the broken mark.
                        self.open = None;
                        self.skipped += 1;
                        self.skip(&reason)?;
                    }
                }
            }
            Some(b'$') => {
                self.close_group()?;
                match line[1..].split_once(' ') {
                    Some((k, v)) if is_identifier(k) && !v.contains('\r') => {
                        self.queue.push_back(Entry::Meta {
                            key: k.to_string(),
                            value: v.to_string(),
                        })
                    }
                    _ => self.skip("malformed metadata line")?,
                }
            }
            Some(b'!') => {
                self.close_group()?;
                self.skip("schema declaration after header")?;
            }
            _ => self.skip("unrecognized line")?,
        }
        Ok(())
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<Entry, ParseError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(e) = self.queue.pop_front() {
                return Some(Ok(e));
            }
            if self.done {
                return None;
            }
            let line = match self.next_line() {
                Ok(Some(l)) => l,
                Ok(None) => {
                    self.done = true;
                    if let Err(e) = self.close_group() {
                        return Some(Err(e));
                    }
                    continue;
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            };
            if let Err(e) = self.handle_line(&line) {
                self.done = true;
                return Some(Err(e));
            }
        }
    }
}

fn lenient_skip(
    mode: ParseMode,
    skipped: &mut usize,
    line: usize,
    reason: &str,
) -> Result<(), ParseError> {
    match mode {
        ParseMode::Strict => Err(ParseError::Malformed {
            line,
            reason: reason.to_string(),
        }),
        ParseMode::Lenient => {
            log::debug!("skipping line {line}: {reason}");
            *skipped += 1;
            Ok(())
        }
    }
}

fn build_header(
    meta: Vec<(String, String)>,
    schemas: Vec<TypeSchema>,
) -> Result<FileHeader, String> {
    let mut required: [Option<String>; 5] = Default::default();
    let mut extras = Vec::new();
    for (k, v) in meta {
        match REQUIRED_KEYS.iter().position(|r| *r == k) {
            Some(i) if required[i].is_none() => required[i] = Some(v),
            Some(_) => return Err(format!("${k} repeated")),
            None => extras.push((k, v)),
        }
    }
    let take = |i: usize| {
        required[i]
            .clone()
            .ok_or_else(|| format!("${} not found", REQUIRED_KEYS[i]))
    };
    let number = |i: usize| -> Result<u64, String> {
        let v = take(i)?;
        v.parse::<u64>()
            .map_err(|_| format!("${} is not an integer: {v:?}", REQUIRED_KEYS[i]))
    };
    let cores = u32::try_from(number(2)?).map_err(|_| "$cores out of range".to_string())?;
    let sockets = u32::try_from(number(3)?).map_err(|_| "$sockets out of range".to_string())?;
    let header = FileHeader {
        schema_version: take(0)?,
        hostname: take(1)?,
        cores,
        sockets,
        mem_total_kb: number(4)?,
        extras,
        schemas,
    };
    header.validate().map_err(|e| e.to_string())?;
    Ok(header)
}

fn parse_schema(rest: &str) -> Result<TypeSchema, String> {
    let mut parts = rest.split(' ');
    let type_name = parts.next().unwrap_or_default();
    let mut fields = Vec::new();
    for p in parts {
        let mut it = p.split(':');
        let (Some(name), Some(kind), Some(unit), None) = (it.next(), it.next(), it.next(), it.next())
        else {
            return Err(format!("bad field spec {p:?}"));
        };
        let kind = match kind {
            "c" => FieldKind::Counter,
            "g" => FieldKind::Gauge,
            _ => return Err(format!("bad field kind in {p:?}")),
        };
        let unit = Unit::parse(unit).ok_or_else(|| format!("bad unit in {p:?}"))?;
        fields.push(FieldSpec {
            name: name.to_string(),
            kind,
            unit,
        });
    }
    let schema = TypeSchema {
        type_name: type_name.to_string(),
        fields,
    };
    schema.validate().map_err(|e| e.to_string())?;
    Ok(schema)
}

fn parse_u64(s: &str) -> Option<u64> {
    // Canonical decimal only, so that parse(write(x)) stays injective.
    if s.is_empty() || (s.len() > 1 && s.starts_with('0')) || !s.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    s.parse().ok()
}

fn parse_group_line(line: &str) -> Result<(u64, BTreeSet<String>), String> {
    let (ts, jobs) = line
        .split_once(' ')
        .ok_or_else(|| "timestamp line without job field".to_string())?;
    let timestamp = parse_u64(ts).ok_or_else(|| format!("bad timestamp {ts:?}"))?;
    let mut job_ids = BTreeSet::new();
    if jobs != "-" {
        for j in jobs.split(',') {
            if !is_job_id(j) || !job_ids.insert(j.to_string()) {
                return Err(format!("bad job list {jobs:?}"));
            }
        }
        // Non-canonical order would not round-trip byte-for-byte.
        if job_ids.iter().map(String::as_str).collect::<Vec<_>>().join(",") != jobs {
            return Err(format!("job list {jobs:?} not in canonical order"));
        }
    }
    Ok((timestamp, job_ids))
}

fn parse_sample(line: &str, header: &FileHeader) -> Result<Sample, String> {
    let mut parts = line.split(' ');
    let type_name = parts.next().unwrap_or_default();
    let schema = header
        .schema(type_name)
        .ok_or_else(|| format!("undeclared type {type_name:?}"))?;
    let device = parts
        .next()
        .and_then(parse_u64)
        .and_then(|d| u32::try_from(d).ok())
        .ok_or_else(|| "bad device id".to_string())?;
    let values = parts
        .map(|v| parse_u64(v).ok_or_else(|| format!("bad value {v:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != schema.fields.len() {
        return Err(format!(
            "{type_name} sample has {} values, schema expects {}",
            values.len(),
            schema.fields.len()
        ));
    }
    Ok(Sample {
        type_name: type_name.to_string(),
        device_id: device,
        values,
    })
}

fn parse_mark(body: &str, timestamp: u64) -> Result<Mark, String> {
    let mut parts = body.split(' ');
    let kind = match parts.next() {
        Some("begin") => MarkKind::Begin,
        Some("end") => MarkKind::End,
        Some("rotate") => {
            return match parts.next() {
                None => Ok(Mark::rotate(timestamp)),
                Some(_) => Err("rotate mark takes no arguments".into()),
            }
        }
        other => return Err(format!("unknown mark {other:?}")),
    };
    let job = parts
        .next()
        .filter(|j| is_job_id(j))
        .ok_or_else(|| "mark needs a valid job id".to_string())?;
    let warning = match parts.next() {
        None => None,
        Some(w) => match w.strip_prefix("warn=") {
            Some(w) if is_identifier(w) => Some(w.to_string()),
            _ => return Err(format!("bad mark annotation {w:?}")),
        },
    };
    if parts.next().is_some() {
        return Err("trailing fields on mark".into());
    }
    Ok(Mark {
        kind,
        job_id: Some(job.to_string()),
        timestamp,
        warning,
    })
}

impl fmt::Display for MarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarkKind::Begin => "begin",
            MarkKind::End => "end",
            MarkKind::Rotate => "rotate",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cpu_header() -> FileHeader {
        FileHeader {
            schema_version: SCHEMA_VERSION.into(),
            hostname: "n001".into(),
            cores: 16,
            sockets: 4,
            mem_total_kb: 33554432,
            extras: vec![],
            schemas: vec![TypeSchema::new(
                "cpu",
                vec![
                    FieldSpec::counter("user", Unit::Cs),
                    FieldSpec::counter("idle", Unit::Cs),
                ],
            )],
        }
    }

    fn group(t: u64, jobs: &[&str], samples: Vec<Sample>) -> Entry {
        Entry::Group(RecordGroup {
            timestamp: t,
            job_ids: jobs.iter().map(|s| s.to_string()).collect(),
            samples,
        })
    }

    fn cpu(dev: u32, values: Vec<u64>) -> Sample {
        Sample {
            type_name: "cpu".into(),
            device_id: dev,
            values,
        }
    }

    #[test]
    fn header_schema_line() {
        let text = write_header(&cpu_header()).unwrap();
        assert!(text.lines().any(|l| l == "!cpu user:c:cs idle:c:cs"));
        assert!(text.starts_with("$schema_version 1\n$hostname n001\n$cores 16\n$sockets 4\n"));
        assert_eq!(text, write_header(&cpu_header()).unwrap());
    }

    #[test]
    fn header_without_schemas() {
        let mut h = cpu_header();
        h.schemas.clear();
        let text = write_header(&h).unwrap();
        assert!(!text.lines().any(|l| l.starts_with('!')));
        assert_eq!(parse_file(&text, ParseMode::Strict).unwrap().header, h);
    }

    #[test]
    fn bad_type_name_rejected() {
        let mut h = cpu_header();
        h.schemas[0].type_name = "CPU!".into();
        assert!(matches!(
            write_header(&h),
            Err(FormatError::InvalidIdentifier(_))
        ));
    }

    #[test]
    fn topology_checked() {
        let mut h = cpu_header();
        h.cores = 2;
        assert!(write_header(&h).is_err());
        h.sockets = 0;
        assert!(write_header(&h).is_err());
    }

    #[test]
    fn group_lines() {
        let h = cpu_header();
        let g = group(1325808000, &["271828"], vec![cpu(0, vec![430, 93000])]);
        assert_eq!(
            write_entry(&h, &g).unwrap(),
            "1325808000 271828\ncpu 0 430 93000\n"
        );
        let empty = group(5, &[], vec![]);
        assert_eq!(write_entry(&h, &empty).unwrap(), "5 -\n");
        let two = group(6, &["b2", "a1"], vec![]);
        assert_eq!(write_entry(&h, &two).unwrap(), "6 a1,b2\n");
    }

    #[test]
    fn mark_lines() {
        let h = cpu_header();
        let m = Entry::Mark(Mark::begin("271828", 100));
        assert_eq!(write_entry(&h, &m).unwrap(), "100 -\n%begin 271828\n");
        let r = Entry::Mark(Mark::rotate(7));
        assert_eq!(write_entry(&h, &r).unwrap(), "7 -\n%rotate\n");
        let mut w = Mark::begin("9", 8);
        w.warning = Some("duplicate_begin".into());
        assert_eq!(
            write_entry(&h, &Entry::Mark(w)).unwrap(),
            "8 -\n%begin 9 warn=duplicate_begin\n"
        );
    }

    #[test]
    fn arity_mismatch_is_error() {
        let h = cpu_header();
        let g = group(1, &[], vec![cpu(0, vec![1])]);
        assert!(matches!(
            write_entry(&h, &g),
            Err(FormatError::ArityMismatch { expected: 2, got: 1, .. })
        ));
        let u = group(
            1,
            &[],
            vec![Sample {
                type_name: "mem".into(),
                device_id: 0,
                values: vec![1],
            }],
        );
        assert!(matches!(write_entry(&h, &u), Err(FormatError::UnknownType(_))));
    }

    #[test]
    fn round_trip_small() {
        let h = cpu_header();
        let entries = vec![
            Entry::Mark(Mark::begin("271828", 100)),
            Entry::Meta {
                key: "pmc_events".into(),
                value: "flops,mem_access".into(),
            },
            group(100, &["271828"], vec![cpu(0, vec![430, 93000]), cpu(1, vec![1, 2])]),
            group(101, &[], vec![]),
            Entry::Mark(Mark::end("271828", 101)),
            group(700, &["271828"], vec![cpu(0, vec![431, 93001])]),
            Entry::Mark(Mark::rotate(701)),
        ];
        let text = serialize(&h, &entries).unwrap();
        let parsed = parse_file(&text, ParseMode::Strict).unwrap();
        assert_eq!(parsed.header, h);
        assert_eq!(parsed.entries, entries);
        assert_eq!(parsed.skipped, 0);
    }

    #[test]
    fn lenient_drops_short_sample() {
        let h = cpu_header();
        let mut text = write_header(&h).unwrap();
        text.push_str("10 -\ncpu 0 1\ncpu 1 1 2\n");
        let parsed = parse_file(&text, ParseMode::Lenient).unwrap();
        assert_eq!(parsed.skipped, 1);
        assert_eq!(parsed.entries, vec![group(10, &[], vec![cpu(1, vec![1, 2])])]);

        let err = parse_file(&text, ParseMode::Strict).unwrap_err();
        match err {
            ParseError::Malformed { line, .. } => assert_eq!(line, 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_metadata_preserved() {
        let mut h = cpu_header();
        h.extras.push(("interval".into(), "600".into()));
        h.extras.push(("site_note".into(), "rack 12 row b".into()));
        let text = write_header(&h).unwrap();
        assert!(text.contains("$interval 600\n"));
        assert_eq!(parse_file(&text, ParseMode::Strict).unwrap().header, h);
    }

    #[test]
    fn missing_header_is_hard_error() {
        for mode in [ParseMode::Lenient, ParseMode::Strict] {
            assert!(matches!(
                parse_file("10 -\ncpu 0 1 2\n", mode),
                Err(ParseError::MissingHeader { .. })
            ));
            assert!(matches!(
                parse_file("", mode),
                Err(ParseError::MissingHeader { .. })
            ));
            assert!(matches!(
                parse_file("$hostname x\n$cores 2\n", mode),
                Err(ParseError::MissingHeader { .. })
            ));
        }
    }

    #[test]
    fn torn_tail_is_skipped() {
        let h = cpu_header();
        let mut text = serialize(&h, &[group(10, &["7"], vec![cpu(0, vec![1, 2])])]).unwrap();
        text.push_str("20 7\ncpu 0 3");
        let parsed = parse_file(&text, ParseMode::Lenient).unwrap();
        assert_eq!(parsed.skipped, 1);
        assert_eq!(parsed.entries.len(), 2);
    }

    #[test]
    fn non_increasing_group_dropped() {
        let h = cpu_header();
        let mut text = serialize(&h, &[group(10, &[], vec![cpu(0, vec![1, 2])])]).unwrap();
        text.push_str("10 -\ncpu 0 3 4\n");
        let parsed = parse_file(&text, ParseMode::Lenient).unwrap();
        assert_eq!(parsed.entries.len(), 1);
        assert_eq!(parsed.skipped, 2);
        assert!(parse_file(&text, ParseMode::Strict).is_err());
    }

    #[test]
    fn duplicate_sample_dropped() {
        let h = cpu_header();
        let mut text = write_header(&h).unwrap();
        text.push_str("10 -\ncpu 0 1 2\ncpu 0 3 4\n");
        let parsed = parse_file(&text, ParseMode::Lenient).unwrap();
        assert_eq!(parsed.skipped, 1);
        assert_eq!(parsed.entries, vec![group(10, &[], vec![cpu(0, vec![1, 2])])]);
    }

    #[test]
    fn streaming_reader_yields_incrementally() {
        let h = cpu_header();
        let entries: Vec<Entry> = (0..50)
            .map(|i| group(10 + i, &["1"], vec![cpu(0, vec![i, i])]))
            .collect();
        let text = serialize(&h, &entries).unwrap();
        let mut reader = RecordReader::new(text.as_bytes(), ParseMode::Strict).unwrap();
        assert_eq!(reader.next().unwrap().unwrap(), entries[0]);
        assert_eq!(reader.count(), 49);
    }

    fn arb_ident() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,6}"
    }

    fn arb_file() -> impl Strategy<Value = (FileHeader, Vec<Entry>)> {
        let schemas = prop::collection::btree_map(
            arb_ident(),
            prop::collection::btree_set(arb_ident(), 1..5),
            0..4,
        );
        (schemas, 1u32..64, 1u32..8, 1u64..u64::MAX).prop_flat_map(|(schemas, cores, sockets, mem)| {
            let schemas: Vec<TypeSchema> = schemas
                .into_iter()
                .map(|(name, fields)| {
                    TypeSchema::new(
                        &name,
                        fields
                            .into_iter()
                            .enumerate()
                            .map(|(i, f)| {
                                if i % 2 == 0 {
                                    FieldSpec::counter(&f, Unit::Ev)
                                } else {
                                    FieldSpec::gauge(&f, Unit::Kb)
                                }
                            })
                            .collect(),
                    )
                })
                .collect();
            let header = FileHeader {
                schema_version: SCHEMA_VERSION.into(),
                hostname: "node-a".into(),
                cores: cores.max(sockets),
                sockets,
                mem_total_kb: mem,
                extras: vec![("interval".into(), "600".into())],
                schemas: schemas.clone(),
            };
            let entry = entry_strategy(schemas);
            (Just(header), prop::collection::vec((1u64..1000, entry), 0..12))
        })
        .prop_map(|(header, steps)| {
            let mut t = 0;
            let mut entries: Vec<Entry> = steps
                .into_iter()
                .map(|(dt, mut e)| {
                    t += dt;
                    match &mut e {
                        Entry::Group(g) => g.timestamp = t,
                        Entry::Mark(m) => m.timestamp = t,
                        Entry::Meta { .. } => {}
                    }
                    e
                })
                .collect();
            while matches!(entries.first(), Some(Entry::Meta { .. })) {
                entries.remove(0);
            }
            (header, entries)
        })
    }

    fn entry_strategy(schemas: Vec<TypeSchema>) -> impl Strategy<Value = Entry> {
        let jobs = prop::collection::btree_set("[0-9]{1,6}", 0..3);
        let n = schemas.len();
        let samples = prop::collection::btree_map((0..n.max(1), 0u32..4), any::<u64>(), 0..6)
            .prop_map(move |m| {
                if n == 0 {
                    return vec![];
                }
                m.into_iter()
                    .map(|((si, dev), seed)| Sample {
                        type_name: schemas[si].type_name.clone(),
                        device_id: dev,
                        values: (0..schemas[si].fields.len() as u64)
                            .map(|k| seed.wrapping_mul(k + 1))
                            .collect(),
                    })
                    .collect()
            });
        prop_oneof![
            4 => (jobs, samples).prop_map(|(job_ids, samples)| Entry::Group(RecordGroup {
                timestamp: 0,
                job_ids,
                samples
            })),
            1 => "[0-9]{1,6}".prop_map(|j| Entry::Mark(Mark::begin(&j, 0))),
            1 => "[0-9]{1,6}".prop_map(|j| Entry::Mark(Mark::end(&j, 0))),
            1 => Just(Entry::Mark(Mark::rotate(0))),
            1 => "[a-z ]{0,10}".prop_map(|v| Entry::Meta { key: "pmc_events".into(), value: v }),
        ]
    }

    proptest! {
        #[test]
        fn round_trip((header, entries) in arb_file()) {
            let text = serialize(&header, &entries).unwrap();
            let parsed = parse_file(&text, ParseMode::Strict).unwrap();
            prop_assert_eq!(parsed.skipped, 0);
            prop_assert_eq!(&parsed.header, &header);
            prop_assert_eq!(&parsed.entries, &entries);
        }

        #[test]
        fn lenient_never_breaks_arity(noise in prop::collection::vec("[a-z0-9 %$!-]{0,20}", 0..20)) {
            let h = cpu_header();
            let mut text = write_header(&h).unwrap();
            text.push_str("1 -\n");
            for line in &noise {
                text.push_str(line);
                text.push('\n');
            }
            let parsed = parse_file(&text, ParseMode::Lenient).unwrap();
            for e in &parsed.entries {
                if let Entry::Group(g) = e {
                    for s in &g.samples {
                        prop_assert_eq!(s.values.len(), h.schema(&s.type_name).unwrap().fields.len());
                    }
                }
            }
        }

        #[test]
        fn distinct_inputs_serialize_distinctly(
            (h, a) in arb_file(),
            b in prop::collection::vec(any::<u64>(), 0..3),
        ) {
            // Perturbing any value changes the bytes.
            let text_a = serialize(&h, &a).unwrap();
            let mut b_entries = a.clone();
            let mut changed = false;
            for e in b_entries.iter_mut() {
                if let Entry::Group(g) = e {
                    if let Some(s) = g.samples.first_mut() {
                        let extra = b.first().copied().unwrap_or(1) | 1;
                        s.values[0] = s.values[0].wrapping_add(extra);
                        changed = true;
                        break;
                    }
                }
            }
            if changed {
                prop_assert_ne!(text_a, serialize(&h, &b_entries).unwrap());
            }
        }
    }
}
