//! Session-log parsing, de-duplication and 10-minute binning.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate, NaiveDateTime, TimeZone};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Error, Result, SLOTS_PER_DAY, SLOT_SECONDS};

pub const SESSIONS_HEADER: [&str; 5] = ["user_id", "tower_id", "start_epoch_s", "end_epoch_s", "bytes"];
pub const TOWERS_HEADER: [&str; 3] = ["tower_id", "lat", "lon"];
pub const DEFAULT_UTC_OFFSET_MINUTES: i32 = 8 * 60;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("missing or wrong header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("duplicate tower_id `{0}` in registry")]
    DuplicateTower(String),
    #[error("invalid origin `{0}`: expected ISO-8601 date or date-time")]
    Origin(String),
    #[error("window must span at least one whole day (days = {0})")]
    Window(u32),
    #[error("invalid UTC offset {0} minutes")]
    Offset(i32),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionLog {
    pub user_id: String,
    pub tower_id: String,
    pub start: i64,
    pub end: i64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerRecord {
    pub tower_id: String,
    pub lat: f64,
    pub lon: f64,
}

/// Per-tower slot totals starting at `origin` (epoch seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedSeries {
    pub tower_id: String,
    pub origin: i64,
    pub slot_bytes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedSessions {
    pub logs: Vec<SessionLog>,
    pub rejects: Vec<Reject>,
}

/// Fixed-offset civil calendar used for day boundaries and weekdays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Calendar {
    offset: FixedOffset,
}

impl Default for Calendar {
    fn default() -> Self {
        Calendar::new(DEFAULT_UTC_OFFSET_MINUTES).expect("valid default offset")
    }
}

impl Calendar {
    pub fn new(utc_offset_minutes: i32) -> Result<Self, IngestError> {
        FixedOffset::east_opt(utc_offset_minutes * 60)
            .map(|offset| Calendar { offset })
            .ok_or(IngestError::Offset(utc_offset_minutes))
    }

    pub fn utc_offset_minutes(&self) -> i32 {
        self.offset.local_minus_utc() / 60
    }

    /// Parse an ISO-8601 date or date-time. Values without an explicit
    /// offset are read as local civil time.
    pub fn parse_origin(&self, s: &str) -> Result<i64, IngestError> {
        let s = s.trim();
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Ok(dt.timestamp());
        }
        let naive = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
            .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
            .or_else(|_| {
                NaiveDate::parse_from_str(s, "%Y-%m-%d").map(|d| d.and_hms_opt(0, 0, 0).expect("midnight"))
            })
            .map_err(|_| IngestError::Origin(s.to_string()))?;
        self.offset
            .from_local_datetime(&naive)
            .single()
            .map(|dt| dt.timestamp())
            .ok_or_else(|| IngestError::Origin(s.to_string()))
    }

    pub fn format(&self, epoch: i64) -> String {
        self.offset
            .timestamp_opt(epoch, 0)
            .single()
            .map(|dt| dt.to_rfc3339())
            .unwrap_or_else(|| epoch.to_string())
    }

    /// Day of week of an instant, Monday = 0.
    pub fn weekday(&self, epoch: i64) -> u8 {
        let dt = self.offset.timestamp_opt(epoch, 0).single().expect("in-range timestamp");
        dt.weekday().num_days_from_monday() as u8
    }

    /// Seconds since local midnight.
    pub fn seconds_of_day(&self, epoch: i64) -> i64 {
        (epoch + self.offset.local_minus_utc() as i64).rem_euclid(86_400)
    }
}

/// Analysis window `[origin, origin + days·86400)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub origin: i64,
    pub days: u32,
}

impl Window {
    pub fn new(origin: i64, days: u32) -> Result<Self, IngestError> {
        if days == 0 {
            return Err(IngestError::Window(days));
        }
        Ok(Window { origin, days })
    }
    pub fn slots(&self) -> usize {
        self.days as usize * SLOTS_PER_DAY
    }
    pub fn end(&self) -> i64 {
        self.origin + self.days as i64 * 86_400
    }
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), IngestError> {
    let ok = found.len() == expected.len() && found.iter().zip(expected).all(|(a, b)| a.trim() == *b);
    if ok {
        Ok(())
    } else {
        Err(IngestError::Header { expected: expected.join(","), found: found.iter().collect::<Vec<_>>().join(",") })
    }
}

fn parse_session_row(rec: &csv::StringRecord) -> Result<SessionLog, String> {
    if rec.len() != 5 {
        return Err(format!("expected 5 fields, found {}", rec.len()));
    }
    let user_id = rec[0].trim();
    let tower_id = rec[1].trim();
    if user_id.is_empty() || tower_id.is_empty() {
        return Err("empty user_id or tower_id".into());
    }
    let start: i64 = rec[2].trim().parse().map_err(|_| format!("bad start `{}`", &rec[2]))?;
    let end: i64 = rec[3].trim().parse().map_err(|_| format!("bad end `{}`", &rec[3]))?;
    let bytes: u64 = rec[4].trim().parse().map_err(|_| format!("bad bytes `{}`", &rec[4]))?;
    if end < start {
        return Err("end < start".into());
    }
    Ok(SessionLog { user_id: user_id.to_string(), tower_id: tower_id.to_string(), start, end, bytes })
}

/// Parse `user_id,tower_id,start_epoch_s,end_epoch_s,bytes` rows. Malformed
/// rows go to the reject list unless `strict`, which aborts on the first one.
pub fn parse_sessions<R: Read>(reader: R, strict: bool) -> Result<ParsedSessions, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut out = ParsedSessions::default();
    let mut rec = csv::StringRecord::new();
    let mut first = true;
    loop {
        let line = rdr.position().line();
        match rdr.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let reason = e.to_string();
                if strict {
                    return Err(IngestError::Malformed { line, reason });
                }
                out.rejects.push(Reject { line, reason });
                continue;
            }
        }
        let line = rec.position().map(|p| p.line()).unwrap_or(line);
        if first {
            first = false;
            check_header(&rec, &SESSIONS_HEADER)?;
            continue;
        }
        match parse_session_row(&rec) {
            Ok(log) => out.logs.push(log),
            Err(reason) if strict => return Err(IngestError::Malformed { line, reason }),
            Err(reason) => out.rejects.push(Reject { line, reason }),
        }
    }
    Ok(out)
}

/// Parse a `tower_id,lat,lon` registry. Any invalid row is an error.
pub fn parse_towers<R: Read>(reader: R) -> Result<Vec<TowerRecord>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut first = true;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| IngestError::Malformed { line: 0, reason: e.to_string() })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if first {
            first = false;
            check_header(&rec, &TOWERS_HEADER)?;
            continue;
        }
        let bad = |reason: String| IngestError::Malformed { line, reason };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        let tower_id = rec[0].trim().to_string();
        let lat: f64 = rec[1].trim().parse().map_err(|_| bad(format!("bad lat `{}`", &rec[1])))?;
        let lon: f64 = rec[2].trim().parse().map_err(|_| bad(format!("bad lon `{}`", &rec[2])))?;
        if tower_id.is_empty() || !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(bad("tower_id empty or coordinates out of range".into()));
        }
        if !seen.insert(tower_id.clone()) {
            return Err(IngestError::DuplicateTower(tower_id));
        }
        out.push(TowerRecord { tower_id, lat, lon });
    }
    Ok(out)
}

/// Collapse exact duplicates and resolve conflicts (same user, tower, start
/// and end but different bytes) by keeping the larger byte count. The result
/// is sorted by `(tower_id, start)`.
pub fn deduplicate(logs: &[SessionLog]) -> Vec<SessionLog> {
    let mut v: Vec<&SessionLog> = logs.iter().collect();
    v.sort_by(|a, b| {
        (&a.tower_id, a.start, &a.user_id, a.end)
            .cmp(&(&b.tower_id, b.start, &b.user_id, b.end))
            .then(b.bytes.cmp(&a.bytes))
    });
    let mut out: Vec<SessionLog> = Vec::with_capacity(v.len());
    for log in v {
        if let Some(last) = out.last() {
            if last.tower_id == log.tower_id && last.start == log.start && last.user_id == log.user_id && last.end == log.end {
                continue;
            }
        }
        out.push(log.clone());
    }
    out
}

#[derive(Debug, Clone)]
pub struct BinOutput {
    pub series: BTreeMap<String, BinnedSeries>,
    /// Sessions skipped because their tower is absent from the registry.
    pub unknown_tower_sessions: usize,
    /// Bytes of in-registry sessions that fell outside the window.
    pub dropped_bytes: f64,
}

/// Add one session's bytes to `slots`, split by overlap duration.
/// Returns the bytes that fell outside the window.
pub fn spread_session(slots: &mut [f64], window: &Window, start: i64, end: i64, bytes: u64) -> f64 {
    let (w0, w1) = (window.origin, window.end());
    let b = bytes as f64;
    if end == start {
        if start >= w0 && start < w1 {
            slots[((start - w0) / SLOT_SECONDS) as usize] += b;
            return 0.0;
        }
        return b;
    }
    let s = start.max(w0);
    let e = end.min(w1);
    if s >= e {
        return b;
    }
    let dur = (end - start) as f64;
    let mut inside = 0.0;
    let first = ((s - w0) / SLOT_SECONDS) as usize;
    let last = ((e - 1 - w0) / SLOT_SECONDS) as usize;
    for (k, slot) in slots.iter_mut().enumerate().take(last + 1).skip(first) {
        let lo = w0 + k as i64 * SLOT_SECONDS;
        let overlap = (e.min(lo + SLOT_SECONDS) - s.max(lo)) as f64;
        let part = b * overlap / dur;
        *slot += part;
        inside += part;
    }
    b - inside
}

/// Bin sessions per tower. With a registry, every registered tower gets a
/// series (possibly all-zero) and sessions on unknown towers are skipped.
pub fn bin_traffic(logs: &[SessionLog], window: Window, registry: Option<&[TowerRecord]>) -> BinOutput {
    let mut groups: BTreeMap<&str, Vec<&SessionLog>> = BTreeMap::new();
    let known: Option<HashSet<&str>> = registry.map(|r| r.iter().map(|t| t.tower_id.as_str()).collect());
    let mut unknown = 0usize;
    for log in logs {
        if let Some(k) = &known {
            if !k.contains(log.tower_id.as_str()) {
                unknown += 1;
                continue;
            }
        }
        groups.entry(log.tower_id.as_str()).or_default().push(log);
    }
    if let Some(r) = registry {
        for t in r {
            groups.entry(t.tower_id.as_str()).or_default();
        }
    }
    let groups: Vec<(&str, Vec<&SessionLog>)> = groups.into_iter().collect();
    let binned: Vec<(BinnedSeries, f64)> = groups
        .par_iter()
        .map(|(tower, logs)| {
            let mut slots = vec![0.0; window.slots()];
            let mut dropped = 0.0;
            for l in logs {
                dropped += spread_session(&mut slots, &window, l.start, l.end, l.bytes);
            }
            (BinnedSeries { tower_id: tower.to_string(), origin: window.origin, slot_bytes: slots }, dropped)
        })
        .collect();
    let dropped_bytes = binned.iter().map(|(_, d)| d).sum();
    let series = binned.into_iter().map(|(s, _)| (s.tower_id.clone(), s)).collect();
    BinOutput { series, unknown_tower_sessions: unknown, dropped_bytes }
}

/// Sidecar describing a binned.csv file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedManifest {
    pub origin: String,
    pub origin_epoch: i64,
    pub slot_seconds: i64,
    pub days: u32,
    pub utc_offset_minutes: i32,
    pub towers: Vec<String>,
    #[serde(default)]
    pub sessions_read: usize,
    #[serde(default)]
    pub rejected_rows: usize,
    #[serde(default)]
    pub duplicates_removed: usize,
    #[serde(default)]
    pub unknown_tower_sessions: usize,
    #[serde(default)]
    pub dropped_bytes: f64,
}

impl BinnedManifest {
    pub fn window(&self) -> Window {
        Window { origin: self.origin_epoch, days: self.days }
    }
    pub fn calendar(&self) -> Result<Calendar> {
        Ok(Calendar::new(self.utc_offset_minutes)?)
    }
}

/// Write `tower_id,slot_index,bytes` rows for non-zero slots.
pub fn write_binned<W: Write>(w: W, series: &BTreeMap<String, BinnedSeries>) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["tower_id", "slot_index", "bytes"])?;
    for s in series.values() {
        for (i, &b) in s.slot_bytes.iter().enumerate() {
            if b != 0.0 {
                wtr.write_record([s.tower_id.as_str(), &i.to_string(), &b.to_string()])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Read binned.csv back into dense series using its manifest for the
/// window and the full tower list.
pub fn read_binned(path: &Path, manifest: &BinnedManifest) -> Result<BTreeMap<String, BinnedSeries>> {
    let n = manifest.days as usize * SLOTS_PER_DAY;
    let mut out: BTreeMap<String, BinnedSeries> = manifest
        .towers
        .iter()
        .map(|t| (t.clone(), BinnedSeries { tower_id: t.clone(), origin: manifest.origin_epoch, slot_bytes: vec![0.0; n] }))
        .collect();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |reason: &str| Error::from(IngestError::Malformed { line, reason: reason.to_string() });
        if rec.len() != 3 {
            return Err(bad("expected tower_id,slot_index,bytes"));
        }
        let idx: usize = rec[1].parse().map_err(|_| bad("bad slot_index"))?;
        let b: f64 = rec[2].parse().map_err(|_| bad("bad bytes"))?;
        if idx >= n {
            return Err(bad("slot_index outside window"));
        }
        let s = out.entry(rec[0].to_string()).or_insert_with(|| BinnedSeries {
            tower_id: rec[0].to_string(),
            origin: manifest.origin_epoch,
            slot_bytes: vec![0.0; n],
        });
        s.slot_bytes[idx] += b;
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<BinnedManifest> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(f).map_err(|e| Error::json(path, e))
}
