//! Week-aligned trimming and z-score normalisation of binned series.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{BinnedSeries, Calendar};
use crate::{Error, Result, Scalar, SLOTS_PER_DAY, SLOTS_PER_WEEK};

const BIN_MAGIC: &[u8; 4] = b"CMVF";
const BIN_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VectorizeError {
    #[error("tower {tower}: need {required} week-aligned slots, have {available}")]
    InsufficientData { tower: String, required: usize, available: usize },
    #[error("unknown weekday `{0}`")]
    Weekday(String),
    #[error("vector file: {0}")]
    Format(String),
}

/// Z-scored traffic vector. `degenerate` marks a constant source series,
/// whose values are then all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficVector<T> {
    pub tower_id: String,
    pub values: Vec<T>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorFormat {
    #[default]
    Csv,
    Bin,
}

/// Parse a weekday name (`mon`, `Monday`, ...) to Monday = 0.
pub fn parse_weekday(s: &str) -> Result<u8, VectorizeError> {
    const NAMES: [&str; 7] = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];
    let l = s.trim().to_ascii_lowercase();
    NAMES
        .iter()
        .position(|n| l.len() >= 3 && l.starts_with(n))
        .map(|p| p as u8)
        .ok_or_else(|| VectorizeError::Weekday(s.to_string()))
}

pub fn weekday_name(d: u8) -> &'static str {
    ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"][d as usize % 7]
}

/// First day index whose start falls on `week_start` and leaves room for
/// `weeks` whole weeks.
pub fn aligned_start_day(origin: i64, days: usize, weeks: usize, week_start: u8, cal: &Calendar) -> Option<usize> {
    let need_days = weeks * 7;
    (0..7)
        .find(|&d| cal.weekday(origin + d as i64 * 86_400) == week_start)
        .filter(|&d| d + need_days <= days)
}

/// Keep the first `weeks` whole weeks starting on `week_start`.
pub fn trim_to_weeks(series: &BinnedSeries, weeks: usize, week_start: u8, cal: &Calendar) -> Result<BinnedSeries, VectorizeError> {
    let required = weeks * SLOTS_PER_WEEK;
    let days = series.slot_bytes.len() / SLOTS_PER_DAY;
    let start = aligned_start_day(series.origin, days, weeks, week_start, cal).ok_or_else(|| {
        let first = (0..7).find(|&d| cal.weekday(series.origin + d as i64 * 86_400) == week_start).unwrap_or(0);
        VectorizeError::InsufficientData {
            tower: series.tower_id.clone(),
            required,
            available: series.slot_bytes.len().saturating_sub(first * SLOTS_PER_DAY),
        }
    })?;
    let lo = start * SLOTS_PER_DAY;
    Ok(BinnedSeries {
        tower_id: series.tower_id.clone(),
        origin: series.origin + start as i64 * 86_400,
        slot_bytes: series.slot_bytes[lo..lo + required].to_vec(),
    })
}

/// Z-score with population standard deviation; a constant input yields
/// zeros and `degenerate = true`.
pub fn zscore<T: Scalar>(raw: &[T]) -> (Vec<T>, bool) {
    if raw.is_empty() || raw.iter().all(|&x| x == raw[0]) {
        return (vec![T::zero(); raw.len()], true);
    }
    let (mean, std) = crate::scalar::mean_std(raw);
    if std <= T::zero() {
        return (vec![T::zero(); raw.len()], true);
    }
    (raw.iter().map(|&x| (x - mean) / std).collect(), false)
}

pub fn normalize<T: Scalar>(series: &BinnedSeries) -> TrafficVector<T> {
    let raw: Vec<T> = series.slot_bytes.iter().map(|&x| T::of(x)).collect();
    let (values, degenerate) = zscore(&raw);
    TrafficVector { tower_id: series.tower_id.clone(), values, degenerate }
}

pub fn write_vectors<T: Scalar, W: Write>(w: W, vectors: &[TrafficVector<T>], format: VectorFormat) -> std::io::Result<()> {
    match format {
        VectorFormat::Csv => write_csv(w, vectors),
        VectorFormat::Bin => write_bin(w, vectors),
    }
}

fn write_csv<T: Scalar, W: Write>(w: W, vectors: &[TrafficVector<T>]) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let n = vectors.first().map_or(0, |v| v.values.len());
    let mut header = vec!["tower_id".to_string()];
    header.extend((0..n).map(|i| format!("v{i}")));
    wtr.write_record(&header)?;
    for v in vectors {
        let mut row = vec![v.tower_id.clone()];
        row.extend(v.values.iter().map(|x| x.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()
}

// layout: magic, u32 version, u64 count, then per record
// u32 id_len, id bytes, u8 flags (bit0 = degenerate), u64 len, len × f64
fn write_bin<T: Scalar, W: Write>(mut w: W, vectors: &[TrafficVector<T>]) -> std::io::Result<()> {
    w.write_all(BIN_MAGIC)?;
    w.write_all(&BIN_VERSION.to_le_bytes())?;
    w.write_all(&(vectors.len() as u64).to_le_bytes())?;
    for v in vectors {
        let id = v.tower_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&[v.degenerate as u8])?;
        w.write_all(&(v.values.len() as u64).to_le_bytes())?;
        for x in &v.values {
            w.write_all(&x.f64().to_le_bytes())?;
        }
    }
    w.flush()
}

fn take<const K: usize>(buf: &[u8], pos: &mut usize) -> Result<[u8; K], VectorizeError> {
    let s = buf.get(*pos..*pos + K).ok_or_else(|| VectorizeError::Format("truncated binary vector file".into()))?;
    *pos += K;
    Ok(s.try_into().expect("slice length"))
}

fn read_bin<T: Scalar>(buf: &[u8]) -> Result<Vec<TrafficVector<T>>, VectorizeError> {
    let mut pos = 4;
    let version = u32::from_le_bytes(take::<4>(buf, &mut pos)?);
    if version != BIN_VERSION {
        return Err(VectorizeError::Format(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(take::<8>(buf, &mut pos)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id_len = u32::from_le_bytes(take::<4>(buf, &mut pos)?) as usize;
        let id = buf.get(pos..pos + id_len).ok_or_else(|| VectorizeError::Format("truncated id".into()))?;
        pos += id_len;
        let tower_id = String::from_utf8(id.to_vec()).map_err(|_| VectorizeError::Format("id not UTF-8".into()))?;
        let flags = take::<1>(buf, &mut pos)?[0];
        let len = u64::from_le_bytes(take::<8>(buf, &mut pos)?) as usize;
        let mut values = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            values.push(T::of(f64::from_le_bytes(take::<8>(buf, &mut pos)?)));
        }
        out.push(TrafficVector { tower_id, values, degenerate: flags & 1 == 1 });
    }
    Ok(out)
}

fn read_csv<T: Scalar>(buf: &[u8]) -> Result<Vec<TrafficVector<T>>, VectorizeError> {
    let mut rdr = csv::Reader::from_reader(buf);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| VectorizeError::Format(e.to_string()))?;
        let tower_id = rec.get(0).unwrap_or_default().to_string();
        let values = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map(T::of))
            .collect::<Result<Vec<T>, _>>()
            .map_err(|e| VectorizeError::Format(format!("{tower_id}: {e}")))?;
        let degenerate = values.iter().all(|v| *v == T::zero());
        out.push(TrafficVector { tower_id, values, degenerate });
    }
    Ok(out)
}

/// Parse vectors from bytes, detecting the binary format by its magic.
pub fn parse_vectors<T: Scalar>(buf: &[u8]) -> Result<Vec<TrafficVector<T>>, VectorizeError> {
    if buf.starts_with(BIN_MAGIC) {
        read_bin(buf)
    } else {
        read_csv(buf)
    }
}

pub fn read_vectors<T: Scalar>(path: &Path) -> Result<Vec<TrafficVector<T>>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(parse_vectors(&buf)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_zscore() {
        let (v, d) = zscore(&[1.0f64, 3.0]);
        assert_eq!(v, vec![-1.0, 1.0]);
        assert!(!d);
    }

    #[test]
    fn constant_is_degenerate() {
        let (v, d) = zscore(&[5.0f32; 10]);
        assert!(d && v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn weekday_names() {
        assert_eq!(parse_weekday("Monday").unwrap(), 0);
        assert_eq!(parse_weekday("fri").unwrap(), 4);
        assert!(parse_weekday("xx").is_err());
    }

    fn series(days: usize) -> BinnedSeries {
        BinnedSeries { tower_id: "t".into(), origin: Calendar::default().parse_origin("2014-08-01").unwrap(), slot_bytes: (0..days * 144).map(|i| i as f64).collect() }
    }

    #[test]
    fn trims_month_to_four_weeks() {
        let cal = Calendar::default();
        // 2014-08-01 is a Friday; first Monday is day 3
        let t = trim_to_weeks(&series(31), 4, 0, &cal).unwrap();
        assert_eq!(t.slot_bytes.len(), 4032);
        assert_eq!(t.slot_bytes[0], (3 * 144) as f64);
        let aligned = trim_to_weeks(&series(28), 4, 4, &cal).unwrap();
        assert_eq!(aligned.slot_bytes, series(28).slot_bytes);
        assert!(trim_to_weeks(&series(20), 4, 4, &cal).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let v = vec![
            TrafficVector { tower_id: "a".into(), values: vec![1.5f64, -2.0], degenerate: false },
            TrafficVector { tower_id: "b".into(), values: vec![0.0, 0.0], degenerate: true },
        ];
        let mut buf = Vec::new();
        write_vectors(&mut buf, &v, VectorFormat::Bin).unwrap();
        assert_eq!(parse_vectors::<f64>(&buf).unwrap(), v);
        let mut csv = Vec::new();
        write_vectors(&mut csv, &v, VectorFormat::Csv).unwrap();
        assert_eq!(parse_vectors::<f64>(&csv).unwrap(), v);
    }
}
