//! Points of interest near towers: counts, cluster table and TF-IDF.

use std::collections::HashMap;
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TowerRecord;

pub const EARTH_RADIUS_M: f64 = 6_371_008.8;
pub const DEFAULT_RADIUS_M: f64 = 200.0;
const GRID_DEG: f64 = 0.01;

#[derive(Debug, Error)]
pub enum PoiError {
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("radius must be positive, got {0}")]
    Radius(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoiType {
    Resident,
    Transport,
    Office,
    Entertain,
}

impl PoiType {
    pub const ALL: [PoiType; 4] = [PoiType::Resident, PoiType::Transport, PoiType::Office, PoiType::Entertain];

    pub fn index(self) -> usize {
        self as usize
    }
    pub fn name(self) -> &'static str {
        ["resident", "transport", "office", "entertain"][self as usize]
    }
    pub fn parse(s: &str) -> Option<PoiType> {
        match s.trim().to_ascii_lowercase().as_str() {
            "resident" => Some(PoiType::Resident),
            "transport" => Some(PoiType::Transport),
            "office" => Some(PoiType::Office),
            "entertain" | "entertainment" => Some(PoiType::Entertain),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoiRecord {
    pub poi_id: String,
    pub kind: PoiType,
    pub lat: f64,
    pub lon: f64,
}

pub fn parse_pois<R: Read>(reader: R) -> Result<Vec<PoiRecord>, PoiError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| PoiError::Malformed { line: 0, reason: e.to_string() })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |reason: &str| PoiError::Malformed { line, reason: reason.to_string() };
        if rec.len() != 4 {
            return Err(bad("expected poi_id,type,lat,lon"));
        }
        let kind = PoiType::parse(&rec[1]).ok_or_else(|| bad("unknown POI type"))?;
        let lat: f64 = rec[2].trim().parse().map_err(|_| bad("bad lat"))?;
        let lon: f64 = rec[3].trim().parse().map_err(|_| bad("bad lon"))?;
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(bad("coordinates out of range"));
        }
        out.push(PoiRecord { poi_id: rec[0].trim().to_string(), kind, lat, lon });
    }
    Ok(out)
}

/// Great-circle distance in metres on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// POIs bucketed on a 0.01° grid.
pub struct PoiIndex<'a> {
    pois: &'a [PoiRecord],
    cells: HashMap<(i64, i64), Vec<usize>>,
}

fn cell(lat: f64, lon: f64) -> (i64, i64) {
    ((lat / GRID_DEG).floor() as i64, (lon / GRID_DEG).floor() as i64)
}

impl<'a> PoiIndex<'a> {
    pub fn new(pois: &'a [PoiRecord]) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in pois.iter().enumerate() {
            cells.entry(cell(p.lat, p.lon)).or_default().push(i);
        }
        PoiIndex { pois, cells }
    }

    /// Counts per type of POIs within `radius_m` of a point.
    pub fn count(&self, lat: f64, lon: f64, radius_m: f64) -> [u64; 4] {
        let dlat = (radius_m / EARTH_RADIUS_M).to_degrees();
        let coslat = lat.to_radians().cos().abs().max(1e-6);
        let dlon = (dlat / coslat).min(180.0);
        let (lo, hi) = (cell(lat - dlat, lon - dlon), cell(lat + dlat, lon + dlon));
        let mut out = [0u64; 4];
        for ci in lo.0..=hi.0 {
            for cj in lo.1..=hi.1 {
                for &i in self.cells.get(&(ci, cj)).into_iter().flatten() {
                    let p = &self.pois[i];
                    if haversine_m(lat, lon, p.lat, p.lon) <= radius_m {
                        out[p.kind.index()] += 1;
                    }
                }
            }
        }
        out
    }
}

pub fn count_poi(towers: &[TowerRecord], pois: &[PoiRecord], radius_m: f64) -> Result<Vec<[u64; 4]>, PoiError> {
    if !(radius_m > 0.0) {
        return Err(PoiError::Radius(radius_m));
    }
    let idx = PoiIndex::new(pois);
    Ok(towers.par_iter().map(|t| idx.count(t.lat, t.lon, radius_m)).collect())
}

/// Average min-max-normalised counts per cluster. A type with zero range is
/// flagged and its column left undefined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoiTable {
    pub rows: Vec<[Option<f64>; 4]>,
    pub undefined_columns: [bool; 4],
    /// Row index of each column's maximum.
    pub column_argmax: [Option<usize>; 4],
    /// Column index of each row's maximum.
    pub row_argmax: Vec<Option<usize>>,
}

pub fn cluster_poi_table(counts: &[[u64; 4]], labels: &[usize], r: usize) -> PoiTable {
    let mut undefined = [false; 4];
    let mut norm = vec![[0.0f64; 4]; counts.len()];
    for t in 0..4 {
        let (lo, hi) = counts.iter().fold((u64::MAX, 0u64), |(a, b), c| (a.min(c[t]), b.max(c[t])));
        if counts.is_empty() || hi == lo {
            undefined[t] = true;
            continue;
        }
        for (n, c) in norm.iter_mut().zip(counts) {
            n[t] = (c[t] - lo) as f64 / (hi - lo) as f64;
        }
    }
    let mut sums = vec![[0.0f64; 4]; r];
    let mut sizes = vec![0usize; r];
    for (n, &l) in norm.iter().zip(labels) {
        sizes[l] += 1;
        for t in 0..4 {
            sums[l][t] += n[t];
        }
    }
    let rows: Vec<[Option<f64>; 4]> = sums
        .iter()
        .zip(&sizes)
        .map(|(s, &k)| std::array::from_fn(|t| (!undefined[t] && k > 0).then(|| s[t] / k as f64)))
        .collect();
    let argmax = |it: &mut dyn Iterator<Item = (usize, Option<f64>)>| {
        it.filter_map(|(i, v)| v.map(|v| (i, v))).fold(None, |b: Option<(usize, f64)>, (i, v)| match b {
            Some((_, bv)) if bv >= v => b,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
    };
    let column_argmax = std::array::from_fn(|t| argmax(&mut rows.iter().map(|row| row[t]).enumerate()));
    let row_argmax = rows.iter().map(|row| argmax(&mut row.iter().copied().enumerate())).collect();
    PoiTable { rows, undefined_columns: undefined, column_argmax, row_argmax }
}

/// TF-IDF for one cell: ln(M / M_i) · ln(1 + count).
pub fn tfidf_value(m: usize, m_i: usize, count: u64) -> f64 {
    if count == 0 {
        return 0.0;
    }
    assert!(m_i > 0, "a positive count implies M_i > 0");
    (m as f64 / m_i as f64).ln() * (count as f64).ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoiProfile {
    pub tower_id: String,
    pub counts: [u64; 4],
    pub tfidf: [f64; 4],
    /// `None` when every TF-IDF is zero.
    pub ntfidf: Option<[f64; 4]>,
}

/// TF-IDF and its row-normalised form. M is the number of towers, M_i the
/// number of towers with at least one POI of type i.
pub fn ntfidf(tower_ids: &[String], counts: &[[u64; 4]]) -> Vec<PoiProfile> {
    let m = counts.len();
    let mi: [usize; 4] = std::array::from_fn(|t| counts.iter().filter(|c| c[t] > 0).count());
    tower_ids
        .iter()
        .zip(counts)
        .map(|(id, c)| {
            let tfidf: [f64; 4] = std::array::from_fn(|t| tfidf_value(m, mi[t], c[t]));
            let s: f64 = tfidf.iter().sum();
            let ntfidf = (s > 0.0).then(|| std::array::from_fn(|t| tfidf[t] / s));
            PoiProfile { tower_id: id.clone(), counts: *c, tfidf, ntfidf }
        })
        .collect()
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).expect("finite"));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_tfidf() {
        let v = tfidf_value(4, 2, 3);
        assert!((v - 2f64.ln() * 4f64.ln()).abs() < 1e-12);
        assert_eq!(tfidf_value(4, 2, 0), 0.0);
    }

    #[test]
    fn rows_sum_to_one_and_zero_flagged() {
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let counts = [[3, 0, 1, 0], [0, 2, 0, 0], [0, 0, 0, 0], [1, 0, 0, 5]];
        let p = ntfidf(&ids, &counts);
        assert!((p[0].ntfidf.unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[1].ntfidf, Some([0.0, 1.0, 0.0, 0.0]));
        assert!(p[2].ntfidf.is_none());
    }

    #[test]
    fn distance_cases() {
        assert_eq!(haversine_m(31.2, 121.4, 31.2, 121.4), 0.0);
        let north = 250.0 / EARTH_RADIUS_M;
        let lat2 = 31.2 + north.to_degrees();
        assert!((haversine_m(31.2, 121.4, lat2, 121.4) - 250.0).abs() < 1e-6);
        let towers = vec![TowerRecord { tower_id: "t".into(), lat: 31.2, lon: 121.4 }];
        let pois = vec![
            PoiRecord { poi_id: "a".into(), kind: PoiType::Office, lat: 31.2, lon: 121.4 },
            PoiRecord { poi_id: "b".into(), kind: PoiType::Office, lat: lat2, lon: 121.4 },
        ];
        assert_eq!(count_poi(&towers, &pois, 200.0).unwrap()[0], [0, 0, 1, 0]);
        assert_eq!(count_poi(&towers, &[], 200.0).unwrap()[0], [0; 4]);
    }

    #[test]
    fn table_identity_pattern() {
        let counts = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1], [0, 0, 0, 0]];
        let t = cluster_poi_table(&counts, &[0, 1, 2, 3, 4], 5);
        assert_eq!(t.column_argmax, [Some(0), Some(1), Some(2), Some(3)]);
        let flat = cluster_poi_table(&[[2, 2, 2, 2], [2, 2, 2, 2]], &[0, 1], 2);
        assert_eq!(flat.undefined_columns, [true; 4]);
    }

    #[test]
    fn spearman_perfect() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
