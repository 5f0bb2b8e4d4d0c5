//! File-artifact stages, the end-to-end run and the plot-data report.
//!
//! Every stage reads only declared files and writes its own; the run
//! manifest records a SHA-256 per artifact.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::info;

use crate::cluster::{self, ClusterModel};
use crate::decompose::{self, FeaturePoint, PolygonModel, RenderScale, Standardizer};
use crate::ingest::{self, BinnedManifest, BinnedSeries, Calendar, Window};
use crate::poi::{self, PoiType};
use crate::spectrum::{self, DftEngine, PrincipalIndices, FEATURE_COLUMNS, RELATIVE_COLUMNS};
use crate::timefeat::{self, PeakParams, TimeFeatures};
use crate::vectorize::{self, TrafficVector, VectorFormat};
use crate::{Error, Result, SLOTS_PER_DAY};

pub const STAGES: [&str; 7] = ["ingest", "vectorize", "cluster", "features", "spectrum", "decompose", "poi"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {cause}")]
    Stage { stage: &'static str, cause: Box<Error> },
    #[error("incomplete run, missing artifacts: {}", .0.iter().map(|(s, f)| format!("{f} (from {s})")).collect::<Vec<_>>().join(", "))]
    MissingArtifacts(Vec<(String, String)>),
    #[error("{file}: {reason}")]
    Artifact { file: String, reason: String },
}

impl PipelineError {
    /// Whether the error is a caller mistake rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::MissingArtifacts(_))
    }
}

fn artifact_err(path: &Path, reason: impl Into<String>) -> Error {
    PipelineError::Artifact { file: path.display().to_string(), reason: reason.into() }.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub sessions: Option<PathBuf>,
    pub towers: Option<PathBuf>,
    pub pois: Option<PathBuf>,
    pub origin: String,
    pub days: u32,
    pub utc_offset_minutes: i32,
    pub strict: bool,
    pub week_start: String,
    pub weeks: usize,
    pub vector_format: VectorFormat,
    pub rmin: usize,
    pub rmax: usize,
    pub peak: PeakParams,
    /// Override of the week/day/half-day bins; derived from N when absent.
    pub principal_bins: Option<[usize; 3]>,
    /// Columns of spectral_features.csv or relative_features.csv.
    pub qp_features: Vec<String>,
    pub density_radius: f64,
    pub min_density: usize,
    /// 1-based cluster ids of the four primary patterns.
    pub primary_clusters: Option<[usize; 4]>,
    pub radius_m: f64,
    pub render_scale: RenderScale,
    pub poi_stage: bool,
    pub out_dir: PathBuf,
    /// Recorded in the manifest; the pipeline itself draws no randomness.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sessions: None,
            towers: None,
            pois: None,
            origin: "2014-08-01".into(),
            days: 28,
            utc_offset_minutes: ingest::DEFAULT_UTC_OFFSET_MINUTES,
            strict: false,
            week_start: "monday".into(),
            weeks: 4,
            vector_format: VectorFormat::Csv,
            rmin: 2,
            rmax: 15,
            peak: PeakParams::default(),
            principal_bins: None,
            qp_features: vec!["A28".into(), "P28".into(), "A56".into()],
            density_radius: 0.5,
            min_density: 5,
            primary_clusters: None,
            radius_m: poi::DEFAULT_RADIUS_M,
            render_scale: RenderScale::TowerStd,
            poi_stage: true,
            out_dir: PathBuf::from("run"),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::json(path, e))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let need = |p: &Option<PathBuf>, what: &str| -> Result<(), PipelineError> {
            match p {
                None => Err(PipelineError::Config(format!("{what} path not set"))),
                Some(p) if !p.is_file() => Err(PipelineError::Config(format!("{what} file {} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        need(&self.sessions, "sessions")?;
        need(&self.towers, "towers")?;
        if self.poi_stage {
            need(&self.pois, "pois").map_err(|e| PipelineError::Config(format!("poi stage: {e}")))?;
        }
        if self.days == 0 || self.weeks == 0 {
            return bad("days and weeks must be positive".into());
        }
        if self.weeks * 7 > self.days as usize {
            return bad(format!("{} weeks do not fit in {} days", self.weeks, self.days));
        }
        if self.rmin < 2 || self.rmin > self.rmax {
            return bad(format!("R range {}..{} invalid", self.rmin, self.rmax));
        }
        if !(self.radius_m > 0.0) || !(self.density_radius > 0.0) {
            return bad("radii must be positive".into());
        }
        if self.qp_features.is_empty() {
            return bad("qp_features is empty".into());
        }
        let rel = self.qp_features.iter().all(|c| RELATIVE_COLUMNS.contains(&c.as_str()));
        let abs = self.qp_features.iter().all(|c| FEATURE_COLUMNS.contains(&c.as_str()));
        if !rel && !abs {
            return bad(format!("qp_features {:?} must all come from {FEATURE_COLUMNS:?} or all from {RELATIVE_COLUMNS:?}", self.qp_features));
        }
        if let Some(p) = self.primary_clusters {
            if p.iter().any(|&c| c == 0) {
                return bad("primary_clusters are 1-based".into());
            }
        }
        vectorize::parse_weekday(&self.week_start).map_err(|e| PipelineError::Config(e.to_string()))?;
        Calendar::new(self.utc_offset_minutes)
            .and_then(|c| c.parse_origin(&self.origin))
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    fn features_file(&self) -> &'static str {
        if self.qp_features.iter().all(|c| RELATIVE_COLUMNS.contains(&c.as_str())) {
            "relative_features.csv"
        } else {
            "spectral_features.csv"
        }
    }
}

// ---------- small file helpers ----------

fn create(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

struct Table {
    path: PathBuf,
    w: csv::Writer<std::fs::File>,
}

impl Table {
    fn new(path: PathBuf, header: &[&str]) -> Result<Self> {
        let mut w = create(&path)?;
        w.write_record(header).map_err(|e| Error::csv(&path, e))?;
        Ok(Table { path, w })
    }
    fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.w.write_record(fields).map_err(|e| Error::csv(&self.path, e))
    }
    fn finish(mut self) -> Result<PathBuf> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path)
    }
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<PathBuf> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), v).map_err(|e| Error::json(path, e))?;
    Ok(path.to_path_buf())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::json(path, e))
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = r.headers().map_err(|e| Error::csv(path, e))?.iter().map(str::to_string).collect();
    let rows = r.records().collect::<Result<Vec<_>, _>>().map_err(|e| Error::csv(path, e))?;
    Ok((header, rows))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn times(v: &[usize]) -> String {
    v.iter().map(|&s| timefeat::hhmm(s)).collect::<Vec<_>>().join(";")
}

fn manifest_path(binned: &Path) -> PathBuf {
    binned.with_extension("json")
}

/// Read `tower_id,cluster` (1-based) as 0-based labels.
pub fn read_assignments(path: &Path) -> Result<Vec<(String, usize)>> {
    let (_, rows) = read_table(path)?;
    rows.iter()
        .map(|r| {
            let c: usize = r.get(1).and_then(|s| s.parse().ok()).filter(|&c| c > 0).ok_or_else(|| artifact_err(path, "bad cluster id"))?;
            Ok((r[0].to_string(), c - 1))
        })
        .collect()
}

/// Binned series trimmed to whole weeks starting on `week_start`.
pub fn load_trimmed(binned: &Path, weeks: usize, week_start: u8) -> Result<Vec<BinnedSeries>> {
    let manifest = ingest::read_manifest(&manifest_path(binned))?;
    let cal = manifest.calendar()?;
    let series = ingest::read_binned(binned, &manifest)?;
    series
        .values()
        .map(|s| vectorize::trim_to_weeks(s, weeks, week_start, &cal).map_err(Error::from))
        .collect()
}

// ---------- stages ----------

#[derive(Debug, Clone)]
pub struct IngestParams {
    pub origin: String,
    pub days: u32,
    pub utc_offset_minutes: i32,
    pub strict: bool,
}

/// sessions.csv + towers.csv → binned.csv, binned.json, rejects.csv.
pub fn stage_ingest(sessions: &Path, towers: Option<&Path>, p: &IngestParams, out: &Path) -> Result<Vec<PathBuf>> {
    let cal = Calendar::new(p.utc_offset_minutes)?;
    let origin_epoch = cal.parse_origin(&p.origin)?;
    let window = Window::new(origin_epoch, p.days)?;
    let f = std::fs::File::open(sessions).map_err(|e| Error::io(sessions, e))?;
    let parsed = ingest::parse_sessions(std::io::BufReader::new(f), p.strict)?;
    let registry = match towers {
        Some(t) => {
            let f = std::fs::File::open(t).map_err(|e| Error::io(t, e))?;
            Some(ingest::parse_towers(std::io::BufReader::new(f))?)
        }
        None => None,
    };
    let logs = ingest::deduplicate(&parsed.logs);
    let binned = ingest::bin_traffic(&logs, window, registry.as_deref());
    info!(sessions = parsed.logs.len(), rejects = parsed.rejects.len(), towers = binned.series.len(), "ingest");

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let binned_path = out.join("binned.csv");
    let w = std::fs::File::create(&binned_path).map_err(|e| Error::io(&binned_path, e))?;
    ingest::write_binned(std::io::BufWriter::new(w), &binned.series).map_err(|e| Error::csv(&binned_path, e))?;
    let manifest = BinnedManifest {
        origin: cal.format(origin_epoch),
        origin_epoch,
        slot_seconds: crate::SLOT_SECONDS,
        days: p.days,
        utc_offset_minutes: p.utc_offset_minutes,
        towers: binned.series.keys().cloned().collect(),
        sessions_read: parsed.logs.len(),
        rejected_rows: parsed.rejects.len(),
        duplicates_removed: parsed.logs.len() - logs.len(),
        unknown_tower_sessions: binned.unknown_tower_sessions,
        dropped_bytes: binned.dropped_bytes,
    };
    let mpath = write_json(&manifest_path(&binned_path), &manifest)?;
    let mut rej = Table::new(out.join("rejects.csv"), &["line", "reason"])?;
    for r in &parsed.rejects {
        rej.row([r.line.to_string(), r.reason.clone()])?;
    }
    Ok(vec![binned_path, mpath, rej.finish()?])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VectorsMeta {
    pub weeks: usize,
    pub week_start: String,
    pub slots: usize,
    pub towers: usize,
    pub degenerate: Vec<String>,
}

/// binned.csv → vectors.csv (or vectors.bin) + vectors.json.
pub fn stage_vectorize(binned: &Path, weeks: usize, week_start: u8, format: VectorFormat, out: &Path) -> Result<Vec<PathBuf>> {
    let trimmed = load_trimmed(binned, weeks, week_start)?;
    let vectors: Vec<TrafficVector<f64>> = trimmed.iter().map(vectorize::normalize).collect();
    let degenerate: Vec<String> = vectors.iter().filter(|v| v.degenerate).map(|v| v.tower_id.clone()).collect();
    info!(towers = vectors.len(), degenerate = degenerate.len(), "vectorize");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(match format {
        VectorFormat::Csv => "vectors.csv",
        VectorFormat::Bin => "vectors.bin",
    });
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    vectorize::write_vectors(std::io::BufWriter::new(f), &vectors, format).map_err(|e| Error::io(&path, e))?;
    let meta = VectorsMeta {
        weeks,
        week_start: vectorize::weekday_name(week_start).into(),
        slots: weeks * crate::SLOTS_PER_WEEK,
        towers: vectors.len(),
        degenerate,
    };
    Ok(vec![path, write_json(&out.join("vectors.json"), &meta)?])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub r: usize,
    pub cut_threshold: f64,
    pub dbi: f64,
    pub sizes: Vec<usize>,
    pub shares_percent: Vec<f64>,
    pub excluded_degenerate: Vec<String>,
}

/// vectors → assignments.csv, centroids.csv, dbi_trace.csv,
/// distances_cdf.csv, cluster.json. Degenerate vectors are left out.
pub fn stage_cluster(vectors: &Path, rmin: usize, rmax: usize, out: &Path) -> Result<(ClusterModel<f64>, Vec<PathBuf>)> {
    let all: Vec<TrafficVector<f64>> = vectorize::read_vectors(vectors)?;
    let (kept, excluded): (Vec<_>, Vec<_>) = all.into_iter().partition(|v| !v.degenerate);
    let refs: Vec<&[f64]> = kept.iter().map(|v| v.values.as_slice()).collect();
    let ids: Vec<String> = kept.iter().map(|v| v.tower_id.clone()).collect();
    let dendro = cluster::hac_average_linkage(&refs)?;
    let model = cluster::tune_cut(&dendro, ids, &refs, rmin, rmax)?;
    info!(r = model.r, dbi = model.dbi, cut = model.cut_threshold, "cluster");

    let mut files = Vec::new();
    let mut t = Table::new(out.join("assignments.csv"), &["tower_id", "cluster"])?;
    for (id, l) in model.tower_ids.iter().zip(&model.labels) {
        t.row([id.clone(), (l + 1).to_string()])?;
    }
    files.push(t.finish()?);
    let mut t = Table::new(out.join("centroids.csv"), &["cluster", "slot", "value"])?;
    for (c, cen) in model.centroids.iter().enumerate() {
        for (s, v) in cen.iter().enumerate() {
            t.row([(c + 1).to_string(), s.to_string(), v.to_string()])?;
        }
    }
    files.push(t.finish()?);
    let mut t = Table::new(out.join("dbi_trace.csv"), &["R", "cut_height", "dbi"])?;
    for p in &model.trace {
        t.row([p.r.to_string(), p.cut_height.to_string(), opt(p.dbi)])?;
    }
    files.push(t.finish()?);
    let mut t = Table::new(out.join("distances_cdf.csv"), &["cluster", "distance", "cdf"])?;
    for c in cluster::distance_cdf(&model, &refs) {
        let n = c.distances.len();
        for (i, d) in c.distances.iter().enumerate() {
            t.row([(c.cluster + 1).to_string(), d.to_string(), ((i + 1) as f64 / n as f64).to_string()])?;
        }
    }
    files.push(t.finish()?);
    let summary = ClusterSummary {
        r: model.r,
        cut_threshold: model.cut_threshold,
        dbi: model.dbi,
        sizes: model.sizes.clone(),
        shares_percent: cluster::cluster_shares(&model.sizes),
        excluded_degenerate: excluded.iter().map(|v| v.tower_id.clone()).collect(),
    };
    files.push(write_json(&out.join("cluster.json"), &summary)?);
    Ok((model, files))
}

const FEATURE_HEADER: [&str; 14] = [
    "id",
    "kind",
    "cluster",
    "weekday_weekend_ratio",
    "weekday_peak",
    "weekday_valley",
    "weekday_peak_valley_ratio",
    "weekday_peak_times",
    "weekday_valley_times",
    "weekend_peak",
    "weekend_valley",
    "weekend_peak_valley_ratio",
    "weekend_peak_times",
    "weekend_valley_times",
];

fn feature_row(kind: &str, cluster: usize, f: &TimeFeatures) -> Vec<String> {
    let mut v = vec![f.id.clone(), kind.to_string(), cluster.to_string(), opt(f.weekday_weekend_ratio)];
    for pv in [&f.weekday, &f.weekend] {
        v.extend([pv.peak_value.to_string(), pv.valley_value.to_string(), opt(pv.ratio), times(&pv.peak_times), times(&pv.valley_times)]);
    }
    v
}

/// binned.csv + assignments.csv → features.csv (per tower and per cluster,
/// raw bytes), profiles.csv (cluster mean day curves) and peak_offsets.csv.
pub fn stage_features(binned: &Path, assignments: &Path, weeks: usize, week_start: u8, peak: &PeakParams, out: &Path) -> Result<Vec<PathBuf>> {
    let trimmed = load_trimmed(binned, weeks, week_start)?;
    let by_id: HashMap<&str, &BinnedSeries> = trimmed.iter().map(|s| (s.tower_id.as_str(), s)).collect();
    let labels = read_assignments(assignments)?;
    let r = labels.iter().map(|(_, l)| l + 1).max().unwrap_or(0);
    let n = weeks * crate::SLOTS_PER_WEEK;
    let mut sums = vec![vec![0.0; n]; r];
    let mut counts = vec![0usize; r];
    let mut t = Table::new(out.join("features.csv"), &FEATURE_HEADER)?;
    for (id, l) in &labels {
        let s = by_id.get(id.as_str()).ok_or_else(|| artifact_err(assignments, format!("tower {id} not in binned data")))?;
        for (a, &x) in sums[*l].iter_mut().zip(&s.slot_bytes) {
            *a += x;
        }
        counts[*l] += 1;
        let prof = timefeat::daily_profile(id, &s.slot_bytes, week_start, false)?;
        t.row(feature_row("tower", l + 1, &timefeat::time_features(&prof, peak)))?;
    }
    let mut profiles = Vec::with_capacity(r);
    for c in 0..r {
        let mean: Vec<f64> = sums[c].iter().map(|x| x / counts[c].max(1) as f64).collect();
        let prof = timefeat::daily_profile(&format!("cluster{}", c + 1), &mean, week_start, false)?;
        t.row(feature_row("cluster", c + 1, &timefeat::time_features(&prof, peak)))?;
        profiles.push(prof);
    }
    let mut files = vec![t.finish()?];
    let mut t = Table::new(out.join("profiles.csv"), &["cluster", "slot", "weekday", "weekend"])?;
    for (c, p) in profiles.iter().enumerate() {
        for s in 0..SLOTS_PER_DAY {
            t.row([(c + 1).to_string(), s.to_string(), p.weekday[s].to_string(), p.weekend[s].to_string()])?;
        }
    }
    files.push(t.finish()?);
    let mut t = Table::new(out.join("peak_offsets.csv"), &["a", "b", "offset_minutes"])?;
    for a in 0..r {
        for b in 0..r {
            if a != b {
                let v = timefeat::peak_offset(&profiles[a], &profiles[b], peak).ok().map(|m| m.to_string()).unwrap_or_default();
                t.row([(a + 1).to_string(), (b + 1).to_string(), v])?;
            }
        }
    }
    files.push(t.finish()?);
    info!(clusters = r, towers = labels.len(), "features");
    Ok(files)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub principal_bins: [usize; 3],
    pub top3_variance_bins: Vec<usize>,
    pub aggregate_energy_retention: Option<f64>,
    pub null_phase_towers: Vec<String>,
}

/// vectors (+ binned for raw-traffic outputs) → spectral_features.csv,
/// amplitude_variance.csv, reconstruction_error.csv, and with binned data
/// relative_features.csv, aggregate_spectrum.csv, spectrum.json.
pub fn stage_spectrum(vectors: &Path, raw: Option<(&Path, usize, u8)>, bins: Option<[usize; 3]>, out: &Path) -> Result<Vec<PathBuf>> {
    let vs: Vec<TrafficVector<f64>> = vectorize::read_vectors(vectors)?;
    let vs: Vec<_> = vs.into_iter().filter(|v| !v.degenerate).collect();
    let n = vs.first().map_or(0, |v| v.values.len());
    let idx = match bins {
        Some(k) => PrincipalIndices::custom(k, n)?,
        None => PrincipalIndices::for_len(n)?,
    };
    let mut engine = DftEngine::<f64>::default();
    let spectra: Vec<_> = vs.iter().map(|v| engine.forward(&v.values)).collect();

    let mut files = Vec::new();
    let mut header = vec!["tower_id"];
    header.extend(FEATURE_COLUMNS);
    let mut t = Table::new(out.join("spectral_features.csv"), &header)?;
    let mut null_phase = Vec::new();
    for (v, s) in vs.iter().zip(&spectra) {
        let f = spectrum::principal_components(&v.tower_id, s, &idx);
        if f.null_phase.iter().any(|&b| b) {
            null_phase.push(v.tower_id.clone());
        }
        let mut row = vec![v.tower_id.clone()];
        row.extend(f.row().iter().map(|x| x.to_string()));
        t.row(row)?;
    }
    files.push(t.finish()?);

    let var = spectrum::amplitude_variance(&spectra)?;
    let mut t = Table::new(out.join("amplitude_variance.csv"), &["k", "variance"])?;
    for (i, v) in var.iter().enumerate() {
        t.row([(i + 1).to_string(), v.to_string()])?;
    }
    files.push(t.finish()?);
    let top3 = spectrum::top_bins(&var, 3);

    let mut t = Table::new(out.join("reconstruction_error.csv"), &["tower_id", "energy_retention", "relative_error"])?;
    for v in &vs {
        let e = spectrum::energy_retention(&mut engine, &v.values, &idx);
        t.row([v.tower_id.clone(), e.to_string(), (1.0 - e).to_string()])?;
    }
    files.push(t.finish()?);

    let mut aggregate_retention = None;
    if let Some((binned, weeks, week_start)) = raw {
        let trimmed = load_trimmed(binned, weeks, week_start)?;
        let keep: std::collections::HashSet<&str> = vs.iter().map(|v| v.tower_id.as_str()).collect();
        let mut header = vec!["tower_id"];
        header.extend(RELATIVE_COLUMNS);
        let mut t = Table::new(out.join("relative_features.csv"), &header)?;
        let mut agg = vec![0.0; n];
        for s in trimmed.iter().filter(|s| keep.contains(s.tower_id.as_str())) {
            for (a, &x) in agg.iter_mut().zip(&s.slot_bytes) {
                *a += x;
            }
            if let Ok(rf) = spectrum::relative_features(&engine.forward(&s.slot_bytes), &idx) {
                let mut row = vec![s.tower_id.clone()];
                row.extend(rf.iter().map(|x| x.to_string()));
                t.row(row)?;
            }
        }
        files.push(t.finish()?);
        let sa = engine.forward(&agg);
        let rec = spectrum::reconstruct(&mut engine, &sa, &idx);
        aggregate_retention = Some(spectrum::energy_retention(&mut engine, &agg, &idx));
        let mut t = Table::new(out.join("aggregate_spectrum.csv"), &["index", "amplitude", "raw", "reconstructed"])?;
        for i in 0..n {
            t.row([i.to_string(), sa.amplitude(i).to_string(), agg[i].to_string(), rec[i].to_string()])?;
        }
        files.push(t.finish()?);
    }
    let summary = SpectrumSummary {
        principal_bins: idx.k,
        top3_variance_bins: top3,
        aggregate_energy_retention: aggregate_retention,
        null_phase_towers: null_phase,
    };
    info!(top3 = ?summary.top3_variance_bins, retention = ?summary.aggregate_energy_retention, "spectrum");
    files.push(write_json(&out.join("spectrum.json"), &summary)?);
    Ok(files)
}

/// Read selected columns of a `tower_id,...` feature table.
pub fn read_feature_columns(path: &Path, columns: &[String]) -> Result<Vec<FeaturePoint<f64>>> {
    let (header, rows) = read_table(path)?;
    let pos: Vec<usize> = columns
        .iter()
        .map(|c| header.iter().position(|h| h == c).ok_or_else(|| artifact_err(path, format!("no column {c}"))))
        .collect::<Result<_>>()?;
    rows.iter()
        .map(|r| {
            let f = pos
                .iter()
                .map(|&p| r.get(p).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| artifact_err(path, "bad number")))
                .collect::<Result<Vec<f64>>>()?;
            Ok(FeaturePoint { tower_id: r[0].to_string(), f })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VertexRecord {
    pub tower_id: String,
    /// 1-based.
    pub cluster: usize,
    pub features: Vec<f64>,
    pub standardized: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerticesFile {
    pub feature_columns: Vec<String>,
    pub standardizer: Standardizer<f64>,
    pub comprehensive_cluster: Option<usize>,
    pub vertices: Vec<VertexRecord>,
}

#[derive(Debug, Clone)]
pub struct DecomposeParams {
    pub columns: Vec<String>,
    pub density_radius: f64,
    pub min_density: usize,
    pub primary_clusters: Option<[usize; 4]>,
    /// centroids.csv of the cluster stage; needed when `primary_clusters`
    /// is absent.
    pub centroids: Option<PathBuf>,
}

/// Read the long `cluster,slot,value` centroid table.
pub fn read_centroids(path: &Path) -> Result<Vec<Vec<f64>>> {
    let (_, rows) = read_table(path)?;
    let mut out: Vec<Vec<f64>> = Vec::new();
    for r in &rows {
        let parse = |i: usize| r.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| artifact_err(path, "bad row"));
        let (c, s, v) = (parse(0)? as usize, parse(1)? as usize, parse(2)?);
        if c == 0 {
            return Err(artifact_err(path, "cluster ids are 1-based"));
        }
        if out.len() < c {
            out.resize(c, Vec::new());
        }
        if out[c - 1].len() != s {
            return Err(artifact_err(path, "slots must be contiguous per cluster"));
        }
        out[c - 1].push(v);
    }
    Ok(out)
}

/// features + assignments → mixtures.csv, vertices.json.
pub fn stage_decompose(features: &Path, assignments: &Path, p: &DecomposeParams, out: &Path) -> Result<Vec<PathBuf>> {
    let labels: HashMap<String, usize> = read_assignments(assignments)?.into_iter().collect();
    let r = labels.values().map(|l| l + 1).max().unwrap_or(0);
    let pts: Vec<FeaturePoint<f64>> = read_feature_columns(features, &p.columns)?.into_iter().filter(|q| labels.contains_key(&q.tower_id)).collect();
    let lab: Vec<usize> = pts.iter().map(|q| labels[&q.tower_id]).collect();
    let std = Standardizer::fit(&pts);
    let z: Vec<FeaturePoint<f64>> = pts.iter().map(|q| FeaturePoint { tower_id: q.tower_id.clone(), f: std.apply(&q.f) }).collect();
    let (primary, comprehensive) = match p.primary_clusters {
        Some(pc) => {
            if pc.iter().any(|&c| c == 0 || c > r) {
                return Err(PipelineError::Config(format!("primary_clusters {pc:?} outside 1..={r}")).into());
            }
            (pc.map(|c| c - 1), None)
        }
        None => {
            // comprehensive = the pattern centroid nearest the population mean
            let path = p.centroids.as_deref().ok_or_else(|| PipelineError::Config("primary clusters not given and no centroids file".into()))?;
            let cents = read_centroids(path)?;
            let mut sizes = vec![0usize; cents.len()];
            for &l in labels.values() {
                if l < sizes.len() {
                    sizes[l] += 1;
                }
            }
            let (pc, comp) = decompose::default_primary_clusters(&cents, &sizes)?;
            (pc, Some(comp))
        }
    };
    let model: PolygonModel<f64> = decompose::select_representatives(&z, &lab, primary, p.density_radius, p.min_density)?;
    let mix: Vec<_> = {
        use rayon::prelude::*;
        z.par_iter().map(|q| decompose::solve_mixture(q, &model)).collect::<Result<Vec<_>, _>>()?
    };
    let mut t = Table::new(out.join("mixtures.csv"), &["tower_id", "x1", "x2", "x3", "x4", "residual"])?;
    for m in &mix {
        let mut row = vec![m.tower_id.clone()];
        row.extend(m.x.iter().map(|v| v.to_string()));
        row.push(m.residual.to_string());
        t.row(row)?;
    }
    let mut files = vec![t.finish()?];
    let vf = VerticesFile {
        feature_columns: p.columns.clone(),
        standardizer: std.clone(),
        comprehensive_cluster: comprehensive.map(|c| c + 1),
        vertices: model
            .vertices
            .iter()
            .zip(&model.clusters)
            .map(|(v, &c)| VertexRecord { tower_id: v.tower_id.clone(), cluster: c + 1, features: std.invert(&v.f), standardized: v.f.clone() })
            .collect(),
    };
    info!(vertices = ?vf.vertices.iter().map(|v| v.tower_id.as_str()).collect::<Vec<_>>(), "decompose");
    files.push(write_json(&out.join("vertices.json"), &vf)?);
    Ok(files)
}

/// towers + pois (+ assignments) → poi_profiles.csv, poi_cluster_table.csv.
pub fn stage_poi(towers: &Path, pois: &Path, radius_m: f64, assignments: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>> {
    let f = std::fs::File::open(towers).map_err(|e| Error::io(towers, e))?;
    let registry = ingest::parse_towers(std::io::BufReader::new(f))?;
    let f = std::fs::File::open(pois).map_err(|e| Error::io(pois, e))?;
    let records = poi::parse_pois(std::io::BufReader::new(f))?;
    let counts = poi::count_poi(&registry, &records, radius_m)?;
    let ids: Vec<String> = registry.iter().map(|t| t.tower_id.clone()).collect();
    let profiles = poi::ntfidf(&ids, &counts);
    let mut header = vec!["tower_id".to_string()];
    for pre in ["count", "tfidf", "ntfidf"] {
        header.extend(PoiType::ALL.iter().map(|t| format!("{pre}_{}", t.name())));
    }
    header.push("ntfidf_defined".into());
    let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new(out.join("poi_profiles.csv"), &hdr)?;
    for p in &profiles {
        let mut row = vec![p.tower_id.clone()];
        row.extend(p.counts.iter().map(|c| c.to_string()));
        row.extend(p.tfidf.iter().map(|c| c.to_string()));
        row.extend((0..4).map(|i| opt(p.ntfidf.map(|n| n[i]))));
        row.push(p.ntfidf.is_some().to_string());
        t.row(row)?;
    }
    let mut files = vec![t.finish()?];
    if let Some(a) = assignments {
        let labels: HashMap<String, usize> = read_assignments(a)?.into_iter().collect();
        let r = labels.values().map(|l| l + 1).max().unwrap_or(0);
        let (mut c, mut l) = (Vec::new(), Vec::new());
        for (id, cnt) in ids.iter().zip(&counts) {
            if let Some(&lab) = labels.get(id) {
                c.push(*cnt);
                l.push(lab);
            }
        }
        let table = poi::cluster_poi_table(&c, &l, r);
        let mut hdr = vec!["cluster"];
        hdr.extend(PoiType::ALL.iter().map(|t| t.name()));
        let mut t = Table::new(out.join("poi_cluster_table.csv"), &hdr)?;
        for (i, row) in table.rows.iter().enumerate() {
            let mut v = vec![(i + 1).to_string()];
            v.extend(row.iter().map(|x| opt(*x)));
            t.row(v)?;
        }
        files.push(t.finish()?);
    }
    info!(towers = registry.len(), pois = records.len(), "poi");
    Ok(files)
}

// ---------- run + manifest ----------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    /// path → sha256 over all stages.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.stages.iter().flat_map(|s| s.artifacts.iter().map(|a| (a.path.clone(), a.sha256.clone()))).collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

fn record(name: &str, out: &Path, started: Instant, files: &[PathBuf]) -> Result<StageRecord> {
    let artifacts = files
        .iter()
        .map(|f| {
            let (sha256, bytes) = sha256_file(f)?;
            let path = f.strip_prefix(out).unwrap_or(f).display().to_string();
            Ok(ArtifactRecord { path, sha256, bytes })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StageRecord { name: name.into(), seconds: started.elapsed().as_secs_f64(), artifacts })
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Pipeline(p @ PipelineError::Config(_)) => Error::Pipeline(p),
        other => PipelineError::Stage { stage, cause: Box::new(other) }.into(),
    })
}

/// Run every stage in order, writing artifacts and manifest.json to
/// `config.out_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunManifest> {
    config.validate()?;
    let out = config.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let week_start = vectorize::parse_weekday(&config.week_start)?;
    let sessions = config.sessions.as_deref().expect("validated");
    let towers = config.towers.as_deref().expect("validated");
    let mut stages = Vec::new();

    let t = Instant::now();
    let p = IngestParams { origin: config.origin.clone(), days: config.days, utc_offset_minutes: config.utc_offset_minutes, strict: config.strict };
    let files = staged("ingest", stage_ingest(sessions, Some(towers), &p, out))?;
    stages.push(record("ingest", out, t, &files)?);
    let binned = out.join("binned.csv");

    let t = Instant::now();
    let files = staged("vectorize", stage_vectorize(&binned, config.weeks, week_start, config.vector_format, out))?;
    let vectors = files[0].clone();
    stages.push(record("vectorize", out, t, &files)?);

    let t = Instant::now();
    let (_, files) = staged("cluster", stage_cluster(&vectors, config.rmin, config.rmax, out))?;
    stages.push(record("cluster", out, t, &files)?);
    let assignments = out.join("assignments.csv");

    let t = Instant::now();
    let files = staged("features", stage_features(&binned, &assignments, config.weeks, week_start, &config.peak, out))?;
    stages.push(record("features", out, t, &files)?);

    let t = Instant::now();
    let files = staged("spectrum", stage_spectrum(&vectors, Some((&binned, config.weeks, week_start)), config.principal_bins, out))?;
    stages.push(record("spectrum", out, t, &files)?);

    let t = Instant::now();
    let dp = DecomposeParams {
        columns: config.qp_features.clone(),
        density_radius: config.density_radius,
        min_density: config.min_density,
        primary_clusters: config.primary_clusters,
        centroids: Some(out.join("centroids.csv")),
    };
    let files = staged("decompose", stage_decompose(&out.join(config.features_file()), &assignments, &dp, out))?;
    stages.push(record("decompose", out, t, &files)?);

    if config.poi_stage {
        let t = Instant::now();
        let pois = config.pois.as_deref().expect("validated");
        let files = staged("poi", stage_poi(towers, pois, config.radius_m, Some(&assignments), out))?;
        stages.push(record("poi", out, t, &files)?);
    }

    let manifest = RunManifest { tool: "cellmine".into(), version: env!("CARGO_PKG_VERSION").into(), config: config.clone(), stages };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

// ---------- report ----------

/// Files each figure needs, with the stage that produces them.
const REPORT_INPUTS: [(&str, &str); 12] = [
    ("ingest", "binned.csv"),
    ("ingest", "binned.json"),
    ("cluster", "assignments.csv"),
    ("cluster", "dbi_trace.csv"),
    ("cluster", "distances_cdf.csv"),
    ("cluster", "centroids.csv"),
    ("features", "features.csv"),
    ("spectrum", "spectral_features.csv"),
    ("spectrum", "amplitude_variance.csv"),
    ("spectrum", "aggregate_spectrum.csv"),
    ("decompose", "mixtures.csv"),
    ("decompose", "vertices.json"),
];

pub const REPORT_FILES: [&str; 9] = [
    "temporal_overview.csv",
    "dbi_curve.csv",
    "distance_cdf.csv",
    "centroid_patterns.csv",
    "time_features.csv",
    "aggregate_spectrum.csv",
    "amplitude_variance.csv",
    "feature_scatter.csv",
    "mixture_stack.csv",
];

fn copy_table(from: &Path, to: PathBuf) -> Result<PathBuf> {
    let (h, rows) = read_table(from)?;
    let mut t = Table::new(to, &h.iter().map(String::as_str).collect::<Vec<_>>())?;
    for r in &rows {
        t.row(r.iter())?;
    }
    t.finish()
}

/// Emit the per-figure CSVs of a completed run into `run_dir/report`.
pub fn report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let missing: Vec<(String, String)> = REPORT_INPUTS
        .iter()
        .filter(|(_, f)| !run_dir.join(f).is_file())
        .map(|(s, f)| (s.to_string(), f.to_string()))
        .collect();
    let vectors = ["vectors.csv", "vectors.bin"].iter().map(|f| run_dir.join(f)).find(|p| p.is_file());
    let mut missing = missing;
    if vectors.is_none() {
        missing.push(("vectorize".into(), "vectors.csv".into()));
    }
    if !missing.is_empty() {
        return Err(PipelineError::MissingArtifacts(missing).into());
    }
    let vectors = vectors.expect("checked");
    let out = run_dir.join("report");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut files = Vec::new();

    // temporal aggregates over the full ingest window
    let manifest = ingest::read_manifest(&run_dir.join("binned.json"))?;
    let cal = manifest.calendar()?;
    let series = ingest::read_binned(&run_dir.join("binned.csv"), &manifest)?;
    let days = manifest.days as usize;
    let mut per_slot = vec![0.0; days * SLOTS_PER_DAY];
    for s in series.values() {
        for (a, &x) in per_slot.iter_mut().zip(&s.slot_bytes) {
            *a += x;
        }
    }
    let mut t = Table::new(out.join(REPORT_FILES[0]), &["scale", "index", "label", "bytes"])?;
    let mut hours = [0.0; 24];
    for (i, &x) in per_slot.iter().enumerate() {
        hours[(i % SLOTS_PER_DAY) / 6] += x / days as f64;
    }
    for (h, v) in hours.iter().enumerate() {
        t.row(["hour_of_day".to_string(), h.to_string(), format!("{h:02}:00"), v.to_string()])?;
    }
    let mut by_weekday = [(0.0, 0usize); 7];
    for d in 0..days {
        let total: f64 = per_slot[d * SLOTS_PER_DAY..(d + 1) * SLOTS_PER_DAY].iter().sum();
        let epoch = manifest.origin_epoch + d as i64 * 86_400;
        t.row(["day".to_string(), d.to_string(), cal.format(epoch)[..10].to_string(), total.to_string()])?;
        let wd = cal.weekday(epoch) as usize;
        by_weekday[wd].0 += total;
        by_weekday[wd].1 += 1;
    }
    for (wd, (sum, n)) in by_weekday.iter().enumerate() {
        let v = if *n > 0 { (sum / *n as f64).to_string() } else { String::new() };
        t.row(["weekday".to_string(), wd.to_string(), vectorize::weekday_name(wd as u8).to_string(), v])?;
    }
    files.push(t.finish()?);

    files.push(copy_table(&run_dir.join("dbi_trace.csv"), out.join(REPORT_FILES[1]))?);
    files.push(copy_table(&run_dir.join("distances_cdf.csv"), out.join(REPORT_FILES[2]))?);

    // centroids wide: slot, c1..cR
    let (_, rows) = read_table(&run_dir.join("centroids.csv"))?;
    let mut wide: BTreeMap<usize, BTreeMap<usize, String>> = BTreeMap::new();
    for r in &rows {
        let c: usize = r[0].parse().map_err(|_| artifact_err(&run_dir.join("centroids.csv"), "bad cluster"))?;
        let s: usize = r[1].parse().map_err(|_| artifact_err(&run_dir.join("centroids.csv"), "bad slot"))?;
        wide.entry(s).or_default().insert(c, r[2].to_string());
    }
    let r = wide.values().next().map_or(0, |m| m.len());
    let mut hdr = vec!["slot".to_string()];
    hdr.extend((1..=r).map(|c| format!("cluster{c}")));
    let mut t = Table::new(out.join(REPORT_FILES[3]), &hdr.iter().map(String::as_str).collect::<Vec<_>>())?;
    for (s, m) in &wide {
        let mut row = vec![s.to_string()];
        row.extend(m.values().cloned());
        t.row(row)?;
    }
    files.push(t.finish()?);

    let (h, rows) = read_table(&run_dir.join("features.csv"))?;
    let col = |name: &str| h.iter().position(|c| c == name).expect("features header");
    let mut t = Table::new(
        out.join(REPORT_FILES[4]),
        &["cluster", "weekday_weekend_ratio", "weekday_peak_valley_ratio", "weekend_peak_valley_ratio", "weekday_peak_times", "weekend_peak_times"],
    )?;
    for r in rows.iter().filter(|r| &r[col("kind")] == "cluster") {
        t.row([
            &r[col("cluster")],
            &r[col("weekday_weekend_ratio")],
            &r[col("weekday_peak_valley_ratio")],
            &r[col("weekend_peak_valley_ratio")],
            &r[col("weekday_peak_times")],
            &r[col("weekend_peak_times")],
        ])?;
    }
    files.push(t.finish()?);

    files.push(copy_table(&run_dir.join("aggregate_spectrum.csv"), out.join(REPORT_FILES[5]))?);
    files.push(copy_table(&run_dir.join("amplitude_variance.csv"), out.join(REPORT_FILES[6]))?);

    // feature scatter with cluster and vertex flags
    let labels: HashMap<String, usize> = read_assignments(&run_dir.join("assignments.csv"))?.into_iter().collect();
    let vf: VerticesFile = read_json(&run_dir.join("vertices.json"))?;
    let vertex_ids: Vec<&str> = vf.vertices.iter().map(|v| v.tower_id.as_str()).collect();
    let (h, rows) = read_table(&run_dir.join("spectral_features.csv"))?;
    let mut hdr: Vec<&str> = h.iter().map(String::as_str).collect();
    hdr.extend(["cluster", "vertex"]);
    let mut t = Table::new(out.join(REPORT_FILES[7]), &hdr)?;
    for r in &rows {
        let mut row: Vec<String> = r.iter().map(str::to_string).collect();
        row.push(labels.get(&r[0]).map(|l| (l + 1).to_string()).unwrap_or_default());
        row.push(vertex_ids.contains(&&r[0]).to_string());
        t.row(row)?;
    }
    files.push(t.finish()?);

    // mixture stack for the most mixed tower
    let (_, rows) = read_table(&run_dir.join("mixtures.csv"))?;
    let mixed = rows
        .iter()
        .filter_map(|r| {
            let x: Vec<f64> = (1..5).map(|i| r[i].parse().ok()).collect::<Option<_>>()?;
            let m = x.iter().cloned().fold(f64::INFINITY, f64::min);
            Some((r[0].to_string(), x, m))
        })
        .fold(None, |b: Option<(String, Vec<f64>, f64)>, c| match b {
            Some(ref bb) if bb.2 >= c.2 => b,
            _ => Some(c),
        });
    let vs: Vec<TrafficVector<f64>> = vectorize::read_vectors(&vectors)?;
    let by_id: HashMap<&str, &TrafficVector<f64>> = vs.iter().map(|v| (v.tower_id.as_str(), v)).collect();
    let mut t = Table::new(out.join(REPORT_FILES[8]), &["tower_id", "slot", "tower", "c1", "c2", "c3", "c4", "sum"])?;
    if let Some((id, x, _)) = mixed {
        let patterns: Vec<Vec<f64>> = vertex_ids
            .iter()
            .map(|v| by_id.get(v).map(|tv| tv.values.clone()).ok_or_else(|| artifact_err(&vectors, format!("vertex {v} missing"))))
            .collect::<Result<_>>()?;
        let tower = by_id.get(id.as_str()).ok_or_else(|| artifact_err(&vectors, format!("tower {id} missing")))?;
        let comps = decompose::render_components(&tower.values, &x, &patterns, RenderScale::TowerStd);
        for s in 0..tower.values.len() {
            let c: Vec<f64> = comps.iter().map(|p| p[s]).collect();
            let mut row = vec![id.clone(), s.to_string(), tower.values[s].to_string()];
            row.extend(c.iter().map(|v| v.to_string()));
            row.push(c.iter().sum::<f64>().to_string());
            t.row(row)?;
        }
    }
    files.push(t.finish()?);
    info!(files = files.len(), "report");
    Ok(files)
}
