//! Synthetic cities with planted traffic patterns, sessions and POIs.
//!
//! Archetype day templates are a floor plus von Mises bumps on the 144-slot
//! day circle. They are tuned so that the peak detector in [`crate::timefeat`]
//! finds the target times on the noiseless curves; [`validate_templates`]
//! checks this at generation time.

use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Calendar, TowerRecord};
use crate::poi::{PoiRecord, PoiType, EARTH_RADIUS_M};
use crate::timefeat::{self, PeakParams};
use crate::{Error, Result, SLOTS_PER_DAY, SLOTS_PER_WEEK, SLOT_SECONDS};

pub const CITY_SHARES: [f64; 5] = [0.1755, 0.0258, 0.4572, 0.0935, 0.2481];
pub const TRANSPORT_RATIO: f64 = 1.49;
pub const OFFICE_RATIO: f64 = 1.79;
pub const OFFICE_P4: f64 = 1.35;
pub const RESIDENT_P4: f64 = -1.65;
pub const P5_MIXTURE: [f64; 4] = [0.35, 0.18, 0.22, 0.25];
/// Allowed |Σ shares − 1|.
pub const SHARE_SLACK: f64 = 1e-3;
/// Resident week-bin magnitude as a fraction of the DC term.
const RESIDENT_WEEKLY_DEPTH: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("template check failed: {0}")]
    Template(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Resident,
    Transport,
    Office,
    Entertainment,
    Comprehensive,
}

impl Archetype {
    pub const ALL: [Archetype; 5] =
        [Archetype::Resident, Archetype::Transport, Archetype::Office, Archetype::Entertainment, Archetype::Comprehensive];
    pub const PRIMARY: [Archetype; 4] = [Archetype::Resident, Archetype::Transport, Archetype::Office, Archetype::Entertainment];

    pub fn name(self) -> &'static str {
        ["resident", "transport", "office", "entertainment", "comprehensive"][self as usize]
    }

    /// POI type mix planted around a pure tower of this archetype.
    pub fn poi_weights(self) -> [f64; 4] {
        match self {
            Archetype::Resident => [1.0, 0.0, 0.0, 0.0],
            Archetype::Transport => [0.0, 1.0, 0.0, 0.0],
            Archetype::Office => [0.0, 0.0, 1.0, 0.0],
            Archetype::Entertainment => [0.0, 0.0, 0.0, 1.0],
            Archetype::Comprehensive => [0.25; 4],
        }
    }
}

fn von_mises(mu: f64, kappa: f64) -> impl Fn(f64) -> f64 {
    move |s| (kappa * ((TAU * (s - mu) / SLOTS_PER_DAY as f64).cos() - 1.0)).exp()
}

/// floor + Σ h·exp(κ(cos(2π(s−μ)/144) − 1)) for bumps (h, μ, κ).
fn bumps(floor: f64, b: &[(f64, f64, f64)]) -> Vec<f64> {
    (0..SLOTS_PER_DAY)
        .map(|s| floor + b.iter().map(|&(h, mu, k)| h * von_mises(mu, k)(s as f64)).sum::<f64>())
        .collect()
}

fn plateau(floor: f64, rise: f64, fall: f64, sharp: f64) -> Vec<f64> {
    (0..SLOTS_PER_DAY)
        .map(|s| {
            let s = s as f64;
            floor + 1.0 / (1.0 + (-(s - rise) / sharp).exp()) / (1.0 + ((s - fall) / sharp).exp())
        })
        .collect()
}

/// Weekday and weekend day curves; weekday sums to 1, weekend to 1/ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct DayTemplates {
    pub weekday: Vec<f64>,
    pub weekend: Vec<f64>,
}

fn scaled(wd: Vec<f64>, we: Vec<f64>, ratio: f64) -> DayTemplates {
    let (a, b): (f64, f64) = (wd.iter().sum(), we.iter().sum());
    DayTemplates { weekday: wd.iter().map(|x| x / a).collect(), weekend: we.iter().map(|x| x / b / ratio).collect() }
}

pub fn day_templates(a: Archetype) -> DayTemplates {
    match a {
        Archetype::Resident => {
            let d = bumps(0.12, &[(1.0, 130.0, 12.0), (0.9, 114.0, 14.0), (0.2, 80.0, 1.5)]);
            scaled(d.clone(), d, 1.0)
        }
        Archetype::Transport => {
            let d = bumps(0.01, &[(0.9, 48.0, 12.0), (1.0, 108.0, 10.2), (0.2, 78.0, 2.5)]);
            scaled(d.clone(), d, TRANSPORT_RATIO)
        }
        Archetype::Office => scaled(
            bumps(0.05, &[(1.0, 62.5, 3.0), (0.2, 93.0, 3.0)]),
            bumps(0.05, &[(0.9, 72.0, 2.5)]),
            OFFICE_RATIO,
        ),
        Archetype::Entertainment => scaled(
            bumps(0.05, &[(0.5, 90.0, 1.0), (1.0, 109.0, 7.0)]),
            bumps(0.05, &[(0.5, 90.0, 1.0), (1.0, 74.0, 7.0)]),
            1.0,
        ),
        Archetype::Comprehensive => {
            let d = plateau(0.08, 48.0, 138.0, 3.0);
            scaled(d.clone(), d, 1.0)
        }
    }
}

fn is_weekend(first_weekday: u8, day: usize) -> bool {
    (first_weekday as usize + day) % 7 >= 5
}

fn lay_out(t: &DayTemplates, days: usize, first_weekday: u8, m: &[f64; 7]) -> Vec<f64> {
    let mut out = Vec::with_capacity(days * SLOTS_PER_DAY);
    for d in 0..days {
        let src = if is_weekend(first_weekday, d) { &t.weekend } else { &t.weekday };
        out.extend(src.iter().map(|x| x * m[d % 7]));
    }
    out
}

fn bin(x: &[f64], k: usize) -> Complex<f64> {
    let n = x.len() as f64;
    x.iter().enumerate().fold(Complex::new(0.0, 0.0), |acc, (i, &v)| {
        let ang = -TAU * ((k * i) % x.len()) as f64 / n;
        acc + Complex::new(ang.cos(), ang.sin()) * v
    })
}

/// Noiseless series of each archetype over `days`, mean 1 per slot. With
/// whole weeks, resident and office week-bin phases are planted at −1.65
/// and 1.35 through day-of-week multipliers.
pub fn archetype_series(days: usize, first_weekday: u8) -> [Vec<f64>; 5] {
    let ones = [1.0; 7];
    let whole_weeks = days > 0 && days % 7 == 0;
    let w = days / 7;
    let mut out: [Vec<f64>; 5] = Default::default();
    for a in Archetype::ALL {
        let t = day_templates(a);
        let mut m = ones;
        if whole_weeks && a == Archetype::Resident {
            // X[w] = w · D0 · Σ_d m_d e^{−2πid/7}; with m_d = 1 + ρcos(2πd/7 − θ)
            // the sum is (7ρ/2)e^{−iθ}.
            let d0 = t.weekday.iter().enumerate().fold(Complex::new(0.0, 0.0), |acc, (s, &v)| {
                let ang = -TAU * s as f64 / SLOTS_PER_WEEK as f64;
                acc + Complex::new(ang.cos(), ang.sin()) * v
            });
            let x0 = days as f64 * t.weekday.iter().sum::<f64>();
            let target = Complex::from_polar(RESIDENT_WEEKLY_DEPTH * x0, RESIDENT_P4);
            let m1 = target / (w as f64 * d0);
            let (rho, theta) = (2.0 * m1.norm() / 7.0, -m1.arg());
            m = std::array::from_fn(|d| 1.0 + rho * (TAU * d as f64 / 7.0 - theta).cos());
        }
        if whole_weeks && a == Archetype::Office {
            m = office_multipliers(&t, days, first_weekday, w);
        }
        let x = lay_out(&t, days, first_weekday, &m);
        let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
        out[a as usize] = x.into_iter().map(|v| v / mean).collect();
    }
    out
}

/// Minimum-norm day multipliers, zero-sum within weekdays and within the
/// weekend (so the weekday/weekend ratio is untouched), rotating the week
/// bin to phase 1.35 at unchanged magnitude.
fn office_multipliers(t: &DayTemplates, days: usize, first_weekday: u8, k: usize) -> [f64; 7] {
    let ones = [1.0; 7];
    let z0 = bin(&lay_out(t, days, first_weekday, &ones), k);
    let target = Complex::from_polar(z0.norm(), OFFICE_P4);
    let wd: Vec<usize> = (0..7).filter(|&d| !is_weekend(first_weekday, d)).collect();
    let we: Vec<usize> = (0..7).filter(|&d| is_weekend(first_weekday, d)).collect();
    let mut basis: Vec<[f64; 7]> = Vec::new();
    for &i in &wd[1..] {
        let mut u = [0.0; 7];
        u[wd[0]] = -1.0;
        u[i] = 1.0;
        basis.push(u);
    }
    let mut u = [0.0; 7];
    u[we[0]] = 1.0;
    u[we[1]] = -1.0;
    basis.push(u);
    let v: Vec<Complex<f64>> = basis.iter().map(|b| bin(&lay_out(t, days, first_weekday, b), k)).collect();
    // c = Aᵀ (A Aᵀ)⁻¹ r with A = [Re v; Im v]
    let (mut g00, mut g01, mut g11) = (0.0, 0.0, 0.0);
    for z in &v {
        g00 += z.re * z.re;
        g01 += z.re * z.im;
        g11 += z.im * z.im;
    }
    let r = target - z0;
    let det = g00 * g11 - g01 * g01;
    let y0 = (g11 * r.re - g01 * r.im) / det;
    let y1 = (-g01 * r.re + g00 * r.im) / det;
    let mut m = ones;
    for (b, z) in basis.iter().zip(&v) {
        let c = z.re * y0 + z.im * y1;
        for d in 0..7 {
            m[d] += c * b[d];
        }
    }
    m
}

/// Planted peak slots of each primary archetype (weekday, weekend).
pub fn expected_peaks(a: Archetype) -> Option<(Vec<usize>, Vec<usize>)> {
    match a {
        Archetype::Resident => Some((vec![129], vec![129])),
        Archetype::Transport => Some((vec![48, 108], vec![48, 108])),
        Archetype::Office => Some((vec![63], vec![72])),
        Archetype::Entertainment => Some((vec![108], vec![75])),
        Archetype::Comprehensive => None,
    }
}

/// Features of the noiseless archetypes, recorded in the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFeatures {
    pub archetype: Archetype,
    pub weekday_weekend_ratio: f64,
    pub weekday_peaks: Vec<String>,
    pub weekend_peaks: Vec<String>,
    pub weekday_peak_valley_ratio: f64,
    pub p4: f64,
}

pub fn planted_features(days: usize, first_weekday: u8) -> Vec<PlantedFeatures> {
    let series = archetype_series(days, first_weekday);
    let pp = PeakParams::default();
    let k = (days / 7).max(1);
    Archetype::ALL
        .iter()
        .map(|&a| {
            let x = &series[a as usize];
            let whole = x.len() - x.len() % SLOTS_PER_WEEK;
            let prof = timefeat::daily_profile(a.name(), &x[..whole], first_weekday, false).expect("whole weeks");
            let tf = timefeat::time_features(&prof, &pp);
            PlantedFeatures {
                archetype: a,
                weekday_weekend_ratio: tf.weekday_weekend_ratio.unwrap_or(f64::NAN),
                weekday_peaks: tf.weekday.peak_times.iter().map(|&s| timefeat::hhmm(s)).collect(),
                weekend_peaks: tf.weekend.peak_times.iter().map(|&s| timefeat::hhmm(s)).collect(),
                weekday_peak_valley_ratio: tf.weekday.ratio.unwrap_or(f64::NAN),
                p4: bin(x, k).arg(),
            }
        })
        .collect()
}

/// Check the noiseless templates against the planted targets.
pub fn validate_templates() -> Result<(), SynthError> {
    let pp = PeakParams::default();
    for a in Archetype::PRIMARY {
        let t = day_templates(a);
        let (wd, we) = expected_peaks(a).expect("primary");
        let got = (timefeat::detect_peaks(&t.weekday, &pp), timefeat::detect_peaks(&t.weekend, &pp));
        if got != (wd.clone(), we.clone()) {
            return Err(SynthError::Template(format!("{} peaks {:?}, expected {:?}", a.name(), got, (wd, we))));
        }
    }
    let res = timefeat::DailyProfile { id: "resident".into(), weekday: day_templates(Archetype::Resident).weekday, weekend: vec![], normalized: false };
    let tra = timefeat::DailyProfile { id: "transport".into(), weekday: day_templates(Archetype::Transport).weekday, weekend: vec![], normalized: false };
    let off = timefeat::peak_offset(&res, &tra, &pp).map_err(|e| SynthError::Template(e.to_string()))?;
    if off != 180 {
        return Err(SynthError::Template(format!("resident-transport offset {off} min, expected 180")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComprehensiveRule {
    /// Own broad daytime template.
    Template,
    /// Dirichlet mixture of the four primary archetypes.
    Mixture { center: [f64; 4], concentration: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTower {
    pub name: String,
    pub mixture: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmplitudeSpec {
    /// Mean bytes per slot of a unit-amplitude tower.
    pub base_bytes_per_slot: f64,
    /// Log-sd of the per-tower lognormal amplitude.
    pub log_sd: f64,
    /// Relative scale per archetype.
    pub archetype_scale: [f64; 5],
}

impl Default for AmplitudeSpec {
    fn default() -> Self {
        AmplitudeSpec { base_bytes_per_slot: 20_000.0, log_sd: 0.5, archetype_scale: [1.0, 0.4, 0.7, 0.7, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoiSpec {
    /// Expected POIs of a type whose weight is 1.
    pub intensity: f64,
    /// POIs are placed uniformly within this distance of their tower.
    pub spread_m: f64,
}

impl Default for PoiSpec {
    fn default() -> Self {
        PoiSpec { intensity: 30.0, spread_m: 150.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionSpec {
    pub mean_per_slot: f64,
    pub duplicate_rate: f64,
    pub conflict_rate: f64,
    pub users: u64,
}

impl Default for SessionSpec {
    fn default() -> Self {
        SessionSpec { mean_per_slot: 2.0, duplicate_rate: 0.01, conflict_rate: 0.01, users: 150_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CitySpec {
    pub towers: usize,
    /// Shares of resident, transport, office, entertainment, comprehensive.
    pub shares: [f64; 5],
    pub comprehensive: ComprehensiveRule,
    /// Extra comprehensive towers with fixed mixtures, appended after `towers`.
    pub planted: Vec<PlantedTower>,
    pub sigma: f64,
    pub amplitude: AmplitudeSpec,
    pub poi: PoiSpec,
    pub sessions: SessionSpec,
    pub seed: u64,
    pub origin: String,
    pub days: u32,
    pub utc_offset_minutes: i32,
    pub center_lat: f64,
    pub center_lon: f64,
    pub spacing_m: f64,
}

impl Default for CitySpec {
    fn default() -> Self {
        CitySpec {
            towers: 500,
            shares: CITY_SHARES,
            comprehensive: ComprehensiveRule::Template,
            planted: Vec::new(),
            sigma: 0.1,
            amplitude: AmplitudeSpec::default(),
            poi: PoiSpec::default(),
            sessions: SessionSpec::default(),
            seed: 7,
            origin: "2014-08-01".into(),
            days: 28,
            utc_offset_minutes: crate::ingest::DEFAULT_UTC_OFFSET_MINUTES,
            center_lat: 31.23,
            center_lon: 121.47,
            spacing_m: 1000.0,
        }
    }
}

fn check_mixture(name: &str, m: &[f64; 4]) -> Result<(), SynthError> {
    if m.iter().any(|&x| !(x >= 0.0)) || (m.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SynthError::Spec(format!("{name}: mixture must be non-negative and sum to 1")));
    }
    Ok(())
}

impl CitySpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        // published percentages are rounded, so allow a small slack and renormalise
        if self.shares.iter().any(|&s| !(s >= 0.0)) || (self.shares.iter().sum::<f64>() - 1.0).abs() > SHARE_SLACK {
            return Err(SynthError::Spec(format!("shares must be non-negative and sum to 1 (±{SHARE_SLACK})")));
        }
        if !(self.sigma >= 0.0) {
            return Err(SynthError::Spec("sigma must be >= 0".into()));
        }
        if self.towers + self.planted.len() == 0 || self.days == 0 {
            return Err(SynthError::Spec("need at least one tower and one day".into()));
        }
        if let ComprehensiveRule::Mixture { center, concentration } = &self.comprehensive {
            check_mixture("comprehensive center", center)?;
            if !(*concentration > 0.0) || center.iter().any(|&c| c <= 0.0) {
                return Err(SynthError::Spec("mixture concentration and center entries must be > 0".into()));
            }
        }
        for p in &self.planted {
            check_mixture(&p.name, &p.mixture)?;
        }
        if !(self.amplitude.base_bytes_per_slot > 0.0) || !(self.poi.intensity >= 0.0) || !(self.spacing_m > 0.0) {
            return Err(SynthError::Spec("amplitude, POI intensity and spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Per-tower truth recorded in ground_truth.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerTruth {
    pub tower_id: String,
    pub archetype: Archetype,
    /// 1-based archetype index.
    pub cluster: usize,
    /// Weights over resident, transport, office, entertainment; `None` for
    /// the comprehensive template.
    pub mixture: Option<[f64; 4]>,
    pub amplitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub archetypes: Vec<String>,
    pub poi_types: Vec<String>,
    pub origin: String,
    pub days: u32,
    pub first_weekday: u8,
    pub planted_features: Vec<PlantedFeatures>,
    pub towers: Vec<TowerTruth>,
    pub spec: CitySpec,
}

/// A generated city held in memory.
#[derive(Debug, Clone)]
pub struct City {
    pub spec: CitySpec,
    pub origin_epoch: i64,
    pub first_weekday: u8,
    pub towers: Vec<TowerRecord>,
    pub truth: Vec<TowerTruth>,
    /// Integer bytes per slot.
    pub slot_bytes: Vec<Vec<u64>>,
    pub pois: Vec<PoiRecord>,
}

fn sub_rng(seed: u64, tower: usize, salt: u64) -> ChaCha8Rng {
    let mut s = seed ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    s ^= (tower as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(s)
}

/// Largest-remainder integer split of `n` by `shares` (normalised first).
pub fn apportion(n: usize, shares: &[f64]) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let raw: Vec<f64> = shares.iter().map(|s| s / total * n as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rem: Vec<usize> = (0..shares.len()).collect();
    rem.sort_by(|&a, &b| (raw[b] - raw[b].floor()).partial_cmp(&(raw[a] - raw[a].floor())).expect("finite").then(a.cmp(&b)));
    let missing = n - out.iter().sum::<usize>();
    for &i in rem.iter().take(missing) {
        out[i] += 1;
    }
    out
}

pub fn generate(spec: &CitySpec) -> Result<City> {
    spec.validate()?;
    validate_templates()?;
    let cal = Calendar::new(spec.utc_offset_minutes)?;
    let origin_epoch = cal.parse_origin(&spec.origin)?;
    let first_weekday = cal.weekday(origin_epoch);
    let days = spec.days as usize;
    let base = archetype_series(days, first_weekday);

    let counts = apportion(spec.towers, &spec.shares);
    let mut kinds: Vec<Archetype> = counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat(Archetype::ALL[i]).take(c)).collect();
    // shuffle so ids carry no class information
    let mut order_rng = sub_rng(spec.seed, usize::MAX - 1, 1);
    for i in (1..kinds.len()).rev() {
        let j = order_rng.gen_range(0..=i);
        kinds.swap(i, j);
    }
    let n_total = kinds.len() + spec.planted.len();
    let side = (n_total as f64).sqrt().ceil() as usize;
    let lat_step = (spec.spacing_m / EARTH_RADIUS_M).to_degrees();
    let lon_step = lat_step / spec.center_lat.to_radians().cos();

    let mut towers = Vec::with_capacity(n_total);
    let mut truth = Vec::with_capacity(n_total);
    let mut slot_bytes = Vec::with_capacity(n_total);
    let amp_dist = LogNormal::new(0.0, spec.amplitude.log_sd).map_err(|e| SynthError::Spec(e.to_string()))?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..n_total {
        let mut rng = sub_rng(spec.seed, i, 2);
        let (kind, mixture, planted) = if i < kinds.len() {
            let k = kinds[i];
            let mix = match (&spec.comprehensive, k) {
                (ComprehensiveRule::Mixture { center, concentration }, Archetype::Comprehensive) => {
                    let alpha: Vec<f64> = center.iter().map(|c| c * concentration).collect();
                    let d = Dirichlet::new(&alpha).map_err(|e| SynthError::Spec(e.to_string()))?;
                    let w = d.sample(&mut rng);
                    Some([w[0], w[1], w[2], w[3]])
                }
                (_, Archetype::Comprehensive) => None,
                (_, k) => Some(k.poi_weights()),
            };
            (k, mix, None)
        } else {
            let p = &spec.planted[i - kinds.len()];
            (Archetype::Comprehensive, Some(p.mixture), Some(p.name.clone()))
        };
        let tower_id = planted.clone().unwrap_or_else(|| format!("T{i:05}"));
        let amplitude = spec.amplitude.base_bytes_per_slot * spec.amplitude.archetype_scale[kind as usize] * amp_dist.sample(&mut rng);
        let shape: Vec<f64> = match (kind, mixture) {
            (Archetype::Comprehensive, Some(w)) => (0..days * SLOTS_PER_DAY)
                .map(|t| (0..4).map(|a| w[a] * base[a][t]).sum())
                .collect(),
            _ => base[kind as usize].clone(),
        };
        let s2 = spec.sigma * spec.sigma / 2.0;
        let bytes: Vec<u64> = shape
            .iter()
            .map(|&u| {
                let eps: f64 = if spec.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (amplitude * u * (spec.sigma * eps - s2).exp()).round().max(0.0) as u64
            })
            .collect();
        let (r, c) = (i / side, i % side);
        towers.push(TowerRecord {
            tower_id: tower_id.clone(),
            lat: spec.center_lat + (r as f64 - side as f64 / 2.0) * lat_step,
            lon: spec.center_lon + (c as f64 - side as f64 / 2.0) * lon_step,
        });
        truth.push(TowerTruth { tower_id, archetype: kind, cluster: kind as usize + 1, mixture, amplitude, planted });
        slot_bytes.push(bytes);
    }
    let pois = place_pois(spec, &towers, &truth)?;
    Ok(City { spec: spec.clone(), origin_epoch, first_weekday, towers, truth, slot_bytes, pois })
}

fn place_pois(spec: &CitySpec, towers: &[TowerRecord], truth: &[TowerTruth]) -> Result<Vec<PoiRecord>, SynthError> {
    let mut out = Vec::new();
    for (i, (t, g)) in towers.iter().zip(truth).enumerate() {
        let mut rng = sub_rng(spec.seed, i, 3);
        let w = g.mixture.unwrap_or_else(|| g.archetype.poi_weights());
        for kind in PoiType::ALL {
            let lambda = spec.poi.intensity * w[kind.index()];
            if lambda <= 0.0 {
                continue;
            }
            let n = Poisson::new(lambda).map_err(|e| SynthError::Spec(e.to_string()))?.sample(&mut rng) as usize;
            for _ in 0..n {
                let d = spec.poi.spread_m * rng.gen::<f64>().sqrt();
                let th = TAU * rng.gen::<f64>();
                let dlat = (d * th.cos() / EARTH_RADIUS_M).to_degrees();
                let dlon = (d * th.sin() / (EARTH_RADIUS_M * t.lat.to_radians().cos())).to_degrees();
                out.push(PoiRecord { poi_id: format!("P{:07}", out.len()), kind, lat: t.lat + dlat, lon: t.lon + dlon });
            }
        }
    }
    Ok(out)
}

impl City {
    /// Binned series as f64, in tower order.
    pub fn series_f64(&self) -> Vec<Vec<f64>> {
        self.slot_bytes.iter().map(|v| v.iter().map(|&b| b as f64).collect()).collect()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            archetypes: Archetype::ALL.iter().map(|a| a.name().to_string()).collect(),
            poi_types: PoiType::ALL.iter().map(|p| p.name().to_string()).collect(),
            origin: self.spec.origin.clone(),
            days: self.spec.days,
            first_weekday: self.first_weekday,
            planted_features: planted_features(self.spec.days as usize, self.first_weekday),
            towers: self.truth.clone(),
            spec: self.spec.clone(),
        }
    }

    /// Write sessions.csv, towers.csv, pois.csv and ground_truth.json.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let sessions = dir.join("sessions.csv");
        self.write_sessions(&sessions)?;

        let towers_path = dir.join("towers.csv");
        let mut w = csv::Writer::from_path(&towers_path).map_err(|e| Error::csv(&towers_path, e))?;
        let io = |e: csv::Error| Error::csv(&towers_path, e);
        w.write_record(["tower_id", "lat", "lon"]).map_err(io)?;
        for t in &self.towers {
            w.write_record([t.tower_id.as_str(), &t.lat.to_string(), &t.lon.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&towers_path, e))?;

        let pois_path = dir.join("pois.csv");
        let mut w = csv::Writer::from_path(&pois_path).map_err(|e| Error::csv(&pois_path, e))?;
        let io = |e: csv::Error| Error::csv(&pois_path, e);
        w.write_record(["poi_id", "type", "lat", "lon"]).map_err(io)?;
        for p in &self.pois {
            w.write_record([p.poi_id.as_str(), p.kind.name(), &p.lat.to_string(), &p.lon.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&pois_path, e))?;

        let gt_path = dir.join("ground_truth.json");
        let f = std::fs::File::create(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &self.ground_truth()).map_err(|e| Error::json(&gt_path, e))?;
        Ok(vec![sessions, towers_path, pois_path, gt_path])
    }

    /// Several sessions per non-empty slot, each inside its slot, plus
    /// injected exact duplicates and smaller-bytes conflicts.
    fn write_sessions(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let io = |e: std::io::Error| Error::io(path, e);
        writeln!(w, "user_id,tower_id,start_epoch_s,end_epoch_s,bytes").map_err(io)?;
        let ss = &self.spec.sessions;
        let extra = Poisson::new((ss.mean_per_slot - 1.0).max(1e-9)).expect("positive rate");
        for (i, (t, bytes)) in self.towers.iter().zip(&self.slot_bytes).enumerate() {
            let mut rng = sub_rng(self.spec.seed, i, 4);
            let mut j: u64 = 0;
            for (slot, &b) in bytes.iter().enumerate() {
                if b == 0 {
                    continue;
                }
                let k = 1 + if ss.mean_per_slot > 1.0 { extra.sample(&mut rng) as u64 } else { 0 };
                let mut cuts: Vec<u64> = (0..k - 1).map(|_| rng.gen_range(0..=b)).collect();
                cuts.push(0);
                cuts.push(b);
                cuts.sort_unstable();
                let lo = self.origin_epoch + slot as i64 * SLOT_SECONDS;
                for part in cuts.windows(2).map(|c| c[1] - c[0]) {
                    let user = format!("u{}", (i as u64).wrapping_mul(7919).wrapping_add(j) % ss.users.max(1));
                    j += 1;
                    let start = lo + rng.gen_range(0..SLOT_SECONDS);
                    let end = rng.gen_range(start..=lo + SLOT_SECONDS);
                    let row = format!("{user},{},{start},{end},{part}", t.tower_id);
                    writeln!(w, "{row}").map_err(io)?;
                    if rng.gen::<f64>() < ss.duplicate_rate {
                        writeln!(w, "{row}").map_err(io)?;
                    }
                    if part > 0 && rng.gen::<f64>() < ss.conflict_rate {
                        let smaller = rng.gen_range(0..part);
                        writeln!(w, "{user},{},{start},{end},{smaller}", t.tower_id).map_err(io)?;
                    }
                }
            }
        }
        w.flush().map_err(io)
    }
}

/// Circular mean of angles.
pub fn circular_mean(angles: &[f64]) -> f64 {
    let (s, c) = angles.iter().fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    let m = s.atan2(c);
    if m <= -PI {
        PI
    } else {
        m
    }
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_hit_targets() {
        validate_templates().unwrap();
    }

    #[test]
    fn planted_phases_and_ratios() {
        let f = planted_features(28, 4);
        let by = |a: Archetype| f.iter().find(|p| p.archetype == a).unwrap().clone();
        assert!((by(Archetype::Office).p4 - OFFICE_P4).abs() < 1e-9);
        assert!((by(Archetype::Resident).p4 - RESIDENT_P4).abs() < 1e-9);
        assert!((by(Archetype::Office).weekday_weekend_ratio - OFFICE_RATIO).abs() < 1e-9);
        assert!((by(Archetype::Transport).weekday_weekend_ratio - TRANSPORT_RATIO).abs() < 1e-9);
        assert_eq!(by(Archetype::Resident).weekday_peaks, vec!["21:30"]);
        assert_eq!(by(Archetype::Entertainment).weekend_peaks, vec!["12:30"]);
    }

    #[test]
    fn apportion_sums() {
        let c = apportion(500, &CITY_SHARES);
        assert_eq!(c.iter().sum::<usize>(), 500);
        assert_eq!(c, vec![88, 13, 228, 47, 124]);
    }

    #[test]
    fn invalid_shares_rejected() {
        let spec = CitySpec { shares: [0.5, 0.5, 0.5, 0.0, 0.0], ..CitySpec::default() };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn noiseless_is_scaled_template() {
        let spec = CitySpec { towers: 5, shares: [0.2; 5], sigma: 0.0, ..CitySpec::default() };
        let city = generate(&spec).unwrap();
        let base = archetype_series(28, city.first_weekday);
        for (t, b) in city.truth.iter().zip(&city.slot_bytes) {
            let expect: Vec<u64> = base[t.archetype as usize].iter().map(|u| (t.amplitude * u).round() as u64).collect();
            assert_eq!(&expect, b);
        }
    }
}
