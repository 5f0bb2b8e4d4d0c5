//! Daily profiles, weekday/weekend ratios, peaks and valleys, peak offsets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{SLOTS_PER_DAY, SLOTS_PER_WEEK};

#[derive(Debug, Error)]
pub enum TimeFeatError {
    #[error("{id}: series length {len} is not a whole number of weeks")]
    PartialWeeks { id: String, len: usize },
    #[error("{0}: no detectable peak")]
    Peakless(String),
}

/// Peak detection knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeakParams {
    /// Circular moving-average width in slots (odd).
    pub smooth_window: usize,
    /// Minimum prominence as a fraction of the smoothed range.
    pub prominence: f64,
    /// A peak's reported slot is the raw extremum within this many slots.
    pub refine_radius: usize,
}

impl Default for PeakParams {
    fn default() -> Self {
        PeakParams { smooth_window: 5, prominence: 0.15, refine_radius: 2 }
    }
}

/// Slot means over weekdays (Mon–Fri) and weekend days.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyProfile {
    pub id: String,
    pub weekday: Vec<f64>,
    pub weekend: Vec<f64>,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakValley {
    pub peak_value: f64,
    pub valley_value: f64,
    pub ratio: Option<f64>,
    pub peak_times: Vec<usize>,
    pub valley_times: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeFeatures {
    pub id: String,
    pub weekday_weekend_ratio: Option<f64>,
    pub weekday: PeakValley,
    pub weekend: PeakValley,
}

/// `first_weekday` is the weekday of slot 0, Monday = 0.
pub fn daily_profile(id: &str, series: &[f64], first_weekday: u8, normalized: bool) -> Result<DailyProfile, TimeFeatError> {
    if series.is_empty() || series.len() % SLOTS_PER_WEEK != 0 {
        return Err(TimeFeatError::PartialWeeks { id: id.to_string(), len: series.len() });
    }
    let mut wd = vec![0.0; SLOTS_PER_DAY];
    let mut we = vec![0.0; SLOTS_PER_DAY];
    let (mut nwd, mut nwe) = (0usize, 0usize);
    for (d, day) in series.chunks_exact(SLOTS_PER_DAY).enumerate() {
        let weekend = (first_weekday as usize + d) % 7 >= 5;
        let acc = if weekend { nwe += 1; &mut we } else { nwd += 1; &mut wd };
        for (a, &x) in acc.iter_mut().zip(day) {
            *a += x;
        }
    }
    wd.iter_mut().for_each(|x| *x /= nwd as f64);
    we.iter_mut().for_each(|x| *x /= nwe as f64);
    Ok(DailyProfile { id: id.to_string(), weekday: wd, weekend: we, normalized })
}

/// Mean weekday daily total over mean weekend daily total.
pub fn weekday_weekend_ratio(p: &DailyProfile) -> Option<f64> {
    let we: f64 = p.weekend.iter().sum();
    (we > 0.0).then(|| p.weekday.iter().sum::<f64>() / we)
}

/// Circular moving average of odd width.
pub fn smooth(p: &[f64], window: usize) -> Vec<f64> {
    let n = p.len() as isize;
    let h = (window.max(1) / 2) as isize;
    let w = (2 * h + 1) as f64;
    (0..n).map(|i| (-h..=h).map(|k| p[(i + k).rem_euclid(n) as usize]).sum::<f64>() / w).collect()
}

/// Slots of prominent local maxima of a circular profile, ascending.
pub fn detect_peaks(p: &[f64], params: &PeakParams) -> Vec<usize> {
    let n = p.len();
    if n < 3 {
        return Vec::new();
    }
    let q = smooth(p, params.smooth_window);
    let (lo, hi) = q.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Vec::new();
    }
    let at = |i: isize| q[i.rem_euclid(n as isize) as usize];
    // lowest point on the way to the nearest strictly higher sample; None if none exists
    let side = |i: usize, dir: isize| -> Option<f64> {
        let mut mn = q[i];
        for step in 1..n as isize {
            let v = at(i as isize + dir * step);
            if v > q[i] {
                return Some(mn);
            }
            mn = mn.min(v);
        }
        None
    };
    let r = params.refine_radius as isize;
    let mut out = Vec::new();
    for i in 0..n {
        let ii = i as isize;
        if !(q[i] > at(ii - 1) && q[i] >= at(ii + 1)) {
            continue;
        }
        let prom = match (side(i, -1), side(i, 1)) {
            (Some(l), Some(rr)) => q[i] - l.max(rr),
            (Some(l), None) | (None, Some(l)) => q[i] - l,
            (None, None) => q[i] - lo,
        };
        if prom >= params.prominence * range {
            let best = (-r..=r)
                .map(|k| (ii + k).rem_euclid(n as isize) as usize)
                .fold(None, |b: Option<usize>, j| match b {
                    Some(bj) if p[bj] >= p[j] => Some(bj),
                    _ => Some(j),
                })
                .expect("non-empty window");
            out.push(best);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

pub fn detect_valleys(p: &[f64], params: &PeakParams) -> Vec<usize> {
    let neg: Vec<f64> = p.iter().map(|x| -x).collect();
    detect_peaks(&neg, params)
}

pub fn peak_valley(p: &[f64], params: &PeakParams) -> PeakValley {
    let peak_value = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let valley_value = p.iter().cloned().fold(f64::INFINITY, f64::min);
    PeakValley {
        peak_value,
        valley_value,
        ratio: (valley_value > 0.0).then(|| peak_value / valley_value),
        peak_times: detect_peaks(p, params),
        valley_times: detect_valleys(p, params),
    }
}

pub fn time_features(p: &DailyProfile, params: &PeakParams) -> TimeFeatures {
    TimeFeatures {
        id: p.id.clone(),
        weekday_weekend_ratio: weekday_weekend_ratio(p),
        weekday: peak_valley(&p.weekday, params),
        weekend: peak_valley(&p.weekend, params),
    }
}

/// Signed minutes by which `a` lags `b` (weekday profiles): the circular
/// lag in −12 h..12 h maximising cross-correlation of the smoothed curves.
pub fn peak_offset(a: &DailyProfile, b: &DailyProfile, params: &PeakParams) -> Result<i64, TimeFeatError> {
    for p in [a, b] {
        if detect_peaks(&p.weekday, params).is_empty() {
            return Err(TimeFeatError::Peakless(p.id.clone()));
        }
    }
    Ok(circular_lag(&a.weekday, &b.weekday, params.smooth_window) * 10)
}

/// Lag `L` in `−n/2..n/2` maximising Σ a[i]·b[i−L] (ties → smaller |L|,
/// then positive).
pub fn circular_lag(a: &[f64], b: &[f64], window: usize) -> i64 {
    let (a, b) = (smooth(a, window), smooth(b, window));
    let n = a.len() as i64;
    let mut best = (0i64, f64::NEG_INFINITY);
    for lag in -(n / 2)..(n - n / 2) {
        let c: f64 = (0..n).map(|i| a[i as usize] * b[(i - lag).rem_euclid(n) as usize]).sum();
        let better = c > best.1 || (c == best.1 && (lag.abs() < best.0.abs() || (lag.abs() == best.0.abs() && lag > 0)));
        if better {
            best = (lag, c);
        }
    }
    best.0
}

/// `HH:MM` for a slot of day.
pub fn hhmm(slot: usize) -> String {
    format!("{:02}:{:02}", slot * 10 / 60, slot * 10 % 60)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day_cos(peak_slot: f64) -> Vec<f64> {
        (0..144).map(|s| 2.0 + (2.0 * std::f64::consts::PI * (s as f64 - peak_slot) / 144.0).cos()).collect()
    }

    #[test]
    fn constant_profile() {
        let pv = peak_valley(&[3.0; 144], &PeakParams::default());
        assert!(pv.peak_times.is_empty());
        assert_eq!(pv.ratio, Some(1.0));
    }

    #[test]
    fn single_sinusoid_peak() {
        let pv = peak_valley(&day_cos(129.0), &PeakParams::default());
        assert_eq!(pv.peak_times, vec![129]);
        assert_eq!(hhmm(129), "21:30");
        assert_eq!(pv.valley_times, vec![57]);
    }

    #[test]
    fn weekday_weekend_split() {
        let series: Vec<f64> = (0..7 * 144).map(|i| if (i / 144) < 5 { 1.0 } else { 0.0 }).collect();
        let p = daily_profile("x", &series, 0, false).unwrap();
        assert!(p.weekday.iter().all(|&x| x == 1.0) && p.weekend.iter().all(|&x| x == 0.0));
        assert_eq!(weekday_weekend_ratio(&p), None);
        assert!(daily_profile("x", &series[..100], 0, false).is_err());
    }

    #[test]
    fn offsets() {
        let mk = |s: f64| DailyProfile { id: "p".into(), weekday: day_cos(s), weekend: day_cos(s), normalized: false };
        let pp = PeakParams::default();
        assert_eq!(peak_offset(&mk(60.0), &mk(60.0), &pp).unwrap(), 0);
        assert_eq!(peak_offset(&mk(78.0), &mk(60.0), &pp).unwrap(), 180);
        assert_eq!(peak_offset(&mk(60.0), &mk(78.0), &pp).unwrap(), -180);
        let flat = DailyProfile { id: "f".into(), weekday: vec![1.0; 144], weekend: vec![1.0; 144], normalized: false };
        assert!(peak_offset(&flat, &mk(3.0), &pp).is_err());
    }
}
