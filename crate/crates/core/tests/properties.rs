mod common;

use proptest::prelude::*;

use cellmine_core::cluster::hac_average_linkage;
use cellmine_core::decompose::simplex_least_squares;
use cellmine_core::ingest::{bin_traffic, deduplicate, SessionLog, Window};
use cellmine_core::poi::{ntfidf, PoiIndex, PoiRecord, PoiType};
use cellmine_core::spectrum::dft;
use cellmine_core::timefeat::{daily_profile, peak_offset, peak_valley, PeakParams};
use cellmine_core::vectorize::zscore;
use cellmine_core::{SLOTS_PER_DAY, SLOTS_PER_WEEK};

const ORIGIN: i64 = 1_406_822_400;

fn session() -> impl Strategy<Value = SessionLog> {
    (0u8..3, 0u8..3, 0i64..3 * 86_400, 0i64..4000, 0u64..100_000).prop_map(|(u, t, s, d, b)| SessionLog {
        user_id: format!("u{u}"),
        tower_id: format!("t{t}"),
        start: ORIGIN - 3600 + s,
        end: ORIGIN - 3600 + s + d,
        bytes: b,
    })
}

fn points(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dedup_idempotent_and_order_free(mut logs in prop::collection::vec(session(), 0..40), seed in any::<u64>()) {
        let once = deduplicate(&logs);
        prop_assert_eq!(deduplicate(&once), once.clone());
        // shuffle deterministically and compare
        let n = logs.len();
        if n > 1 {
            for i in 0..n {
                logs.swap(i, (seed.wrapping_mul(i as u64 + 1) % n as u64) as usize);
            }
        }
        prop_assert_eq!(deduplicate(&logs), once);
    }

    #[test]
    fn binning_conserves_bytes(logs in prop::collection::vec(session(), 0..40)) {
        let w = Window::new(ORIGIN, 2).unwrap();
        let out = bin_traffic(&logs, w, None);
        let inside: f64 = out.series.values().flat_map(|s| s.slot_bytes.iter()).sum();
        let total: f64 = logs.iter().map(|l| l.bytes as f64).sum();
        prop_assert!((inside + out.dropped_bytes - total).abs() <= 1e-6 * total.max(1.0));
        prop_assert!(out.series.values().flat_map(|s| s.slot_bytes.iter()).all(|&x| x >= 0.0));
    }

    #[test]
    fn zscore_is_standard_and_scale_free(x in prop::collection::vec(-1e3f64..1e3, 2..60), a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let (z, degenerate) = zscore(&x);
        prop_assume!(!degenerate);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-9);
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let (zy, _) = zscore(&y);
        for (p, q) in z.iter().zip(&zy) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn hac_heights_monotone(pts in points(2..=25)) {
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let d = hac_average_linkage(&refs).unwrap();
        prop_assert_eq!(d.merges.len(), pts.len() - 1);
        for w in d.merges.windows(2) {
            prop_assert!(w[1].height >= w[0].height * (1.0 - 1e-12));
        }
        prop_assert_eq!(d.merges.last().unwrap().size, pts.len());
    }

    #[test]
    fn hac_partitions_permutation_invariant(pts in points(3..=15), rot in 1usize..15) {
        let n = pts.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let a = hac_average_linkage(&pts.iter().map(|p| p.as_slice()).collect::<Vec<_>>()).unwrap();
        let b = hac_average_linkage(&shuffled.iter().map(|p| p.as_slice()).collect::<Vec<_>>()).unwrap();
        for (ma, mb) in a.merges.iter().zip(&b.merges) {
            prop_assert!((ma.height - mb.height).abs() <= 1e-9 * ma.height.max(1.0));
        }
        // same partition at every level free of height ties
        let ha = a.heights();
        for r in 2..n {
            if (ha[n - r] - ha[n - r - 1]).abs() <= 1e-9 * ha[n - r].max(1.0) {
                continue;
            }
            let la = a.cut(r);
            let lb = b.cut(r);
            for i in 0..n {
                for j in 0..n {
                    let same_a = la[perm[i]] == la[perm[j]];
                    prop_assert_eq!(same_a, lb[i] == lb[j]);
                }
            }
        }
    }

    #[test]
    fn parseval(x in prop::collection::vec(-10.0f64..10.0, 1..200)) {
        let s = dft(&x);
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq: f64 = s.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>() / x.len() as f64;
        prop_assert!((time - freq).abs() <= 1e-9 * time.max(1.0));
    }

    #[test]
    fn shift_theorem(x in prop::collection::vec(-10.0f64..10.0, 2..128), m in 0usize..200) {
        let n = x.len();
        let m = m % n;
        let y: Vec<f64> = (0..n).map(|t| x[(t + n - m) % n]).collect();
        let (sx, sy) = (dft(&x), dft(&y));
        for k in 0..n {
            let ang = -2.0 * std::f64::consts::PI * ((k * m) % n) as f64 / n as f64;
            let want = sx.coeffs[k] * num_complex::Complex::from_polar(1.0, ang);
            prop_assert!((sy.coeffs[k] - want).norm() <= 1e-8 * (1.0 + want.norm()));
        }
    }

    #[test]
    fn dft_linear(x in prop::collection::vec(-10.0f64..10.0, 64), y in prop::collection::vec(-10.0f64..10.0, 64), a in -3.0f64..3.0) {
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let (sx, sy, sz) = (dft(&x), dft(&y), dft(&z));
        for k in 0..64 {
            prop_assert!((sz.coeffs[k] - (sx.coeffs[k] * a + sy.coeffs[k])).norm() <= 1e-9);
        }
    }

    #[test]
    fn qp_vertices_and_idempotence(seed in any::<u64>(), corner in 0usize..4) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = common::random_simplex(&mut rng);
        let refs: Vec<&[f64]> = v.iter().map(|p| p.as_slice()).collect();
        let (x, _) = simplex_least_squares(&refs, &v[corner]).unwrap();
        for (i, &w) in x.iter().enumerate() {
            let want = if i == corner { 1.0 } else { 0.0 };
            prop_assert!((w - want).abs() < 1e-9);
        }
        // the projection of a projection is itself
        let f: Vec<f64> = (0..3).map(|k| v[0][k] * 3.0 - v[1][k] * 2.5).collect();
        let (x1, _) = simplex_least_squares(&refs, &f).unwrap();
        let p = common::combine(&v, &x1);
        let (x2, r2) = simplex_least_squares(&refs, &p).unwrap();
        prop_assert!(r2 < 1e-9);
        for (a, b) in x1.iter().zip(&x2) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        // reordering vertices permutes weights
        let rev: Vec<&[f64]> = refs.iter().rev().copied().collect();
        let (xr, _) = simplex_least_squares(&rev, &f).unwrap();
        for i in 0..4 {
            prop_assert!((xr[3 - i] - x1[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn ntfidf_rows(counts in prop::collection::vec(prop::array::uniform4(0u64..20), 1..30)) {
        let ids: Vec<String> = (0..counts.len()).map(|i| format!("t{i}")).collect();
        let prof = ntfidf(&ids, &counts);
        for p in &prof {
            match p.ntfidf {
                Some(r) => prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12),
                None => prop_assert!(p.tfidf.iter().all(|&t| t == 0.0)),
            }
        }
        // TF-IDF grows with the count of a type, all else equal
        for t in 0..4 {
            for a in &prof {
                for b in &prof {
                    if a.counts[t] > b.counts[t] && a.tfidf[t] > 0.0 {
                        prop_assert!(a.tfidf[t] > b.tfidf[t]);
                    }
                }
            }
        }
    }

    #[test]
    fn poi_counts_grow_with_radius(offsets in prop::collection::vec((-0.01f64..0.01, -0.01f64..0.01, 0usize..4), 0..60), r in 10.0f64..800.0) {
        let pois: Vec<PoiRecord> = offsets
            .iter()
            .enumerate()
            .map(|(i, &(a, b, k))| PoiRecord { poi_id: format!("p{i}"), lat: 31.2 + a, lon: 121.5 + b, kind: [PoiType::Resident, PoiType::Transport, PoiType::Office, PoiType::Entertain][k] })
            .collect();
        let idx = PoiIndex::new(&pois);
        let small = idx.count(31.2, 121.5, r);
        let big = idx.count(31.2, 121.5, r * 1.5);
        for t in 0..4 {
            prop_assert!(small[t] <= big[t]);
        }
    }

    #[test]
    fn peak_offset_antisymmetric(c1 in 0usize..144, c2 in 0usize..144) {
        let bump = |c: usize| -> Vec<f64> {
            let day: Vec<f64> = (0..SLOTS_PER_DAY)
                .map(|s| {
                    let d = (s as f64 - c as f64 + 72.0).rem_euclid(144.0) - 72.0;
                    1.0 + 3.0 * (-(d * d) / 50.0).exp()
                })
                .collect();
            day.iter().cycle().take(SLOTS_PER_WEEK).cloned().collect()
        };
        let a = daily_profile("a", &bump(c1), 0, false).unwrap();
        let b = daily_profile("b", &bump(c2), 0, false).unwrap();
        let pp = PeakParams::default();
        let ab = peak_offset(&a, &b, &pp).unwrap();
        let ba = peak_offset(&b, &a, &pp).unwrap();
        // exact half-day lags are reported with the positive sign both ways
        if ab.abs() != 720 {
            prop_assert_eq!(ab, -ba);
        }
    }

    #[test]
    fn profile_conserves_totals(x in prop::collection::vec(0.0f64..100.0, SLOTS_PER_WEEK), fw in 0u8..7) {
        let p = daily_profile("t", &x, fw, false).unwrap();
        let total: f64 = x.iter().sum();
        let back = 5.0 * p.weekday.iter().sum::<f64>() + 2.0 * p.weekend.iter().sum::<f64>();
        prop_assert!((total - back).abs() <= 1e-9 * total.max(1.0));
        let pv = peak_valley(&p.weekday, &PeakParams::default());
        if let Some(r) = pv.ratio {
            prop_assert!(r >= 1.0);
        }
    }
}
