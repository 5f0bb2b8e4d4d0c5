mod common;

use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cellmine_core::cluster::{davies_bouldin, hac_average_linkage, tie_tolerance};
use cellmine_core::decompose::simplex_least_squares;
use cellmine_core::ingest::{bin_traffic, Window};
use cellmine_core::spectrum::dft;

use common::*;

#[test]
fn binning_matches_per_second_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let origin = 1_406_822_400;
    let slots = 144;
    let logs = random_sessions(&mut rng, 400, 3, origin - 1800, slots + 6);
    let out = bin_traffic(&logs, Window::new(origin, 1).unwrap(), None);
    for (id, series) in &out.series {
        let mine: Vec<_> = logs.iter().filter(|l| &l.tower_id == id).cloned().collect();
        let want = per_second_bins(&mine, origin, slots);
        for (a, b) in series.slot_bytes.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{id}: {a} vs {b}");
        }
    }
}

#[test]
fn hac_matches_naive_on_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.gen_range(2..=9);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let lib = library_merges(&hac_average_linkage(&refs).unwrap());
        let want = naive_average_linkage(&pts, tie_tolerance::<f64>());
        assert_eq!(lib.len(), want.len());
        for (a, b) in lib.iter().zip(&want) {
            assert_eq!((a.a, a.b), (b.a, b.b));
            assert_relative_eq!(a.height, b.height, max_relative = 1e-12);
        }
    }
}

#[test]
fn hac_matches_naive_with_heavy_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(3..=8);
        // small integer lattice: many equal distances
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.gen_range(0..3) as f64).collect()).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let lib = library_merges(&hac_average_linkage(&refs).unwrap());
        let want = naive_average_linkage(&pts, tie_tolerance::<f64>());
        for (a, b) in lib.iter().zip(&want) {
            assert_eq!((a.a, a.b), (b.a, b.b), "{pts:?}");
            assert!((a.height - b.height).abs() <= 1e-12 * b.height.abs().max(1e-300));
        }
    }
}

#[test]
fn dbi_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let r = rng.gen_range(2..5);
        let n = rng.gen_range(r..20);
        let labels: Vec<usize> = (0..n).map(|i| if i < r { i } else { rng.gen_range(0..r) }).collect();
        let pts: Vec<Vec<f64>> = labels.iter().map(|&l| (0..3).map(|_| l as f64 * 3.0 + rng.gen_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let lib = davies_bouldin(&refs, &labels, r).unwrap();
        assert_relative_eq!(lib, dbi_reference(&pts, &labels, r), max_relative = 1e-10);
    }
}

#[test]
fn dbi_worked_example() {
    let pts = [[0.0], [2.0], [10.0], [12.0]];
    let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
    assert_relative_eq!(davies_bouldin(&refs, &[0, 0, 1, 1], 2).unwrap(), 0.2, max_relative = 1e-12);
}

#[test]
fn fft_matches_naive_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [1usize, 2, 3, 7, 16, 100, 144, 256] {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = dft(&x);
        for (a, b) in s.coeffs.iter().zip(dft_reference(&x)) {
            assert!((a - b).norm() <= 1e-8, "n={n}");
        }
    }
}

#[test]
fn qp_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let v = random_simplex(&mut rng);
        let refs: Vec<&[f64]> = v.iter().map(|p| p.as_slice()).collect();
        // both interior and exterior targets
        let f: Vec<f64> = (0..3).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let (x, res) = simplex_least_squares(&refs, &f).unwrap();
        let (gx, gres) = grid_simplex_projection(&v, &f);
        assert!(res <= gres + 1e-9, "QP residual {res} above grid {gres}");
        // objective is strictly convex on a non-degenerate simplex: weights agree
        // to the grid's resolution
        for (a, b) in x.iter().zip(gx) {
            assert!((a - b).abs() <= 5e-3, "{x:?} vs {gx:?}");
        }
    }
}

#[test]
fn qp_recovers_interior_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..200 {
        let v = random_simplex(&mut rng);
        let w = random_weights(&mut rng);
        let f = combine(&v, &w);
        let refs: Vec<&[f64]> = v.iter().map(|p| p.as_slice()).collect();
        let (x, res) = simplex_least_squares(&refs, &f).unwrap();
        assert!(res < 1e-9);
        for (a, b) in x.iter().zip(w) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}
