//! Reference implementations written independently of the library code.
#![allow(dead_code)]

use num_complex::Complex;
use rand::Rng;

use cellmine_core::ingest::SessionLog;

/// Spread each session one second at a time; a zero-length session lands
/// wholly in the slot of its start.
pub fn per_second_bins(logs: &[SessionLog], origin: i64, slots: usize) -> Vec<f64> {
    let mut out = vec![0.0; slots];
    let end = origin + slots as i64 * 600;
    for l in logs {
        if l.end == l.start {
            if l.start >= origin && l.start < end {
                out[((l.start - origin) / 600) as usize] += l.bytes as f64;
            }
            continue;
        }
        let per = l.bytes as f64 / (l.end - l.start) as f64;
        for t in l.start..l.end {
            if t >= origin && t < end {
                out[((t - origin) / 600) as usize] += per;
            }
        }
    }
    out
}

pub fn random_sessions<R: Rng>(rng: &mut R, n: usize, towers: usize, origin: i64, slots: usize) -> Vec<SessionLog> {
    let span = slots as i64 * 600;
    (0..n)
        .map(|i| {
            let start = origin + rng.gen_range(0..span);
            let dur = if rng.gen_bool(0.1) { 0 } else { rng.gen_range(1..3 * 600) };
            let end = (start + dur).min(origin + span);
            SessionLog {
                user_id: format!("u{i}"),
                tower_id: format!("t{}", rng.gen_range(0..towers)),
                start,
                end,
                bytes: rng.gen_range(0..1_000_000),
            }
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One merge of the reference HAC: smallest leaf of each side (ascending)
/// and the linkage height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefMerge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Average linkage recomputed from the leaf distances at every step,
/// O(n³) per step. Ties within `tol` (relative) go to the smallest
/// (min leaf, max leaf) pair.
pub fn naive_average_linkage(points: &[Vec<f64>], tol: f64) -> Vec<RefMerge> {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let mut out = Vec::new();
    while clusters.len() > 1 {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let mut s = 0.0;
                for &p in &clusters[i] {
                    for &q in &clusters[j] {
                        s += dist(&points[p], &points[q]);
                    }
                }
                let h = s / (clusters[i].len() * clusters[j].len()) as f64;
                let (mi, mj) = (clusters[i][0], clusters[j][0]);
                let key = (mi.min(mj), mi.max(mj));
                let better = match best {
                    None => true,
                    Some((bh, bk, _, _)) => {
                        if (h - bh).abs() <= tol * h.abs().max(bh.abs()) {
                            key < bk
                        } else {
                            h < bh
                        }
                    }
                };
                if better {
                    best = Some((h, key, i, j));
                }
            }
        }
        let (h, key, i, j) = best.expect("two clusters");
        out.push(RefMerge { a: key.0, b: key.1, height: h });
        let mut merged = clusters[i].clone();
        merged.extend(&clusters[j]);
        merged.sort_unstable();
        clusters.remove(j);
        clusters[i] = merged;
        clusters.sort_by_key(|c| c[0]);
    }
    out
}

/// Library merges expressed as (smallest leaf of left, of right, height).
pub fn library_merges(d: &cellmine_core::cluster::Dendrogram<f64>) -> Vec<RefMerge> {
    let mut min_leaf: Vec<usize> = (0..d.n).collect();
    d.merges
        .iter()
        .map(|m| {
            let (a, b) = (min_leaf[m.left], min_leaf[m.right]);
            min_leaf.push(a.min(b));
            RefMerge { a: a.min(b), b: a.max(b), height: m.height }
        })
        .collect()
}

/// Davies–Bouldin straight from its definition.
pub fn dbi_reference(points: &[Vec<f64>], labels: &[usize], r: usize) -> f64 {
    let dim = points[0].len();
    let mut cent = vec![vec![0.0; dim]; r];
    let mut size = vec![0.0; r];
    for (p, &l) in points.iter().zip(labels) {
        size[l] += 1.0;
        for k in 0..dim {
            cent[l][k] += p[k];
        }
    }
    for c in 0..r {
        for k in 0..dim {
            cent[c][k] /= size[c];
        }
    }
    let mut s = vec![0.0; r];
    for (p, &l) in points.iter().zip(labels) {
        s[l] += dist(p, &cent[l]) / size[l];
    }
    (0..r)
        .map(|i| (0..r).filter(|&j| j != i).map(|j| (s[i] + s[j]) / dist(&cent[i], &cent[j])).fold(f64::MIN, f64::max))
        .sum::<f64>()
        / r as f64
}

/// X[k] = Σ x[n] e^{−2πikn/N}, accumulated with exact integer reduction of
/// the angle index.
pub fn dft_reference(x: &[f64]) -> Vec<Complex<f64>> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter().enumerate().fold(Complex::new(0.0, 0.0), |acc, (t, &v)| {
                let ang = -2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                acc + Complex::from_polar(v, ang)
            })
        })
        .collect()
}

fn combo(verts: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let d = verts[0].len();
    (0..d).map(|k| verts.iter().zip(x).map(|(v, w)| v[k] * w).sum()).collect()
}

/// Grid search over the 3-simplex: a coarse sweep, then 1e-3 lattice sweeps
/// around the running optimum. Returns (weights, distance).
pub fn grid_simplex_projection(verts: &[Vec<f64>], f: &[f64]) -> ([f64; 4], f64) {
    let eval = |x: &[f64; 4]| dist(&combo(verts, x), f);
    let mut best = ([1.0, 0.0, 0.0, 0.0], f64::INFINITY);
    let coarse = 50;
    for i in 0..=coarse {
        for j in 0..=coarse - i {
            for k in 0..=coarse - i - j {
                let x = [i as f64 / coarse as f64, j as f64 / coarse as f64, k as f64 / coarse as f64, (coarse - i - j - k) as f64 / coarse as f64];
                let e = eval(&x);
                if e < best.1 {
                    best = (x, e);
                }
            }
        }
    }
    // walk the 1e-3 lattice window by window until the centre settles
    let step = 1e-3;
    let reach = 25i32;
    loop {
        let c = best.0;
        for di in -reach..=reach {
            for dj in -reach..=reach {
                for dk in -reach..=reach {
                    let x0 = c[0] + di as f64 * step;
                    let x1 = c[1] + dj as f64 * step;
                    let x2 = c[2] + dk as f64 * step;
                    let x3 = 1.0 - x0 - x1 - x2;
                    if x0 < -1e-12 || x1 < -1e-12 || x2 < -1e-12 || x3 < -1e-12 {
                        continue;
                    }
                    let x = [x0.max(0.0), x1.max(0.0), x2.max(0.0), x3.max(0.0)];
                    let e = eval(&x);
                    if e < best.1 {
                        best = (x, e);
                    }
                }
            }
        }
        if best.0 == c {
            break;
        }
    }
    best
}

/// Random tetrahedron in 3-D with volume comfortably above the floor.
pub fn random_simplex<R: Rng>(rng: &mut R) -> Vec<Vec<f64>> {
    loop {
        let v: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let e: Vec<Vec<f64>> = (1..4).map(|i| (0..3).map(|k| v[i][k] - v[0][k]).collect()).collect();
        let det = e[0][0] * (e[1][1] * e[2][2] - e[1][2] * e[2][1]) - e[0][1] * (e[1][0] * e[2][2] - e[1][2] * e[2][0])
            + e[0][2] * (e[1][0] * e[2][1] - e[1][1] * e[2][0]);
        if det.abs() / 6.0 > 1.0 {
            return v;
        }
    }
}

/// Uniform point on the 3-simplex.
pub fn random_weights<R: Rng>(rng: &mut R) -> [f64; 4] {
    let e: Vec<f64> = (0..4).map(|_| -rng.gen_range(1e-9f64..1.0).ln()).collect();
    let s: f64 = e.iter().sum();
    [e[0] / s, e[1] / s, e[2] / s, e[3] / s]
}

pub fn combine(verts: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    combo(verts, x)
}

/// Best accuracy of `pred` against `truth` over all relabelings of the
/// predicted clusters (both with `r` labels).
pub fn best_permutation_accuracy(truth: &[usize], pred: &[usize], r: usize) -> f64 {
    fn permute(k: usize, perm: &mut Vec<usize>, used: &mut Vec<bool>, conf: &[Vec<usize>], best: &mut usize) {
        let r = used.len();
        if k == r {
            let hits: usize = (0..r).map(|p| conf[p][perm[p]]).sum();
            *best = (*best).max(hits);
            return;
        }
        for t in 0..r {
            if !used[t] {
                used[t] = true;
                perm.push(t);
                permute(k + 1, perm, used, conf, best);
                perm.pop();
                used[t] = false;
            }
        }
    }
    let mut conf = vec![vec![0usize; r]; r];
    for (&t, &p) in truth.iter().zip(pred) {
        if t < r && p < r {
            conf[p][t] += 1;
        }
    }
    let mut best = 0;
    permute(0, &mut Vec::new(), &mut vec![false; r], &conf, &mut best);
    best as f64 / truth.len() as f64
}
