//! Polygon (simplex) model over spectral features and convex mixture
//! decomposition by simplex-constrained least squares.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{euclidean, mean_std};
use crate::Scalar;

/// Minimum simplex volume for a usable polygon model.
pub const MIN_VOLUME: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("vertices are affinely dependent (simplex volume {0:e} <= 1e-9)")]
    Degenerate(f64),
    #[error("expected {expected} vertices, got {got}")]
    VertexCount { expected: usize, got: usize },
    #[error("feature dimension mismatch: {got} vs {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("cluster {cluster}: no point has >= {min_density} neighbours within {radius}; try a smaller min_density")]
    NoDensePoint { cluster: usize, min_density: usize, radius: f64 },
    #[error("cannot infer primary clusters for R = {0}; give four cluster ids explicitly")]
    PrimaryClusters(usize),
    #[error("no feasible support found")]
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePoint<T> {
    pub tower_id: String,
    pub f: Vec<T>,
}

/// Per-dimension population mean/std. A zero std is stored as 1 so the
/// transform stays invertible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    pub fn fit(points: &[FeaturePoint<T>]) -> Self {
        let d = points.first().map_or(0, |p| p.f.len());
        let (mut mean, mut std) = (Vec::with_capacity(d), Vec::with_capacity(d));
        for j in 0..d {
            let col: Vec<T> = points.iter().map(|p| p.f[j]).collect();
            let (m, s) = mean_std(&col);
            mean.push(m);
            std.push(if s > T::zero() { s } else { T::one() });
        }
        Standardizer { mean, std }
    }
    pub fn apply(&self, f: &[T]) -> Vec<T> {
        f.iter().zip(self.mean.iter().zip(&self.std)).map(|(&x, (&m, &s))| (x - m) / s).collect()
    }
    pub fn invert(&self, z: &[T]) -> Vec<T> {
        z.iter().zip(self.mean.iter().zip(&self.std)).map(|(&x, (&m, &s))| x * s + m).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolygonModel<T> {
    pub vertices: Vec<FeaturePoint<T>>,
    /// Source cluster (0-based) of each vertex.
    pub clusters: Vec<usize>,
}

impl<T: Scalar> PolygonModel<T> {
    pub fn new(vertices: Vec<FeaturePoint<T>>, clusters: Vec<usize>) -> Result<Self, DecomposeError> {
        if vertices.len() != 4 {
            return Err(DecomposeError::VertexCount { expected: 4, got: vertices.len() });
        }
        let d = vertices[0].f.len();
        if let Some(v) = vertices.iter().find(|v| v.f.len() != d) {
            return Err(DecomposeError::Dimension { expected: d, got: v.f.len() });
        }
        let refs: Vec<&[T]> = vertices.iter().map(|v| v.f.as_slice()).collect();
        let vol = simplex_volume(&refs).f64();
        if !(vol > MIN_VOLUME) {
            return Err(DecomposeError::Degenerate(vol));
        }
        Ok(PolygonModel { vertices, clusters })
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].f.len()
    }

    fn refs(&self) -> Vec<&[T]> {
        self.vertices.iter().map(|v| v.f.as_slice()).collect()
    }
}

/// k-volume of the simplex on `k + 1` points in any dimension,
/// sqrt(det(EᵀE)) / k! with E the edge vectors from the first point.
pub fn simplex_volume<T: Scalar>(points: &[&[T]]) -> T {
    let k = points.len().saturating_sub(1);
    if k == 0 {
        return T::zero();
    }
    let edges: Vec<Vec<T>> = points[1..].iter().map(|p| p.iter().zip(points[0]).map(|(&a, &b)| a - b).collect()).collect();
    let mut g: Vec<Vec<T>> = (0..k).map(|i| (0..k).map(|j| dot(&edges[i], &edges[j])).collect()).collect();
    let det = determinant(&mut g);
    let fact = (1..=k).fold(T::one(), |a, i| a * T::of_usize(i));
    det.max(T::zero()).sqrt() / fact
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn determinant<T: Scalar>(m: &mut [Vec<T>]) -> T {
    let n = m.len();
    let mut det = T::one();
    for c in 0..n {
        let p = (c..n).max_by(|&a, &b| m[a][c].abs().partial_cmp(&m[b][c].abs()).expect("finite")).expect("rows");
        if m[p][c] == T::zero() {
            return T::zero();
        }
        if p != c {
            m.swap(p, c);
            det = -det;
        }
        det = det * m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for j in c..n {
                let v = m[c][j];
                m[r][j] = m[r][j] - f * v;
            }
        }
    }
    det
}

/// Solve `a·x = b` by Gaussian elimination with partial pivoting; `None` if
/// a pivot vanishes relative to the matrix scale.
pub fn solve_linear<T: Scalar>(mut a: Vec<Vec<T>>, mut b: Vec<T>) -> Option<Vec<T>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(T::zero(), |m, &v| m.max(v.abs()));
    let tiny = scale * T::epsilon() * T::of(64.0);
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x][c].abs().partial_cmp(&a[y][c].abs()).expect("finite"))?;
        if a[p][c].abs() <= tiny {
            return None;
        }
        a.swap(p, c);
        b.swap(p, c);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            if f == T::zero() {
                continue;
            }
            for j in c..n {
                let v = a[c][j];
                a[r][j] = a[r][j] - f * v;
            }
            let v = b[c];
            b[r] = b[r] - f * v;
        }
    }
    let mut x = vec![T::zero(); n];
    for r in (0..n).rev() {
        let s = (r + 1..n).fold(b[r], |s, j| s - a[r][j] * x[j]);
        x[r] = s / a[r][r];
    }
    Some(x)
}

/// Least squares over the affine hull of the chosen vertices (KKT solve).
fn affine_ls<T: Scalar>(verts: &[&[T]], support: &[usize], f: &[T]) -> Option<Vec<T>> {
    let s = support.len();
    if s == 1 {
        return Some(vec![T::one()]);
    }
    let mut a = vec![vec![T::zero(); s + 1]; s + 1];
    let mut b = vec![T::zero(); s + 1];
    for i in 0..s {
        for j in 0..s {
            a[i][j] = dot(verts[support[i]], verts[support[j]]);
        }
        a[i][s] = T::one();
        a[s][i] = T::one();
        b[i] = dot(verts[support[i]], f);
    }
    b[s] = T::one();
    solve_linear(a, b).map(|mut x| {
        x.truncate(s);
        x
    })
}

/// min ‖Σ x_i v_i − f‖² s.t. x ≥ 0, Σx = 1, by enumerating supports. Returns
/// weights and the residual norm. Among equally good supports the smallest
/// (then lexicographically first) wins.
pub fn simplex_least_squares<T: Scalar>(verts: &[&[T]], f: &[T]) -> Result<(Vec<T>, T), DecomposeError> {
    let m = verts.len();
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << m)).map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).collect()).collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    let neg_tol = T::of(1e-12);
    let obj_tol = T::of(1e-14) * (T::one() + dot(f, f));
    let mut best: Option<(Vec<T>, T)> = None;
    for support in &subsets {
        let Some(xs) = affine_ls(verts, support, f) else { continue };
        if xs.iter().any(|&x| !(x >= -neg_tol)) {
            continue;
        }
        let mut x = vec![T::zero(); m];
        for (&i, &v) in support.iter().zip(&xs) {
            x[i] = v.max(T::zero());
        }
        let total: T = x.iter().copied().sum();
        x.iter_mut().for_each(|v| *v = *v / total);
        let fr = combine(verts, &x);
        let obj = fr.iter().zip(f).fold(T::zero(), |s, (&a, &b)| s + (a - b) * (a - b));
        if best.as_ref().map_or(true, |(_, bo)| obj < *bo - obj_tol) {
            best = Some((x, obj));
        }
    }
    best.map(|(x, o)| (x, o.sqrt())).ok_or(DecomposeError::Infeasible)
}

/// Σ x_i v_i.
pub fn combine<T: Scalar>(verts: &[&[T]], x: &[T]) -> Vec<T> {
    let d = verts.first().map_or(0, |v| v.len());
    let mut out = vec![T::zero(); d];
    for (v, &w) in verts.iter().zip(x) {
        for (o, &c) in out.iter_mut().zip(v.iter()) {
            *o = *o + w * c;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureCoefficients<T> {
    pub tower_id: String,
    pub x: [T; 4],
    pub residual: T,
}

pub fn solve_mixture<T: Scalar>(point: &FeaturePoint<T>, model: &PolygonModel<T>) -> Result<MixtureCoefficients<T>, DecomposeError> {
    if point.f.len() != model.dim() {
        return Err(DecomposeError::Dimension { expected: model.dim(), got: point.f.len() });
    }
    let (x, residual) = simplex_least_squares(&model.refs(), &point.f)?;
    Ok(MixtureCoefficients { tower_id: point.tower_id.clone(), x: [x[0], x[1], x[2], x[3]], residual })
}

/// Per primary cluster, the dense point (≥ `min_density` other points within
/// `radius`, capped at the cluster's size − 1) farthest — by minimum
/// distance — from points of other clusters. Ties: more neighbours, then smaller tower id.
pub fn select_representatives<T: Scalar>(
    points: &[FeaturePoint<T>],
    labels: &[usize],
    primary: [usize; 4],
    radius: T,
    min_density: usize,
) -> Result<PolygonModel<T>, DecomposeError> {
    let n = points.len();
    let neighbours: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && euclidean(&points[i].f, &points[j].f) <= radius).count())
        .collect();
    let mut vertices = Vec::with_capacity(4);
    for &c in &primary {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            return Err(DecomposeError::EmptyCluster(c));
        }
        // a cluster cannot offer more neighbours than it has other members
        let need = min_density.min(members.len() - 1);
        let mut best: Option<(usize, T)> = None;
        for &i in members.iter().filter(|&&i| neighbours[i] >= need) {
            let sep = (0..n)
                .filter(|&j| labels[j] != c)
                .map(|j| euclidean(&points[i].f, &points[j].f))
                .fold(T::infinity(), T::min);
            let better = match best {
                None => true,
                Some((b, bs)) => {
                    sep > bs
                        || (sep == bs
                            && (neighbours[i] > neighbours[b] || (neighbours[i] == neighbours[b] && points[i].tower_id < points[b].tower_id)))
                }
            };
            if better {
                best = Some((i, sep));
            }
        }
        let (i, _) = best.ok_or(DecomposeError::NoDensePoint { cluster: c, min_density, radius: radius.f64() })?;
        vertices.push(points[i].clone());
    }
    PolygonModel::new(vertices, primary.to_vec())
}

/// With five clusters, the comprehensive one is the cluster whose centroid
/// lies nearest the global mean; the remaining four are primaries.
pub fn default_primary_clusters<T: Scalar>(centroids: &[Vec<T>], sizes: &[usize]) -> Result<([usize; 4], usize), DecomposeError> {
    if centroids.len() != 5 {
        return Err(DecomposeError::PrimaryClusters(centroids.len()));
    }
    let total = T::of_usize(sizes.iter().sum::<usize>().max(1));
    let d = centroids[0].len();
    let mut mean = vec![T::zero(); d];
    for (c, &s) in centroids.iter().zip(sizes) {
        for (m, &v) in mean.iter_mut().zip(c) {
            *m = *m + v * T::of_usize(s) / total;
        }
    }
    let comp = (0..5)
        .min_by(|&a, &b| euclidean(&centroids[a], &mean).partial_cmp(&euclidean(&centroids[b], &mean)).expect("finite"))
        .expect("five clusters");
    let rest: Vec<usize> = (0..5).filter(|&c| c != comp).collect();
    Ok(([rest[0], rest[1], rest[2], rest[3]], comp))
}

/// How component curves are scaled into tower units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderScale {
    /// x_i · zscore(vertex pattern) · std(tower).
    #[default]
    TowerStd,
    /// x_i · vertex pattern / mean(vertex pattern) · mean(tower).
    TowerMean,
}

pub fn render_components<T: Scalar>(tower: &[T], x: &[T], vertex_patterns: &[Vec<T>], scale: RenderScale) -> Vec<Vec<T>> {
    let (tm, ts) = mean_std(tower);
    vertex_patterns
        .iter()
        .zip(x)
        .map(|(p, &w)| match scale {
            RenderScale::TowerStd => {
                let (z, _) = crate::vectorize::zscore(p);
                z.into_iter().map(|v| w * v * ts).collect()
            }
            RenderScale::TowerMean => {
                let (pm, _) = mean_std(p);
                let k = if pm == T::zero() { T::zero() } else { w * tm / pm };
                p.iter().map(|&v| v * k).collect()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetra() -> PolygonModel<f64> {
        let v = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        PolygonModel::new(v.iter().enumerate().map(|(i, f)| FeaturePoint { tower_id: format!("v{i}"), f: f.to_vec() }).collect(), vec![0, 1, 2, 3]).unwrap()
    }

    #[test]
    fn vertex_is_one_hot() {
        let m = tetra();
        let r = solve_mixture(&FeaturePoint { tower_id: "p".into(), f: vec![1.0, 0.0, 0.0] }, &m).unwrap();
        assert_eq!(r.x, [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn midpoint() {
        let m = tetra();
        let r = solve_mixture(&FeaturePoint { tower_id: "p".into(), f: vec![0.5, 0.0, 0.0] }, &m).unwrap();
        assert!((r.x[0] - 0.5).abs() < 1e-12 && (r.x[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exterior_projects() {
        let m = tetra();
        let r = solve_mixture(&FeaturePoint { tower_id: "p".into(), f: vec![1.0, 1.0, 1.0] }, &m).unwrap();
        // projection onto the face x+y+z=1 is (1/3,1/3,1/3)
        assert!((r.residual - (3.0f64 * (2.0f64 / 3.0).powi(2)).sqrt()).abs() < 1e-12);
        assert!(r.x[0].abs() < 1e-12);
    }

    #[test]
    fn degenerate_rejected() {
        let v = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let pts = v.iter().map(|f| FeaturePoint { tower_id: String::new(), f: f.to_vec() }).collect();
        assert!(matches!(PolygonModel::<f64>::new(pts, vec![0, 1, 2, 3]), Err(DecomposeError::Degenerate(_))));
    }

    #[test]
    fn volume_of_unit_tetra() {
        let a: [&[f64]; 4] = [&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]];
        assert!((simplex_volume(&a) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn outlier_filtered_and_singletons() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        let corners = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]];
        for (c, corner) in corners.iter().enumerate() {
            pts.push(FeaturePoint { tower_id: format!("c{c}"), f: corner.to_vec() });
            labels.push(c);
        }
        let m = select_representatives(&pts, &labels, [0, 1, 2, 3], 0.5, 0).unwrap();
        assert_eq!(m.vertices.iter().map(|v| v.tower_id.as_str()).collect::<Vec<_>>(), ["c0", "c1", "c2", "c3"]);
        // singletons pass under the size cap; a sparse pair does not
        assert!(select_representatives(&pts, &labels, [0, 1, 2, 3], 0.5, 2).is_ok());
        let mut sparse = pts.clone();
        sparse.push(FeaturePoint { tower_id: "s0".into(), f: vec![0.0, 0.0, 5.0] });
        let mut sl = labels.clone();
        sl.push(0);
        assert!(matches!(
            select_representatives(&sparse, &sl, [0, 1, 2, 3], 0.5, 2),
            Err(DecomposeError::NoDensePoint { cluster: 0, .. })
        ));
        // dense blobs around each corner plus one isolated extreme member of cluster 1
        for (c, corner) in corners.iter().enumerate() {
            for k in 1..=3 {
                let mut f = corner.to_vec();
                f[0] += 0.1 * k as f64;
                pts.push(FeaturePoint { tower_id: format!("b{c}{k}"), f });
                labels.push(c);
            }
        }
        pts.push(FeaturePoint { tower_id: "far".into(), f: vec![30.0, 0.0, 0.0] });
        labels.push(1);
        let m = select_representatives(&pts, &labels, [0, 1, 2, 3], 0.5, 2).unwrap();
        assert_eq!(m.vertices[1].tower_id, "b13");
    }

    #[test]
    fn render_mean_scale_sums_to_mixture() {
        let a = vec![1.0, 2.0, 3.0, 2.0];
        let b = vec![3.0, 1.0, 1.0, 3.0];
        let tower: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 10.0 * (0.5 * x + 0.5 * y)).collect();
        let comps = render_components(&tower, &[0.5, 0.5], &[a, b], RenderScale::TowerMean);
        let sum: Vec<f64> = (0..4).map(|i| comps[0][i] + comps[1][i]).collect();
        for (s, t) in sum.iter().zip(&tower) {
            assert!((s - t).abs() < 1e-12);
        }
        let one = render_components(&tower, &[1.0], &[vec![1.0, 3.0]], RenderScale::TowerStd);
        let (_, ts) = mean_std(&tower);
        assert!((one[0][1] - ts).abs() < 1e-12);
    }
}
