//! Average-linkage agglomerative clustering with a Davies-Bouldin cut.
//!
//! Cluster labels are 0-based in memory; files and reports use `label + 1`.

use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::euclidean;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least {need} vectors, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("vector {index} has length {len}, expected {expected}")]
    Ragged { index: usize, len: usize, expected: usize },
    #[error("DBI needs R >= 2, got {0}")]
    TooFewClusters(usize),
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("clusters {0} and {1} have coincident centroids")]
    CoincidentCentroids(usize, usize),
    #[error("no cut in R = {rmin}..={rmax} gives a valid DBI")]
    NoValidCut { rmin: usize, rmax: usize },
    #[error("invalid R range {rmin}..={rmax}")]
    Range { rmin: usize, rmax: usize },
}

/// One merge. Node ids: leaves `0..n`, merge `i` creates node `n + i`.
/// `left` is the side holding the smaller leaf id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge<T> {
    pub left: usize,
    pub right: usize,
    pub height: T,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram<T> {
    pub n: usize,
    pub merges: Vec<Merge<T>>,
}

/// Relative tolerance under which two linkage distances count as tied.
pub fn tie_tolerance<T: Scalar>() -> T {
    T::of(1e-12).max(T::epsilon() * T::of(64.0))
}

#[inline]
fn tied<T: Scalar>(a: T, b: T) -> bool {
    (a - b).abs() <= tie_tolerance::<T>() * a.abs().max(b.abs())
}

/// `(d1, k1)` precedes `(d2, k2)`: smaller distance, ties by smaller key.
#[inline]
fn precedes<T: Scalar>(d1: T, k1: (usize, usize), d2: T, k2: (usize, usize)) -> bool {
    if tied(d1, d2) {
        k1 < k2
    } else {
        d1 < d2
    }
}

fn check_shape<T>(vectors: &[&[T]], need: usize) -> Result<usize, ClusterError> {
    if vectors.len() < need {
        return Err(ClusterError::TooFew { need, got: vectors.len() });
    }
    let m = vectors[0].len();
    if let Some((index, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != m) {
        return Err(ClusterError::Ragged { index, len: v.len(), expected: m });
    }
    Ok(m)
}

/// Dense symmetric Euclidean distance matrix, row-major `n × n`.
pub fn distance_matrix<T: Scalar>(vectors: &[&[T]]) -> Vec<T> {
    let n = vectors.len();
    let upper: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| euclidean(vectors[i], vectors[j])).collect())
        .collect();
    let mut d = vec![T::zero(); n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + 1 + off;
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Exact average-linkage HAC via Lance-Williams updates. Ties merge the pair
/// with the lexicographically smallest (min leaf id, max leaf id), where a
/// cluster's id is its smallest leaf.
pub fn hac_average_linkage<T: Scalar>(vectors: &[&[T]]) -> Result<Dendrogram<T>, ClusterError> {
    check_shape(vectors, 2)?;
    Ok(hac_from_distances(vectors.len(), distance_matrix(vectors)))
}

/// HAC over a precomputed `n × n` distance matrix (consumed as workspace).
pub fn hac_from_distances<T: Scalar>(n: usize, mut d: Vec<T>) -> Dendrogram<T> {
    assert_eq!(d.len(), n * n);
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut node: Vec<usize> = (0..n).collect();
    let mut id: Vec<usize> = (0..n).collect();
    let mut nn = vec![usize::MAX; n];
    let mut nnd = vec![T::infinity(); n];
    let key = |id: &[usize], a: usize, b: usize| (id[a].min(id[b]), id[a].max(id[b]));

    let find_nn = |i: usize, active: &[bool], id: &[usize], d: &[T]| -> (usize, T) {
        let mut best = (usize::MAX, T::infinity());
        for j in 0..n {
            if j == i || !active[j] {
                continue;
            }
            let dj = d[i * n + j];
            if best.0 == usize::MAX || precedes(dj, key(id, i, j), best.1, key(id, i, best.0)) {
                best = (j, dj);
            }
        }
        best
    };

    for i in 0..n {
        let (j, dj) = find_nn(i, &active, &id, &d);
        nn[i] = j;
        nnd[i] = dj;
    }

    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut bi = usize::MAX;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            if bi == usize::MAX || precedes(nnd[i], key(&id, i, nn[i]), nnd[bi], key(&id, bi, nn[bi])) {
                bi = i;
            }
        }
        let bj = nn[bi];
        let (a, b) = if id[bi] < id[bj] { (bi, bj) } else { (bj, bi) };
        let height = d[a * n + b];
        merges.push(Merge { left: node[a], right: node[b], height, size: size[a] + size[b] });

        let (sa, sb) = (T::of_usize(size[a]), T::of_usize(size[b]));
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let v = (sa * d[a * n + k] + sb * d[b * n + k]) / (sa + sb);
            d[a * n + k] = v;
            d[k * n + a] = v;
        }
        active[b] = false;
        size[a] += size[b];
        id[a] = id[a].min(id[b]);
        node[a] = n + step;

        for k in 0..n {
            if !active[k] || k == a {
                continue;
            }
            if nn[k] == a || nn[k] == b {
                let (j, dj) = find_nn(k, &active, &id, &d);
                nn[k] = j;
                nnd[k] = dj;
            } else {
                let dk = d[k * n + a];
                if precedes(dk, key(&id, k, a), nnd[k], key(&id, k, nn[k])) {
                    nn[k] = a;
                    nnd[k] = dk;
                }
            }
        }
        if step + 2 < n {
            let (j, dj) = find_nn(a, &active, &id, &d);
            nn[a] = j;
            nnd[a] = dj;
        }
    }
    Dendrogram { n, merges }
}

impl<T: Scalar> Dendrogram<T> {
    pub fn heights(&self) -> Vec<T> {
        self.merges.iter().map(|m| m.height).collect()
    }

    /// Labels after applying the first `n − r` merges, numbered `0..r` in
    /// order of each cluster's smallest leaf.
    pub fn cut(&self, r: usize) -> Vec<usize> {
        let n = self.n;
        let r = r.clamp(1, n);
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut rep: Vec<usize> = (0..n).collect();
        for m in &self.merges[..n - r] {
            let (a, b) = (find(&mut parent, rep[m.left]), find(&mut parent, rep[m.right]));
            let (lo, hi) = (a.min(b), a.max(b));
            parent[hi] = lo;
            rep.push(lo);
        }
        let mut label = vec![usize::MAX; n];
        let mut out = vec![0; n];
        let mut next = 0;
        for leaf in 0..n {
            let root = find(&mut parent, leaf);
            if label[root] == usize::MAX {
                label[root] = next;
                next += 1;
            }
            out[leaf] = label[root];
        }
        out
    }
}

/// Member means per cluster (labels `0..r`).
pub fn centroids<T: Scalar>(vectors: &[&[T]], labels: &[usize], r: usize) -> (Vec<Vec<T>>, Vec<usize>) {
    let m = vectors.first().map_or(0, |v| v.len());
    let mut sums = vec![vec![T::zero(); m]; r];
    let mut sizes = vec![0usize; r];
    for (v, &l) in vectors.iter().zip(labels) {
        sizes[l] += 1;
        for (s, &x) in sums[l].iter_mut().zip(v.iter()) {
            *s = *s + x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&sizes) {
        if c > 0 {
            let c = T::of_usize(c);
            s.iter_mut().for_each(|x| *x = *x / c);
        }
    }
    (sums, sizes)
}

/// Davies-Bouldin index: S_i is the mean member-to-centroid distance,
/// M_ij the centroid distance; DBI = mean_i max_{j≠i} (S_i + S_j) / M_ij.
pub fn davies_bouldin<T: Scalar>(vectors: &[&[T]], labels: &[usize], r: usize) -> Result<T, ClusterError> {
    if r < 2 {
        return Err(ClusterError::TooFewClusters(r));
    }
    let (cent, sizes) = centroids(vectors, labels, r);
    if let Some(e) = sizes.iter().position(|&s| s == 0) {
        return Err(ClusterError::EmptyCluster(e));
    }
    let mut scatter = vec![T::zero(); r];
    for (v, &l) in vectors.iter().zip(labels) {
        scatter[l] = scatter[l] + euclidean(v, &cent[l]);
    }
    for (s, &c) in scatter.iter_mut().zip(&sizes) {
        *s = *s / T::of_usize(c);
    }
    let mut total = T::zero();
    for i in 0..r {
        let mut worst = T::neg_infinity();
        for j in 0..r {
            if i == j {
                continue;
            }
            let m = euclidean(&cent[i], &cent[j]);
            if m <= T::zero() {
                return Err(ClusterError::CoincidentCentroids(i.min(j), i.max(j)));
            }
            worst = worst.max((scatter[i] + scatter[j]) / m);
        }
        total = total + worst;
    }
    Ok(total / T::of_usize(r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbiPoint<T> {
    pub r: usize,
    pub cut_height: T,
    /// `None` when the cut is not realisable by a distance threshold or the
    /// index is undefined; `note` says which.
    pub dbi: Option<T>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel<T> {
    pub tower_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub r: usize,
    pub centroids: Vec<Vec<T>>,
    pub sizes: Vec<usize>,
    pub cut_threshold: T,
    pub dbi: T,
    pub trace: Vec<DbiPoint<T>>,
}

/// Build a model for a fixed labelling.
pub fn model_from_labels<T: Scalar>(
    tower_ids: Vec<String>,
    vectors: &[&[T]],
    labels: Vec<usize>,
    r: usize,
    cut_threshold: T,
) -> Result<ClusterModel<T>, ClusterError> {
    let dbi = davies_bouldin(vectors, &labels, r)?;
    let (centroids, sizes) = centroids(vectors, &labels, r);
    Ok(ClusterModel { tower_ids, labels, r, centroids, sizes, cut_threshold, dbi, trace: Vec::new() })
}

/// Evaluate DBI at every distinct cut giving `R ∈ [rmin, rmax]` and keep the
/// minimum (ties → smaller R).
pub fn tune_cut<T: Scalar>(
    dendrogram: &Dendrogram<T>,
    tower_ids: Vec<String>,
    vectors: &[&[T]],
    rmin: usize,
    rmax: usize,
) -> Result<ClusterModel<T>, ClusterError> {
    let n = dendrogram.n;
    if n < 3 {
        return Err(ClusterError::TooFew { need: 3, got: n });
    }
    if rmin < 2 || rmin > rmax {
        return Err(ClusterError::Range { rmin, rmax });
    }
    let h = dendrogram.heights();
    let hi = rmax.min(n - 1);
    let trace: Vec<(DbiPoint<T>, Option<Vec<usize>>)> = (rmin..=hi)
        .into_par_iter()
        .map(|r| {
            let (lower, upper) = (h[n - r - 1], h[n - r]);
            let cut_height = (lower + upper) / T::of(2.0);
            if !(upper > lower) {
                let note = Some("tied merge heights; no threshold yields this R".to_string());
                return (DbiPoint { r, cut_height, dbi: None, note }, None);
            }
            let labels = dendrogram.cut(r);
            match davies_bouldin(vectors, &labels, r) {
                Ok(v) => (DbiPoint { r, cut_height, dbi: Some(v), note: None }, Some(labels)),
                Err(e) => (DbiPoint { r, cut_height, dbi: None, note: Some(e.to_string()) }, None),
            }
        })
        .collect();
    let mut best: Option<usize> = None;
    for (i, (p, _)) in trace.iter().enumerate() {
        if let Some(v) = p.dbi {
            if best.map_or(true, |b| v < trace[b].0.dbi.expect("scored")) {
                best = Some(i);
            }
        }
    }
    let b = best.ok_or(ClusterError::NoValidCut { rmin, rmax })?;
    let (point, labels) = &trace[b];
    let labels = labels.clone().expect("scored cut has labels");
    let (centroids, sizes) = centroids(vectors, &labels, point.r);
    Ok(ClusterModel {
        tower_ids,
        labels,
        r: point.r,
        centroids,
        sizes,
        cut_threshold: point.cut_height,
        dbi: point.dbi.expect("scored"),
        trace: trace.into_iter().map(|(p, _)| p).collect(),
    })
}

/// Sorted member-to-centroid distances of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCdf<T> {
    pub cluster: usize,
    pub distances: Vec<T>,
}

impl<T: Scalar> ClusterCdf<T> {
    /// Smallest distance `x` with `F(x) ≥ q` (nearest rank).
    pub fn quantile(&self, q: f64) -> Option<T> {
        if self.distances.is_empty() {
            return None;
        }
        let n = self.distances.len();
        let k = ((q.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n);
        Some(self.distances[k - 1])
    }

    /// Fraction of members within distance `x`.
    pub fn cdf(&self, x: T) -> f64 {
        let k = self.distances.partition_point(|&d| d <= x);
        k as f64 / self.distances.len().max(1) as f64
    }
}

pub fn distance_cdf<T: Scalar>(model: &ClusterModel<T>, vectors: &[&[T]]) -> Vec<ClusterCdf<T>> {
    let mut per: Vec<Vec<T>> = vec![Vec::new(); model.r];
    for (v, &l) in vectors.iter().zip(&model.labels) {
        per[l].push(euclidean(v, &model.centroids[l]));
    }
    per.into_iter()
        .enumerate()
        .map(|(cluster, mut distances)| {
            distances.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            ClusterCdf { cluster, distances }
        })
        .collect()
}

/// Cluster sizes as percentages of all clustered towers.
pub fn cluster_shares(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&s| if total == 0 { 0.0 } else { s as f64 * 100.0 / total as f64 }).collect()
}
