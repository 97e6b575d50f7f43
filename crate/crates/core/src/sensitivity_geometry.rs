//! Distances between assets in sensitivity space, PSD repair, single-linkage
//! clustering and the quasi-diagonal leaf order.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, sym_eigen, symmetrize};
use crate::par;
use crate::sensitivity_models::SensitivityMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Metric {
    #[default]
    Euclidean,
    Kernel {
        sigma: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
    pub metric: Metric,
    /// Set once the matrix has been replaced by its nearest PSD neighbour.
    #[serde(default)]
    pub psd_repaired: bool,
}

impl DistanceMatrix {
    /// Square, finite and symmetric to 1e-12 (relative to the largest entry).
    pub fn new(names: Vec<String>, values: DMatrix<f64>, metric: Metric) -> Result<Self> {
        let n = names.len();
        if values.shape() != (n, n) {
            return Err(Error::ShapeMismatch(format!("{n} names but matrix is {:?}", values.shape())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("distance matrix has non-finite entries".into()));
        }
        let scale = values.amax().max(1.0);
        if max_asymmetry(&values) > 1e-12 * scale {
            return Err(Error::InvalidInput("distance matrix is not symmetric".into()));
        }
        Ok(Self { names, values, metric, psd_repaired: false })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Zero diagonal and non-negative entries, as required of a raw distance.
    pub fn is_proper_distance(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| self.values[(i, i)] == 0.0) && self.values.iter().all(|v| *v >= 0.0)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let err = |e: csv::Error| Error::Csv { path: "<distance>".into(), reason: e.to_string() };
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::new()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (i, name) in self.names.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.values.row(i).iter().map(|v| format!("{v:.17e}")));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::Io { path: "<distance>".into(), source: e })
    }

    pub fn read_csv<R: Read>(input: R, label: &str, metric: Metric) -> Result<Self> {
        let err = |reason: String| Error::Csv { path: label.to_string(), reason };
        let mut r = csv::Reader::from_reader(input);
        let names: Vec<String> =
            r.headers().map_err(|e| err(e.to_string()))?.iter().skip(1).map(str::to_string).collect();
        let mut vals = Vec::with_capacity(names.len() * names.len());
        for rec in r.records() {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            for cell in rec.iter().skip(1) {
                vals.push(cell.trim().parse::<f64>().map_err(|e| err(format!("`{cell}`: {e}")))?);
            }
        }
        if vals.len() != names.len() * names.len() {
            return Err(err("matrix is not square".into()));
        }
        Self::new(names.clone(), DMatrix::from_row_slice(names.len(), names.len(), &vals), metric)
    }
}

/// Euclidean distance between every pair of sensitivity rows.
pub fn sensitivity_distance(s: &SensitivityMatrix) -> Result<DistanceMatrix> {
    let n = s.n_assets();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| s.row(i)).collect();
    let dist_rows = par::map_range(n, |i| {
        (0..n)
            .map(|j| rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .collect::<Vec<f64>>()
    });
    let values = DMatrix::from_fn(n, n, |i, j| dist_rows[i][j]);
    DistanceMatrix::new(s.assets.clone(), values, Metric::Euclidean)
}

/// Euclidean distance between columns of `d`, the distance-of-distances fed to
/// single linkage in the HRP lineage.
pub fn column_distance(d: &DistanceMatrix) -> Result<DistanceMatrix> {
    let n = d.len();
    let rows = par::map_range(n, |i| {
        (0..n)
            .map(|j| (0..n).map(|k| (d.values[(k, i)] - d.values[(k, j)]).powi(2)).sum::<f64>().sqrt())
            .collect::<Vec<f64>>()
    });
    let values = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    DistanceMatrix::new(d.names.clone(), values, Metric::Euclidean)
}

/// `sqrt((1 − ρ) / 2)` for a correlation matrix.
pub fn correlation_distance(names: &[String], corr: &DMatrix<f64>) -> Result<DistanceMatrix> {
    let values = corr.map(|r| ((1.0 - r.clamp(-1.0, 1.0)) / 2.0).sqrt());
    let mut d = DistanceMatrix::new(names.to_vec(), values, Metric::Euclidean)?;
    for i in 0..d.len() {
        d.values[(i, i)] = 0.0;
    }
    Ok(d)
}

/// Higham projection: clip negative eigenvalues to zero and rebuild.
///
/// A matrix whose smallest eigenvalue is already `>= -tol` is returned as is.
/// The diagonal is not reset afterwards.
pub fn nearest_psd(d: &DistanceMatrix, tol: f64) -> Result<DistanceMatrix> {
    if d.is_empty() {
        return Ok(d.clone());
    }
    let eig = sym_eigen(&d.values)?;
    if eig.eigenvalues.min() >= -tol {
        return Ok(DistanceMatrix { psd_repaired: true, ..d.clone() });
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let mut values = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut values);
    Ok(DistanceMatrix { names: d.names.clone(), values, metric: d.metric, psd_repaired: true })
}

/// One agglomeration step. Leaves are `0..n`; the cluster formed at step `k` has id `n + k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkageTree {
    pub n_leaves: usize,
    pub merges: Vec<Merge>,
    pub leaf_order: Vec<usize>,
}

impl LinkageTree {
    /// Leaves below cluster `id`, in leaf order.
    pub fn leaves_of(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect(id, &mut out);
        out
    }

    fn collect(&self, id: usize, out: &mut Vec<usize>) {
        if id < self.n_leaves {
            out.push(id);
        } else {
            let m = self.merges[id - self.n_leaves];
            let (first, second) = self.ordered_children(m);
            self.collect(first, out);
            self.collect(second, out);
        }
    }

    fn min_leaf(&self, id: usize) -> usize {
        if id < self.n_leaves {
            id
        } else {
            let m = self.merges[id - self.n_leaves];
            self.min_leaf(m.a).min(self.min_leaf(m.b))
        }
    }

    fn ordered_children(&self, m: Merge) -> (usize, usize) {
        if self.min_leaf(m.a) <= self.min_leaf(m.b) {
            (m.a, m.b)
        } else {
            (m.b, m.a)
        }
    }

    pub fn root(&self) -> usize {
        if self.merges.is_empty() {
            0
        } else {
            self.n_leaves + self.merges.len() - 1
        }
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Single-linkage agglomeration via a minimum spanning tree (Prim), merged in
/// order of edge weight. Ties are broken by the smaller endpoint pair.
pub fn single_linkage(d: &DistanceMatrix) -> Result<LinkageTree> {
    let n = d.len();
    if n == 0 {
        return Err(Error::InvalidInput("cannot cluster an empty matrix".into()));
    }
    let v = &d.values;
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n - 1);
    in_tree[0] = true;
    for j in 1..n {
        best[j] = v[(0, j)];
    }
    for _ in 1..n {
        let mut next = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (next == usize::MAX || best[j] < best[next]) {
                next = j;
            }
        }
        in_tree[next] = true;
        let (a, b) = (from[next].min(next), from[next].max(next));
        edges.push((best[next], a, b));
        for j in 0..n {
            if !in_tree[j] && v[(next, j)] < best[j] {
                best[j] = v[(next, j)];
                from[j] = next;
            }
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    // Union-find over leaves, tracking the current cluster id and size of each root.
    let mut parent: Vec<usize> = (0..n).collect();
    let mut cluster_id: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for (k, (h, i, j)) in edges.into_iter().enumerate() {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        let (ca, cb) = (cluster_id[ri], cluster_id[rj]);
        let s = size[ri] + size[rj];
        parent[rj] = ri;
        size[ri] = s;
        cluster_id[ri] = n + k;
        merges.push(Merge { a: ca.min(cb), b: ca.max(cb), height: h, size: s });
    }
    let mut tree = LinkageTree { n_leaves: n, merges, leaf_order: vec![] };
    tree.leaf_order = tree.leaves_of(tree.root());
    Ok(tree)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMode {
    #[default]
    Mean,
    Cumulative,
}

/// Elementwise mean or sum of a sequence of distance matrices over the same assets.
pub fn aggregate_trajectory(list: &[DistanceMatrix], mode: TrajectoryMode) -> Result<DistanceMatrix> {
    let first = list.first().ok_or_else(|| Error::ShapeMismatch("empty trajectory".into()))?;
    let mut sum = DMatrix::zeros(first.len(), first.len());
    for d in list {
        if d.names != first.names {
            return Err(Error::ShapeMismatch("trajectory matrices cover different assets".into()));
        }
        sum += &d.values;
    }
    let values = match mode {
        TrajectoryMode::Cumulative => sum,
        TrajectoryMode::Mean => sum / list.len() as f64,
    };
    Ok(DistanceMatrix { names: first.names.clone(), values, metric: first.metric, psd_repaired: false })
}

/// Gaussian kernel `exp(-d² / 2σ²)` applied elementwise.
pub fn kernelize(d: &DistanceMatrix, sigma: f64) -> Result<DistanceMatrix> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("kernel sigma must be positive, got {sigma}")));
    }
    let values = d.values.map(|x| (-x * x / (2.0 * sigma * sigma)).exp());
    Ok(DistanceMatrix { names: d.names.clone(), values, metric: Metric::Kernel { sigma }, psd_repaired: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use crate::rng::NormalStream;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("A{i}")).collect()
    }

    fn sens(rows: &[&[f64]]) -> SensitivityMatrix {
        let m = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        SensitivityMatrix::new(
            names(rows.len()),
            (0..m).map(|j| format!("D{j}")).collect(),
            DMatrix::from_row_slice(rows.len(), m, &flat),
        )
        .unwrap()
    }

    fn random_sens(seed: u64, n: usize, m: usize) -> SensitivityMatrix {
        let mut s = NormalStream::new(seed, 0);
        let vals = DMatrix::from_fn(n, m, |_, _| s.normal());
        SensitivityMatrix::new(names(n), (0..m).map(|j| format!("D{j}")).collect(), vals).unwrap()
    }

    fn dm(values: DMatrix<f64>) -> DistanceMatrix {
        DistanceMatrix::new(names(values.nrows()), values, Metric::Euclidean).unwrap()
    }

    #[test]
    fn three_four_five() {
        let d = sensitivity_distance(&sens(&[&[0.0, 0.0], &[3.0, 4.0], &[0.0, 0.0]])).unwrap();
        assert_eq!(d.values[(0, 1)], 5.0);
        assert_eq!(d.values[(0, 2)], 0.0);
        assert!(d.is_proper_distance());
    }

    #[test]
    fn matches_naive_double_loop() {
        let s = random_sens(1, 5, 3);
        let d = sensitivity_distance(&s).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += (s.values[(i, k)] - s.values[(j, k)]).powi(2);
                }
                assert!((d.values[(i, j)] - acc.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triangle_inequality_exhaustive() {
        let d = sensitivity_distance(&random_sens(2, 20, 4)).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                for k in 0..20 {
                    assert!(d.values[(i, k)] <= d.values[(i, j)] + d.values[(j, k)] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn psd_input_is_fixed_point() {
        let mut s = NormalStream::new(3, 0);
        let a = DMatrix::from_fn(4, 4, |_, _| s.normal());
        let p = &a * a.transpose();
        let out = nearest_psd(&dm(p.clone()), 1e-10).unwrap();
        assert!((out.values - p).amax() < 1e-12);
    }

    #[test]
    fn clips_single_negative_eigenvalue() {
        // Build Q diag(2, 1, 0.5, -0.1) Qᵀ with a random orthogonal Q.
        let mut s = NormalStream::new(4, 0);
        let q = DMatrix::from_fn(4, 4, |_, _| s.normal()).qr().q();
        let lam = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0, 0.5, -0.1]));
        let mut m = &q * lam * q.transpose();
        symmetrize(&mut m);
        let out = nearest_psd(&dm(m.clone()), 1e-10).unwrap();
        assert!(min_eigenvalue(&out.values).unwrap() >= -1e-10);
        assert!(((&out.values - &m).norm() - 0.1).abs() < 1e-9);
        let twice = nearest_psd(&out, 1e-10).unwrap();
        assert!((twice.values - &out.values).amax() < 1e-10);
    }

    #[test]
    fn distance_matrix_repair_is_idempotent() {
        let d = sensitivity_distance(&random_sens(5, 8, 3)).unwrap();
        let once = nearest_psd(&d, 1e-10).unwrap();
        let twice = nearest_psd(&once, 1e-10).unwrap();
        assert!((twice.values - &once.values).amax() < 1e-10);
        assert!(min_eigenvalue(&once.values).unwrap() >= -1e-10);
    }

    #[test]
    fn zero_matrix_stays_zero() {
        let out = nearest_psd(&dm(DMatrix::zeros(3, 3)), 1e-10).unwrap();
        assert_eq!(out.values, DMatrix::zeros(3, 3));
    }

    #[test]
    fn hand_agglomeration() {
        let d = dm(DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 5.0, 1.0, 0.0, 4.0, 5.0, 4.0, 0.0]));
        let t = single_linkage(&d).unwrap();
        assert_eq!(t.merges[0], Merge { a: 0, b: 1, height: 1.0, size: 2 });
        assert_eq!(t.merges[1], Merge { a: 2, b: 3, height: 4.0, size: 3 });
        assert_eq!(t.leaf_order, vec![0, 1, 2]);
    }

    #[test]
    fn two_points() {
        let t = single_linkage(&dm(DMatrix::from_row_slice(2, 2, &[0.0, 0.7, 0.7, 0.0]))).unwrap();
        assert_eq!(t.merges.len(), 1);
        assert_eq!(t.merges[0].height, 0.7);
    }

    /// Naive O(n³) single linkage: repeatedly merge the two clusters at minimum min-distance.
    fn naive_heights(v: &DMatrix<f64>) -> Vec<f64> {
        let n = v.nrows();
        let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let mut heights = Vec::new();
        while clusters.len() > 1 {
            let mut best = (f64::INFINITY, 0, 0);
            for a in 0..clusters.len() {
                for b in (a + 1)..clusters.len() {
                    let d = clusters[a]
                        .iter()
                        .flat_map(|&i| clusters[b].iter().map(move |&j| (i, j)))
                        .map(|(i, j)| v[(i, j)])
                        .fold(f64::INFINITY, f64::min);
                    if d < best.0 {
                        best = (d, a, b);
                    }
                }
            }
            let merged = clusters.remove(best.2);
            clusters[best.1].extend(merged);
            heights.push(best.0);
        }
        heights
    }

    #[test]
    fn mst_heights_match_naive_agglomeration() {
        for seed in 0..10 {
            let d = sensitivity_distance(&random_sens(10 + seed, 9, 3)).unwrap();
            let t = single_linkage(&d).unwrap();
            let h: Vec<f64> = t.merges.iter().map(|m| m.height).collect();
            assert_eq!(h, naive_heights(&d.values));
            assert!(h.windows(2).all(|w| w[0] <= w[1]));
            let mut order = t.leaf_order.clone();
            order.sort();
            assert_eq!(order, (0..9).collect::<Vec<_>>());
        }
    }

    #[test]
    fn scaling_preserves_tree() {
        let d = sensitivity_distance(&random_sens(6, 7, 2)).unwrap();
        let scaled = DistanceMatrix { values: &d.values * 3.7, ..d.clone() };
        let (a, b) = (single_linkage(&d).unwrap(), single_linkage(&scaled).unwrap());
        assert_eq!(a.leaf_order, b.leaf_order);
        for (x, y) in a.merges.iter().zip(&b.merges) {
            assert_eq!((x.a, x.b, x.size), (y.a, y.b, y.size));
        }
    }

    #[test]
    fn relabeling_is_equivariant() {
        let d = sensitivity_distance(&random_sens(7, 8, 3)).unwrap();
        let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
        let pv = DMatrix::from_fn(8, 8, |i, j| d.values[(perm[i], perm[j])]);
        let (t, tp) = (single_linkage(&d).unwrap(), single_linkage(&dm(pv)).unwrap());
        // Every cluster, mapped back through the permutation, is a cluster of the original tree
        // at the same height, and the mapped leaf order keeps every cluster contiguous.
        let as_sets = |tree: &LinkageTree, map: &dyn Fn(usize) -> usize| -> Vec<(u64, Vec<usize>)> {
            let mut out: Vec<(u64, Vec<usize>)> = (0..tree.merges.len())
                .map(|k| {
                    let mut leaves: Vec<usize> = tree.leaves_of(tree.n_leaves + k).into_iter().map(map).collect();
                    leaves.sort();
                    (tree.merges[k].height.to_bits(), leaves)
                })
                .collect();
            out.sort();
            out
        };
        assert_eq!(as_sets(&t, &|i| i), as_sets(&tp, &|i| perm[i]));
        let mapped: Vec<usize> = tp.leaf_order.iter().map(|&i| perm[i]).collect();
        for (_, leaves) in as_sets(&t, &|i| i) {
            let pos: Vec<usize> = leaves.iter().map(|l| mapped.iter().position(|x| x == l).unwrap()).collect();
            let (lo, hi) = (pos.iter().min().unwrap(), pos.iter().max().unwrap());
            assert_eq!(hi - lo + 1, leaves.len());
        }
    }

    #[test]
    fn trajectory_aggregation() {
        let d = sensitivity_distance(&random_sens(8, 5, 2)).unwrap();
        let list = vec![d.clone(); 4];
        let cum = aggregate_trajectory(&list, TrajectoryMode::Cumulative).unwrap();
        assert!((&cum.values - &d.values * 4.0).amax() < 1e-12);
        let mean = aggregate_trajectory(std::slice::from_ref(&d), TrajectoryMode::Mean).unwrap();
        assert_eq!(mean.values, d.values);
        let other = DistanceMatrix { names: names(5).into_iter().rev().collect(), ..d };
        assert!(matches!(aggregate_trajectory(&[mean, other], TrajectoryMode::Mean), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mean_and_cumulative_cluster_identically() {
        for seed in 0..10 {
            let list: Vec<DistanceMatrix> =
                (0..6).map(|t| sensitivity_distance(&random_sens(100 * seed + t, 7, 3)).unwrap()).collect();
            let mean = aggregate_trajectory(&list, TrajectoryMode::Mean).unwrap();
            let cum = aggregate_trajectory(&list, TrajectoryMode::Cumulative).unwrap();
            assert!((&cum.values - &mean.values * 6.0).amax() < 1e-12);
            assert_eq!(single_linkage(&mean).unwrap().leaf_order, single_linkage(&cum).unwrap().leaf_order);
        }
    }

    #[test]
    fn kernel_properties() {
        let d = sensitivity_distance(&random_sens(9, 4, 2)).unwrap();
        let k = kernelize(&d, 0.8).unwrap();
        for i in 0..4 {
            assert_eq!(k.values[(i, i)], 1.0);
        }
        assert!(min_eigenvalue(&k.values).unwrap() > 0.0);
        let bounded = DistanceMatrix { values: d.values.map(|v| v.min(1.0)), ..d };
        let flat = kernelize(&bounded, 1e6).unwrap();
        assert!(flat.values.iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(kernelize(&bounded, 0.0).is_err());
    }

    #[test]
    fn column_distance_matches_loop() {
        let d = sensitivity_distance(&random_sens(12, 4, 2)).unwrap();
        let c = column_distance(&d).unwrap();
        let mut acc = 0.0;
        for k in 0..4 {
            acc += (d.values[(k, 1)] - d.values[(k, 3)]).powi(2);
        }
        assert!((c.values[(1, 3)] - acc.sqrt()).abs() < 1e-12);
        assert!(c.is_proper_distance());
    }

    #[test]
    fn correlation_distance_endpoints() {
        let corr = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let d = correlation_distance(&names(2), &corr).unwrap();
        assert_eq!(d.values[(0, 1)], 1.0);
        assert_eq!(d.values[(0, 0)], 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let d = sensitivity_distance(&random_sens(11, 3, 2)).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = DistanceMatrix::read_csv(buf.as_slice(), "mem", Metric::Euclidean).unwrap();
        assert_eq!(back.values, d.values);
        assert_eq!(back.names, d.names);
    }
}
