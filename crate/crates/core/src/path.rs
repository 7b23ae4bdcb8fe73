//! Precipitation pathway in latent space and DSD evolution along it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsd::{mean_diameter, normalize_dsd, BinGrid, Dsd};
use crate::error::{Error, Result};
use crate::vae::{LatentPoint, LATENT_DIM};

pub const DEFAULT_K: usize = 1000;
pub const DEFAULT_N_NODES: usize = 16;
pub const DEFAULT_N_ITERS: usize = 30;
pub const DEFAULT_SUBSAMPLE_CAP: usize = 100_000;
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.25;
/// Kernel support radius in bandwidths; the neglected tail is below 1e-10.
const KDE_CUTOFF: f64 = 7.0;
const LEAF_SIZE: usize = 16;

#[inline]
pub fn dist2(a: &LatentPoint, b: &LatentPoint) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Neighbor candidate ordered by squared distance, then record index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub d2: f64,
    pub index: usize,
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

#[derive(Debug, Clone)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static 3-D k-d tree over latent points.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<LatentPoint>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn new(points: Vec<LatentPoint>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite latent point".into()));
        }
        let mut tree = Self { order: (0..points.len()).collect(), points, nodes: Vec::new() };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[LatentPoint] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; LATENT_DIM];
        let mut hi = [f64::NEG_INFINITY; LATENT_DIM];
        for &i in &self.order[start..end] {
            for d in 0..LATENT_DIM {
                lo[d] = lo[d].min(self.points[i][d]);
                hi[d] = hi[d].max(self.points[i][d]);
            }
        }
        let axis = (0..LATENT_DIM).fold(0, |best, d| if hi[d] - lo[d] > hi[best] - lo[best] { d } else { best });
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = KdNode::Split { axis, value, left, right };
        id
    }

    /// The k nearest points sorted by (distance, index).
    pub fn knn(&self, query: &LatentPoint, k: usize) -> Vec<Neighbor> {
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_visit(0, query, k, &mut heap);
        heap.into_sorted_vec()
    }

    fn knn_visit(&self, node: usize, q: &LatentPoint, k: usize, heap: &mut BinaryHeap<Neighbor>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    let cand = Neighbor { d2: dist2(q, &self.points[index]), index };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_visit(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.knn_visit(far, q, k, heap);
                }
            }
        }
    }

    /// Calls `f(index, d2)` for every point with squared distance at most `r2`.
    pub fn for_each_within<F: FnMut(usize, f64)>(&self, query: &LatentPoint, r2: f64, mut f: F) {
        if !self.is_empty() {
            self.within_visit(0, query, r2, &mut f);
        }
    }

    fn within_visit<F: FnMut(usize, f64)>(&self, node: usize, q: &LatentPoint, r2: f64, f: &mut F) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    let d2 = dist2(q, &self.points[index]);
                    if d2 <= r2 {
                        f(index, d2);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.within_visit(near, q, r2, f);
                if diff * diff <= r2 {
                    self.within_visit(far, q, r2, f);
                }
            }
        }
    }
}

/// Exhaustive k-nearest scan with the same ordering as [`KdTree::knn`].
pub fn brute_knn(points: &[LatentPoint], query: &LatentPoint, k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = points.iter().enumerate().map(|(index, p)| Neighbor { d2: dist2(query, p), index }).collect();
    all.sort();
    all.truncate(k);
    all
}

/// Sums in record order so the mean depends only on the neighbor set.
fn average_neighbors(neighbors: &[Neighbor], dsds: &[Dsd]) -> Result<Dsd> {
    let mut idx: Vec<usize> = neighbors.iter().map(|n| n.index).collect();
    idx.sort_unstable();
    let n_bins = dsds[idx[0]].len();
    let mut acc = vec![0.0; n_bins];
    for &i in &idx {
        let d = dsds[i].as_slice();
        if d.len() != n_bins {
            return Err(Error::InvalidData("spectra have differing bin counts".into()));
        }
        for (a, v) in acc.iter_mut().zip(d) {
            *a += v;
        }
    }
    let k = neighbors.len() as f64;
    normalize_dsd(&Dsd::new(acc.into_iter().map(|v| v / k).collect())?)
}

fn check_knn(n: usize, n_dsds: usize, k: usize) -> Result<()> {
    if n != n_dsds {
        return Err(Error::invalid(format!("{n} latent points but {n_dsds} spectra")));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={n}")));
    }
    Ok(())
}

/// Renormalized mean spectrum of the k records closest to `query`.
pub fn knn_average(query: &LatentPoint, tree: &KdTree, dsds: &[Dsd], k: usize) -> Result<Dsd> {
    check_knn(tree.len(), dsds.len(), k)?;
    average_neighbors(&tree.knn(query, k), dsds)
}

/// Same as [`knn_average`] with an exhaustive scan.
pub fn knn_average_brute(query: &LatentPoint, points: &[LatentPoint], dsds: &[Dsd], k: usize) -> Result<Dsd> {
    check_knn(points.len(), dsds.len(), k)?;
    average_neighbors(&brute_knn(points, query, k), dsds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoveltyWeightedPoint {
    pub z: LatentPoint,
    pub weight: f64,
}

/// Seeded subsample of at most `cap` points, kept in input order.
pub fn subsample(points: &[LatentPoint], cap: usize, seed: u64) -> Vec<LatentPoint> {
    if points.len() <= cap {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, points.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

/// Scott's rule bandwidth, n^(-1/7) times the mean per-axis standard deviation.
pub fn scott_bandwidth(points: &[LatentPoint]) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid("bandwidth needs at least two points"));
    }
    let mut sd_sum = 0.0;
    for d in 0..LATENT_DIM {
        let mean = points.iter().map(|p| p[d]).sum::<f64>() / n as f64;
        let var = points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        sd_sum += var.sqrt();
    }
    let h = sd_sum / LATENT_DIM as f64 * (n as f64).powf(-1.0 / (LATENT_DIM as f64 + 4.0));
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::DegenerateGeometry("point cloud has zero spread".into()));
    }
    Ok(h)
}

struct Kde {
    tree: KdTree,
    norm: f64,
    inv_two_h2: f64,
    r2: f64,
}

impl Kde {
    fn new(points: Vec<LatentPoint>, h: f64) -> Result<Self> {
        let n = points.len() as f64;
        let norm = 1.0 / (n * (2.0 * std::f64::consts::PI).powf(1.5) * h.powi(3));
        Ok(Self { tree: KdTree::new(points)?, norm, inv_two_h2: 0.5 / (h * h), r2: (KDE_CUTOFF * h).powi(2) })
    }

    fn density(&self, z: &LatentPoint) -> f64 {
        let mut s = 0.0;
        self.tree.for_each_within(z, self.r2, |_, d2| s += (-d2 * self.inv_two_h2).exp());
        s * self.norm
    }
}

/// Weights each late point by how much late-time density exceeds early-time density there.
pub fn novelty_points(
    early: &[LatentPoint],
    late: &[LatentPoint],
    bandwidth: f64,
    cap: usize,
    seed: u64,
) -> Result<Vec<NoveltyWeightedPoint>> {
    if early.is_empty() || late.is_empty() {
        return Err(Error::invalid("novelty weighting needs non-empty early and late sets"));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::invalid(format!("bandwidth {bandwidth} must be positive")));
    }
    if cap == 0 {
        return Err(Error::invalid("subsample cap must be positive"));
    }
    let early_kde = Kde::new(subsample(early, cap, seed), bandwidth)?;
    let late_kde = Kde::new(subsample(late, cap, seed), bandwidth)?;
    Ok(late
        .par_iter()
        .map(|z| NoveltyWeightedPoint { z: *z, weight: (late_kde.density(z) - early_kde.density(z)).max(0.0) })
        .collect())
}

/// Ordered polyline through latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    nodes: Vec<LatentPoint>,
    arc_length: Vec<f64>,
}

impl LatentPath {
    pub fn new(nodes: Vec<LatentPoint>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::DegenerateGeometry(format!("path needs at least 2 nodes, got {}", nodes.len())));
        }
        if nodes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateGeometry("non-finite path node".into()));
        }
        let mut arc_length = vec![0.0];
        for w in nodes.windows(2) {
            let seg = dist2(&w[0], &w[1]).sqrt();
            let next = arc_length.last().unwrap() + seg;
            if !(seg > 0.0 && next > *arc_length.last().unwrap()) {
                return Err(Error::DegenerateGeometry("consecutive path nodes coincide".into()));
            }
            arc_length.push(next);
        }
        Ok(Self { nodes, arc_length })
    }

    pub fn nodes(&self) -> &[LatentPoint] {
        &self.nodes
    }

    pub fn arc_length(&self) -> &[f64] {
        &self.arc_length
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn reversed(&self) -> Self {
        let mut nodes = self.nodes.clone();
        nodes.reverse();
        Self::new(nodes).expect("reversal keeps nodes distinct")
    }

    /// Reverses the path if its last node is closer to `start` than its first.
    pub fn oriented_from(&self, start: &LatentPoint) -> Self {
        if dist2(self.nodes.last().unwrap(), start) < dist2(&self.nodes[0], start) {
            self.reversed()
        } else {
            self.clone()
        }
    }

    /// `n_nodes` points equally spaced in arc length along the polyline.
    pub fn resampled(&self, n_nodes: usize) -> Result<Self> {
        if n_nodes < 2 {
            return Err(Error::invalid("resampling needs at least 2 nodes"));
        }
        let total = *self.arc_length.last().unwrap();
        let mut seg = 0;
        let nodes = (0..n_nodes)
            .map(|m| {
                let s = total * m as f64 / (n_nodes - 1) as f64;
                while seg + 2 < self.nodes.len() && self.arc_length[seg + 1] < s {
                    seg += 1;
                }
                let (a, b) = (self.nodes[seg], self.nodes[seg + 1]);
                let t = ((s - self.arc_length[seg]) / (self.arc_length[seg + 1] - self.arc_length[seg])).clamp(0.0, 1.0);
                std::array::from_fn(|d| a[d] + t * (b[d] - a[d]))
            })
            .collect();
        Self::new(nodes)
    }

    /// Arc-length parameter of the closest point on the polyline.
    pub fn project(&self, z: &LatentPoint) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for s in 0..self.nodes.len() - 1 {
            let (a, b) = (self.nodes[s], self.nodes[s + 1]);
            let ab: [f64; 3] = std::array::from_fn(|d| b[d] - a[d]);
            let len2 = dist2(&a, &b);
            let t = ((0..3).map(|d| (z[d] - a[d]) * ab[d]).sum::<f64>() / len2).clamp(0.0, 1.0);
            let p: LatentPoint = std::array::from_fn(|d| a[d] + t * ab[d]);
            let d2 = dist2(z, &p);
            if d2 < best.0 {
                best = (d2, self.arc_length[s] + t * (self.arc_length[s + 1] - self.arc_length[s]));
            }
        }
        best.1
    }

    /// Distance from `z` to the polyline.
    pub fn distance(&self, z: &LatentPoint) -> f64 {
        let mut best = f64::INFINITY;
        for s in 0..self.nodes.len() - 1 {
            let (a, b) = (self.nodes[s], self.nodes[s + 1]);
            let len2 = dist2(&a, &b);
            let t = ((0..3).map(|d| (z[d] - a[d]) * (b[d] - a[d])).sum::<f64>() / len2).clamp(0.0, 1.0);
            let p: LatentPoint = std::array::from_fn(|d| a[d] + t * (b[d] - a[d]));
            best = best.min(dist2(z, &p));
        }
        best.sqrt()
    }
}

/// Parses waypoints, one `z1 z2 z3` triple per line; `#` starts a comment.
pub fn parse_waypoints(text: &str) -> Result<Vec<LatentPoint>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::InvalidData(format!("waypoint line {}: {line:?}", ln + 1)))?;
        if v.len() != LATENT_DIM {
            return Err(Error::InvalidData(format!("waypoint line {} needs 3 values", ln + 1)));
        }
        out.push([v[0], v[1], v[2]]);
    }
    Ok(out)
}

/// Symmetric 3x3 eigen-decomposition by cyclic Jacobi rotations; columns of the result are eigenvectors.
fn symmetric_eigen(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off <= 1e-30 * (a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2)) || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for r in 0..3 {
                let (arp, arq) = (a[r][p], a[r][q]);
                a[r][p] = c * arp - s * arq;
                a[r][q] = s * arp + c * arq;
            }
            for r in 0..3 {
                let (apr, aqr) = (a[p][r], a[q][r]);
                a[p][r] = c * apr - s * aqr;
                a[q][r] = s * apr + c * aqr;
            }
            for r in 0..3 {
                let (vrp, vrq) = (v[r][p], v[r][q]);
                v[r][p] = c * vrp - s * vrq;
                v[r][q] = s * vrp + c * vrq;
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

/// Weighted mean and leading principal axis (sign fixed so the largest component is positive).
pub fn weighted_principal_axis(points: &[NoveltyWeightedPoint]) -> Result<(LatentPoint, LatentPoint, f64)> {
    let wsum: f64 = points.iter().map(|p| p.weight).sum();
    if !(wsum > 0.0) {
        return Err(Error::DegenerateGeometry("no positive weights".into()));
    }
    let mean: LatentPoint = std::array::from_fn(|d| points.iter().map(|p| p.weight * p.z[d]).sum::<f64>() / wsum);
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += p.weight * (p.z[r] - mean[r]) * (p.z[c] - mean[c]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|v| *v /= wsum);
    let (vals, vecs) = symmetric_eigen(cov);
    let top = (0..3).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
    let scale = mean.iter().map(|v| v * v).sum::<f64>() + 1.0;
    if !(vals[top] > 1e-24 * scale) {
        return Err(Error::DegenerateGeometry("weighted point cloud has rank 0".into()));
    }
    let mut axis: LatentPoint = std::array::from_fn(|r| vecs[r][top]);
    let big = (0..3).fold(0, |b, i| if axis[i].abs() > axis[b].abs() { i } else { b });
    if axis[big] < 0.0 {
        axis = axis.map(|v| -v);
    }
    Ok((mean, axis, vals[top]))
}

/// Weighted principal-curve fit with PCA initialization and 3-node smoothing.
pub fn fit_path(points: &[NoveltyWeightedPoint], n_nodes: usize, n_iters: usize) -> Result<LatentPath> {
    if n_nodes < 2 {
        return Err(Error::invalid("path needs at least 2 nodes"));
    }
    let pts: Vec<NoveltyWeightedPoint> = points.iter().copied().filter(|p| p.weight > 0.0).collect();
    if pts.len() < n_nodes {
        return Err(Error::invalid(format!(
            "{} positively weighted points, need at least {n_nodes}",
            pts.len()
        )));
    }
    if pts.iter().any(|p| !p.weight.is_finite() || p.z.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidData("non-finite novelty point".into()));
    }
    let (mean, axis, _) = weighted_principal_axis(&pts)?;
    let proj = |z: &LatentPoint| (0..3).map(|d| (z[d] - mean[d]) * axis[d]).sum::<f64>();
    let (tmin, tmax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let t = proj(&p.z);
        (lo.min(t), hi.max(t))
    });
    if !(tmax > tmin) {
        return Err(Error::DegenerateGeometry("points do not spread along the principal axis".into()));
    }
    let mut nodes: Vec<LatentPoint> = (0..n_nodes)
        .map(|m| {
            let t = tmin + (tmax - tmin) * m as f64 / (n_nodes - 1) as f64;
            std::array::from_fn(|d| mean[d] + t * axis[d])
        })
        .collect();
    if n_nodes == 2 {
        return LatentPath::new(nodes);
    }
    for _ in 0..n_iters {
        let prev = LatentPath::new(nodes.clone())?;
        let mut sums = vec![[0.0; 3]; n_nodes];
        let mut weights = vec![0.0; n_nodes];
        for p in &pts {
            let mut best = (f64::INFINITY, 0);
            for (n, node) in nodes.iter().enumerate() {
                let d2 = dist2(&p.z, node);
                if d2 < best.0 {
                    best = (d2, n);
                }
            }
            weights[best.1] += p.weight;
            for d in 0..3 {
                sums[best.1][d] += p.weight * p.z[d];
            }
        }
        let moved: Vec<LatentPoint> = (0..n_nodes)
            .map(|n| if weights[n] > 0.0 { sums[n].map(|s| s / weights[n]) } else { nodes[n] })
            .collect();
        let mut keyed: Vec<(f64, usize)> = moved.iter().enumerate().map(|(n, z)| (prev.project(z), n)).collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let ordered: Vec<LatentPoint> = keyed.iter().map(|&(_, n)| moved[n]).collect();
        nodes = (0..n_nodes)
            .map(|n| {
                if n == 0 || n == n_nodes - 1 {
                    ordered[n]
                } else {
                    std::array::from_fn(|d| (ordered[n - 1][d] + ordered[n][d] + ordered[n + 1][d]) / 3.0)
                }
            })
            .collect();
    }
    LatentPath::new(nodes)
}

/// Averaged spectrum at every path node.
pub fn path_evolution(path: &LatentPath, tree: &KdTree, dsds: &[Dsd], k: usize) -> Result<Vec<Dsd>> {
    check_knn(tree.len(), dsds.len(), k)?;
    path.nodes().par_iter().map(|z| knn_average(z, tree, dsds, k)).collect()
}

/// Path CSV: `node_index,arc_length,z1,z2,z3,m01..mNN,mean_diameter_mm`.
pub fn path_csv(path: &LatentPath, dsds: &[Dsd], grid: &BinGrid) -> Result<String> {
    if dsds.len() != path.len() {
        return Err(Error::invalid("one spectrum per node required"));
    }
    let mut out = String::from("node_index,arc_length,z1,z2,z3");
    for b in 1..=grid.n_bins() {
        let _ = write!(out, ",m{b:02}");
    }
    out.push_str(",mean_diameter_mm\n");
    for (n, (z, d)) in path.nodes().iter().zip(dsds).enumerate() {
        let _ = write!(out, "{n},{},{},{},{}", path.arc_length()[n], z[0], z[1], z[2]);
        for v in d.as_slice() {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", mean_diameter(d, grid)?);
    }
    Ok(out)
}

/// Fractional ranks (ties share their average rank).
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && values[idx[e]] == values[idx[s]] {
            e += 1;
        }
        let r = (s + e - 1) as f64 / 2.0 + 1.0;
        for &i in &idx[s..e] {
            out[i] = r;
        }
        s = e;
    }
    out
}

/// Spearman rank correlation; NaN when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Index ranges of the first and last `fraction` of `n_steps` time steps (at least one each).
pub fn early_late_split(n_steps: usize, fraction: f64) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    if n_steps < 2 || !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::invalid(format!("cannot split {n_steps} steps at fraction {fraction}")));
    }
    let m = ((n_steps as f64 * fraction).floor() as usize).max(1);
    Ok((0..m, n_steps - m..n_steps))
}
