//! Diversity and fidelity measures on embedded samples.
//!
//! All distances are Euclidean in the embedding space, which stands in for a
//! perceptual metric. Absolute values are only meaningful relative to one
//! another within the same world.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::{dense, Tensor};

/// Sum of squared distances to the column mean.
pub fn sse_compactness(f: &Tensor) -> f64 {
    let d = f.cols();
    let n = f.rows() as f64;
    let mut center = vec![0.0; d];
    for r in f.iter_rows() {
        center.iter_mut().zip(r).for_each(|(c, x)| *c += x / n);
    }
    f.iter_rows().map(|r| dense::sq_dist(r, &center)).sum()
}

/// Full symmetric distance matrix, row-major `S x S`.
pub fn pairwise_distances(f: &Tensor) -> Vec<f64> {
    let s = f.rows();
    let mut out = vec![0.0; s * s];
    for i in 0..s {
        for j in i + 1..s {
            let v = dense::dist(f.row_slice(i), f.row_slice(j));
            out[i * s + j] = v;
            out[j * s + i] = v;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    /// Row index of each cluster's medoid, ascending.
    pub medoids: Vec<usize>,
    /// Cluster id (position in `medoids`) of every row.
    pub membership: Vec<usize>,
    /// Sum of distances from each row to its medoid.
    pub cost: f64,
    /// Cost after the build phase and after every accepted swap.
    pub cost_trace: Vec<f64>,
}

/// Nearest and second-nearest medoid distances for every point.
fn nearest_two(dist: &[f64], s: usize, medoids: &[usize]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut near = vec![0; s];
    let mut d1 = vec![f64::INFINITY; s];
    let mut d2 = vec![f64::INFINITY; s];
    for j in 0..s {
        for (c, &m) in medoids.iter().enumerate() {
            let v = dist[m * s + j];
            if v < d1[j] {
                d2[j] = d1[j];
                d1[j] = v;
                near[j] = c;
            } else if v < d2[j] {
                d2[j] = v;
            }
        }
    }
    (near, d1, d2)
}

/// Medoid sets up to this count are searched exhaustively; swap search can
/// stall in local optima even on four points.
pub const EXACT_KMEDOIDS_LIMIT: u64 = 20_000;

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k) as u64;
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(n as u64 - i) {
            Some(v) => v / (i + 1),
            None => return u64::MAX,
        };
    }
    acc
}

/// k-medoids on a precomputed distance matrix: exact when there are at most
/// [`EXACT_KMEDOIDS_LIMIT`] candidate medoid sets, PAM otherwise.
pub fn kmedoids_from_distances(dist: &[f64], s: usize, k: usize, max_iters: usize) -> Result<ClusterAssignment> {
    if k == 0 || k > s {
        return Err(Error::usage(format!("k-medoids needs 1 <= k <= {s}, got k = {k}")));
    }
    if binomial(s, k) <= EXACT_KMEDOIDS_LIMIT {
        return Ok(exhaustive(dist, s, k));
    }
    pam(dist, s, k, max_iters)
}

/// Every k-subset in lexicographic order; the first minimum wins.
fn exhaustive(dist: &[f64], s: usize, k: usize) -> ClusterAssignment {
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best = (medoid_cost(dist, s, &idx), idx.clone());
    loop {
        let Some(i) = (0..k).rev().find(|&i| idx[i] < s - k + i) else { break };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
        let c = medoid_cost(dist, s, &idx);
        if c < best.0 {
            best = (c, idx.clone());
        }
    }
    finish(dist, s, best.1, best.0, vec![best.0])
}

/// PAM: greedy build, then best-improvement swaps until none lowers the cost
/// or `max_iters` swaps were made. Ties are broken toward the lowest row index.
pub fn pam(dist: &[f64], s: usize, k: usize, max_iters: usize) -> Result<ClusterAssignment> {
    if k == 0 || k > s {
        return Err(Error::usage(format!("k-medoids needs 1 <= k <= {s}, got k = {k}")));
    }
    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    let mut best_d = vec![f64::INFINITY; s];
    let mut is_med = vec![false; s];
    for _ in 0..k {
        let mut pick = (f64::INFINITY, usize::MAX);
        for c in (0..s).filter(|&c| !is_med[c]) {
            let cost: f64 = (0..s).map(|j| best_d[j].min(dist[c * s + j])).sum();
            if cost < pick.0 {
                pick = (cost, c);
            }
        }
        let c = pick.1;
        medoids.push(c);
        is_med[c] = true;
        for j in 0..s {
            best_d[j] = best_d[j].min(dist[c * s + j]);
        }
    }
    let mut cost: f64 = best_d.iter().sum();
    let mut trace = vec![cost];

    for _ in 0..max_iters {
        let (near, d1, d2) = nearest_two(dist, s, &medoids);
        let mut best = (0.0, usize::MAX, usize::MAX);
        for (ci, _) in medoids.iter().enumerate() {
            for o in (0..s).filter(|&o| !is_med[o]) {
                let mut delta = 0.0;
                for j in 0..s {
                    let dj = dist[o * s + j];
                    delta += if near[j] == ci { d2[j].min(dj) } else { d1[j].min(dj) } - d1[j];
                }
                if delta < best.0 - 1e-12 * cost.max(1.0) {
                    best = (delta, ci, o);
                }
            }
        }
        if best.1 == usize::MAX {
            break;
        }
        is_med[medoids[best.1]] = false;
        is_med[best.2] = true;
        medoids[best.1] = best.2;
        let (_, d1, _) = nearest_two(dist, s, &medoids);
        cost = d1.iter().sum();
        trace.push(cost);
    }
    Ok(finish(dist, s, medoids, cost, trace))
}

fn finish(dist: &[f64], s: usize, mut medoids: Vec<usize>, cost: f64, trace: Vec<f64>) -> ClusterAssignment {
    medoids.sort_unstable();
    let mut membership = vec![0; s];
    for (j, m) in membership.iter_mut().enumerate() {
        let mut bd = f64::INFINITY;
        for (c, &md) in medoids.iter().enumerate() {
            if dist[md * s + j] < bd {
                bd = dist[md * s + j];
                *m = c;
            }
        }
    }
    // A medoid always belongs to its own cluster, even when another medoid is at distance 0.
    for (c, &md) in medoids.iter().enumerate() {
        membership[md] = c;
    }
    ClusterAssignment { medoids, membership, cost, cost_trace: trace }
}

pub fn kmedoids(f: &Tensor, k: usize, max_iters: usize) -> Result<ClusterAssignment> {
    kmedoids_from_distances(&pairwise_distances(f), f.rows(), k, max_iters)
}

/// Total cost of a given medoid choice.
pub fn medoid_cost(dist: &[f64], s: usize, medoids: &[usize]) -> f64 {
    (0..s).map(|j| medoids.iter().map(|&m| dist[m * s + j]).fold(f64::INFINITY, f64::min)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diversity {
    /// Unweighted mean over clusters of each cluster's mean pairwise distance.
    pub avg: f64,
    /// Mean over the pooled intra-cluster pairs.
    pub all: f64,
    /// Standard deviation over the pooled pairs.
    pub all_std: f64,
}

/// Aggregates per-cluster pairwise-distance lists; clusters with no pairs are skipped.
pub fn aggregate_diversity(pair_sets: &[Vec<f64>]) -> Result<Diversity> {
    let used: Vec<&Vec<f64>> = pair_sets.iter().filter(|p| !p.is_empty()).collect();
    if used.is_empty() {
        return Err(Error::Degenerate("every cluster is a singleton; intra-cluster diversity is undefined".into()));
    }
    let avg = used.iter().map(|p| p.iter().sum::<f64>() / p.len() as f64).sum::<f64>() / used.len() as f64;
    let n: usize = used.iter().map(|p| p.len()).sum();
    let all = used.iter().flat_map(|p| p.iter()).sum::<f64>() / n as f64;
    let var = used.iter().flat_map(|p| p.iter()).map(|x| (x - all) * (x - all)).sum::<f64>() / n as f64;
    Ok(Diversity { avg, all, all_std: var.sqrt() })
}

pub fn intra_cluster_diversity(f: &Tensor, k: usize) -> Result<Diversity> {
    let s = f.rows();
    let dist = pairwise_distances(f);
    let ca = kmedoids_from_distances(&dist, s, k, 100)?;
    let mut sets = vec![Vec::new(); k];
    for i in 0..s {
        for j in i + 1..s {
            if ca.membership[i] == ca.membership[j] {
                sets[ca.membership[i]].push(dist[i * s + j]);
            }
        }
    }
    aggregate_diversity(&sets)
}

fn mean_cov(f: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (s, d) = (f.rows(), f.cols());
    let m = DMatrix::from_row_slice(s, d, f.data());
    let mu = m.row_mean().transpose();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = c.transpose() * &c / (s as f64 - 1.0);
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym
        .try_symmetric_eigen(1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits (unbiased covariance) of two sets.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() < 2 || b.rows() < 2 || a.cols() != b.cols() {
        return Err(Error::usage(format!(
            "Fréchet distance needs two sets of at least 2 rows with equal width, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let ra = sym_sqrt(&ca)?;
    let inner = &ra * &cb * &ra;
    let cross = sym_sqrt(&inner)?;
    let v = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(v.max(0.0))
}

/// Distance from every row to its `k`-th nearest other row of the same set.
fn knn_radii(dist: &[f64], s: usize, k: usize) -> Vec<f64> {
    (0..s)
        .map(|i| {
            let mut row: Vec<f64> = (0..s).filter(|&j| j != i).map(|j| dist[i * s + j]).collect();
            row.sort_by(f64::total_cmp);
            row[k - 1]
        })
        .collect()
}

fn coverage(manifold: &Tensor, radii: &[f64], queries: &Tensor) -> f64 {
    let hits = queries
        .iter_rows()
        .filter(|q| manifold.iter_rows().zip(radii).any(|(m, r)| dense::dist(q, m) <= *r))
        .count();
    hits as f64 / queries.rows() as f64
}

/// kNN-manifold precision and recall of `fake` against `real`.
pub fn precision_recall(real: &Tensor, fake: &Tensor, k: usize) -> Result<(f64, f64)> {
    if k == 0 || real.rows() <= k || fake.rows() <= k {
        return Err(Error::usage(format!(
            "precision/recall needs more than k = {k} rows in each set, got {} and {}",
            real.rows(),
            fake.rows()
        )));
    }
    if real.cols() != fake.cols() {
        return Err(Error::usage("precision/recall sets differ in width"));
    }
    let rr = knn_radii(&pairwise_distances(real), real.rows(), k);
    let fr = knn_radii(&pairwise_distances(fake), fake.rows(), k);
    Ok((coverage(real, &rr, fake), coverage(fake, &fr, real)))
}

/// One row of a training log. Loss fields are present every iteration,
/// sample metrics only on evaluation iterations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub iter: usize,
    pub loss_dir: Option<f64>,
    pub loss_dm: Option<f64>,
    pub loss_ewc: Option<f64>,
    pub loss_rel: Option<f64>,
    pub loss_total: Option<f64>,
    pub sse: Option<f64>,
    pub diversity_avg: Option<f64>,
    pub diversity_all: Option<f64>,
    pub frechet: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 12] = [
        "iter",
        "loss_dir",
        "loss_dm",
        "loss_ewc",
        "loss_rel",
        "loss_total",
        "sse",
        "diversity_avg",
        "diversity_all",
        "frechet",
        "precision",
        "recall",
    ];

    /// Values after `iter`, in column order.
    pub fn values(&self) -> [Option<f64>; 11] {
        [
            self.loss_dir,
            self.loss_dm,
            self.loss_ewc,
            self.loss_rel,
            self.loss_total,
            self.sse,
            self.diversity_avg,
            self.diversity_all,
            self.frechet,
            self.precision,
            self.recall,
        ]
    }

    pub fn from_values(iter: usize, v: [Option<f64>; 11]) -> Self {
        MetricsReport {
            iter,
            loss_dir: v[0],
            loss_dm: v[1],
            loss_ewc: v[2],
            loss_rel: v[3],
            loss_total: v[4],
            sse: v[5],
            diversity_avg: v[6],
            diversity_all: v[7],
            frechet: v[8],
            precision: v[9],
            recall: v[10],
        }
    }
}

/// Sample-quality metrics of generated features against real ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub sse: f64,
    pub diversity: Diversity,
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn sample_metrics(fake: &Tensor, real: &Tensor, k_clusters: usize, k_nn: usize) -> Result<SampleMetrics> {
    let (precision, recall) = precision_recall(real, fake, k_nn)?;
    Ok(SampleMetrics {
        sse: sse_compactness(fake),
        diversity: intra_cluster_diversity(fake, k_clusters)?,
        frechet: frechet_distance(fake, real)?,
        precision,
        recall,
    })
}
