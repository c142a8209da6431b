//! Diagonal-covariance Gaussian mixtures fit with EM.
//!
//! All density evaluation happens in log space. Responsibilities are computed
//! row-parallel, but every reduction over rows runs sequentially in row order,
//! so a fit is bit-stable regardless of the thread count.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor_io::DescriptorSet;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Array2<f64>,
    stds: Array2<f64>,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Array2<f64>, stds: Array2<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        if means.dim() != stds.dim() || means.nrows() != k || means.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "inconsistent mixture shapes: {} weights, means {:?}, stds {:?}",
                k,
                means.dim(),
                stds.dim()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}")));
        }
        if stds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("non-finite or non-positive mixture parameters".into()));
        }
        Ok(Self { weights, means, stds })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn stds(&self) -> &Array2<f64> {
        &self.stds
    }

    /// Per-component constant `log w_k - 1/2 sum_d (log 2pi + 2 log sigma_kd)`.
    fn log_norms(&self) -> Vec<f64> {
        self.stds
            .rows()
            .into_iter()
            .zip(&self.weights)
            .map(|(s, w)| w.ln() - 0.5 * s.iter().map(|sd| LN_2PI + 2.0 * sd.ln()).sum::<f64>())
            .collect()
    }

    /// Writes `log w_k + log N(x; mu_k, sigma_k^2)` into `out` and returns
    /// their log-sum-exp.
    fn joint_log_densities(&self, norms: &[f64], x: ArrayView1<f64>, out: &mut [f64]) -> f64 {
        for (k, o) in out.iter_mut().enumerate() {
            let mu = self.means.row(k);
            let sd = self.stds.row(k);
            let mut q = 0.0;
            for d in 0..x.len() {
                let z = (x[d] - mu[d]) / sd[d];
                q += z * z;
            }
            *o = norms[k] - 0.5 * q;
        }
        log_sum_exp(out)
    }

    fn check_dim(&self, actual: usize) -> Result<()> {
        if actual != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual,
            });
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Soft assignment of `x` to every component.
pub fn posterior(model: &GmmModel, x: ArrayView1<f64>) -> Result<Vec<f64>> {
    model.check_dim(x.len())?;
    let norms = model.log_norms();
    let mut g = vec![0.0; model.k()];
    posterior_into(model, &norms, x, &mut g);
    Ok(g)
}

pub(crate) fn posterior_into(model: &GmmModel, norms: &[f64], x: ArrayView1<f64>, out: &mut [f64]) -> f64 {
    let lse = model.joint_log_densities(norms, x, out);
    for g in out.iter_mut() {
        *g = (*g - lse).exp();
    }
    lse
}

/// Precomputed per-component constants for repeated posterior evaluation.
pub(crate) struct PosteriorCache<'a> {
    pub model: &'a GmmModel,
    norms: Vec<f64>,
}

impl<'a> PosteriorCache<'a> {
    pub fn new(model: &'a GmmModel) -> Self {
        Self {
            norms: model.log_norms(),
            model,
        }
    }

    pub fn posterior_into(&self, x: ArrayView1<f64>, out: &mut [f64]) -> f64 {
        posterior_into(self.model, &self.norms, x, out)
    }
}

/// Total data log-likelihood, summed over rows in order.
pub fn log_likelihood(model: &GmmModel, data: ArrayView2<f64>) -> Result<f64> {
    model.check_dim(data.ncols())?;
    let (_, lse) = responsibilities(model, data);
    Ok(lse.iter().sum())
}

fn responsibilities(model: &GmmModel, data: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let k = model.k();
    let cache = PosteriorCache::new(model);
    let mut gamma = Array2::zeros((data.nrows(), k));
    let mut lse = vec![0.0; data.nrows()];
    gamma
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(k)
        .zip(lse.par_iter_mut())
        .enumerate()
        .for_each(|(i, (g, l))| *l = cache.posterior_into(data.row(i), g));
    (gamma, lse)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub k: usize,
    pub em_iters: usize,
    pub sample_size: usize,
    pub seed: u64,
    /// Per-dimension variance floor, relative to the global column variance.
    pub variance_floor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 256,
            em_iters: 10,
            sample_size: 256_000,
            seed: 0,
            variance_floor: 1e-4,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.em_iters == 0 {
            return Err(Error::Config("gmm k and em_iters must be >= 1".into()));
        }
        if self.sample_size < self.k {
            return Err(Error::Config(format!(
                "gmm sample_size {} smaller than k {}",
                self.sample_size, self.k
            )));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::Config("variance floor must be positive".into()));
        }
        Ok(())
    }
}

/// A fitted model plus the data log-likelihood after initialization and
/// after every EM iteration.
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub model: GmmModel,
    pub log_likelihood: Vec<f64>,
}

pub fn gmm_fit(data: ArrayView2<f64>, cfg: &FitConfig) -> Result<GmmModel> {
    Ok(gmm_fit_traced(data, cfg)?.model)
}

pub fn gmm_fit_traced(data: ArrayView2<f64>, cfg: &FitConfig) -> Result<FitTrace> {
    if cfg.k == 0 || cfg.em_iters == 0 {
        return Err(Error::InvalidArgument("k and em_iters must be >= 1".into()));
    }
    let (n, d) = data.dim();
    if n == 0 || d == 0 {
        return Err(Error::Empty("gmm_fit on empty data".into()));
    }
    if cfg.k > n {
        return Err(Error::InvalidArgument(format!("k = {} exceeds {n} rows", cfg.k)));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite training data".into()));
    }

    let global_mean = data.mean_axis(Axis(0)).expect("n > 0");
    let global_var: Vec<f64> = (0..d)
        .map(|j| {
            data.column(j)
                .iter()
                .map(|x| (x - global_mean[j]).powi(2))
                .sum::<f64>()
                / n as f64
        })
        .collect();
    let floor: Vec<f64> = global_var
        .iter()
        .map(|v| (cfg.variance_floor * v).max(1e-12))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = kmeanspp_init(data, cfg.k, &floor, &global_var, &mut rng);
    let mut trace = Vec::with_capacity(cfg.em_iters + 1);
    for _ in 0..cfg.em_iters {
        let (gamma, lse) = responsibilities(&model, data);
        trace.push(lse.iter().sum::<f64>());
        model = m_step(data, &gamma, &lse, &floor, &global_var);
    }
    trace.push(log_likelihood(&model, data)?);
    Ok(FitTrace {
        model,
        log_likelihood: trace,
    })
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding, then one hard assignment to estimate weights and
/// per-cluster variances.
fn kmeanspp_init(
    data: ArrayView2<f64>,
    k: usize,
    floor: &[f64],
    global_var: &[f64],
    rng: &mut ChaCha8Rng,
) -> GmmModel {
    let (n, d) = data.dim();
    let mut centers = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = data
        .rows()
        .into_iter()
        .map(|r| sq_dist(r, data.row(centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            // all remaining points coincide with a center
            rng.random_range(0..n)
        };
        centers.push(pick);
        for (i, r) in data.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(r, data.row(pick)));
        }
    }

    let mut means = Array2::zeros((k, d));
    for (c, &i) in centers.iter().enumerate() {
        means.row_mut(c).assign(&data.row(i));
    }
    let mut counts = vec![0usize; k];
    let mut scatter = Array2::<f64>::zeros((k, d));
    for r in data.rows() {
        let (best, _) = (0..k)
            .map(|c| (c, sq_dist(r, means.row(c))))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        counts[best] += 1;
        for j in 0..d {
            scatter[[best, j]] += (r[j] - means[[best, j]]).powi(2);
        }
    }
    let mut stds = Array2::zeros((k, d));
    for c in 0..k {
        for j in 0..d {
            let var = if counts[c] >= 2 {
                scatter[[c, j]] / counts[c] as f64
            } else {
                global_var[j]
            };
            stds[[c, j]] = var.max(floor[j]).sqrt();
        }
    }
    let raw: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
    let total: f64 = raw.iter().sum();
    GmmModel {
        weights: raw.iter().map(|c| c / total).collect(),
        means,
        stds,
    }
}

fn m_step(
    data: ArrayView2<f64>,
    gamma: &Array2<f64>,
    lse: &[f64],
    floor: &[f64],
    global_var: &[f64],
) -> GmmModel {
    let (n, d) = data.dim();
    let k = gamma.ncols();
    let mut mass = vec![0.0; k];
    let mut means = Array2::<f64>::zeros((k, d));
    for (i, row) in data.rows().into_iter().enumerate() {
        for c in 0..k {
            let g = gamma[[i, c]];
            if g == 0.0 {
                continue;
            }
            mass[c] += g;
            let mut m = means.row_mut(c);
            for j in 0..d {
                m[j] += g * row[j];
            }
        }
    }
    let dead: Vec<bool> = mass.iter().map(|&m| m < 1e-10 * n as f64).collect();
    for c in 0..k {
        if !dead[c] {
            means.row_mut(c).mapv_inplace(|v| v / mass[c]);
        }
    }
    let mut var = Array2::<f64>::zeros((k, d));
    for (i, row) in data.rows().into_iter().enumerate() {
        for c in 0..k {
            let g = gamma[[i, c]];
            if g == 0.0 || dead[c] {
                continue;
            }
            for j in 0..d {
                var[[c, j]] += g * (row[j] - means[[c, j]]).powi(2);
            }
        }
    }

    // Dead components are re-seeded on the worst-explained rows.
    let mut worst: Vec<usize> = (0..n).collect();
    worst.sort_by(|&a, &b| lse[a].total_cmp(&lse[b]).then(a.cmp(&b)));
    let mut reseed = worst.into_iter();
    let mut weights = vec![0.0; k];
    let mut stds = Array2::zeros((k, d));
    for c in 0..k {
        if dead[c] {
            let i = reseed.next().unwrap_or(0);
            means.row_mut(c).assign(&data.row(i));
            weights[c] = 1.0 / n as f64;
            for j in 0..d {
                stds[[c, j]] = global_var[j].max(floor[j]).sqrt();
            }
        } else {
            weights[c] = mass[c] / n as f64;
            for j in 0..d {
                stds[[c, j]] = (var[[c, j]] / mass[c]).max(floor[j]).sqrt();
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GmmModel { weights, means, stds }
}

/// Draws `n` record positions out of `total`: uniformly without replacement
/// when `n <= total`, with replacement otherwise.
pub fn sample_positions(total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if total == 0 {
        return Vec::new();
    }
    if n <= total {
        rand::seq::index::sample(&mut rng, total, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..total)).collect()
    }
}

/// Maps a flat record position onto (set index, record index).
pub fn locate_positions(sets: &[DescriptorSet], positions: &[usize]) -> Vec<(usize, usize)> {
    let mut starts = Vec::with_capacity(sets.len());
    let mut acc = 0;
    for s in sets {
        starts.push(acc);
        acc += s.records.len();
    }
    positions
        .iter()
        .map(|&p| {
            let set = starts.partition_point(|&s| s <= p) - 1;
            // skip over empty sets that share the same start
            let set = (set..sets.len()).find(|&i| p - starts[i] < sets[i].records.len()).unwrap_or(set);
            (set, p - starts[set])
        })
        .collect()
}

/// Samples `n` raw descriptor rows of `channel` across all sets, ignoring labels.
pub fn sample_training_pool(
    sets: &[DescriptorSet],
    channel: &str,
    n: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let first = sets
        .iter()
        .find(|s| !s.records.is_empty())
        .ok_or_else(|| Error::Empty("no trajectory records to sample".into()))?;
    let ch = first.channel_index(channel)?;
    for s in sets {
        if s.channel_index(channel)? != ch || s.channels[ch] != first.channels[ch] {
            return Err(Error::ChannelMismatch(format!(
                "video `{}` lays out channel `{channel}` differently",
                s.video_id
            )));
        }
    }
    let total: usize = sets.iter().map(|s| s.records.len()).sum();
    let positions = sample_positions(total, n, seed);
    let dim = first.channels[ch].raw_dim;
    let mut out = Array2::zeros((positions.len(), dim));
    for (mut row, (s, r)) in out.rows_mut().into_iter().zip(locate_positions(sets, &positions)) {
        for (dst, &v) in row.iter_mut().zip(&sets[s].records[r].values[ch]) {
            *dst = v as f64;
        }
    }
    Ok(out)
}
