//! PCA by covariance or Gram-matrix eigendecomposition, whitening, and the
//! frozen dimensionality-reduction layer built from a whitened PCA.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff below which components count as rank-deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Output dimension of a PCA fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaTarget {
    /// Keep exactly this many components.
    Dim(usize),
    /// Keep the fewest components whose eigenvalue mass reaches this fraction.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaPath {
    /// Covariance when n >= d, Gram matrix otherwise.
    Auto,
    Covariance,
    Gram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionModel {
    pub mean: Vec<f64>,
    /// r x d, orthonormal rows.
    pub basis: Array2<f64>,
    /// Population-covariance eigenvalues, descending.
    pub eigvals: Vec<f64>,
    pub whiten: bool,
}

impl ReductionModel {
    pub fn input_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (r, d) = self.basis.dim();
        if r == 0 || self.mean.len() != d || self.eigvals.len() != r {
            return Err(Error::InvalidArgument(format!(
                "inconsistent reduction model: basis {r}x{d}, mean {}, eigvals {}",
                self.mean.len(),
                self.eigvals.len()
            )));
        }
        if self.eigvals.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidArgument("non-positive eigenvalue".into()));
        }
        Ok(())
    }
}

pub fn pca_fit(x: ArrayView2<f64>, target: PcaTarget, whiten: bool) -> Result<ReductionModel> {
    pca_fit_with(x, target, whiten, PcaPath::Auto)
}

pub fn pca_fit_with(
    x: ArrayView2<f64>,
    target: PcaTarget,
    whiten: bool,
    path: PcaPath,
) -> Result<ReductionModel> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("pca needs at least 2 rows, got {n}")));
    }
    if d == 0 {
        return Err(Error::Empty("pca on zero-width data".into()));
    }
    match target {
        PcaTarget::Dim(0) => return Err(Error::InvalidArgument("pca target dimension 0".into())),
        PcaTarget::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
            return Err(Error::InvalidArgument(format!("variance fraction {f} outside (0,1]")))
        }
        _ => {}
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite pca input".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &x - &mean;
    let path = match path {
        PcaPath::Auto if n >= d => PcaPath::Covariance,
        PcaPath::Auto => PcaPath::Gram,
        p => p,
    };

    let (eigvals, vectors) = match path {
        PcaPath::Covariance => {
            let cov = centered.t().dot(&centered) / n as f64;
            let (vals, vecs) = sym_eigen_desc(&cov);
            (vals, vecs)
        }
        PcaPath::Gram => {
            // G = Xc Xc^t; covariance eigenvectors are Xc^t v / sqrt(lambda_G)
            let gram = centered.dot(&centered.t());
            let (vals, vecs) = sym_eigen_desc(&gram);
            let lifted = centered.t().dot(&vecs);
            let mut u = Array2::zeros((d, vals.len()));
            for (i, &l) in vals.iter().enumerate() {
                if l > 0.0 {
                    let s = 1.0 / l.sqrt();
                    u.column_mut(i).assign(&lifted.column(i).mapv(|v| v * s));
                }
            }
            (vals.iter().map(|l| l / n as f64).collect(), u)
        }
        PcaPath::Auto => unreachable!(),
    };

    let lambda_max = eigvals.first().copied().unwrap_or(0.0).max(0.0);
    let rank = eigvals
        .iter()
        .take_while(|&&l| l > RANK_TOLERANCE * lambda_max && l > 0.0)
        .count();
    let r = match target {
        PcaTarget::Dim(r) => {
            if r > rank {
                return Err(Error::RankDeficient { requested: r, rank });
            }
            r
        }
        PcaTarget::Fraction(f) => {
            let total: f64 = eigvals.iter().filter(|l| **l > 0.0).sum();
            let mut acc = 0.0;
            let mut r = rank;
            for (i, l) in eigvals[..rank].iter().enumerate() {
                acc += l;
                if acc >= f * total {
                    r = i + 1;
                    break;
                }
            }
            r.max(1)
        }
    };
    if r == 0 {
        return Err(Error::RankDeficient { requested: 1, rank: 0 });
    }

    let mut basis = Array2::zeros((r, d));
    for i in 0..r {
        let mut row = vectors.column(i).to_owned();
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm);
        let pivot = row
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            row.mapv_inplace(|v| -v);
        }
        basis.row_mut(i).assign(&row);
    }
    Ok(ReductionModel {
        mean: mean.to_vec(),
        basis,
        eigvals: eigvals[..r].to_vec(),
        whiten,
    })
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending and
/// eigenvectors as matching columns.
fn sym_eigen_desc(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// `Z = (rows - mean) P^t`, divided per component by `sqrt(lambda)` when whitening.
pub fn project(model: &ReductionModel, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
    if rows.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: rows.ncols(),
        });
    }
    let mean = ndarray::ArrayView1::from(&model.mean[..]);
    let mut z = (&rows - &mean).dot(&model.basis.t());
    if model.whiten {
        for (mut col, l) in z.axis_iter_mut(Axis(1)).zip(&model.eigvals) {
            let s = 1.0 / l.sqrt();
            col.mapv_inplace(|v| v * s);
        }
    }
    Ok(z)
}

/// Frozen first layer of the hybrid net: `l2_normalize(W x + b)` with the
/// whitened PCA folded into `W` and the centering into `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionLayer {
    /// r x d.
    pub weights: Array2<f64>,
    pub offset: Vec<f64>,
}

pub fn reduction_layer_weights(model: &ReductionModel) -> Result<ReductionLayer> {
    if !model.whiten {
        return Err(Error::InvalidArgument(
            "reduction layer requires a whitened PCA model".into(),
        ));
    }
    let mut weights = model.basis.clone();
    for (mut row, l) in weights.rows_mut().into_iter().zip(&model.eigvals) {
        let s = 1.0 / l.sqrt();
        row.mapv_inplace(|v| v * s);
    }
    let offset = weights.dot(&ndarray::ArrayView1::from(&model.mean[..])).mapv(|v| -v).to_vec();
    Ok(ReductionLayer { weights, offset })
}

impl ReductionLayer {
    pub fn apply(&self, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
        if rows.ncols() != self.weights.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.ncols(),
                actual: rows.ncols(),
            });
        }
        let mut z = rows.dot(&self.weights.t()) + ndarray::ArrayView1::from(&self.offset[..]);
        l2_rows(&mut z);
        Ok(z)
    }
}

pub(crate) fn l2_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    fn population_cov(z: &Array2<f64>) -> Array2<f64> {
        let mean = z.mean_axis(Axis(0)).unwrap();
        let c = z - &mean;
        c.t().dot(&c) / z.nrows() as f64
    }

    #[test]
    fn axis_aligned_picks_major_axis() {
        // variances 4 and 1 along e1 and e2
        let x = array![[2.0, 1.0], [-2.0, 1.0], [2.0, -1.0], [-2.0, -1.0]];
        let m = pca_fit(x.view(), PcaTarget::Dim(1), false).unwrap();
        assert!((m.basis[[0, 0]].abs() - 1.0).abs() < 1e-12);
        assert!(m.basis[[0, 1]].abs() < 1e-12);
        assert!((m.eigvals[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn gram_and_covariance_paths_agree() {
        let x = random(10, 50, 3);
        let cov = pca_fit_with(x.view(), PcaTarget::Dim(5), false, PcaPath::Covariance).unwrap();
        let gram = pca_fit_with(x.view(), PcaTarget::Dim(5), false, PcaPath::Gram).unwrap();
        let a = project(&cov, x.view()).unwrap();
        let b = project(&gram, x.view()).unwrap();
        for j in 0..5 {
            let s = if a.column(j).dot(&b.column(j)) < 0.0 { -1.0 } else { 1.0 };
            for i in 0..10 {
                assert!((a[[i, j]] - s * b[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gram_layer_matches_closed_form() {
        // W1 = V^t Xc Lambda_G^{-1} sqrt(n), rows sign-aligned with the layer
        let (n, d) = (8, 20);
        let x = random(n, d, 9);
        let m = pca_fit_with(x.view(), PcaTarget::Dim(4), true, PcaPath::Gram).unwrap();
        let layer = reduction_layer_weights(&m).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        let xc = &x - &mean;
        let (vals, vecs) = sym_eigen_desc(&xc.dot(&xc.t()));
        for i in 0..4 {
            let w = xc.t().dot(&vecs.column(i)) * ((n as f64).sqrt() / vals[i]);
            let s = w.dot(&layer.weights.row(i)).signum();
            for j in 0..d {
                assert!((s * w[j] - layer.weights[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn whitening_gives_identity_covariance() {
        let mut x = random(200, 6, 4);
        x.column_mut(0).mapv_inplace(|v| 5.0 * v + 3.0);
        let m = pca_fit(x.view(), PcaTarget::Dim(6), true).unwrap();
        let z = project(&m, x.view()).unwrap();
        let cov = population_cov(&z);
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((cov[[i, j]] - want).abs() < 1e-6);
            }
        }
        assert!(z.mean_axis(Axis(0)).unwrap().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn full_rotation_preserves_distances_and_reconstructs() {
        let x = random(30, 5, 6);
        let m = pca_fit(x.view(), PcaTarget::Dim(5), false).unwrap();
        let z = project(&m, x.view()).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let dx = (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt();
                let dz = (&z.row(i) - &z.row(j)).mapv(|v| v * v).sum().sqrt();
                assert!((dx - dz).abs() < 1e-8);
            }
        }
        let back = z.dot(&m.basis);
        let centered = &x - &x.mean_axis(Axis(0)).unwrap();
        assert!((&back - &centered).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn halving_descriptor_dims() {
        let x = random(300, 30, 1);
        let m = pca_fit(x.view(), PcaTarget::Dim(15), false).unwrap();
        assert_eq!(project(&m, x.view()).unwrap().ncols(), 15);
    }

    #[test]
    fn fraction_mode_reaches_mass() {
        let mut x = random(100, 8, 2);
        for (j, mut c) in x.columns_mut().into_iter().enumerate() {
            c.mapv_inplace(|v| v * (8 - j) as f64);
        }
        let full = pca_fit(x.view(), PcaTarget::Dim(8), false).unwrap();
        let total: f64 = full.eigvals.iter().sum();
        let m = pca_fit(x.view(), PcaTarget::Fraction(0.9), false).unwrap();
        let kept: f64 = m.eigvals.iter().sum();
        assert!(kept / total >= 0.9);
        let fewer: f64 = m.eigvals[..m.eigvals.len() - 1].iter().sum();
        assert!(fewer / total < 0.9);
    }

    #[test]
    fn rank_deficiency_and_small_n() {
        // rank 2 data in 4 dims
        let base = random(20, 2, 7);
        let x = ndarray::concatenate(Axis(1), &[base.view(), base.view()]).unwrap();
        assert!(matches!(
            pca_fit(x.view(), PcaTarget::Dim(3), false),
            Err(Error::RankDeficient { requested: 3, rank: 2 })
        ));
        assert!(pca_fit(random(1, 3, 0).view(), PcaTarget::Dim(1), false).is_err());
        // n = 5 rows center to rank 4
        assert!(matches!(
            pca_fit(random(5, 10, 0).view(), PcaTarget::Dim(5), false),
            Err(Error::RankDeficient { rank: 4, .. })
        ));
    }

    #[test]
    fn layer_matches_project_then_normalize() {
        let x = random(40, 12, 8);
        let m = pca_fit(x.view(), PcaTarget::Dim(6), true).unwrap();
        let layer = reduction_layer_weights(&m).unwrap();
        let out = layer.apply(x.view()).unwrap();
        let mut oracle = project(&m, x.view()).unwrap();
        l2_rows(&mut oracle);
        assert!((&out - &oracle).iter().all(|v| v.abs() < 1e-6));
        let unwhitened = pca_fit(x.view(), PcaTarget::Dim(6), false).unwrap();
        assert!(reduction_layer_weights(&unwhitened).is_err());
    }

    #[test]
    fn sign_convention_largest_entry_positive() {
        let x = random(25, 7, 12);
        let m = pca_fit(x.view(), PcaTarget::Dim(4), false).unwrap();
        for row in m.basis.rows() {
            let big = row.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(big > 0.0);
            assert!((row.dot(&row) - 1.0).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn paths_agree_on_small_instances(n in 3usize..24, d in 2usize..24, seed in 0u64..1000) {
            let x = random(n, d, seed);
            let r = (n - 1).min(d).min(4);
            let a = pca_fit_with(x.view(), PcaTarget::Dim(r), true, PcaPath::Covariance).unwrap();
            let b = pca_fit_with(x.view(), PcaTarget::Dim(r), true, PcaPath::Gram).unwrap();
            let za = project(&a, x.view()).unwrap();
            let zb = project(&b, x.view()).unwrap();
            for j in 0..r {
                let s = za.column(j).dot(&zb.column(j)).signum();
                for i in 0..n {
                    prop_assert!((za[[i, j]] - s * zb[[i, j]]).abs() < 1e-8);
                }
            }
        }
    }
}
