#![allow(dead_code)]

use fvstack::gmm::GmmModel;
use fvstack::net::{backward, forward, mean_loss, MlpModel, Mode};
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fisher Vector of a set of rows, written out term by term: densities from
/// the Gaussian formula, posteriors by plain normalization.
pub fn naive_fv(model: &GmmModel, rows: ArrayView2<f64>) -> Vec<f64> {
    let (k, d) = (model.k(), model.dim());
    let mut out = vec![0.0; 2 * k * d];
    for x in rows.rows() {
        let dens: Vec<f64> = (0..k)
            .map(|c| {
                let mut p = model.weights()[c];
                for j in 0..d {
                    let s = model.stds()[[c, j]];
                    let z = (x[j] - model.means()[[c, j]]) / s;
                    p *= (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                }
                p
            })
            .collect();
        let total: f64 = dens.iter().sum();
        for c in 0..k {
            let g = dens[c] / total;
            let w = model.weights()[c];
            for j in 0..d {
                let z = (x[j] - model.means()[[c, j]]) / model.stds()[[c, j]];
                out[2 * c * d + j] += g * z / w.sqrt();
                out[2 * c * d + d + j] += g * (z * z - 1.0) / (2.0 * w).sqrt();
            }
        }
    }
    out
}

fn batch_loss(model: &MlpModel, x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let acts = forward(model, x, Mode::Train, &mut rng).unwrap();
    mean_loss(acts.output().view(), y, model.task).unwrap()
}

/// Largest relative difference between the analytic gradient and a central
/// difference of the batch loss, over every trainable parameter.
pub fn gradient_check(model: &MlpModel, x: ArrayView2<f64>, y: ArrayView2<f64>, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let acts = forward(model, x, Mode::Train, &mut rng).unwrap();
    let grads = backward(model, &acts, y).unwrap();
    let analytic: Vec<Vec<f64>> = grads.blocks().iter().map(|b| b.to_vec()).collect();
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (b, block) in analytic.iter().enumerate() {
        for i in 0..block.len() {
            let orig = probe.params_mut()[b][i];
            probe.params_mut()[b][i] = orig + h;
            let up = batch_loss(&probe, x, y);
            probe.params_mut()[b][i] = orig - h;
            let down = batch_loss(&probe, x, y);
            probe.params_mut()[b][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = block[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((block[i] - numeric).abs() / scale);
        }
    }
    worst
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}
