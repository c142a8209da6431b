//! Browser demo: GMM fitting, PCA whitening and Fisher Vector encoding on
//! 2-D point clouds. Every export takes and returns JSON strings.

use fvstack::fv::{fv_pool, l2_normalize, signed_sqrt};
use fvstack::gmm::{gmm_fit_traced, posterior, FitConfig, FitTrace};
use fvstack::reduction::{pca_fit_with, project, PcaPath, PcaTarget};
use ndarray::Array2;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct GmmView {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub stds: Vec<[f64; 2]>,
    pub log_likelihood: Vec<f64>,
    /// Index of the most responsible component per point.
    pub assignment: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct PcaView {
    pub mean: [f64; 2],
    pub axes: Vec<[f64; 2]>,
    pub eigvals: Vec<f64>,
    pub projected: Vec<[f64; 2]>,
    pub whitened: Vec<[f64; 2]>,
    pub path: &'static str,
}

#[derive(Debug, Serialize)]
pub struct FvView {
    pub gmm: GmmView,
    pub raw: Vec<f64>,
    pub power_l2: Vec<f64>,
    /// Same normalization applied twice.
    pub double: Vec<f64>,
}

pub fn parse_points(json: &str) -> Result<Array2<f64>, String> {
    let pts: Vec<[f64; 2]> = serde_json::from_str(json).map_err(|e| format!("bad points: {e}"))?;
    if pts.is_empty() {
        return Err("no points".into());
    }
    if pts.iter().flatten().any(|v| !v.is_finite()) {
        return Err("points must be finite".into());
    }
    Ok(Array2::from_shape_fn((pts.len(), 2), |(i, j)| pts[i][j]))
}

fn pairs(m: &Array2<f64>) -> Vec<[f64; 2]> {
    m.rows().into_iter().map(|r| [r[0], r.get(1).copied().unwrap_or(0.0)]).collect()
}

fn fit(points: &Array2<f64>, k: usize, iters: usize, seed: u64) -> Result<FitTrace, String> {
    let cfg = FitConfig {
        k,
        em_iters: iters,
        sample_size: points.nrows().max(k),
        seed,
        ..FitConfig::default()
    };
    gmm_fit_traced(points.view(), &cfg).map_err(|e| e.to_string())
}

fn gmm_view(points: &Array2<f64>, trace: FitTrace) -> GmmView {
    let m = &trace.model;
    let assignment = points
        .rows()
        .into_iter()
        .map(|x| {
            let g = posterior(m, x).expect("dims match");
            (0..g.len()).max_by(|&a, &b| g[a].total_cmp(&g[b])).unwrap_or(0)
        })
        .collect();
    GmmView {
        weights: m.weights().to_vec(),
        means: pairs(m.means()),
        stds: pairs(m.stds()),
        log_likelihood: trace.log_likelihood,
        assignment,
    }
}

pub fn fit_gmm(points: &Array2<f64>, k: usize, iters: usize, seed: u64) -> Result<GmmView, String> {
    Ok(gmm_view(points, fit(points, k, iters, seed)?))
}

pub fn pca_view(points: &Array2<f64>, gram: bool) -> Result<PcaView, String> {
    let path = if gram { PcaPath::Gram } else { PcaPath::Covariance };
    let r = 2.min(points.nrows().saturating_sub(1)).max(1);
    let plain = pca_fit_with(points.view(), PcaTarget::Dim(r), false, path).map_err(|e| e.to_string())?;
    let white = pca_fit_with(points.view(), PcaTarget::Dim(r), true, path).map_err(|e| e.to_string())?;
    Ok(PcaView {
        mean: [plain.mean[0], plain.mean[1]],
        axes: pairs(&plain.basis),
        eigvals: plain.eigvals.clone(),
        projected: pairs(&project(&plain, points.view()).map_err(|e| e.to_string())?),
        whitened: pairs(&project(&white, points.view()).map_err(|e| e.to_string())?),
        path: if gram { "gram" } else { "covariance" },
    })
}

pub fn fv_view(points: &Array2<f64>, k: usize, seed: u64) -> Result<FvView, String> {
    let trace = fit(points, k, 10, seed)?;
    let raw = fv_pool(&trace.model, "points", points.view()).map_err(|e| e.to_string())?.values;
    let once = l2_normalize(&signed_sqrt(&raw));
    let double = l2_normalize(&signed_sqrt(&once));
    Ok(FvView {
        gmm: gmm_view(points, trace),
        raw,
        power_l2: once,
        double,
    })
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// Fits a diagonal GMM to `[[x, y], ...]`.
#[wasm_bindgen(js_name = fitGmm)]
pub fn fit_gmm_js(points: &str, k: usize, iters: usize, seed: u32) -> Result<String, JsError> {
    to_json(parse_points(points).and_then(|p| fit_gmm(&p, k, iters, seed as u64)))
}

#[wasm_bindgen(js_name = pcaView)]
pub fn pca_view_js(points: &str, gram: bool) -> Result<String, JsError> {
    to_json(parse_points(points).and_then(|p| pca_view(&p, gram)))
}

#[wasm_bindgen(js_name = fisherVector)]
pub fn fv_view_js(points: &str, k: usize, seed: u32) -> Result<String, JsError> {
    to_json(parse_points(points).and_then(|p| fv_view(&p, k, seed as u64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> Array2<f64> {
        let mut v = Vec::new();
        for i in 0..60 {
            let t = i as f64 * 0.37;
            let (cx, cy) = if i % 2 == 0 { (-3.0, 1.0) } else { (4.0, -2.0) };
            v.push([cx + t.sin() * 0.8, cy + (1.3 * t).cos() * 0.5]);
        }
        parse_points(&serde_json::to_string(&v).unwrap()).unwrap()
    }

    #[test]
    fn gmm_finds_both_clusters() {
        let g = fit_gmm(&cloud(), 2, 20, 1).unwrap();
        let mut xs: Vec<f64> = g.means.iter().map(|m| m[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 3.0).abs() < 0.5 && (xs[1] - 4.0).abs() < 0.5, "{xs:?}");
        assert!(g.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        assert_ne!(g.assignment[0], g.assignment[1]);
    }

    #[test]
    fn pca_paths_agree_and_whiten() {
        let a = pca_view(&cloud(), false).unwrap();
        let b = pca_view(&cloud(), true).unwrap();
        for (p, q) in a.projected.iter().zip(&b.projected) {
            for c in 0..2 {
                assert!((p[c].abs() - q[c].abs()).abs() < 1e-8);
            }
        }
        let n = a.whitened.len() as f64;
        for c in 0..2 {
            let var = a.whitened.iter().map(|w| w[c] * w[c]).sum::<f64>() / n;
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fv_shapes_and_norms() {
        let v = fv_view(&cloud(), 3, 0).unwrap();
        assert_eq!(v.raw.len(), 2 * 3 * 2);
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((norm(&v.power_l2) - 1.0).abs() < 1e-12);
        assert!((norm(&v.double) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_input_is_reported() {
        assert!(parse_points("[]").is_err());
        assert!(parse_points("[[1,2],[3]]").is_err());
        assert!(parse_points("nope").is_err());
    }
}
