//! Linear one-vs-rest SVM baseline and ranking/accuracy metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{predict, MlpModel};

pub const DEFAULT_C: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    /// Stop once the relative duality gap drops below this.
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: DEFAULT_C,
            tol: 1e-6,
            max_epochs: 20_000,
            seed: 0,
        }
    }
}

/// One binary hinge-loss model per class. The bias is learned as the
/// weight of a constant unit feature and so is regularized with the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvmModel {
    /// classes x dim
    pub weights: Array2<f64>,
    pub biases: Vec<f64>,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarySvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Best primal objective seen after each epoch.
    pub objective: Vec<f64>,
}

impl LinearSvmModel {
    pub fn class_count(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.biases.len() != self.weights.nrows() || self.weights.nrows() < 2 {
            return Err(Error::InvalidArgument("svm: need >= 2 classes with one bias each".into()));
        }
        if !(self.c > 0.0) {
            return Err(Error::InvalidArgument(format!("svm: C must be positive, got {}", self.c)));
        }
        if self.weights.iter().chain(&self.biases).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("svm: non-finite weights".into()));
        }
        Ok(())
    }

    /// Decision values, rows x classes.
    pub fn decision(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.ncols(),
            });
        }
        let mut out = x.dot(&self.weights.t());
        for mut row in out.rows_mut() {
            row += &ArrayView1::from(&self.biases);
        }
        Ok(out)
    }
}

/// `0.5 |w|^2 + 0.5 b^2 + C sum max(0, 1 - y (w.x + b))`
pub fn primal_objective(w: &[f64], b: f64, x: ArrayView2<f64>, y: &[f64], c: f64) -> f64 {
    let reg = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
    let w = ArrayView1::from(w);
    let hinge: f64 = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(row, &yi)| (1.0 - yi * (row.dot(&w) + b)).max(0.0))
        .sum();
    reg + c * hinge
}

/// Dual coordinate descent for one binary problem, labels in {-1, +1}.
pub fn train_binary(x: ArrayView2<f64>, y: &[f64], cfg: &SvmConfig) -> Result<BinarySvm> {
    let (n, d) = x.dim();
    if n == 0 || y.len() != n {
        return Err(Error::InvalidArgument("svm: empty or mislabelled training set".into()));
    }
    let qd: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r) + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = (primal_objective(w.as_slice().unwrap(), b, x, y, cfg.c), w.clone(), b);
    let mut objective = Vec::new();
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let xi = x.row(i);
            let g = y[i] * (xi.dot(&w) + b) - 1.0;
            let old = alpha[i];
            let new = (old - g / qd[i]).clamp(0.0, cfg.c);
            let delta = (new - old) * y[i];
            if delta != 0.0 {
                alpha[i] = new;
                w.scaled_add(delta, &xi);
                b += delta;
            }
        }
        let primal = primal_objective(w.as_slice().unwrap(), b, x, y, cfg.c);
        if !primal.is_finite() {
            return Err(Error::Numeric("svm: objective diverged".into()));
        }
        if primal < best.0 {
            best = (primal, w.clone(), b);
        }
        objective.push(best.0);
        let dual = alpha.iter().sum::<f64>() - 0.5 * (w.dot(&w) + b * b);
        if best.0 - dual <= cfg.tol * best.0.abs().max(1e-12) {
            break;
        }
    }
    Ok(BinarySvm {
        weights: best.1.to_vec(),
        bias: best.2,
        objective,
    })
}

/// One-vs-rest training; a sample is positive for every class in its label set.
pub fn svm_train(x: ArrayView2<f64>, labels: &[BTreeSet<u32>], classes: usize, cfg: &SvmConfig) -> Result<LinearSvmModel> {
    if labels.len() != x.nrows() {
        return Err(Error::InvalidArgument(format!(
            "svm: {} label sets for {} samples",
            labels.len(),
            x.nrows()
        )));
    }
    if !(cfg.c > 0.0) {
        return Err(Error::InvalidArgument(format!("svm: C must be positive, got {}", cfg.c)));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument("svm: need at least 2 classes".into()));
    }
    for c in 0..classes as u32 {
        if !labels.iter().any(|l| l.contains(&c)) {
            return Err(Error::InvalidArgument(format!("svm: class {c} has no training example")));
        }
    }
    if let Some(l) = labels.iter().flatten().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!("svm: label {l} out of range")));
    }
    let models: Vec<BinarySvm> = (0..classes as u32)
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = labels.iter().map(|l| if l.contains(&c) { 1.0 } else { -1.0 }).collect();
            train_binary(x, &y, &SvmConfig { seed: cfg.seed.wrapping_add(c as u64), ..*cfg })
        })
        .collect::<Result<_>>()?;
    let mut weights = Array2::zeros((classes, x.ncols()));
    for (mut row, m) in weights.rows_mut().into_iter().zip(&models) {
        row.assign(&ArrayView1::from(&m.weights));
    }
    Ok(LinearSvmModel {
        weights,
        biases: models.iter().map(|m| m.bias).collect(),
        c: cfg.c,
    })
}

/// Anything that maps representations to per-class scores.
pub trait Classifier {
    fn class_count(&self) -> usize;
    fn scores(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl Classifier for LinearSvmModel {
    fn class_count(&self) -> usize {
        LinearSvmModel::class_count(self)
    }
    fn scores(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.decision(x)
    }
}

impl Classifier for MlpModel {
    fn class_count(&self) -> usize {
        MlpModel::class_count(self)
    }
    fn scores(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        predict(self, x)
    }
}

/// Indices sorted by descending score; equal scores keep input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Result<f64> {
    if scores.len() != relevant.len() {
        return Err(Error::InvalidArgument(format!(
            "average precision: {} scores vs {} relevance flags",
            scores.len(),
            relevant.len()
        )));
    }
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return Err(Error::InvalidArgument("average precision: no positives".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, i) in ranking(scores).into_iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// (recall, precision) after each item of the ranking.
pub fn precision_recall(scores: &[f64], relevant: &[bool]) -> Vec<(f64, f64)> {
    let positives = relevant.iter().filter(|&&r| r).count().max(1) as f64;
    let mut hits = 0usize;
    ranking(scores)
        .into_iter()
        .enumerate()
        .map(|(rank, i)| {
            hits += relevant[i] as usize;
            (hits as f64 / positives, hits as f64 / (rank + 1) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Accuracy averaged over splits, with standard deviation.
    MeanAccuracy,
    MeanAp,
    /// Mean AP excluding a designated negative (background) class.
    MeanApPositives { negative: u32 },
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macc" | "mAcc" => Ok(Self::MeanAccuracy),
            "map" | "mAP" => Ok(Self::MeanAp),
            _ => {
                let neg = s
                    .strip_prefix("map+")
                    .or_else(|| s.strip_prefix("mAP+"))
                    .ok_or_else(|| Error::Config(format!("unknown protocol '{s}' (macc, map, map+[:neg])")))?;
                let neg = match neg.strip_prefix(':') {
                    Some(n) => n.parse().map_err(|_| Error::Config(format!("bad negative class in '{s}'")))?,
                    None if neg.is_empty() => 0,
                    None => return Err(Error::Config(format!("unknown protocol '{s}'"))),
                };
                Ok(Self::MeanApPositives { negative: neg })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class: u32,
    pub ap: Option<f64>,
    /// Fraction of this class's samples whose top score is one of their labels.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub classes: Vec<ClassRow>,
    pub map: Option<f64>,
    pub split_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub accuracy_sd: f64,
    pub seed: Option<u64>,
}

fn is_top(row: ArrayView1<f64>, labels: &BTreeSet<u32>) -> bool {
    labels.contains(&(crate::net::argmax_row(row) as u32))
}

/// Scores every sample, then aggregates per the protocol. `splits[i]` is
/// the split id of sample i; accuracy is computed per split.
pub fn evaluate(
    clf: &dyn Classifier,
    x: ArrayView2<f64>,
    labels: &[BTreeSet<u32>],
    splits: &[usize],
    protocol: Protocol,
) -> Result<EvalReport> {
    let scores = clf.scores(x)?;
    evaluate_scores(scores.view(), labels, splits, protocol)
}

pub fn evaluate_scores(
    scores: ArrayView2<f64>,
    labels: &[BTreeSet<u32>],
    splits: &[usize],
    protocol: Protocol,
) -> Result<EvalReport> {
    let n = scores.nrows();
    if labels.len() != n || splits.len() != n {
        return Err(Error::InvalidArgument(format!(
            "evaluate: {n} score rows, {} label sets, {} split ids",
            labels.len(),
            splits.len()
        )));
    }
    if n == 0 {
        return Err(Error::Empty("evaluate: no samples".into()));
    }
    let classes = scores.ncols();
    let multilabel = labels.iter().any(|l| l.len() != 1);
    match protocol {
        Protocol::MeanAccuracy if multilabel => {
            return Err(Error::Config("mean accuracy needs exactly one label per sample".into()))
        }
        Protocol::MeanApPositives { negative } if negative as usize >= classes => {
            return Err(Error::Config(format!("negative class {negative} out of range for {classes} classes")))
        }
        _ => {}
    }
    if let Some(l) = labels.iter().flatten().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {classes} classes")));
    }

    let hit: Vec<bool> = scores.rows().into_iter().zip(labels).map(|(r, l)| is_top(r, l)).collect();
    let mut split_ids: Vec<usize> = splits.to_vec();
    split_ids.sort_unstable();
    split_ids.dedup();
    let split_accuracy: Vec<f64> = split_ids
        .iter()
        .map(|&s| {
            let members: Vec<bool> = (0..n).filter(|&i| splits[i] == s).map(|i| hit[i]).collect();
            members.iter().filter(|&&h| h).count() as f64 / members.len() as f64
        })
        .collect();
    let mean_accuracy = split_accuracy.iter().sum::<f64>() / split_accuracy.len() as f64;
    let accuracy_sd = (split_accuracy.iter().map(|a| (a - mean_accuracy).powi(2)).sum::<f64>()
        / split_accuracy.len() as f64)
        .sqrt();

    let mut rows = Vec::new();
    for c in 0..classes as u32 {
        if matches!(protocol, Protocol::MeanApPositives { negative } if negative == c) {
            continue;
        }
        let relevant: Vec<bool> = labels.iter().map(|l| l.contains(&c)).collect();
        let members: Vec<usize> = (0..n).filter(|&i| relevant[i]).collect();
        if members.is_empty() {
            rows.push(ClassRow {
                class: c,
                ap: None,
                accuracy: None,
            });
            continue;
        }
        let col: Vec<f64> = scores.column(c as usize).to_vec();
        rows.push(ClassRow {
            class: c,
            ap: Some(average_precision(&col, &relevant)?),
            accuracy: Some(members.iter().filter(|&&i| hit[i]).count() as f64 / members.len() as f64),
        });
    }
    let aps: Vec<f64> = rows.iter().filter_map(|r| r.ap).collect();
    let map = match protocol {
        Protocol::MeanAccuracy => None,
        _ if aps.is_empty() => return Err(Error::InvalidArgument("evaluate: no class has positives".into())),
        _ => Some(aps.iter().sum::<f64>() / aps.len() as f64),
    };
    Ok(EvalReport {
        protocol,
        classes: rows,
        map,
        split_accuracy,
        mean_accuracy,
        accuracy_sd,
        seed: None,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl EvalReport {
    /// Header, one row per reported class, one summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ap,accuracy,sd\n");
        for r in &self.classes {
            let _ = writeln!(s, "{},{},{},", r.class, opt(r.ap), opt(r.accuracy));
        }
        let _ = writeln!(
            s,
            "mean,{},{:.6},{:.6}",
            opt(self.map),
            self.mean_accuracy,
            self.accuracy_sd
        );
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let name = match self.protocol {
            Protocol::MeanAccuracy => "mAcc".to_string(),
            Protocol::MeanAp => "mAP".to_string(),
            Protocol::MeanApPositives { negative } => format!("mAP+ (negative class {negative})"),
        };
        let _ = writeln!(s, "protocol: {name}");
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed:     {seed}");
        }
        let _ = writeln!(s, "{:>8}  {:>9}  {:>9}", "class", "AP", "accuracy");
        for r in &self.classes {
            let _ = writeln!(s, "{:>8}  {:>9}  {:>9}", r.class, opt(r.ap), opt(r.accuracy));
        }
        if let Some(m) = self.map {
            let _ = writeln!(s, "{:>8}  {:>9.6}", "mAP", m);
        }
        for (i, a) in self.split_accuracy.iter().enumerate() {
            let _ = writeln!(s, "split {i:>2}  accuracy {a:.6}");
        }
        let _ = writeln!(s, "mean accuracy {:.6} (sd {:.6})", self.mean_accuracy, self.accuracy_sd);
        s
    }
}

/// Per-class scores averaged over ensemble members.
pub fn mean_scores(members: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = members.first().ok_or_else(|| Error::Empty("no ensemble members".into()))?;
    let mut acc = Array2::<f64>::zeros(first.dim());
    for m in members {
        if m.dim() != first.dim() {
            return Err(Error::InvalidArgument("ensemble members disagree on output shape".into()));
        }
        acc += m;
    }
    Ok(acc / members.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn set(l: u32) -> BTreeSet<u32> {
        BTreeSet::from([l])
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[false, true, true]).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 0.5833).abs() < 1e-4);
        assert_eq!(average_precision(&[0.3, 0.9, 0.1, 0.8], &[false, true, false, true]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.1], &[true]).unwrap(), 1.0);
        assert!(average_precision(&[0.1, 0.2], &[false, false]).is_err());
        assert!(average_precision(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn ap_ties_follow_input_order() {
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn ap_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let r: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let t: Vec<f64> = s.iter().map(|v| (5.0 * v).exp() - 2.0).collect();
        assert_eq!(average_precision(&s, &r).unwrap(), average_precision(&t, &r).unwrap());
    }

    #[test]
    fn random_scores_give_prevalence() {
        // E[AP] for random ranking is close to prevalence for large n
        let n = 4000;
        let aps: Vec<f64> = (0..20)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let r: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
                average_precision(&s, &r).unwrap()
            })
            .collect();
        let mean = aps.iter().sum::<f64>() / 20.0;
        let sd = (aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sd.max(1e-3), "{mean} sd {sd}");
    }

    fn subgradient_oracle(x: ArrayView2<f64>, y: &[f64], c: f64) -> f64 {
        // projected-free subgradient descent with 1/t steps, keep best
        let d = x.ncols();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut best = f64::INFINITY;
        for t in 1..=400_000 {
            let mut gw = w.clone();
            let mut gb = b;
            for (row, &yi) in x.rows().into_iter().zip(y) {
                let m = yi * (row.dot(&ArrayView1::from(&w)) + b);
                if m < 1.0 {
                    for j in 0..d {
                        gw[j] -= c * yi * row[j];
                    }
                    gb -= c * yi;
                }
            }
            let eta = 1.0 / (t as f64 + 100.0) / c * 0.5;
            for j in 0..d {
                w[j] -= eta * gw[j];
            }
            b -= eta * gb;
            best = best.min(primal_objective(&w, b, x, y, c));
        }
        best
    }

    #[test]
    fn objective_matches_subgradient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((20, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        // overlapping labels so the hinge term is active at the optimum
        let y: Vec<f64> = x
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| if r[0] + 0.3 * r[1] + if i % 5 == 0 { 1.0 } else { 0.0 } > 0.2 { 1.0 } else { -1.0 })
            .collect();
        for c in [0.3, 1.0] {
            let m = train_binary(x.view(), &y, &SvmConfig { c, ..SvmConfig::default() }).unwrap();
            let ours = *m.objective.last().unwrap();
            let oracle = subgradient_oracle(x.view(), &y, c);
            assert!(ours <= oracle * (1.0 + 1e-3), "c={c}: {ours} vs {oracle}");
            assert!((ours - oracle).abs() / oracle < 1e-3, "c={c}: {ours} vs {oracle}");
        }
    }

    #[test]
    fn objective_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((60, 5), |_| rng.random::<f64>() - 0.5);
        let y: Vec<f64> = (0..60).map(|i| if (i * 7) % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let m = train_binary(x.view(), &y, &SvmConfig::default()).unwrap();
        assert!(m.objective.windows(2).all(|w| w[1] <= w[0] + 1e-10));
    }

    #[test]
    fn separable_points_are_fit() {
        let x = array![[0.0, 1.0], [0.1, 1.2], [1.0, 0.0], [1.2, 0.1]];
        let labels = vec![set(0), set(0), set(1), set(1)];
        let m = svm_train(x.view(), &labels, 2, &SvmConfig::default()).unwrap();
        assert_eq!(m.c, 100.0);
        let r = evaluate(&m, x.view(), &labels, &[0; 4], Protocol::MeanAccuracy).unwrap();
        assert_eq!((r.mean_accuracy, r.accuracy_sd), (1.0, 0.0));
        assert!(svm_train(x.view(), &vec![set(0); 4], 2, &SvmConfig::default()).is_err());
        assert!(svm_train(x.view(), &vec![set(0); 4], 1, &SvmConfig::default()).is_err());
    }

    #[test]
    fn permuting_classes_permutes_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((30, 4), |_| rng.random::<f64>());
        let labels: Vec<_> = (0..30).map(|i| set((i % 3) as u32)).collect();
        let perm = [2u32, 0, 1];
        let plabels: Vec<_> = labels.iter().map(|l| set(perm[*l.first().unwrap() as usize])).collect();
        let cfg = SvmConfig { seed: 0, ..SvmConfig::default() };
        let a = svm_train(x.view(), &labels, 3, &cfg).unwrap().decision(x.view()).unwrap();
        let b = svm_train(x.view(), &plabels, 3, &cfg).unwrap().decision(x.view()).unwrap();
        for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
            let pa = crate::net::argmax_row(ra);
            assert_eq!(perm[pa] as usize, crate::net::argmax_row(rb));
        }
    }

    #[test]
    fn map_plus_skips_negative_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels: Vec<_> = (0..50).map(|i| set((i % 5) as u32)).collect();
        let scores = Array2::from_shape_fn((50, 5), |_| rng.random::<f64>());
        let all = evaluate_scores(scores.view(), &labels, &[0; 50], Protocol::MeanAp).unwrap();
        let pos = evaluate_scores(scores.view(), &labels, &[0; 50], Protocol::MeanApPositives { negative: 0 }).unwrap();
        assert_eq!(all.classes.len(), 5);
        assert_eq!(pos.classes.len(), 4);
        assert!(pos.classes.iter().all(|r| r.class != 0));
        let want = all.classes[1..].iter().map(|r| r.ap.unwrap()).sum::<f64>() / 4.0;
        assert!((pos.map.unwrap() - want).abs() < 1e-15);
        assert_eq!(pos.to_csv().lines().count(), 1 + 4 + 1);
    }

    #[test]
    fn split_accuracy_statistics() {
        let scores = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]];
        let labels = vec![set(0), set(1), set(1), set(0)];
        let r = evaluate_scores(scores.view(), &labels, &[0, 0, 1, 1], Protocol::MeanAccuracy).unwrap();
        assert_eq!(r.split_accuracy, vec![1.0, 0.5]);
        assert_eq!(r.mean_accuracy, 0.75);
        assert!((r.accuracy_sd - 0.25).abs() < 1e-15);
        assert!(r.to_table().contains("mean accuracy 0.750000"));
        let multi = vec![BTreeSet::from([0, 1]), set(1), set(1), set(0)];
        assert!(evaluate_scores(scores.view(), &multi, &[0; 4], Protocol::MeanAccuracy).is_err());
        assert!(evaluate_scores(scores.view(), &labels, &[0; 4], Protocol::MeanApPositives { negative: 2 }).is_err());
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("macc".parse::<Protocol>().unwrap(), Protocol::MeanAccuracy);
        assert_eq!("map".parse::<Protocol>().unwrap(), Protocol::MeanAp);
        assert_eq!("map+".parse::<Protocol>().unwrap(), Protocol::MeanApPositives { negative: 0 });
        assert_eq!("map+:3".parse::<Protocol>().unwrap(), Protocol::MeanApPositives { negative: 3 });
        assert!("auc".parse::<Protocol>().is_err());
    }

    #[test]
    fn ensemble_of_copies_is_identity() {
        let s = array![[0.2, 0.8], [0.6, 0.4]];
        let m = mean_scores(&[s.clone(), s.clone(), s.clone()]).unwrap();
        assert!(m.iter().zip(&s).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
