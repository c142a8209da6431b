use super::*;
use ndarray::array;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeSet;

fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(99)
}

#[test]
fn batch_norm_on_one_two_three() {
    let layer = Dense {
        spec: LayerSpec::hidden(1, 1, true, 0.0),
        weights: array![[1.0]],
        bias: array![0.0],
        bn: Some(BatchNormParams::new(1)),
    };
    let model = MlpModel {
        layers: vec![layer, random_dense(LayerSpec::output(1, 2, Task::Multiclass), &mut rng())],
        task: Task::Multiclass,
    };
    let acts = forward(&model, array![[1.0], [2.0], [3.0]].view(), Mode::Train, &mut rng()).unwrap();
    let (xhat, _) = acts.layers[0].bn.as_ref().unwrap();
    // mean 2, population variance 2/3
    let s = (2.0f64 / 3.0 + BN_EPS).sqrt();
    let want = [-1.0 / s, 0.0, 1.0 / s];
    for (a, b) in xhat.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    let mean = xhat.mean().unwrap();
    let var = xhat.mapv(|v| v * v).mean().unwrap();
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn batch_norm_statistics_for_larger_batches() {
    let model = MlpModel::new(
        None,
        &[LayerSpec::hidden(10, 16, true, 0.0), LayerSpec::output(16, 3, Task::Multiclass)],
        Task::Multiclass,
        4,
    )
    .unwrap();
    let x = gaussian(64, 10, 1);
    let acts = forward(&model, x.view(), Mode::Train, &mut rng()).unwrap();
    let (xhat, _) = acts.layers[0].bn.as_ref().unwrap();
    for col in xhat.columns() {
        assert!(col.mean().unwrap().abs() < 1e-7);
        assert!((col.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-3);
    }
}

#[test]
fn train_and_infer_agree_without_dropout_when_stats_match() {
    let mut model = MlpModel::new(
        None,
        &[LayerSpec::hidden(5, 7, true, 0.0), LayerSpec::output(7, 3, Task::Multiclass)],
        Task::Multiclass,
        2,
    )
    .unwrap();
    let x = gaussian(20, 5, 3);
    let train = forward(&model, x.view(), Mode::Train, &mut rng()).unwrap();
    let (mean, var) = train.layers[0].batch_stats.clone().unwrap();
    let bn = model.layers[0].bn.as_mut().unwrap();
    bn.running_mean = mean;
    bn.running_var = var;
    let infer = forward(&model, x.view(), Mode::Infer, &mut rng()).unwrap();
    for (a, b) in train.output().iter().zip(infer.output()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one_even_for_huge_logits() {
    let model = MlpModel::new(
        None,
        &[LayerSpec::hidden(4, 6, false, 0.0), LayerSpec::output(6, 5, Task::Multiclass)],
        Task::Multiclass,
        8,
    )
    .unwrap();
    let out = predict(&model, gaussian(30, 4, 5).view()).unwrap();
    for row in out.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
    let mut big = array![[1e4, -1e4, 0.0], [-1e4, -1e4, 1e4]];
    softmax_rows(&mut big);
    assert!(big.iter().all(|v| v.is_finite()));
    let y = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    assert!(loss(big.view(), y.view(), Task::Multiclass).unwrap().is_finite());
    let sig = array![[sigmoid(1e4), sigmoid(-1e4)]];
    assert!(sig.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let mut hidden = LayerSpec::hidden(6, 8, false, 0.5);
    hidden.activation = Activation::None;
    let model = MlpModel::new(None, &[hidden, LayerSpec::output(8, 2, Task::Multiclass)], Task::Multiclass, 3).unwrap();
    let x = gaussian(1, 6, 2);
    let plain = forward(&model, x.view(), Mode::Infer, &mut rng()).unwrap().layers[0].output.clone();
    let mut r = rng();
    let draws = 20_000;
    let mut sum = Array2::<f64>::zeros(plain.dim());
    for _ in 0..draws {
        sum += &forward(&model, x.view(), Mode::Train, &mut r).unwrap().layers[0].output;
    }
    let avg = sum / draws as f64;
    let scale = plain.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for (a, p) in avg.iter().zip(&plain) {
        assert!((a - p).abs() < 0.02 * scale, "{a} vs {p}");
    }
}

#[test]
fn output_gradient_vanishes_at_targets() {
    let model = MlpModel::new(None, &[LayerSpec::output(3, 3, Task::Multiclass)], Task::Multiclass, 0).unwrap();
    let x = gaussian(4, 3, 0);
    let acts = forward(&model, x.view(), Mode::Train, &mut rng()).unwrap();
    // targets equal to the predictions themselves
    let targets = acts.output().clone();
    let g = backward(&model, &acts, targets.view()).unwrap();
    let lg = g.layers[0].as_ref().unwrap();
    assert!(lg.weights.iter().chain(lg.bias.iter()).all(|v| v.abs() < 1e-15));
}

#[test]
fn frozen_reduction_layer_gets_no_gradient() {
    let red = ReductionLayer {
        weights: gaussian(4, 6, 1),
        offset: vec![0.1; 4],
    };
    let model = MlpModel::new(
        Some(&red),
        &[LayerSpec::hidden(4, 5, true, 0.0), LayerSpec::output(5, 2, Task::Multiclass)],
        Task::Multiclass,
        2,
    )
    .unwrap();
    assert_eq!(model.param_block_sizes(), vec![20, 5, 5, 5, 10, 2]);
    let x = gaussian(8, 6, 3);
    let acts = forward(&model, x.view(), Mode::Train, &mut rng()).unwrap();
    // the frozen layer's output rows are unit length
    for row in acts.layers[0].output.rows() {
        assert!((row.dot(&row) - 1.0).abs() < 1e-12);
    }
    let y = targets_from_labels(&vec![BTreeSet::from([0]); 8], 2, Task::Multiclass).unwrap();
    let g = backward(&model, &acts, y.view()).unwrap();
    assert!(g.layers[0].is_none());
    assert!(g.layers[1].is_some() && g.layers[2].is_some());
}

#[test]
fn train_mode_rejects_singleton_bn_batch() {
    let model = MlpModel::new(
        None,
        &[LayerSpec::hidden(2, 3, true, 0.0), LayerSpec::output(3, 2, Task::Multiclass)],
        Task::Multiclass,
        0,
    )
    .unwrap();
    assert!(forward(&model, array![[1.0, 2.0]].view(), Mode::Train, &mut rng()).is_err());
    assert!(forward(&model, array![[1.0, 2.0]].view(), Mode::Infer, &mut rng()).is_ok());
    assert!(forward(&model, array![[1.0, 2.0, 3.0]].view(), Mode::Infer, &mut rng()).is_err());
}

#[test]
fn invalid_architectures() {
    let bad_out = LayerSpec {
        has_bn: true,
        ..LayerSpec::output(3, 2, Task::Multiclass)
    };
    assert!(MlpModel::new(None, &[bad_out], Task::Multiclass, 0).is_err());
    assert!(MlpModel::new(None, &[LayerSpec::output(3, 2, Task::Multilabel)], Task::Multiclass, 0).is_err());
    assert!(MlpModel::new(
        None,
        &[LayerSpec::hidden(3, 4, false, 0.0), LayerSpec::output(5, 2, Task::Multiclass)],
        Task::Multiclass,
        0
    )
    .is_err());
    assert!(MlpModel::new(None, &[], Task::Multiclass, 0).is_err());
}

fn separable(n: usize, seed: u64) -> (Array2<f64>, Vec<BTreeSet<u32>>) {
    let mut x = gaussian(n, 4, seed);
    let labels: Vec<BTreeSet<u32>> = (0..n).map(|i| BTreeSet::from([(i % 2) as u32])).collect();
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row[0] += if i % 2 == 0 { 3.0 } else { -3.0 };
    }
    (x, labels)
}

#[test]
fn separable_problem_is_learned_by_depth_one() {
    let (x, labels) = separable(100, 1);
    let y = targets_from_labels(&labels, 2, Task::Multiclass).unwrap();
    let model = MlpModel::new(None, &[LayerSpec::output(4, 2, Task::Multiclass)], Task::Multiclass, 1).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        epochs: 50,
        seed: 3,
        adam: AdamConfig {
            alpha: 0.01,
            ..AdamConfig::default()
        },
    };
    let (model, trace) = train(model, x.view(), y.view(), &cfg).unwrap();
    assert_eq!(trace.len(), 50);
    assert_eq!(trace.last().unwrap().train_acc, 1.0);
    assert!(trace.last().unwrap().loss < trace[0].loss);
    assert_eq!(accuracy(predict(&model, x.view()).unwrap().view(), &labels), 1.0);
}

#[test]
fn training_is_deterministic() {
    let (x, labels) = separable(50, 2);
    let y = targets_from_labels(&labels, 2, Task::Multiclass).unwrap();
    let specs = [LayerSpec::hidden(4, 8, true, 0.3), LayerSpec::output(8, 2, Task::Multiclass)];
    let run = || {
        let m = MlpModel::new(None, &specs, Task::Multiclass, 5).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 5,
            seed: 11,
            ..TrainConfig::default()
        };
        train(m, x.view(), y.view(), &cfg).unwrap()
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
}

#[test]
fn singleton_tail_batch_is_merged() {
    let order: Vec<usize> = (0..9).collect();
    let b = batches(&order, 4, true);
    assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
    let b = batches(&order, 4, false);
    assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 4, 1]);
}

#[test]
fn inference_ignores_dropout_seed() {
    let m = MlpModel::new(
        None,
        &[LayerSpec::hidden(4, 8, true, 0.5), LayerSpec::output(8, 3, Task::Multiclass)],
        Task::Multiclass,
        1,
    )
    .unwrap();
    let x = gaussian(6, 4, 0);
    let a = forward(&m, x.view(), Mode::Infer, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = forward(&m, x.view(), Mode::Infer, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a.output(), b.output());
}

#[test]
fn output_surgery_keeps_hidden_weights() {
    let m = MlpModel::new(
        None,
        &[LayerSpec::hidden(4, 8, true, 0.0), LayerSpec::output(8, 3, Task::Multiclass)],
        Task::Multiclass,
        1,
    )
    .unwrap();
    let (r, adam) = replace_output_layer(&m, 5, 9, &AdamConfig::default()).unwrap();
    assert_eq!(r.layers[0], m.layers[0]);
    assert_eq!(r.layers[1].weights.dim(), (5, 8));
    assert_eq!(r.class_count(), 5);
    assert!((adam.alpha - 1e-4).abs() < 1e-18);
    assert!(replace_output_layer(&m, 1, 0, &AdamConfig::default()).is_err());
}

#[test]
fn summed_loss_only_rescales_the_gradient() {
    // gradient of the summed loss is n times the averaged one; Adam is
    // invariant to that rescaling up to eps
    let (x, labels) = separable(12, 4);
    let y = targets_from_labels(&labels, 2, Task::Multiclass).unwrap();
    let m = MlpModel::new(None, &[LayerSpec::hidden(4, 5, false, 0.0), LayerSpec::output(5, 2, Task::Multiclass)], Task::Multiclass, 2).unwrap();
    let acts = forward(&m, x.view(), Mode::Train, &mut rng()).unwrap();
    let g = backward(&m, &acts, y.view()).unwrap();
    let blocks: Vec<Vec<f64>> = g.blocks().iter().map(|b| b.to_vec()).collect();
    let summed: Vec<Vec<f64>> = blocks.iter().map(|b| b.iter().map(|v| v * 12.0).collect()).collect();
    let step = |grads: &Vec<Vec<f64>>| {
        let mut model = m.clone();
        let mut st = AdamState::new(AdamConfig::default(), &model.param_block_sizes());
        let refs: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
        adam_step(&mut st, &mut model.params_mut(), &refs).unwrap();
        model
    };
    let (a, b) = (step(&blocks), step(&summed));
    // per-parameter first steps differ by at most alpha * eps / (0.1 |g|)
    let cfg = AdamConfig::default();
    let flat = |mm: &MlpModel| -> Vec<f64> {
        let mut mm = mm.clone();
        mm.params_mut().iter().flat_map(|b| b.to_vec()).collect()
    };
    let (fa, fb, f0) = (flat(&a), flat(&b), flat(&m));
    let gs: Vec<f64> = blocks.iter().flatten().copied().collect();
    for i in 0..gs.len() {
        let bound = cfg.alpha * cfg.eps / (0.1 * gs[i].abs()).max(cfg.eps) + 1e-15;
        assert!(((fa[i] - f0[i]) - (fb[i] - f0[i])).abs() <= bound, "param {i}");
    }
}
