//! End-to-end orchestration: fitting the unsupervised stage, encoding videos,
//! training, bagging, transfer, evaluation and architecture sweeps, plus the
//! on-disk layouts the command line works with.

mod config;
mod container;
mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

pub use config::{
    ClassifierKind, DescriptorPca, NetConfig, PipelineConfig, ReductionConfig, ReductionMode, SUPERVISED_WIDTH_CAP,
};
pub use container::{ChannelModel, ClassifierModel, ModelContainer, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use plot::pr_curve_svg;

use crate::classify::{evaluate_scores, mean_scores, svm_train, EvalReport, Protocol, SvmConfig};
use crate::descriptor_io::{
    dafs_stack, descriptor_file_name, parse_descriptor_file_name, read_descriptors, rootsift, write_descriptors,
    ChannelSpec, DescriptorSet, TransformTag,
};
use crate::error::{Error, Result, StageExt};
use crate::fv::{finalize_video, fv_pool, read_representation, write_representation, FisherVector, VideoRepresentation};
use crate::gmm::{gmm_fit, locate_positions, sample_positions, FitConfig};
use crate::net::{
    predict, replace_output_layer, targets_from_labels, train, EpochStats, LayerSpec, MlpModel, TrainConfig,
};
use crate::reduction::{pca_fit, project, reduction_layer_weights, PcaTarget, ReductionLayer, ReductionModel};

/// All transformed versions of one video, identity first.
pub type VideoVariants = Vec<(TransformTag, DescriptorSet)>;

const STAGE_SAMPLE: u64 = 1;
const STAGE_GMM: u64 = 2;
const STAGE_NET_INIT: u64 = 3;
const STAGE_NET_TRAIN: u64 = 4;
const STAGE_SVM: u64 = 5;
const STAGE_OUTPUT: u64 = 6;

/// Independent, reproducible sub-seeds from one base seed.
pub fn derive_seed(base: u64, stage: u64, index: u64) -> u64 {
    let mut z = base
        ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn resolve_channels(cfg: &PipelineConfig, sets: &[DescriptorSet]) -> Result<Vec<ChannelSpec>> {
    let first = sets.first().ok_or_else(|| Error::Empty("no training videos".into()))?;
    let chans = if cfg.channels.is_empty() {
        first.channels.clone()
    } else {
        cfg.channels.clone()
    };
    for s in sets {
        for c in &chans {
            let i = s.channel_index(&c.name)?;
            if s.channels[i].raw_dim != c.raw_dim {
                return Err(Error::ChannelMismatch(format!(
                    "video `{}` has {} dims for `{}`, expected {}",
                    s.video_id, s.channels[i].raw_dim, c.name, c.raw_dim
                )));
            }
        }
    }
    Ok(chans)
}

fn rootsift_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let r = rootsift(row.as_slice().expect("standard layout"));
        row.assign(&Array1::from(r));
    }
    m
}

fn identity_pca(d: usize) -> ReductionModel {
    ReductionModel {
        mean: vec![0.0; d],
        basis: Array2::eye(d),
        eigvals: vec![1.0; d],
        whiten: false,
    }
}

/// Rows of one channel at the given (set, record) positions, RootSIFT applied.
fn gather(sets: &[DescriptorSet], at: &[(usize, usize)], channel: &str) -> Result<(Array2<f64>, Array2<f64>)> {
    let ch = sets[at[0].0].channel_index(channel)?;
    let dim = sets[at[0].0].channels[ch].raw_dim;
    let mut rows = Array2::zeros((at.len(), dim));
    let mut xyt = Array2::zeros((at.len(), 3));
    for (i, &(s, r)) in at.iter().enumerate() {
        let set = &sets[s];
        let c = set.channel_index(channel)?;
        let rec = &set.records[r];
        let v: Vec<f64> = rec.values[c].iter().map(|&x| x as f64).collect();
        rows.row_mut(i).assign(&Array1::from(rootsift(&v)));
        xyt.row_mut(i).assign(&Array1::from(vec![rec.x as f64, rec.y as f64, rec.t as f64]));
    }
    Ok((rows, xyt))
}

fn with_sta(z: Array2<f64>, xyt: &Array2<f64>, sta: bool) -> Array2<f64> {
    if !sta {
        return z;
    }
    ndarray::concatenate(ndarray::Axis(1), &[z.view(), xyt.view()]).expect("same row count")
}

/// Fits descriptor PCA and a GMM per channel on descriptors sampled from
/// the training videos (labels are ignored).
pub fn fit_unsupervised(sets: &[DescriptorSet], cfg: &PipelineConfig) -> Result<ModelContainer> {
    cfg.validate()?;
    let chans = resolve_channels(cfg, sets).stage("channels")?;
    let total: usize = sets.iter().map(|s| s.records.len()).sum();
    if total == 0 {
        return Err(Error::Empty("training videos contain no trajectories".into()));
    }
    let mut config = cfg.clone();
    config.channels = chans.clone();
    config.validate()?;
    let pca_at = locate_positions(
        sets,
        &sample_positions(total, cfg.pca_sample_size.min(total), derive_seed(cfg.seed, STAGE_SAMPLE, 0)),
    );
    let channels = chans
        .iter()
        .enumerate()
        .map(|(ci, spec)| {
            let pca = match cfg.descriptor_pca {
                DescriptorPca::Off => identity_pca(spec.raw_dim),
                target => {
                    let (rows, _) = gather(sets, &pca_at, &spec.name)?;
                    pca_fit(rows.view(), PcaTarget::Dim(target.output_dim(spec.raw_dim)), false)
                        .stage("descriptor pca")?
                }
            };
            let fit = cfg.gmm_for(&spec.name);
            let n = fit.sample_size.min(total);
            let at = locate_positions(sets, &sample_positions(total, n, derive_seed(cfg.seed, STAGE_SAMPLE, 1 + ci as u64)));
            let (rows, xyt) = gather(sets, &at, &spec.name)?;
            let z = with_sta(project(&pca, rows.view())?, &xyt, cfg.sta);
            let fit = FitConfig {
                seed: derive_seed(cfg.seed ^ fit.seed, STAGE_GMM, ci as u64),
                ..fit.clone()
            };
            let gmm = gmm_fit(z.view(), &fit).stage("gmm")?;
            Ok(ChannelModel {
                spec: spec.clone(),
                pca,
                gmm,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let c = ModelContainer {
        config,
        channels,
        reduction: None,
        classifier: None,
    };
    c.validate()?;
    Ok(c)
}

/// Raw pooled Fisher Vector of one channel of one video.
pub fn encode_channel(model: &ChannelModel, set: &DescriptorSet, sta: bool) -> Result<FisherVector> {
    let ch = set.channel_index(&model.spec.name)?;
    if set.channels[ch] != model.spec {
        return Err(Error::ChannelMismatch(format!(
            "video `{}` channel `{}` has {} dims, model expects {}",
            set.video_id, model.spec.name, set.channels[ch].raw_dim, model.spec.raw_dim
        )));
    }
    let rows = rootsift_rows(set.channel_rows(ch));
    let xyt = Array2::from_shape_fn((set.records.len(), 3), |(i, j)| {
        let r = &set.records[i];
        [r.x, r.y, r.t][j] as f64
    });
    let z = with_sta(project(&model.pca, rows.view())?, &xyt, sta);
    fv_pool(&model.gmm, &model.spec.name, z.view())
}

/// Encodes one video. With `dafs`, the configured transform variants that
/// are present are stacked before encoding; otherwise only the identity.
pub fn encode_video(container: &ModelContainer, variants: &[(TransformTag, DescriptorSet)], dafs: bool) -> Result<VideoRepresentation> {
    let identity = variants
        .iter()
        .find(|(t, _)| *t == TransformTag::IDENTITY)
        .ok_or_else(|| Error::Empty("video has no identity variant".into()))?;
    let set = if dafs {
        let tags = container.config.variant_tags()?;
        let chosen: Vec<(TransformTag, DescriptorSet)> = tags
            .iter()
            .filter_map(|t| variants.iter().find(|(v, _)| v == t).cloned())
            .collect();
        dafs_stack(&chosen)?
    } else {
        identity.1.clone()
    };
    let per_channel = container
        .channels
        .iter()
        .map(|m| encode_channel(m, &set, container.config.sta))
        .collect::<Result<Vec<_>>>()?;
    Ok(finalize_video(&set.video_id, identity.1.labels.clone(), &per_channel, &container.channel_names())?.quantized())
}

/// Encodes many videos in parallel; output order follows input order.
pub fn encode_videos(container: &ModelContainer, videos: &[VideoVariants], dafs: bool) -> Result<Vec<VideoRepresentation>> {
    videos
        .par_iter()
        .map(|v| encode_video(container, v, dafs))
        .collect::<Result<Vec<_>>>()
        .stage("encode")
}

pub fn rep_matrix(reps: &[VideoRepresentation]) -> Result<Array2<f64>> {
    let d = reps.first().map(|r| r.vector.len()).ok_or_else(|| Error::Empty("no representations".into()))?;
    let mut x = Array2::zeros((reps.len(), d));
    for (mut row, r) in x.rows_mut().into_iter().zip(reps) {
        if r.vector.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: r.vector.len(),
            });
        }
        row.assign(&ArrayView1::from(&r.vector));
    }
    Ok(x)
}

pub fn rep_labels(reps: &[VideoRepresentation]) -> Vec<BTreeSet<u32>> {
    reps.iter().map(|r| r.labels.clone()).collect()
}

fn class_count(cfg: &PipelineConfig, labels: &[BTreeSet<u32>]) -> Result<usize> {
    let seen = labels.iter().flatten().max().map(|&m| m as usize + 1).unwrap_or(0);
    let n = cfg.classes.unwrap_or(seen);
    if seen > n {
        return Err(Error::InvalidArgument(format!("label {} exceeds {n} configured classes", seen - 1)));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("training labels cover fewer than 2 classes".into()));
    }
    Ok(n)
}

/// Layer stack for the configured architecture. In unsupervised mode the
/// frozen PCA layer counts toward the depth; in supervised mode the first
/// trainable layer does, and widths are capped.
pub fn build_net(
    cfg: &PipelineConfig,
    input_dim: usize,
    classes: usize,
    reduction: Option<&ReductionLayer>,
    seed: u64,
) -> Result<MlpModel> {
    let n = &cfg.net;
    let (first, mut in_dim, hidden, width) = match cfg.reduction.mode {
        ReductionMode::UnsupervisedPca => {
            let red = reduction.ok_or_else(|| Error::InvalidArgument("unsupervised mode needs a reduction layer".into()))?;
            if red.weights.ncols() != input_dim {
                return Err(Error::DimensionMismatch {
                    expected: input_dim,
                    actual: red.weights.ncols(),
                });
            }
            (Some(red), red.weights.nrows(), n.depth - 1, n.width)
        }
        ReductionMode::SupervisedMidtoend => (None, input_dim, n.depth, n.width.min(SUPERVISED_WIDTH_CAP)),
    };
    let mut specs = Vec::with_capacity(hidden + 1);
    for _ in 0..hidden {
        specs.push(LayerSpec::hidden(in_dim, width, n.batch_norm, n.dropout));
        in_dim = width;
    }
    specs.push(LayerSpec::output(in_dim, classes, n.task));
    MlpModel::new(first, &specs, n.task, seed)
}

/// Copies the supervised-stage settings of `cfg` onto a container's config.
fn merged_config(base: &PipelineConfig, cfg: &PipelineConfig) -> PipelineConfig {
    PipelineConfig {
        seed: cfg.seed,
        reduction: cfg.reduction,
        net: cfg.net,
        classifier: cfg.classifier,
        svm_c: cfg.svm_c,
        bagging: cfg.bagging,
        classes: cfg.classes,
        ..base.clone()
    }
}

fn train_config(cfg: &PipelineConfig, member: u64) -> TrainConfig {
    TrainConfig {
        batch_size: cfg.net.batch_size,
        epochs: cfg.net.epochs,
        seed: derive_seed(cfg.seed, STAGE_NET_TRAIN, member),
        adam: cfg.net.adam,
    }
}

struct Prepared {
    x: Array2<f64>,
    labels: Vec<BTreeSet<u32>>,
    classes: usize,
    reduction: Option<ReductionModel>,
}

fn prepare(container: &ModelContainer, reps: &[VideoRepresentation], cfg: &PipelineConfig) -> Result<Prepared> {
    cfg.validate()?;
    let x = rep_matrix(reps)?;
    if x.ncols() != container.representation_dim() {
        return Err(Error::DimensionMismatch {
            expected: container.representation_dim(),
            actual: x.ncols(),
        });
    }
    let labels = rep_labels(reps);
    let classes = class_count(cfg, &labels)?;
    let reduction = match (cfg.classifier, cfg.reduction.mode) {
        (ClassifierKind::Net, ReductionMode::UnsupervisedPca) => {
            Some(pca_fit(x.view(), cfg.reduction.target, true).stage("reduction")?)
        }
        _ => None,
    };
    Ok(Prepared {
        x,
        labels,
        classes,
        reduction,
    })
}

fn train_member(p: &Prepared, cfg: &PipelineConfig, member: u64) -> Result<(MlpModel, Vec<EpochStats>)> {
    let layer = p.reduction.as_ref().map(reduction_layer_weights).transpose()?;
    let net = build_net(cfg, p.x.ncols(), p.classes, layer.as_ref(), derive_seed(cfg.seed, STAGE_NET_INIT, member))?;
    let y = targets_from_labels(&p.labels, p.classes, cfg.net.task)?;
    train(net, p.x.view(), y.view(), &train_config(cfg, member)).stage("train")
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub container: ModelContainer,
    /// Per-epoch loss and accuracy (empty for the SVM).
    pub trace: Vec<EpochStats>,
}

/// Trains the configured classifier on cached representations.
pub fn train_classifier(container: &ModelContainer, reps: &[VideoRepresentation], cfg: &PipelineConfig) -> Result<Trained> {
    let p = prepare(container, reps, cfg)?;
    let (classifier, trace) = match cfg.classifier {
        ClassifierKind::Svm => {
            let svm_cfg = SvmConfig {
                c: cfg.svm_c,
                seed: derive_seed(cfg.seed, STAGE_SVM, 0),
                ..SvmConfig::default()
            };
            (ClassifierModel::Svm(svm_train(p.x.view(), &p.labels, p.classes, &svm_cfg).stage("svm")?), Vec::new())
        }
        ClassifierKind::Net => {
            let (net, trace) = train_member(&p, cfg, 0)?;
            (ClassifierModel::Net(net), trace)
        }
    };
    let out = ModelContainer {
        config: merged_config(&container.config, cfg),
        channels: container.channels.clone(),
        reduction: p.reduction,
        classifier: Some(classifier),
    };
    out.validate()?;
    Ok(Trained { container: out, trace })
}

/// Trains `count` nets that differ only in their random streams; member 0
/// is the net [`train_classifier`] would produce.
pub fn bag(container: &ModelContainer, reps: &[VideoRepresentation], cfg: &PipelineConfig, count: usize) -> Result<ModelContainer> {
    if count == 0 {
        return Err(Error::Config("bagging count must be >= 1".into()));
    }
    if cfg.classifier != ClassifierKind::Net {
        return Err(Error::Config("bagging needs the net classifier".into()));
    }
    let p = prepare(container, reps, cfg)?;
    let members = (0..count as u64)
        .into_par_iter()
        .map(|m| train_member(&p, cfg, m).map(|(net, _)| net))
        .collect::<Result<Vec<_>>>()?;
    let out = ModelContainer {
        config: PipelineConfig {
            bagging: count,
            ..merged_config(&container.config, cfg)
        },
        channels: container.channels.clone(),
        reduction: p.reduction,
        classifier: Some(ClassifierModel::Ensemble(members)),
    };
    out.validate()?;
    Ok(out)
}

/// Class scores for a representation matrix.
pub fn predict_scores(container: &ModelContainer, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    match container
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Config("model has no trained classifier".into()))?
    {
        ClassifierModel::Net(m) => predict(m, x),
        ClassifierModel::Svm(s) => s.decision(x),
        ClassifierModel::Ensemble(ms) => mean_scores(&ms.iter().map(|m| predict(m, x)).collect::<Result<Vec<_>>>()?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransferPart {
    /// Descriptor PCA and GMM codebooks.
    Gmm,
    /// The dimensionality reduction layer.
    Reduction,
    /// The remaining supervised layers; the output layer is always replaced.
    Supervised,
}

impl FromStr for TransferPart {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(Self::Gmm),
            "reduction" => Ok(Self::Reduction),
            "supervised" => Ok(Self::Supervised),
            _ => Err(Error::Config(format!("unknown transfer part `{s}` (gmm, reduction, supervised)"))),
        }
    }
}

pub fn parse_transfer_parts(s: &str) -> Result<BTreeSet<TransferPart>> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone)]
pub struct Transferred {
    pub container: ModelContainer,
    /// Target training representations, encoded with the final codebooks.
    pub reps: Vec<VideoRepresentation>,
    pub trace: Vec<EpochStats>,
}

fn source_net(source: &ModelContainer) -> Result<&MlpModel> {
    match &source.classifier {
        Some(ClassifierModel::Net(m)) => Ok(m),
        Some(ClassifierModel::Ensemble(ms)) => Ok(&ms[0]),
        _ => Err(Error::Config("source model has no trained net".into())),
    }
}

/// Builds a model for a target dataset, reusing the chosen stages of
/// `source` and fitting the rest on `target`.
pub fn transfer(
    source: &ModelContainer,
    target: &[VideoVariants],
    what: &BTreeSet<TransferPart>,
    cfg: &PipelineConfig,
    dafs: bool,
) -> Result<Transferred> {
    cfg.validate()?;
    let needs_net = what.contains(&TransferPart::Reduction) || what.contains(&TransferPart::Supervised);
    if needs_net && cfg.classifier != ClassifierKind::Net {
        return Err(Error::Config("transferring network layers needs the net classifier".into()));
    }
    if what.contains(&TransferPart::Supervised)
        && cfg.reduction.mode == ReductionMode::UnsupervisedPca
        && !what.contains(&TransferPart::Reduction)
    {
        return Err(Error::Config("supervised layers sit on the reduction layer; transfer both".into()));
    }
    let unsup = if what.contains(&TransferPart::Gmm) {
        ModelContainer {
            config: PipelineConfig {
                channels: source.config.channels.clone(),
                descriptor_pca: source.config.descriptor_pca,
                sta: source.config.sta,
                gmm: source.config.gmm.clone(),
                gmm_channels: source.config.gmm_channels.clone(),
                ..cfg.clone()
            },
            channels: source.channels.clone(),
            reduction: None,
            classifier: None,
        }
    } else {
        let ids: Vec<DescriptorSet> = target
            .iter()
            .map(|v| identity_of(v).cloned())
            .collect::<Result<_>>()?;
        fit_unsupervised(&ids, cfg).stage("fit-unsup")?
    };
    let reps = encode_videos(&unsup, target, dafs)?;
    if !needs_net {
        let t = train_classifier(&unsup, &reps, cfg)?;
        return Ok(Transferred {
            container: t.container,
            reps,
            trace: t.trace,
        });
    }

    let x = rep_matrix(&reps)?;
    let labels = rep_labels(&reps);
    let classes = class_count(cfg, &labels)?;
    let y = targets_from_labels(&labels, classes, cfg.net.task)?;
    let src = source_net(source)?;
    if src.input_dim() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: src.input_dim(),
            actual: x.ncols(),
        });
    }
    let unsup_mode = cfg.reduction.mode == ReductionMode::UnsupervisedPca;
    let reduction = if unsup_mode {
        Some(match what.contains(&TransferPart::Reduction) {
            true => source
                .reduction
                .clone()
                .ok_or_else(|| Error::Config("source model has no reduction layer".into()))?,
            false => pca_fit(x.view(), cfg.reduction.target, true).stage("reduction")?,
        })
    } else {
        None
    };
    let (net, adam) = if what.contains(&TransferPart::Supervised) {
        replace_output_layer(src, classes, derive_seed(cfg.seed, STAGE_OUTPUT, 0), &cfg.net.adam)?
    } else {
        let layer = reduction.as_ref().map(reduction_layer_weights).transpose()?;
        let mut net = build_net(cfg, x.ncols(), classes, layer.as_ref(), derive_seed(cfg.seed, STAGE_NET_INIT, 0))?;
        if !unsup_mode {
            let first = &src.layers[0];
            if first.spec != net.layers[0].spec {
                return Err(Error::Config("source reduction layer does not fit the target architecture".into()));
            }
            net.layers[0] = first.clone();
        }
        (net, cfg.net.adam)
    };
    let tc = TrainConfig {
        adam,
        ..train_config(cfg, 0)
    };
    let (net, trace) = train(net, x.view(), y.view(), &tc).stage("fine-tune")?;
    let container = ModelContainer {
        config: unsup.config.clone(),
        channels: unsup.channels.clone(),
        reduction,
        classifier: Some(ClassifierModel::Net(net)),
    };
    container.validate()?;
    Ok(Transferred { container, reps, trace })
}

fn identity_of(v: &VideoVariants) -> Result<&DescriptorSet> {
    v.iter()
        .find(|(t, _)| *t == TransformTag::IDENTITY)
        .map(|(_, s)| s)
        .ok_or_else(|| Error::Empty("video has no identity variant".into()))
}

/// Identity descriptor sets of each video.
pub fn identity_sets(videos: &[VideoVariants]) -> Result<Vec<DescriptorSet>> {
    videos.iter().map(|v| identity_of(v).cloned()).collect()
}

/// One (model, representations) pair per split; accuracy is reported per
/// split and AP is computed over the pooled scores.
pub fn evaluate_splits(parts: &[(&ModelContainer, &[VideoRepresentation])], protocol: Protocol) -> Result<EvalReport> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (i, (model, reps)) in parts.iter().enumerate() {
        let s = predict_scores(model, rep_matrix(reps)?.view())?;
        scores.push(s);
        labels.extend(rep_labels(reps));
        splits.extend(std::iter::repeat_n(i, reps.len()));
    }
    let views: Vec<_> = scores.iter().map(|s| s.view()).collect();
    let all = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|_| Error::InvalidArgument("splits disagree on class count".into()))?;
    evaluate_scores(all.view(), &labels, &splits, protocol)
}

pub fn trace_csv(trace: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss,train_acc\n");
    for e in trace {
        s.push_str(&format!("{},{:.10},{:.6}\n", e.epoch, e.loss, e.train_acc));
    }
    s
}

/// Sweep axes; the default grid has 3 x 4 x 4 x 10 = 480 points.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub batches: Vec<usize>,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub dropouts: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            batches: vec![128, 256, 512],
            widths: vec![512, 1024, 2048, 4096],
            depths: vec![1, 2, 3, 4],
            dropouts: (0..10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl SweepGrid {
    pub fn points(&self) -> Vec<(usize, usize, usize, f64)> {
        let mut out = Vec::new();
        for &b in &self.batches {
            for &w in &self.widths {
                for &d in &self.depths {
                    for &p in &self.dropouts {
                        out.push((b, w, d, p));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub batch: usize,
    pub width: usize,
    pub depth: usize,
    pub dropout: f64,
    pub val_accuracy: f64,
    pub val_map: f64,
    pub final_loss: f64,
}

/// Trains one net per grid point and scores it on validation data.
pub fn sweep(
    container: &ModelContainer,
    train_reps: &[VideoRepresentation],
    val_reps: &[VideoRepresentation],
    cfg: &PipelineConfig,
    grid: &SweepGrid,
) -> Result<Vec<SweepRow>> {
    if cfg.classifier != ClassifierKind::Net {
        return Err(Error::Config("sweep needs the net classifier".into()));
    }
    let x_val = rep_matrix(val_reps)?;
    let val_labels = rep_labels(val_reps);
    grid.points()
        .into_par_iter()
        .map(|(batch, width, depth, dropout)| {
            let c = PipelineConfig {
                net: NetConfig {
                    batch_size: batch,
                    width,
                    depth,
                    dropout,
                    ..cfg.net
                },
                ..cfg.clone()
            };
            let t = train_classifier(container, train_reps, &c)?;
            let scores = predict_scores(&t.container, x_val.view())?;
            let split = vec![0; val_labels.len()];
            let acc = evaluate_scores(scores.view(), &val_labels, &split, Protocol::MeanAccuracy)
                .map(|r| r.mean_accuracy)
                .or_else(|_| evaluate_scores(scores.view(), &val_labels, &split, Protocol::MeanAp).map(|r| r.mean_accuracy))?;
            let map = evaluate_scores(scores.view(), &val_labels, &split, Protocol::MeanAp)?.map.unwrap_or(0.0);
            Ok(SweepRow {
                batch,
                width,
                depth,
                dropout,
                val_accuracy: acc,
                val_map: map,
                final_loss: t.trace.last().map(|e| e.loss).unwrap_or(f64::NAN),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("batch,width,depth,dropout,val_accuracy,val_map,final_loss\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.8}\n",
            r.batch, r.width, r.depth, r.dropout, r.val_accuracy, r.val_map, r.final_loss
        ));
    }
    s
}

/// Reads every `.fvd` file of a directory, grouped per video and sorted by
/// video id; each group has its identity variant first.
pub fn read_descriptor_dir(dir: &Path) -> Result<Vec<VideoVariants>> {
    let mut groups: BTreeMap<String, Vec<(TransformTag, DescriptorSet)>> = BTreeMap::new();
    for path in list_files(dir, "fvd")? {
        let (vid, tag) = parse_descriptor_file_name(&path)?;
        let set = read_descriptors(&path)?;
        groups.entry(vid).or_default().push((tag, set));
    }
    if groups.is_empty() {
        return Err(Error::Empty(format!("no .fvd files in {}", dir.display())));
    }
    groups
        .into_iter()
        .map(|(vid, mut v)| {
            v.sort_by_key(|(t, _)| (*t != TransformTag::IDENTITY, t.skip_level, t.mirrored));
            if v[0].0 != TransformTag::IDENTITY {
                return Err(Error::Empty(format!("video `{vid}` has no identity descriptor file")));
            }
            Ok(v)
        })
        .collect()
}

pub fn write_descriptor_dir(dir: &Path, videos: &[VideoVariants]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in videos {
        for (tag, set) in v {
            write_descriptors(set, &dir.join(descriptor_file_name(&set.video_id, *tag)))?;
        }
    }
    Ok(())
}

fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

pub fn write_cache(dir: &Path, reps: &[VideoRepresentation]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in reps {
        write_representation(r, &dir.join(format!("{}.fvr", r.video_id)))?;
    }
    Ok(())
}

pub fn read_cache(dir: &Path) -> Result<Vec<VideoRepresentation>> {
    let reps = list_files(dir, "fvr")?
        .iter()
        .map(|p| read_representation(p))
        .collect::<Result<Vec<_>>>()?;
    if reps.is_empty() {
        return Err(Error::Empty(format!("no .fvr files in {}", dir.display())));
    }
    Ok(reps)
}
