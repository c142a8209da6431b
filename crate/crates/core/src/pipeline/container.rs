//! `FVC1` model container: magic, u32 version, then tagged sections
//! (`[u8; 4]` tag, u64 byte length, payload) ending with `END_`.
//! Unknown tags are skipped. All numbers little-endian, matrices row-major f64.

use std::path::Path;

use ndarray::Array1;

use super::config::PipelineConfig;
use crate::classify::LinearSvmModel;
use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::descriptor_io::ChannelSpec;
use crate::error::{Error, Result};
use crate::fv::fv_len;
use crate::gmm::GmmModel;
use crate::net::{Activation, BatchNormParams, Dense, LayerSpec, MlpModel, Task};
use crate::reduction::ReductionModel;

pub const CONTAINER_MAGIC: &[u8; 4] = b"FVC1";
pub const CONTAINER_VERSION: u32 = 1;

/// Descriptor PCA and codebook for one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    pub spec: ChannelSpec,
    pub pca: ReductionModel,
    pub gmm: GmmModel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierModel {
    Net(MlpModel),
    Svm(LinearSvmModel),
    /// Bagged nets; scores are the mean of member scores.
    Ensemble(Vec<MlpModel>),
}

impl ClassifierModel {
    pub fn input_dim(&self) -> usize {
        match self {
            ClassifierModel::Net(m) => m.input_dim(),
            ClassifierModel::Svm(s) => s.dim(),
            ClassifierModel::Ensemble(ms) => ms[0].input_dim(),
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            ClassifierModel::Net(m) => m.class_count(),
            ClassifierModel::Svm(s) => s.class_count(),
            ClassifierModel::Ensemble(ms) => ms[0].class_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub config: PipelineConfig,
    pub channels: Vec<ChannelModel>,
    /// Whitened PCA behind the frozen first layer, when one was fit.
    pub reduction: Option<ReductionModel>,
    pub classifier: Option<ClassifierModel>,
}

impl ModelContainer {
    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.spec.name.clone()).collect()
    }

    /// Length of the concatenated video representation.
    pub fn representation_dim(&self) -> usize {
        self.channels.iter().map(|c| fv_len(c.gmm.k(), c.gmm.dim())).sum()
    }

    /// Checks that dimensions chain from raw descriptors to classes.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Container(m));
        if self.channels.is_empty() {
            return bad("no channels".into());
        }
        let sta = if self.config.sta { 3 } else { 0 };
        for c in &self.channels {
            c.pca.validate().map_err(|e| Error::Container(format!("channel `{}`: {e}", c.spec.name)))?;
            if c.pca.input_dim() != c.spec.raw_dim {
                return bad(format!(
                    "channel `{}`: pca expects {} dims, channel has {}",
                    c.spec.name,
                    c.pca.input_dim(),
                    c.spec.raw_dim
                ));
            }
            if c.gmm.dim() != c.pca.output_dim() + sta {
                return bad(format!(
                    "channel `{}`: gmm dim {} does not follow pca dim {}",
                    c.spec.name,
                    c.gmm.dim(),
                    c.pca.output_dim()
                ));
            }
        }
        let rep = self.representation_dim();
        if let Some(r) = &self.reduction {
            r.validate().map_err(|e| Error::Container(format!("reduction: {e}")))?;
            if r.input_dim() != rep {
                return bad(format!("reduction expects {} dims, representation has {rep}", r.input_dim()));
            }
        }
        if let Some(clf) = &self.classifier {
            match clf {
                ClassifierModel::Net(m) => m.validate(),
                ClassifierModel::Svm(s) => s.validate(),
                ClassifierModel::Ensemble(ms) => {
                    if ms.is_empty() {
                        return bad("empty ensemble".into());
                    }
                    ms.iter().try_for_each(|m| {
                        m.validate()?;
                        if m.input_dim() != ms[0].input_dim() || m.class_count() != ms[0].class_count() {
                            return Err(Error::Container("ensemble members differ in shape".into()));
                        }
                        Ok(())
                    })
                }
            }
            .map_err(|e| match e {
                Error::Container(_) => e,
                e => Error::Container(format!("classifier: {e}")),
            })?;
            if clf.input_dim() != rep {
                return bad(format!("classifier expects {} dims, representation has {rep}", clf.input_dim()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CONTAINER_MAGIC);
        w.u32(CONTAINER_VERSION);
        section(&mut w, b"CONF", |s| s.str(&self.config.to_toml()));
        section(&mut w, b"CHAN", |s| {
            s.u32(self.channels.len() as u32);
            for c in &self.channels {
                s.str(&c.spec.name);
                s.u64(c.spec.raw_dim as u64);
                put_pca(s, &c.pca);
                put_gmm(s, &c.gmm);
            }
        });
        if let Some(r) = &self.reduction {
            section(&mut w, b"REDU", |s| put_pca(s, r));
        }
        match &self.classifier {
            Some(ClassifierModel::Net(m)) => section(&mut w, b"MLPN", |s| put_mlp(s, m)),
            Some(ClassifierModel::Svm(m)) => section(&mut w, b"SVMM", |s| {
                s.matrix(&m.weights);
                s.f64s(&m.biases);
                s.f64(m.c);
            }),
            Some(ClassifierModel::Ensemble(ms)) => section(&mut w, b"ENSM", |s| {
                s.u32(ms.len() as u32);
                for m in ms {
                    put_mlp(s, m);
                }
            }),
            None => {}
        }
        section(&mut w, b"END_", |_| {});
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CONTAINER_MAGIC {
            return Err(Error::MalformedHeader {
                offset: 0,
                reason: "not an FVC1 model container".into(),
            });
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::MalformedHeader {
                offset: 4,
                reason: format!("unsupported container version {version}"),
            });
        }
        let mut config = None;
        let mut channels = None;
        let mut reduction = None;
        let mut classifier = None;
        loop {
            let at = r.offset();
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.len_prefix(1)?;
            let body_at = r.offset();
            let mut s = ByteReader::new(r.take(len)?);
            let ctx = |e: Error| Error::Container(format!("section {} at byte {at}: {e}", String::from_utf8_lossy(&tag)));
            match &tag {
                b"END_" => break,
                b"CONF" => config = Some(PipelineConfig::from_toml(&s.str().map_err(ctx)?).map_err(ctx)?),
                b"CHAN" => channels = Some(get_channels(&mut s).map_err(ctx)?),
                b"REDU" => reduction = Some(get_pca(&mut s).map_err(ctx)?),
                b"MLPN" => classifier = Some(ClassifierModel::Net(get_mlp(&mut s).map_err(ctx)?)),
                b"SVMM" => {
                    let svm = (|| {
                        Ok(LinearSvmModel {
                            weights: s.matrix()?,
                            biases: s.f64s()?,
                            c: s.finite_f64()?,
                        })
                    })()
                    .map_err(ctx)?;
                    classifier = Some(ClassifierModel::Svm(svm));
                }
                b"ENSM" => {
                    let n = s.u32().map_err(ctx)?;
                    let ms = (0..n).map(|_| get_mlp(&mut s)).collect::<Result<Vec<_>>>().map_err(ctx)?;
                    classifier = Some(ClassifierModel::Ensemble(ms));
                }
                _ => continue,
            }
            if s.remaining() != 0 {
                return Err(Error::Container(format!(
                    "section {} at byte {body_at} has {} unread bytes",
                    String::from_utf8_lossy(&tag),
                    s.remaining()
                )));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Container(format!("{} trailing bytes after END_", r.remaining())));
        }
        let c = ModelContainer {
            config: config.ok_or_else(|| Error::Container("missing CONF section".into()))?,
            channels: channels.ok_or_else(|| Error::Container("missing CHAN section".into()))?,
            reduction,
            classifier,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn section(w: &mut ByteWriter, tag: &[u8; 4], body: impl FnOnce(&mut ByteWriter)) {
    let mut s = ByteWriter::new();
    body(&mut s);
    w.bytes(tag);
    w.u64(s.buf.len() as u64);
    w.bytes(&s.buf);
}

fn put_pca(w: &mut ByteWriter, m: &ReductionModel) {
    w.f64s(&m.mean);
    w.matrix(&m.basis);
    w.f64s(&m.eigvals);
    w.u8(m.whiten as u8);
}

fn get_bool(r: &mut ByteReader) -> Result<bool> {
    let at = r.offset();
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::OutOfRange {
            offset: at,
            reason: format!("flag byte {v}"),
        }),
    }
}

fn get_pca(r: &mut ByteReader) -> Result<ReductionModel> {
    let m = ReductionModel {
        mean: r.f64s()?,
        basis: r.matrix()?,
        eigvals: r.f64s()?,
        whiten: get_bool(r)?,
    };
    m.validate()?;
    Ok(m)
}

fn put_gmm(w: &mut ByteWriter, g: &GmmModel) {
    w.f64s(g.weights());
    w.matrix(g.means());
    w.matrix(g.stds());
}

fn get_channels(r: &mut ByteReader) -> Result<Vec<ChannelModel>> {
    let n = r.u32()?;
    (0..n)
        .map(|_| {
            let spec = ChannelSpec::new(r.str()?, r.u64()? as usize);
            let pca = get_pca(r)?;
            let gmm = GmmModel::new(r.f64s()?, r.matrix()?, r.matrix()?)?;
            Ok(ChannelModel { spec, pca, gmm })
        })
        .collect()
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Softmax => 1,
        Activation::Sigmoid => 2,
        Activation::None => 3,
    }
}

fn put_mlp(w: &mut ByteWriter, m: &MlpModel) {
    w.u8(match m.task {
        Task::Multiclass => 0,
        Task::Multilabel => 1,
    });
    w.u32(m.layers.len() as u32);
    for l in &m.layers {
        let s = &l.spec;
        w.u64(s.in_dim as u64);
        w.u64(s.out_dim as u64);
        w.u8(s.has_bn as u8);
        w.u8(activation_code(s.activation));
        w.u8(s.trainable as u8);
        w.f64(s.dropout_p);
        w.u8(s.l2_output as u8);
        w.matrix(&l.weights);
        w.f64s(l.bias.as_slice().expect("contiguous"));
        if let Some(bn) = &l.bn {
            for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                w.f64s(v.as_slice().expect("contiguous"));
            }
            w.f64(bn.eps);
            w.f64(bn.momentum);
            w.u64(bn.updates);
        }
    }
}

fn get_mlp(r: &mut ByteReader) -> Result<MlpModel> {
    let at = r.offset();
    let task = match r.u8()? {
        0 => Task::Multiclass,
        1 => Task::Multilabel,
        v => {
            return Err(Error::OutOfRange {
                offset: at,
                reason: format!("task code {v}"),
            })
        }
    };
    let n = r.u32()?;
    let mut layers = Vec::with_capacity(n.min(64) as usize);
    for _ in 0..n {
        let in_dim = r.u64()? as usize;
        let out_dim = r.u64()? as usize;
        let has_bn = get_bool(r)?;
        let at = r.offset();
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Softmax,
            2 => Activation::Sigmoid,
            3 => Activation::None,
            v => {
                return Err(Error::OutOfRange {
                    offset: at,
                    reason: format!("activation code {v}"),
                })
            }
        };
        let spec = LayerSpec {
            in_dim,
            out_dim,
            has_bn,
            activation,
            trainable: get_bool(r)?,
            dropout_p: r.finite_f64()?,
            l2_output: get_bool(r)?,
        };
        let weights = r.matrix()?;
        let bias = Array1::from(r.f64s()?);
        let bn = if has_bn {
            Some(BatchNormParams {
                gamma: Array1::from(r.f64s()?),
                beta: Array1::from(r.f64s()?),
                running_mean: Array1::from(r.f64s()?),
                running_var: Array1::from(r.f64s()?),
                eps: r.finite_f64()?,
                momentum: r.finite_f64()?,
                updates: r.u64()?,
            })
        } else {
            None
        };
        if let Some(bn) = &bn {
            let d = spec.out_dim;
            if [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var].iter().any(|v| v.len() != d) {
                return Err(Error::Container("batch-norm parameter length mismatch".into()));
            }
        }
        layers.push(Dense { spec, weights, bias, bn });
    }
    let m = MlpModel { layers, task };
    m.validate()?;
    Ok(m)
}
