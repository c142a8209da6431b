use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptor_io::{validate_channels, ChannelSpec, TransformTag};
use crate::error::{Error, Result};
use crate::fv::fv_len;
use crate::gmm::FitConfig;
use crate::net::{AdamConfig, Task};
use crate::reduction::PcaTarget;

/// Widest hidden layer allowed when the reduction layer is trained.
pub const SUPERVISED_WIDTH_CAP: usize = 1024;

/// Per-channel descriptor PCA before the GMM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorPca {
    /// Keep half of the raw dimensions.
    #[default]
    Halve,
    Dim(usize),
    Off,
}

impl DescriptorPca {
    pub fn output_dim(self, raw: usize) -> usize {
        match self {
            DescriptorPca::Halve => raw / 2,
            DescriptorPca::Dim(d) => d,
            DescriptorPca::Off => raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReductionMode {
    /// Frozen whitened-PCA first layer.
    #[default]
    UnsupervisedPca,
    /// First layer trained with the rest of the net.
    SupervisedMidtoend,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReductionConfig {
    pub mode: ReductionMode,
    /// Output size of the PCA layer (unsupervised mode only).
    pub target: PcaTarget,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            mode: ReductionMode::UnsupervisedPca,
            target: PcaTarget::Fraction(0.99),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Layers before the output layer, the reduction layer included.
    pub depth: usize,
    pub width: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub task: Task,
    pub adam: AdamConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 4096,
            dropout: 0.5,
            batch_norm: true,
            batch_size: 128,
            epochs: 50,
            task: Task::Multiclass,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    #[default]
    Net,
    Svm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Channels to use, in order. Empty means whatever the data carries.
    pub channels: Vec<ChannelSpec>,
    /// Transform tags stacked when encoding with feature stacking on.
    pub dafs_variants: Vec<String>,
    /// Append normalized (x, y, t) to each reduced descriptor.
    pub sta: bool,
    pub descriptor_pca: DescriptorPca,
    /// Raw descriptor rows sampled per channel for the descriptor PCA.
    pub pca_sample_size: usize,
    pub gmm: FitConfig,
    /// Per-channel overrides of `gmm`.
    pub gmm_channels: BTreeMap<String, FitConfig>,
    pub reduction: ReductionConfig,
    pub net: NetConfig,
    pub classifier: ClassifierKind,
    pub svm_c: f64,
    pub bagging: usize,
    /// Number of classes; inferred from training labels when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: Vec::new(),
            dafs_variants: TransformTag::default_family().iter().map(|t| t.to_string()).collect(),
            sta: true,
            descriptor_pca: DescriptorPca::Halve,
            pca_sample_size: 256_000,
            gmm: FitConfig::default(),
            gmm_channels: BTreeMap::new(),
            reduction: ReductionConfig::default(),
            net: NetConfig::default(),
            classifier: ClassifierKind::Net,
            svm_c: crate::classify::DEFAULT_C,
            bagging: 8,
            classes: None,
        }
    }
}

impl PipelineConfig {
    /// Five iDT channels, K = 256, halving PCA, STA.
    pub fn idt() -> Self {
        Self {
            channels: ChannelSpec::idt(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as toml")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        validate_channels(&self.channels).map_err(|e| Error::Config(e.to_string()))?;
        if self.net.depth == 0 {
            return bad("net depth must be >= 1".into());
        }
        if self.net.width == 0 || self.net.batch_size == 0 {
            return bad("net width and batch size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.net.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.net.dropout));
        }
        if self.bagging == 0 {
            return bad("bagging count must be >= 1".into());
        }
        if !(self.svm_c > 0.0) {
            return bad(format!("svm_c must be positive, got {}", self.svm_c));
        }
        if self.pca_sample_size == 0 {
            return bad("pca_sample_size must be >= 1".into());
        }
        if let Some(c) = self.classes {
            if c < 2 {
                return bad("need at least 2 classes".into());
            }
        }
        match self.reduction.target {
            PcaTarget::Dim(0) => return bad("reduction dim must be >= 1".into()),
            PcaTarget::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return bad(format!("reduction fraction {f} outside (0, 1]"))
            }
            _ => {}
        }
        if !(self.net.adam.alpha > 0.0) {
            return bad("adam alpha must be positive".into());
        }
        self.variant_tags()?;
        self.gmm.validate()?;
        for (name, g) in &self.gmm_channels {
            if !self.channels.is_empty() && !self.channels.iter().any(|c| &c.name == name) {
                return bad(format!("gmm override for unknown channel `{name}`"));
            }
            g.validate()?;
        }
        for c in &self.channels {
            let d = self.descriptor_pca.output_dim(c.raw_dim);
            if d == 0 || d > c.raw_dim {
                return bad(format!("descriptor pca keeps {d} of {} dims for `{}`", c.raw_dim, c.name));
            }
        }
        Ok(())
    }

    pub fn variant_tags(&self) -> Result<Vec<TransformTag>> {
        let tags = self
            .dafs_variants
            .iter()
            .map(|s| TransformTag::parse(s).map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if !tags.contains(&TransformTag::IDENTITY) {
            return Err(Error::Config("dafs_variants must include the identity tag s1".into()));
        }
        Ok(tags)
    }

    pub fn gmm_for(&self, channel: &str) -> &FitConfig {
        self.gmm_channels.get(channel).unwrap_or(&self.gmm)
    }

    /// GMM input dimension of each configured channel.
    pub fn gmm_input_dims(&self) -> Vec<usize> {
        self.channels
            .iter()
            .map(|c| self.descriptor_pca.output_dim(c.raw_dim) + if self.sta { 3 } else { 0 })
            .collect()
    }

    pub fn fv_lengths(&self) -> Vec<usize> {
        self.channels
            .iter()
            .zip(self.gmm_input_dims())
            .map(|(c, d)| fv_len(self.gmm_for(&c.name).k, d))
            .collect()
    }

    pub fn representation_dim(&self) -> usize {
        self.fv_lengths().iter().sum()
    }
}
