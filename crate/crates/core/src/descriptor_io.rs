//! Per-video trajectory descriptors: the binary `FVD1` file format,
//! RootSIFT, spatio-temporal augmentation, feature stacking across video
//! transformations, and a seeded synthetic generator.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"FVD1";
pub const DESCRIPTOR_VERSION: u32 = 1;

/// One descriptor family (Traj, HOG, HOF, MBHx, MBHy, ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub raw_dim: usize,
}

impl ChannelSpec {
    pub fn new(name: impl Into<String>, raw_dim: usize) -> Self {
        Self {
            name: name.into(),
            raw_dim,
        }
    }

    /// The five iDT channels: Traj, HOG, HOF, MBHx, MBHy.
    pub fn idt() -> Vec<ChannelSpec> {
        vec![
            ChannelSpec::new("Traj", 30),
            ChannelSpec::new("HOG", 96),
            ChannelSpec::new("HOF", 108),
            ChannelSpec::new("MBHx", 96),
            ChannelSpec::new("MBHy", 96),
        ]
    }
}

pub fn validate_channels(channels: &[ChannelSpec]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for c in channels {
        if c.raw_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "channel `{}` has zero dimension",
                c.name
            )));
        }
        if !seen.insert(c.name.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate channel name `{}`",
                c.name
            )));
        }
    }
    Ok(())
}

/// A single trajectory: normalized position/time plus one row per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub x: f32,
    pub y: f32,
    pub t: f32,
    pub values: Vec<Vec<f32>>,
}

impl TrajectoryRecord {
    /// Builds a record from pixel/frame coordinates, normalizing them by the
    /// video's width, height and frame count.
    pub fn from_raw(
        x_px: f64,
        y_px: f64,
        frame: f64,
        width: f64,
        height: f64,
        frames: f64,
        values: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if width <= 0.0 || height <= 0.0 || frames <= 0.0 {
            return Err(Error::InvalidArgument(
                "video extent must be positive".into(),
            ));
        }
        let norm = |v: f64, extent: f64| (v / extent).clamp(0.0, 1.0) as f32;
        Ok(Self {
            x: norm(x_px, width),
            y: norm(y_px, height),
            t: norm(frame, frames),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub video_id: String,
    pub labels: BTreeSet<u32>,
    pub channels: Vec<ChannelSpec>,
    pub records: Vec<TrajectoryRecord>,
}

impl DescriptorSet {
    pub fn validate(&self) -> Result<()> {
        validate_channels(&self.channels)?;
        for (i, r) in self.records.iter().enumerate() {
            if r.values.len() != self.channels.len() {
                return Err(Error::InvalidArgument(format!(
                    "record {i} has {} channel rows, expected {}",
                    r.values.len(),
                    self.channels.len()
                )));
            }
            for (row, ch) in r.values.iter().zip(&self.channels) {
                if row.len() != ch.raw_dim {
                    return Err(Error::DimensionMismatch {
                        expected: ch.raw_dim,
                        actual: row.len(),
                    });
                }
            }
            for c in [r.x, r.y, r.t] {
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::InvalidArgument(format!(
                        "record {i} coordinate {c} outside [0,1]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownChannel(name.to_string()))
    }

    /// All rows of one channel as an n x raw_dim matrix.
    pub fn channel_rows(&self, channel: usize) -> Array2<f64> {
        let dim = self.channels[channel].raw_dim;
        let mut m = Array2::zeros((self.records.len(), dim));
        for (mut row, rec) in m.rows_mut().into_iter().zip(&self.records) {
            for (dst, &src) in row.iter_mut().zip(&rec.values[channel]) {
                *dst = src as f64;
            }
        }
        m
    }
}

fn header_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        offset,
        reason: reason.into(),
    }
}

pub fn encode_descriptors(set: &DescriptorSet) -> Result<Vec<u8>> {
    set.validate()?;
    let mut w = ByteWriter::new();
    w.bytes(DESCRIPTOR_MAGIC);
    w.u32(DESCRIPTOR_VERSION);
    w.u32(set.channels.len() as u32);
    for c in &set.channels {
        let name = c.name.as_bytes();
        if name.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "channel name `{}` longer than 255 bytes",
                c.name
            )));
        }
        w.u8(name.len() as u8);
        w.bytes(name);
        w.u32(c.raw_dim as u32);
    }
    w.u32(set.labels.len() as u32);
    for &l in &set.labels {
        w.u32(l);
    }
    w.u64(set.records.len() as u64);
    for r in &set.records {
        w.f32(r.x);
        w.f32(r.y);
        w.f32(r.t);
        for row in &r.values {
            for &v in row {
                w.f32(v);
            }
        }
    }
    Ok(w.buf)
}

pub fn decode_descriptors(bytes: &[u8], video_id: &str) -> Result<DescriptorSet> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != DESCRIPTOR_MAGIC {
        return Err(header_err(0, "bad magic, expected FVD1"));
    }
    let at = r.offset();
    let version = r.u32()?;
    if version != DESCRIPTOR_VERSION {
        return Err(header_err(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let channel_count = r.u32()? as usize;
    if channel_count == 0 {
        return Err(header_err(at, "zero channels"));
    }
    let mut channels = Vec::with_capacity(channel_count.min(256));
    for _ in 0..channel_count {
        let at = r.offset();
        let len = r.u8()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| header_err(at, "channel name is not utf-8"))?
            .to_string();
        let at = r.offset();
        let raw_dim = r.u32()? as usize;
        if raw_dim == 0 {
            return Err(Error::FileDimensionMismatch {
                offset: at,
                reason: format!("channel `{name}` declares zero dimension"),
            });
        }
        if channels.iter().any(|c: &ChannelSpec| c.name == name) {
            return Err(header_err(at, format!("duplicate channel `{name}`")));
        }
        channels.push(ChannelSpec { name, raw_dim });
    }
    let label_count = r.u32()? as usize;
    let mut labels = BTreeSet::new();
    for _ in 0..label_count {
        let at = r.offset();
        if !labels.insert(r.u32()?) {
            return Err(header_err(at, "duplicate label"));
        }
    }
    let record_count = r.u64()? as usize;
    let per_record: usize = 3 + channels.iter().map(|c| c.raw_dim).sum::<usize>();
    let body = record_count.saturating_mul(per_record).saturating_mul(4);
    if body != r.remaining() {
        if body > r.remaining() {
            // Locate the first record that does not fit.
            let whole = r.remaining() / (per_record * 4);
            let offset = r.offset() + whole * per_record * 4;
            return Err(Error::Truncated {
                offset,
                needed: (record_count - whole)
                    .saturating_mul(per_record * 4)
                    .saturating_sub(r.remaining() % (per_record * 4)),
                available: r.remaining() % (per_record * 4),
            });
        }
        return Err(Error::FileDimensionMismatch {
            offset: r.offset() + body,
            reason: format!(
                "{} trailing bytes after {record_count} records",
                r.remaining() - body
            ),
        });
    }
    let mut records = Vec::with_capacity(record_count);
    for _ in 0..record_count {
        let mut coords = [0f32; 3];
        for c in &mut coords {
            let at = r.offset();
            *c = r.finite_f32()?;
            if !(0.0..=1.0).contains(c) {
                return Err(Error::OutOfRange {
                    offset: at,
                    reason: format!("coordinate {c} outside [0,1]"),
                });
            }
        }
        let values = channels
            .iter()
            .map(|ch| (0..ch.raw_dim).map(|_| r.finite_f32()).collect())
            .collect::<Result<Vec<Vec<f32>>>>()?;
        records.push(TrajectoryRecord {
            x: coords[0],
            y: coords[1],
            t: coords[2],
            values,
        });
    }
    Ok(DescriptorSet {
        video_id: video_id.to_string(),
        labels,
        channels,
        records,
    })
}

/// Video id and transform tag encoded in a descriptor file name:
/// `<video>.fvd`, or `<video>@s<skip>[m].fvd` for a transformed variant.
pub fn parse_descriptor_file_name(path: &Path) -> Result<(String, TransformTag)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad file name {}", path.display())))?;
    match stem.split_once('@') {
        None => Ok((stem.to_string(), TransformTag::IDENTITY)),
        Some((id, tag)) => Ok((id.to_string(), TransformTag::parse(tag)?)),
    }
}

pub fn descriptor_file_name(video_id: &str, tag: TransformTag) -> String {
    if tag == TransformTag::IDENTITY {
        format!("{video_id}.fvd")
    } else {
        format!("{video_id}@{tag}.fvd")
    }
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorSet> {
    let bytes = read_file(path)?;
    let (video_id, _) = parse_descriptor_file_name(path)?;
    decode_descriptors(&bytes, &video_id)
}

pub fn write_descriptors(set: &DescriptorSet, path: &Path) -> Result<()> {
    write_file(path, &encode_descriptors(set)?)
}

/// ℓ1 normalization followed by a signed square root. All-zero rows are
/// returned unchanged.
pub fn rootsift(v: &[f64]) -> Vec<f64> {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 == 0.0 {
        return v.to_vec();
    }
    v.iter()
        .map(|&x| x.signum() * (x.abs() / l1).sqrt())
        .map(|x| if x == 0.0 { 0.0 } else { x })
        .collect()
}

/// Appends the record's (x, y, t) to a reduced descriptor row.
pub fn augment_sta(row: &[f64], rec: &TrajectoryRecord) -> Vec<f64> {
    let mut out = Vec::with_capacity(row.len() + 3);
    out.extend_from_slice(row);
    out.extend([rec.x as f64, rec.y as f64, rec.t as f64]);
    out
}

/// A semantics-preserving video transformation: frame skipping and/or
/// horizontal mirroring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransformTag {
    pub skip_level: u32,
    pub mirrored: bool,
}

impl TransformTag {
    pub const IDENTITY: TransformTag = TransformTag {
        skip_level: 1,
        mirrored: false,
    };

    pub fn new(skip_level: u32, mirrored: bool) -> Result<Self> {
        if skip_level == 0 {
            return Err(Error::InvalidArgument("skip level must be >= 1".into()));
        }
        Ok(Self {
            skip_level,
            mirrored,
        })
    }

    /// Frame skips {1,2,3} crossed with {plain, mirrored}.
    pub fn default_family() -> Vec<TransformTag> {
        (1..=3)
            .flat_map(|s| {
                [false, true].map(|m| TransformTag {
                    skip_level: s,
                    mirrored: m,
                })
            })
            .collect()
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad transform tag `{s}`"));
        let rest = s.strip_prefix('s').ok_or_else(bad)?;
        let (digits, mirrored) = match rest.strip_suffix('m') {
            Some(d) => (d, true),
            None => (rest, false),
        };
        let skip = digits.parse::<u32>().map_err(|_| bad())?;
        TransformTag::new(skip, mirrored)
    }
}

impl std::fmt::Display for TransformTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}{}", self.skip_level, if self.mirrored { "m" } else { "" })
    }
}

/// Stacks the records of every transformed version of one video into a
/// single set, ahead of encoding.
pub fn dafs_stack(variants: &[(TransformTag, DescriptorSet)]) -> Result<DescriptorSet> {
    let (_, first) = variants
        .first()
        .ok_or_else(|| Error::Empty("dafs_stack needs at least one variant".into()))?;
    let mut out = first.clone();
    for (tag, v) in &variants[1..] {
        if v.channels != first.channels {
            return Err(Error::ChannelMismatch(format!(
                "variant {tag} of `{}` has different channels",
                first.video_id
            )));
        }
        if v.video_id != first.video_id {
            return Err(Error::ChannelMismatch(format!(
                "variant {tag} belongs to `{}`, not `{}`",
                v.video_id, first.video_id
            )));
        }
        out.labels.extend(v.labels.iter().copied());
        out.records.extend(v.records.iter().cloned());
    }
    Ok(out)
}

/// How class-conditional descriptor clusters are arranged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassLayout {
    /// Each class gets its own cluster center, displaced from a shared base.
    #[default]
    Blobs,
    /// Two classes; each video draws two signs, even channels shift by the
    /// first and odd channels by the second, and the class is their XOR.
    Xor,
}

/// Description of a synthetic descriptor dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub videos_per_class: usize,
    pub records_per_video: usize,
    pub channels: Vec<ChannelSpec>,
    /// Distance of class centers from the shared base, in units of `noise`.
    pub separation: f64,
    /// Per-record, per-dimension standard deviation.
    pub noise: f64,
    /// Per-video center jitter, in units of `noise`.
    pub video_jitter: f64,
    /// Fraction of each video's records drawn from class-independent clutter.
    pub background_fraction: f64,
    pub layout: ClassLayout,
    /// Seeds the class geometry; datasets sharing it share cluster centers.
    pub geometry_seed: u64,
    /// Leading dims of every channel negated by a mirrored variant.
    pub mirror_dims: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            videos_per_class: 10,
            records_per_video: 50,
            channels: vec![ChannelSpec::new("HOG", 8), ChannelSpec::new("HOF", 6)],
            separation: 3.0,
            noise: 0.25,
            video_jitter: 0.3,
            background_fraction: 0.3,
            layout: ClassLayout::Blobs,
            geometry_seed: 0,
            mirror_dims: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.classes == 0 || self.videos_per_class == 0 || self.records_per_video == 0 {
            return bad("counts must be positive");
        }
        if self.layout == ClassLayout::Xor && self.classes != 2 {
            return bad("xor layout needs exactly 2 classes");
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() {
            return bad("noise scale must be positive");
        }
        if !(self.video_jitter >= 0.0) || !(self.separation >= 0.0) {
            return bad("jitter and separation must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.background_fraction) {
            return bad("background fraction must lie in [0,1]");
        }
        validate_channels(&self.channels)?;
        if self.layout == ClassLayout::Xor && self.channels.len() < 2 {
            return bad("xor layout needs at least 2 channels");
        }
        Ok(())
    }
}

const BACKGROUND_CLUSTERS: usize = 3;

struct ChannelGeometry {
    base: Vec<f64>,
    /// One unit direction per class (blobs) or a single axis (xor).
    directions: Vec<Vec<f64>>,
    background: Vec<Vec<f64>>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn geometry(spec: &SynthSpec) -> Vec<ChannelGeometry> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.geometry_seed ^ 0x9e37_79b9_7f4a_7c15);
    spec.channels
        .iter()
        .map(|ch| {
            let d = ch.raw_dim;
            let base: Vec<f64> = (0..d).map(|_| rng.random_range(1.0..3.0)).collect();
            let directions = match spec.layout {
                ClassLayout::Blobs => (0..spec.classes).map(|_| unit_gaussian(&mut rng, d)).collect(),
                ClassLayout::Xor => vec![unit_gaussian(&mut rng, d)],
            };
            let background = (0..BACKGROUND_CLUSTERS)
                .map(|_| {
                    let dir = unit_gaussian(&mut rng, d);
                    base.iter().zip(&dir).map(|(b, u)| b + 4.0 * spec.noise * u).collect()
                })
                .collect();
            ChannelGeometry {
                base,
                directions,
                background,
            }
        })
        .collect()
}

fn stream_seed(seed: u64, video: u64, stream: u64) -> u64 {
    // splitmix-style mixing so neighbouring indices get unrelated streams
    let mut z = seed
        .wrapping_add(video.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-video latent state: class, cluster centers for each channel.
struct VideoLatent {
    class: u32,
    centers: Vec<Vec<f64>>,
}

fn video_latent(spec: &SynthSpec, geo: &[ChannelGeometry], seed: u64, index: usize) -> VideoLatent {
    let class = (index / spec.videos_per_class) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, index as u64, u64::MAX));
    let quadrant: bool = rng.random();
    let centers = geo
        .iter()
        .enumerate()
        .map(|(ci, g)| {
            let shift: Vec<f64> = match spec.layout {
                ClassLayout::Blobs => g.directions[class as usize].clone(),
                ClassLayout::Xor => {
                    // even channels carry s1, odd channels s2; class 0 when the signs agree
                    let s1 = if quadrant { 1.0 } else { -1.0 };
                    let s2 = if class == 0 { s1 } else { -s1 };
                    let s = if ci % 2 == 0 { s1 } else { s2 };
                    g.directions[0].iter().map(|a| s * a).collect()
                }
            };
            g.base
                .iter()
                .zip(&shift)
                .map(|(b, u)| {
                    let jitter: f64 = StandardNormal.sample(&mut rng);
                    b + spec.noise * (spec.separation * u + spec.video_jitter * jitter)
                })
                .collect()
        })
        .collect();
    VideoLatent { class, centers }
}

fn draw_records(
    spec: &SynthSpec,
    geo: &[ChannelGeometry],
    latent: &VideoLatent,
    count: usize,
    tag: TransformTag,
    rng: &mut ChaCha8Rng,
) -> Vec<TrajectoryRecord> {
    (0..count)
        .map(|_| {
            let mut x: f32 = rng.random();
            let y: f32 = rng.random();
            let t: f32 = rng.random();
            let clutter = rng.random::<f64>() < spec.background_fraction;
            let pick = rng.random_range(0..BACKGROUND_CLUSTERS);
            let values = geo
                .iter()
                .zip(&latent.centers)
                .map(|(g, center)| {
                    let c = if clutter { &g.background[pick] } else { center };
                    c.iter()
                        .enumerate()
                        .map(|(d, &m)| {
                            let e: f64 = StandardNormal.sample(rng);
                            let mut v = (m + spec.noise * e).max(0.0);
                            if tag.mirrored && d < spec.mirror_dims {
                                v = -v;
                            }
                            v as f32
                        })
                        .collect()
                })
                .collect();
            if tag.mirrored {
                x = 1.0 - x;
            }
            TrajectoryRecord { x, y, t, values }
        })
        .collect()
}

/// Generates `classes * videos_per_class` videos; video `i` belongs to class
/// `i / videos_per_class`. Output is a pure function of `(spec, seed)`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Vec<DescriptorSet>> {
    Ok(synth_generate_variants(spec, seed, &[TransformTag::IDENTITY])?
        .into_iter()
        .map(|mut v| v.remove(0).1)
        .collect())
}

/// Like [`synth_generate`] but emits one set per transform tag for every
/// video. A skip level `s` draws `ceil(records / s)` fresh trajectories from
/// the video's distribution; mirroring maps x to 1-x and negates the leading
/// `mirror_dims` descriptor dims. The identity tag reproduces
/// [`synth_generate`] exactly.
pub fn synth_generate_variants(
    spec: &SynthSpec,
    seed: u64,
    tags: &[TransformTag],
) -> Result<Vec<Vec<(TransformTag, DescriptorSet)>>> {
    spec.validate()?;
    let geo = geometry(spec);
    let total = spec.classes * spec.videos_per_class;
    Ok((0..total)
        .map(|i| {
            let latent = video_latent(spec, &geo, seed, i);
            tags.iter()
                .map(|&tag| {
                    let stream = ((tag.skip_level as u64) << 1) | tag.mirrored as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, i as u64, stream));
                    let count = spec.records_per_video.div_ceil(tag.skip_level as usize);
                    let records = draw_records(spec, &geo, &latent, count, tag, &mut rng);
                    let set = DescriptorSet {
                        video_id: format!("v{i:05}"),
                        labels: BTreeSet::from([latent.class]),
                        channels: spec.channels.clone(),
                        records,
                    };
                    (tag, set)
                })
                .collect()
        })
        .collect())
}
