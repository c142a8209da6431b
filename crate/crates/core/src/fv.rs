//! Fisher Vector encoding, sum pooling and the double normalization chain.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};

use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::gmm::{GmmModel, PosteriorCache};

pub const REPRESENTATION_MAGIC: &[u8; 4] = b"FVR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FvStage {
    PooledRaw,
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    pub channel: String,
    pub values: Vec<f64>,
    pub stage: FvStage,
}

/// Video-level classifier input: the concatenated, doubly normalized FVs.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRepresentation {
    pub video_id: String,
    pub labels: BTreeSet<u32>,
    pub vector: Vec<f64>,
}

pub fn fv_len(k: usize, dim: usize) -> usize {
    2 * k * dim
}

/// Encodes one descriptor: `[phi_1 .. phi_K]`, each block holding the D
/// first-order then D second-order gradient statistics.
pub fn fv_encode_row(model: &GmmModel, x: ArrayView1<f64>) -> Result<Vec<f64>> {
    check_dim(model, x.len())?;
    let cache = PosteriorCache::new(model);
    let mut out = vec![0.0; fv_len(model.k(), model.dim())];
    let mut gamma = vec![0.0; model.k()];
    accumulate_row(&cache, x, &mut gamma, &mut out);
    Ok(out)
}

fn check_dim(model: &GmmModel, actual: usize) -> Result<()> {
    if actual != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual,
        });
    }
    Ok(())
}

/// Adds the encoding of `x` into `acc`. Components with exactly zero
/// responsibility contribute exact zeros and are skipped.
fn accumulate_row(cache: &PosteriorCache, x: ArrayView1<f64>, gamma: &mut [f64], acc: &mut [f64]) {
    let model = cache.model;
    let d = model.dim();
    cache.posterior_into(x, gamma);
    for (k, &g) in gamma.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let w = model.weights()[k];
        let first = g / w.sqrt();
        let second = g / (2.0 * w).sqrt();
        let mu = model.means().row(k);
        let sd = model.stds().row(k);
        let block = &mut acc[2 * k * d..2 * (k + 1) * d];
        for j in 0..d {
            let z = (x[j] - mu[j]) / sd[j];
            block[j] += first * z;
            block[d + j] += second * (z * z - 1.0);
        }
    }
}

/// Sum-pools the encodings of all rows. Accumulation is in f64 and in row
/// order, so the result equals summing [`fv_encode_row`] outputs in order.
pub fn fv_pool(model: &GmmModel, channel: &str, rows: ArrayView2<f64>) -> Result<FisherVector> {
    if rows.nrows() == 0 {
        return Err(Error::Empty(format!("no rows to pool for channel `{channel}`")));
    }
    check_dim(model, rows.ncols())?;
    let cache = PosteriorCache::new(model);
    let mut acc = vec![0.0; fv_len(model.k(), model.dim())];
    let mut gamma = vec![0.0; model.k()];
    for x in rows.rows() {
        accumulate_row(&cache, x, &mut gamma, &mut acc);
    }
    Ok(FisherVector {
        channel: channel.to_string(),
        values: acc,
        stage: FvStage::PooledRaw,
    })
}

pub fn signed_sqrt(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.signum() * x.abs().sqrt()).map(|x| if x == 0.0 { 0.0 } else { x }).collect()
}

/// Scales to unit ℓ2 norm; the zero vector is returned unchanged.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

fn power_l2(v: &[f64]) -> Vec<f64> {
    l2_normalize(&signed_sqrt(v))
}

/// Normalizes each channel (signed sqrt, ℓ2), concatenates in `channels`
/// order, then applies the same normalization to the concatenation.
pub fn finalize_video(
    video_id: &str,
    labels: BTreeSet<u32>,
    per_channel: &[FisherVector],
    channels: &[String],
) -> Result<VideoRepresentation> {
    let names: Vec<&str> = per_channel.iter().map(|f| f.channel.as_str()).collect();
    if names.len() != channels.len() || names.iter().zip(channels).any(|(a, b)| a != b) {
        return Err(Error::ChannelMismatch(format!(
            "expected channels {channels:?}, got {names:?}"
        )));
    }
    if let Some(f) = per_channel.iter().find(|f| f.stage != FvStage::PooledRaw) {
        return Err(Error::InvalidArgument(format!(
            "channel `{}` is already normalized",
            f.channel
        )));
    }
    let mut concat = Vec::with_capacity(per_channel.iter().map(|f| f.values.len()).sum());
    for f in per_channel {
        concat.extend(power_l2(&f.values));
    }
    Ok(VideoRepresentation {
        video_id: video_id.to_string(),
        labels,
        vector: power_l2(&concat),
    })
}

impl VideoRepresentation {
    /// Rounds the vector through f32, the precision of the on-disk cache, so
    /// in-memory and cached representations are interchangeable bit for bit.
    pub fn quantized(mut self) -> Self {
        self.vector.iter_mut().for_each(|v| *v = *v as f32 as f64);
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(REPRESENTATION_MAGIC);
        w.u32(self.vector.len() as u32);
        w.u32(self.labels.len() as u32);
        for &l in &self.labels {
            w.u32(l);
        }
        for &v in &self.vector {
            w.f32(v as f32);
        }
        w.buf
    }

    pub fn decode(bytes: &[u8], video_id: &str) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != REPRESENTATION_MAGIC {
            return Err(Error::MalformedHeader {
                offset: 0,
                reason: "bad magic, expected FVR1".into(),
            });
        }
        let dim = r.u32()? as usize;
        let label_count = r.u32()? as usize;
        let labels = (0..label_count)
            .map(|_| r.u32())
            .collect::<Result<BTreeSet<u32>>>()?;
        if r.remaining() != dim * 4 {
            if r.remaining() < dim * 4 {
                return Err(Error::Truncated {
                    offset: bytes.len(),
                    needed: dim * 4 - r.remaining(),
                    available: 0,
                });
            }
            return Err(Error::FileDimensionMismatch {
                offset: r.offset() + dim * 4,
                reason: "trailing bytes after representation".into(),
            });
        }
        let vector = (0..dim)
            .map(|_| r.finite_f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            video_id: video_id.to_string(),
            labels,
            vector,
        })
    }
}

pub fn write_representation(rep: &VideoRepresentation, path: &Path) -> Result<()> {
    write_file(path, &rep.encode())
}

pub fn read_representation(path: &Path) -> Result<VideoRepresentation> {
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    VideoRepresentation::decode(&read_file(path)?, &id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::posterior;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_model() -> GmmModel {
        GmmModel::new(vec![1.0], array![[0.0]], array![[1.0]]).unwrap()
    }

    #[test]
    fn encode_row_at_standard_normal_mean() {
        let out = fv_encode_row(&unit_model(), array![0.0].view()).unwrap();
        assert_eq!(out[0], 0.0);
        assert!((out[1] + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn first_order_block_vanishes_at_dominant_mean() {
        let m = GmmModel::new(
            vec![0.5, 0.5],
            array![[0.0, 1.0], [40.0, 40.0]],
            array![[1.0, 2.0], [1.0, 1.0]],
        )
        .unwrap();
        let out = fv_encode_row(&m, array![0.0, 1.0].view()).unwrap();
        assert_eq!(&out[0..2], &[0.0, 0.0]);
    }

    #[test]
    fn idt_channel_lengths() {
        let k = 256;
        let lens: Vec<usize> = [18, 51, 57, 51, 51].iter().map(|&d| fv_len(k, d)).collect();
        assert_eq!(lens, vec![9216, 26112, 29184, 26112, 26112]);
        assert_eq!(lens.iter().sum::<usize>(), 116_736);
        let m = GmmModel::new(
            vec![1.0 / k as f64; k],
            Array2::zeros((k, 18)),
            Array2::ones((k, 18)),
        )
        .unwrap();
        assert_eq!(fv_encode_row(&m, Array2::zeros((1, 18)).row(0)).unwrap().len(), 9216);
    }

    #[test]
    fn pool_single_and_duplicated() {
        let m = GmmModel::new(vec![0.3, 0.7], array![[0.0], [2.0]], array![[1.0], [0.5]]).unwrap();
        let rows = array![[0.4], [1.7], [-0.3]];
        let single = fv_pool(&m, "c", rows.slice(ndarray::s![0..1, ..])).unwrap();
        assert_eq!(single.values, fv_encode_row(&m, rows.row(0)).unwrap());
        let once = fv_pool(&m, "c", rows.view()).unwrap();
        let twice_rows = ndarray::concatenate(ndarray::Axis(0), &[rows.view(), rows.view()]).unwrap();
        let twice = fv_pool(&m, "c", twice_rows.view()).unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert!(fv_pool(&m, "c", Array2::zeros((0, 1)).view()).is_err());
        assert!(fv_pool(&m, "c", Array2::zeros((2, 3)).view()).is_err());
    }

    /// Direct per-row transcription of the encoding formula.
    fn naive_pool(m: &GmmModel, rows: &Array2<f64>) -> Vec<f64> {
        let (k, d) = (m.k(), m.dim());
        let mut out = vec![0.0; 2 * k * d];
        for x in rows.rows() {
            let g = posterior(m, x).unwrap();
            for c in 0..k {
                let w = m.weights()[c];
                for j in 0..d {
                    let diff = x[j] - m.means()[[c, j]];
                    let s = m.stds()[[c, j]];
                    out[c * 2 * d + j] += g[c] / w.sqrt() * (diff / s);
                    out[c * 2 * d + d + j] += g[c] / (2.0 * w).sqrt() * (diff * diff / (s * s) - 1.0);
                }
            }
        }
        out
    }

    #[test]
    fn pool_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = GmmModel::new(
            vec![0.2, 0.5, 0.3],
            Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)),
            Array2::from_shape_fn((3, 4), |_| rng.random_range(0.5..1.5)),
        )
        .unwrap();
        let rows = Array2::from_shape_fn((30, 4), |_| rng.random_range(-2.0..2.0));
        let pooled = fv_pool(&m, "c", rows.view()).unwrap();
        for (a, b) in pooled.values.iter().zip(naive_pool(&m, &rows)) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(signed_sqrt(&[4.0, -9.0]), vec![2.0, -3.0]);
        assert_eq!(signed_sqrt(&[0.0, 0.0]), vec![0.0, 0.0]);
        let v = [16.0, -81.0, 0.5];
        let twice = signed_sqrt(&signed_sqrt(&v));
        for (t, x) in twice.iter().zip(v) {
            assert!((t - x.signum() * x.abs().powf(0.25)).abs() < 1e-15);
        }
        let n = l2_normalize(&[3.0, 4.0]);
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[0.6, 0.8]), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0; 3]), vec![0.0; 3]);
    }

    fn raw(ch: &str, values: Vec<f64>) -> FisherVector {
        FisherVector {
            channel: ch.into(),
            values,
            stage: FvStage::PooledRaw,
        }
    }

    #[test]
    fn finalize_constant_channel() {
        let (k, d) = (3, 2);
        let n = fv_len(k, d);
        let rep = finalize_video("v", BTreeSet::new(), &[raw("A", vec![7.0; n])], &["A".into()]).unwrap();
        let want = 1.0 / (n as f64).sqrt();
        assert!(rep.vector.iter().all(|v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn finalize_checks_channels() {
        let fvs = [raw("A", vec![1.0, -2.0]), raw("B", vec![3.0, 0.0, 1.0])];
        let rep = finalize_video("v", BTreeSet::new(), &fvs, &["A".into(), "B".into()]).unwrap();
        assert_eq!(rep.vector.len(), 5);
        assert!((rep.vector.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(finalize_video("v", BTreeSet::new(), &fvs, &["B".into(), "A".into()]).is_err());
        assert!(finalize_video("v", BTreeSet::new(), &fvs[..1], &["A".into(), "B".into()]).is_err());
    }

    #[test]
    fn representation_file_round_trip() {
        let rep = VideoRepresentation {
            video_id: "clip".into(),
            labels: BTreeSet::from([0, 3]),
            vector: vec![0.1, -0.25, 0.3],
        }
        .quantized();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clip.fvr");
        write_representation(&rep, &p).unwrap();
        assert_eq!(read_representation(&p).unwrap(), rep);
        let mut bytes = rep.encode();
        bytes.pop();
        assert!(matches!(VideoRepresentation::decode(&bytes, "c"), Err(Error::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn pooling_is_permutation_invariant_after_finalize(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = GmmModel::new(
                vec![0.5, 0.5],
                Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0)),
                Array2::from_shape_fn((2, 3), |_| rng.random_range(0.5..1.5)),
            ).unwrap();
            let rows = Array2::from_shape_fn((20, 3), |_| rng.random_range(-2.0..2.0));
            let mut order: Vec<usize> = (0..20).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let shuffled = rows.select(ndarray::Axis(0), &order);
            let a = finalize_video("v", BTreeSet::new(), &[fv_pool(&m, "c", rows.view()).unwrap()], &["c".into()]).unwrap();
            let b = finalize_video("v", BTreeSet::new(), &[fv_pool(&m, "c", shuffled.view()).unwrap()], &["c".into()]).unwrap();
            for (x, y) in a.vector.iter().zip(&b.vector) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
