//! Multi-scale residual tokenization.
//!
//! A latent feature map is decomposed into a pyramid of quantized codes:
//! scale k quantizes the residual left after subtracting the previous
//! scales' contributions (each upsampled to the final grid), downsampled
//! to scale k's grid. Decoding just sums all scales upsampled to the final
//! grid. With the identity quantizer the recursion telescopes and decoding
//! reproduces the input exactly; with binary spherical quantization every
//! code vector is a sign pattern scaled to the unit sphere.

mod codes_io;
mod pixmap;
mod schedule;

pub use codes_io::{read_codes, read_codes_from, write_codes, write_codes_to};
pub use pixmap::PixelLatentMap;
pub use schedule::{ScaleSchedule, MAX_SCALES, PIXEL_DOWNSAMPLE, SCHEDULE_TABLE};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{resize_plain, Tensor};

/// Quantizer choice for `encode_multiscale`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantizer {
    Bsq,
    /// Pass residuals through unquantized. Exposes the telescoping identity
    /// of the recursion; output maps are not constrained to the code
    /// alphabet.
    Identity,
}

/// K-scale pyramid of code maps, each shaped [dim, h_k, w_k].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleCode {
    pub dim: usize,
    pub scales: Vec<Tensor>,
}

impl MultiScaleCode {
    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Per-scale spatial sizes.
    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.scales.iter().map(|t| (t.shape()[1], t.shape()[2])).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.scales.iter().map(|t| t.shape()[1] * t.shape()[2]).sum()
    }

    /// True when every entry is exactly ±1/√dim.
    pub fn alphabet_valid(&self) -> bool {
        let unit = 1.0 / (self.dim as f64).sqrt();
        self.scales
            .iter()
            .all(|t| t.data().iter().all(|&v| v == unit || v == -unit))
    }

    /// Fraction of entries that differ in sign from `other`.
    pub fn bit_disagreement(&self, other: &MultiScaleCode) -> f64 {
        assert_eq!(self.sizes(), other.sizes());
        let mut diff = 0usize;
        let mut total = 0usize;
        for (a, b) in self.scales.iter().zip(&other.scales) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                total += 1;
                if (x > 0.0) != (y > 0.0) {
                    diff += 1;
                }
            }
        }
        diff as f64 / total as f64
    }

    fn check_schedule(&self, schedule: &ScaleSchedule) -> Result<()> {
        if self.scales.len() != schedule.len() {
            return Err(Error::InvalidArgument {
                context: "MultiScaleCode",
                message: format!(
                    "{} scales but schedule has {}",
                    self.scales.len(),
                    schedule.len()
                ),
            });
        }
        for (k, (t, &(h, w))) in self.scales.iter().zip(schedule.entries()).enumerate() {
            if t.shape() != [self.dim, h, w] {
                return Err(Error::ShapeMismatch {
                    context: "MultiScaleCode scale",
                    expected: vec![self.dim, h, w],
                    got: t.shape().to_vec(),
                });
            }
            let _ = k;
        }
        Ok(())
    }
}

/// Binary spherical quantization of one feature vector:
/// (1/√d)·sign(x/‖x‖₂), with sign(0) = +1. The all-zero vector maps to the
/// all-positive code.
pub fn bsq_quantize(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    assert!(d >= 1, "bsq_quantize needs at least one dimension");
    let unit = 1.0 / (d as f64).sqrt();
    // normalization by a positive scalar cannot flip a sign, so quantize
    // the raw coordinates; ‖x‖ = 0 falls into the sign(0) = +1 convention
    x.iter().map(|&v| if v < 0.0 { -unit } else { unit }).collect()
}

fn quantize_map(z: &Tensor, quantizer: Quantizer) -> Tensor {
    match quantizer {
        Quantizer::Identity => z.clone(),
        Quantizer::Bsq => {
            let (d, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
            let plane = h * w;
            let mut out = vec![0.0; d * plane];
            let mut v = vec![0.0; d];
            for p in 0..plane {
                for c in 0..d {
                    v[c] = z.data()[c * plane + p];
                }
                let q = bsq_quantize(&v);
                for c in 0..d {
                    out[c * plane + p] = q[c];
                }
            }
            Tensor::new(vec![d, h, w], out)
        }
    }
}

/// Decompose a feature map [d, h_K, w_K] into the code pyramid.
pub fn encode_multiscale(
    feature: &Tensor,
    schedule: &ScaleSchedule,
    quantizer: Quantizer,
) -> Result<MultiScaleCode> {
    let (fh, fw) = schedule.final_size();
    if feature.rank() != 3 || feature.shape()[1] != fh || feature.shape()[2] != fw {
        return Err(Error::ShapeMismatch {
            context: "encode_multiscale",
            expected: vec![feature.shape().first().copied().unwrap_or(0), fh, fw],
            got: feature.shape().to_vec(),
        });
    }
    let dim = feature.shape()[0];
    let last = schedule.len() - 1;
    let mut acc = Tensor::zeros(feature.shape().to_vec());
    let mut scales = Vec::with_capacity(schedule.len());
    for (k, &(h, w)) in schedule.entries().iter().enumerate() {
        let residual = Tensor::new(
            feature.shape().to_vec(),
            crate::tensor::sub(feature.data(), acc.data()),
        );
        // the final scale quantizes the remaining residual at full
        // resolution; earlier scales see it downsampled to their grid
        let z = if k == last { residual } else { resize_plain(&residual, (h, w))? };
        let code = quantize_map(&z, quantizer);
        let up = resize_plain(&code, (fh, fw))?;
        acc = Tensor::new(acc.shape().to_vec(), crate::tensor::add(acc.data(), up.data()));
        scales.push(code);
    }
    Ok(MultiScaleCode { dim, scales })
}

/// Σ_k upsample-to-final(R_k).
pub fn decode_multiscale(codes: &MultiScaleCode, schedule: &ScaleSchedule) -> Result<Tensor> {
    codes.check_schedule(schedule)?;
    let (fh, fw) = schedule.final_size();
    let mut acc = Tensor::zeros(vec![codes.dim, fh, fw]);
    for code in &codes.scales {
        let up = resize_plain(code, (fh, fw))?;
        acc = Tensor::new(acc.shape().to_vec(), crate::tensor::add(acc.data(), up.data()));
    }
    Ok(acc)
}

/// Random feature map with the decaying spatial spectrum of natural-image
/// latents: upsampled white-noise grids of doubling resolution summed with
/// geometrically shrinking amplitude.
pub fn random_smooth_feature(dim: usize, size: (usize, usize), rng: &mut rng::Rng) -> Tensor {
    let (h, w) = size;
    let mut f = Tensor::zeros(vec![dim, h, w]);
    let mut amp = 1.0;
    let (mut gh, mut gw) = (1usize, 1usize);
    loop {
        let layer = Tensor::randn(vec![dim, gh, gw], amp, rng);
        let up = resize_plain(&layer, (h, w)).expect("upsample noise grid");
        f = Tensor::new(f.shape().to_vec(), crate::tensor::add(f.data(), up.data()));
        if gh >= h && gw >= w {
            break;
        }
        gh = (gh * 2).min(h);
        gw = (gw * 2).min(w);
        amp *= 0.6;
    }
    f
}

/// Mean BSQ reconstruction MSE of a fixed random feature under builtin
/// square schedules truncated to depth 1..=max_depth, averaged over seeds.
///
/// A truncated schedule's finest grid is coarser than the feature grid, so
/// each depth encodes the feature resized onto its own final grid and the
/// reconstruction is upsampled back for comparison: every depth targets
/// the same feature and extra scales can only refine.
pub fn bsq_truncation_errors(
    dim: usize,
    feature_size: (usize, usize),
    max_depth: usize,
    seeds: u64,
) -> Vec<f64> {
    let base = ScaleSchedule::builtin(1.0, MAX_SCALES).expect("square schedule");
    let mut errs = vec![0.0; max_depth];
    for seed in 0..seeds {
        let mut rng = rng::stream(0xB50, seed);
        let f = random_smooth_feature(dim, feature_size, &mut rng);
        for k in 1..=max_depth {
            let schedule = base.truncated(k).expect("valid truncation");
            let fk = resize_plain(&f, schedule.final_size()).expect("downsample");
            let codes = encode_multiscale(&fk, &schedule, Quantizer::Bsq).expect("encode");
            let back = decode_multiscale(&codes, &schedule).expect("decode");
            let up = resize_plain(&back, feature_size).expect("upsample");
            let mse = f
                .data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / f.len() as f64;
            errs[k - 1] += mse / seeds as f64;
        }
    }
    errs
}

/// Independently flip each code entry's sign with probability `flip_prob`.
/// Deterministic for a given seed; the output stays in the code alphabet.
pub fn corrupt_codes(codes: &MultiScaleCode, flip_prob: f64, seed: u64) -> MultiScaleCode {
    assert!((0.0..=1.0).contains(&flip_prob), "flip_prob must lie in [0, 1]");
    let mut rng = rng::seeded(seed);
    let scales = codes
        .scales
        .iter()
        .map(|t| {
            let data = t
                .data()
                .iter()
                .map(|&v| if rng.gen::<f64>() < flip_prob { -v } else { v })
                .collect();
            Tensor::new(t.shape().to_vec(), data)
        })
        .collect();
    MultiScaleCode { dim: codes.dim, scales }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn bsq_hand_case() {
        let q = bsq_quantize(&[3.0, -4.0, 0.0, 0.0]);
        assert_eq!(q, vec![0.5, -0.5, 0.5, 0.5]);
    }

    #[test]
    fn bsq_zero_vector_goes_all_positive() {
        let q = bsq_quantize(&[0.0; 4]);
        assert_eq!(q, vec![0.5; 4]);
    }

    #[test]
    fn bsq_unit_norm_and_idempotence() {
        let mut rng = seeded(3);
        for _ in 0..100 {
            let x = Tensor::randn(vec![8], 1.0, &mut rng);
            let q = bsq_quantize(x.data());
            let norm: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            assert_eq!(bsq_quantize(&q), q);
        }
    }

    #[test]
    fn single_full_scale_identity_quantizer_is_a_copy() {
        let mut rng = seeded(4);
        let f = Tensor::randn(vec![3, 4, 4], 1.0, &mut rng);
        let schedule = ScaleSchedule::custom(1.0, vec![(4, 4)]).unwrap();
        let codes = encode_multiscale(&f, &schedule, Quantizer::Identity).unwrap();
        assert_eq!(codes.scales[0].data(), f.data());
        let back = decode_multiscale(&codes, &schedule).unwrap();
        assert_eq!(back.data(), f.data());
    }

    #[test]
    fn telescoping_identity_on_builtin_schedules() {
        let mut rng = seeded(5);
        for &(ratio, _) in SCHEDULE_TABLE.iter().take(4) {
            let schedule = ScaleSchedule::builtin(ratio, 6).unwrap();
            let (h, w) = schedule.final_size();
            let f = Tensor::randn(vec![4, h, w], 1.0, &mut rng);
            let codes = encode_multiscale(&f, &schedule, Quantizer::Identity).unwrap();
            let back = decode_multiscale(&codes, &schedule).unwrap();
            assert!(f.max_abs_diff(&back) <= 1e-9, "ratio {ratio}");
        }
    }

    #[test]
    fn bsq_reconstruction_error_nonincreasing_in_scale_count() {
        let errs = bsq_truncation_errors(8, (16, 16), 5, 20);
        for k in 1..5 {
            assert!(
                errs[k] <= errs[k - 1] + 1e-12,
                "mean reconstruction error must be nonincreasing: {errs:?}"
            );
        }
    }

    #[test]
    fn corrupt_codes_edge_probabilities() {
        let mut rng = seeded(8);
        let f = Tensor::randn(vec![4, 8, 8], 1.0, &mut rng);
        let schedule = ScaleSchedule::custom(1.0, vec![(1, 1), (2, 2), (8, 8)]).unwrap();
        let codes = encode_multiscale(&f, &schedule, Quantizer::Bsq).unwrap();
        let same = corrupt_codes(&codes, 0.0, 1);
        assert_eq!(same, codes);
        let flipped = corrupt_codes(&codes, 1.0, 1);
        assert!((flipped.bit_disagreement(&codes) - 1.0).abs() < 1e-12);
        assert!(flipped.alphabet_valid());
    }

    #[test]
    fn corrupt_codes_flip_fraction_concentrates() {
        // 10⁴ entries at p = 0.1 → observed fraction within [0.08, 0.12]
        let f = Tensor::full(vec![16, 25, 25], 1.0);
        let schedule = ScaleSchedule::custom(1.0, vec![(25, 25)]).unwrap();
        let codes = encode_multiscale(&f, &schedule, Quantizer::Bsq).unwrap();
        assert_eq!(codes.total_tokens() * codes.dim, 10_000);
        let corrupted = corrupt_codes(&codes, 0.1, 99);
        let frac = corrupted.bit_disagreement(&codes);
        assert!((0.08..=0.12).contains(&frac), "flip fraction {frac}");
        // deterministic per seed
        assert_eq!(corrupt_codes(&codes, 0.1, 99), corrupted);
    }

    #[test]
    fn encode_rejects_feature_schedule_mismatch() {
        let f = Tensor::zeros(vec![4, 8, 8]);
        let schedule = ScaleSchedule::custom(1.0, vec![(1, 1), (4, 4)]).unwrap();
        assert!(encode_multiscale(&f, &schedule, Quantizer::Identity).is_err());
    }

    #[test]
    fn decode_rejects_scale_count_mismatch() {
        let f = Tensor::zeros(vec![4, 4, 4]);
        let schedule = ScaleSchedule::custom(1.0, vec![(1, 1), (4, 4)]).unwrap();
        let codes = encode_multiscale(&f, &schedule, Quantizer::Identity).unwrap();
        let longer = ScaleSchedule::custom(1.0, vec![(1, 1), (2, 2), (4, 4)]).unwrap();
        assert!(decode_multiscale(&codes, &longer).is_err());
    }
}
