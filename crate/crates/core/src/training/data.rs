//! Synthetic toy corpora.
//!
//! Deterministic parametric images with byte-level captions back every
//! training analog: caption-only text samples, image→caption
//! understanding pairs, caption→image generation pairs, and invert-colors
//! editing pairs. Image sizes are chosen so the understanding path (÷28
//! patch blocks) and the generation path (÷16 latent blocks) both divide
//! cleanly where they are used.

use std::sync::Arc;

use rand::Rng as _;

use crate::attention::{ModalityTag, SampleTokens, TokenContent};
use crate::error::Result;
use crate::model::{image_to_patch_tokens, map_to_rows, ModelConfig, BOS, EOS};
use crate::rng;
use crate::tensor::{resize_plain, Tensor};
use crate::tokenizer::{
    corrupt_codes, encode_multiscale, PixelLatentMap, Quantizer, ScaleSchedule,
};
use crate::training::{BuiltSample, GenSample, TaskKind};

/// Pattern names used in captions; all the same length so packed bins stay
/// uniform.
pub const PATTERN_NAMES: [&str; 8] =
    ["alpha", "bravo", "delta", "gamma", "kappa", "omega", "sigma", "theta"];

/// Deterministic test image: one of eight base patterns with
/// variant-seeded channel colors, any size.
pub fn synthetic_image(pattern: usize, variant: u64, h: usize, w: usize) -> Tensor {
    let mut rng = rng::stream(0x1ace, ((pattern as u64) << 32) | variant);
    let lo: [f64; 3] = [rng.gen_range(0.0..0.4), rng.gen_range(0.0..0.4), rng.gen_range(0.0..0.4)];
    let hi: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            let t = match pattern % 8 {
                0 => f64::from((y / (h / 8).max(1)) % 2 == 0),
                1 => f64::from((x / (w / 8).max(1)) % 2 == 0),
                2 => f64::from(((y / (h / 4).max(1)) + (x / (w / 4).max(1))) % 2 == 0),
                3 => fx,
                4 => {
                    let r = ((fy - 0.5).powi(2) + (fx - 0.5).powi(2)).sqrt();
                    f64::from(r < 0.3)
                }
                5 => f64::from(fy < 0.5) * 0.7 + f64::from(fx < 0.5) * 0.3,
                6 => f64::from(((y + x) / ((h + w) / 12).max(1)) % 2 == 0),
                _ => {
                    let r = ((fy - 0.5).powi(2) + (fx - 0.5).powi(2)).sqrt();
                    f64::from((r * 8.0) as usize % 2 == 0)
                }
            };
            for c in 0..3 {
                data[c * plane + y * w + x] = lo[c] + t * (hi[c] - lo[c]);
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// 16-byte captions: with one caption, one understanding pair and one
/// generation sample per micro-batch, the token counts land on the 1:2:6
/// stage-2 ratio within tolerance.
pub fn pattern_caption(pattern: usize, variant: u64) -> String {
    format!("img {} kind {}", PATTERN_NAMES[pattern % 8], variant % 10)
}

/// Byte-level caption ids wrapped in delimiters.
pub fn encode_caption(text: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.bytes().map(u32::from));
    ids.push(EOS);
    ids
}

/// Caption-only language-modeling sample: inputs are all ids but the last,
/// each predicting its successor.
pub fn build_text(ids: &[u32]) -> BuiltSample {
    assert!(ids.len() >= 2, "need at least two ids for next-token targets");
    let mut tokens = SampleTokens::default();
    let mut ntp = Vec::new();
    for (i, &id) in ids[..ids.len() - 1].iter().enumerate() {
        tokens.push(TokenContent::Text(id), ModalityTag::Text);
        ntp.push((i, ids[i + 1]));
    }
    BuiltSample { tokens, ntp_targets: ntp, nsp_targets: vec![], task: TaskKind::Text }
}

/// Image→caption sample: patch tokens then caption inputs; next-token
/// targets on the text span only.
pub fn build_und(image: &Tensor, caption: &[u32], config: &ModelConfig) -> Result<BuiltSample> {
    assert!(caption.len() >= 2);
    let mut tokens = SampleTokens::default();
    for px in image_to_patch_tokens(image, config)? {
        tokens.push(TokenContent::Patch(px), ModalityTag::UndVision);
    }
    let text_start = tokens.len();
    let mut ntp = Vec::new();
    for (i, &id) in caption[..caption.len() - 1].iter().enumerate() {
        tokens.push(TokenContent::Text(id), ModalityTag::Text);
        ntp.push((text_start + i, caption[i + 1]));
    }
    Ok(BuiltSample { tokens, ntp_targets: ntp, nsp_targets: vec![], task: TaskKind::Und })
}

/// Teacher-forced generation sample: optional reference patches, optional
/// full caption condition, then scale query tokens. Inputs at each scale
/// embed the running reconstruction built from (optionally corrupted)
/// conditioning codes; bit targets always come from the clean codes.
pub fn build_gen(
    sample: &GenSample,
    config: &ModelConfig,
    flip_prob: f64,
    rng: &mut rng::Rng,
) -> Result<BuiltSample> {
    let mut tokens = SampleTokens::default();
    if let Some(reference) = &sample.reference {
        for px in image_to_patch_tokens(reference, config)? {
            tokens.push(TokenContent::Patch(px), ModalityTag::UndVision);
        }
    }
    if let Some(caption) = &sample.caption {
        for &id in caption {
            tokens.push(TokenContent::Text(id), ModalityTag::Text);
        }
    }
    let conditioning = if flip_prob > 0.0 {
        corrupt_codes(&sample.codes, flip_prob, rng.gen())
    } else {
        sample.codes.clone()
    };
    let d = sample.codes.dim;
    let (fh, fw) = sample.schedule.final_size();
    let mut acc = Tensor::zeros(vec![d, fh, fw]);
    let mut nsp = Vec::new();
    for (k0, &(h, w)) in sample.schedule.entries().iter().enumerate() {
        let scale = k0 + 1;
        let inputs = if scale == 1 {
            Tensor::zeros(vec![h * w, d])
        } else {
            map_to_rows(&resize_plain(&acc, (h, w))?)
        };
        let clean_rows = map_to_rows(&sample.codes.scales[k0]);
        for p in 0..h * w {
            let pos = tokens.len();
            tokens.push(
                TokenContent::Gen(inputs.data()[p * d..(p + 1) * d].to_vec()),
                ModalityTag::GenVision(scale),
            );
            let bits = clean_rows.data()[p * d..(p + 1) * d]
                .iter()
                .map(|&v| f64::from(v > 0.0))
                .collect();
            nsp.push((pos, bits));
        }
        let up = resize_plain(&conditioning.scales[k0], (fh, fw))?;
        acc = Tensor::new(acc.shape().to_vec(), crate::tensor::add(acc.data(), up.data()));
    }
    Ok(BuiltSample { tokens, ntp_targets: vec![], nsp_targets: nsp, task: TaskKind::Gen })
}

/// Samples for one stage run.
#[derive(Debug, Clone, Default)]
pub struct StageData {
    pub text: Vec<Vec<u32>>,
    pub und: Vec<(Tensor, Vec<u32>)>,
    pub gen: Vec<GenSample>,
}

/// Image→caption pairs for teacher training and distillation, at a small
/// patch-friendly size.
pub fn caption_image_pairs(count: usize, side: usize) -> Vec<(Tensor, Vec<u32>)> {
    (0..count)
        .map(|i| {
            let (pattern, variant) = (i % 8, (i / 8) as u64);
            (
                synthetic_image(pattern, variant, side, side),
                encode_caption(&pattern_caption(pattern, variant)),
            )
        })
        .collect()
}

fn gen_from_image(
    image: &Tensor,
    caption: Option<Vec<u32>>,
    reference: Option<Tensor>,
    schedule: &ScaleSchedule,
    pixels: &PixelLatentMap,
) -> Result<GenSample> {
    let latent = pixels.encode(image)?;
    let codes = encode_multiscale(&latent, schedule, Quantizer::Bsq)?;
    Ok(GenSample { caption, reference, codes, schedule: schedule.clone(), })
}

/// Expert-pretraining data: understanding pairs at 56², plus small
/// caption→image samples on the truncated builtin square schedule
/// (depth ≤ the plan's scale count, 128² pixels at depth 5).
pub fn stage1_data(
    pixels: &PixelLatentMap,
    num_scales: usize,
    und_pairs: usize,
    gen_pairs: usize,
) -> Result<StageData> {
    let schedule = ScaleSchedule::builtin(1.0, num_scales.min(5))?;
    let (ph, pw) = schedule.pixel_size();
    let mut data = StageData { und: caption_image_pairs(und_pairs, 56), ..Default::default() };
    for i in 0..gen_pairs {
        let (pattern, variant) = (i % 8, (i / 8) as u64);
        let image = synthetic_image(pattern, variant, ph, pw);
        let caption = encode_caption(&pattern_caption(pattern, variant));
        data.gen.push(gen_from_image(&image, Some(caption), None, &schedule, pixels)?);
    }
    Ok(data)
}

/// Unified-training data: 8 caption-only samples, 8 image→caption pairs,
/// 8 caption→image pairs on a (1,1)(2,2)(4,4)(8,8) pyramid, and 4
/// invert-colors editing pairs on a (1,1)(2,2)(4,4)(7,7) pyramid whose
/// 112² images satisfy both the ÷28 patch grid and the ÷16 latent grid.
pub fn toy_unified_data(pixels: &PixelLatentMap) -> Result<StageData> {
    let t2i_schedule = ScaleSchedule::custom(1.0, vec![(1, 1), (2, 2), (4, 4), (8, 8)])?;
    let edit_schedule = ScaleSchedule::custom(1.0, vec![(1, 1), (2, 2), (4, 4), (7, 7)])?;
    let mut data = StageData::default();
    for pattern in 0..8 {
        let caption = encode_caption(&pattern_caption(pattern, 0));
        data.text.push(caption.clone());
        data.und.push((synthetic_image(pattern, 0, 112, 112), caption.clone()));
        let image = synthetic_image(pattern, 0, 128, 128);
        data.gen.push(gen_from_image(&image, Some(caption), None, &t2i_schedule, pixels)?);
    }
    for pattern in 0..4 {
        let source = synthetic_image(pattern, 1, 112, 112);
        let target = source.map(|v| 1.0 - v);
        let instruction = encode_caption("invert colors");
        data.gen.push(gen_from_image(
            &target,
            Some(instruction),
            Some(source),
            &edit_schedule,
            pixels,
        )?);
    }
    Ok(data)
}

/// The editing instruction used by the toy editing pairs.
pub fn edit_instruction() -> Vec<u32> {
    encode_caption("invert colors")
}

/// Three bundled synthetic test images (256²) for spectra checks: smooth
/// structure plus block-scale texture so early scales stay low-frequency
/// while the final scale is not.
pub fn spectra_test_images() -> Vec<Tensor> {
    let mut out = Vec::new();
    for (pattern, variant) in [(3usize, 2u64), (4, 2), (2, 2)] {
        let base = synthetic_image(pattern, variant, 256, 256);
        let mut rng = rng::stream(0x57ec, variant ^ pattern as u64);
        let plane = 256 * 256;
        let mut data = base.data().to_vec();
        // 16-pixel block noise lands at the latent grid's Nyquist band
        for by in 0..16 {
            for bx in 0..16 {
                let bump: f64 = rng.gen_range(-0.18..0.18);
                for c in 0..3 {
                    for y in 0..16 {
                        for x in 0..16 {
                            let idx = c * plane + (by * 16 + y) * 256 + (bx * 16 + x);
                            data[idx] = (data[idx] + bump).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        out.push(Tensor::new(vec![3, 256, 256], data));
    }
    out
}

/// Arc-wrapped patch helper for hand-built sequences in tests.
pub fn patch_content(values: Vec<f64>) -> TokenContent {
    TokenContent::Patch(Arc::new(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn images_are_deterministic_and_distinct() {
        let a = synthetic_image(0, 0, 32, 32);
        let b = synthetic_image(0, 0, 32, 32);
        assert_eq!(a.data(), b.data());
        let c = synthetic_image(1, 0, 32, 32);
        assert!(a.max_abs_diff(&c) > 0.05);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn caption_round_trip_shape() {
        let ids = encode_caption("img alpha kind 0");
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(ids.len(), 18);
        // all captions equal length keeps micro-batches uniform
        for p in 0..8 {
            assert_eq!(encode_caption(&pattern_caption(p, 3)).len(), 18);
        }
    }

    #[test]
    fn built_text_targets_shift_by_one() {
        let s = build_text(&[BOS, 10, 11, EOS]);
        assert_eq!(s.tokens.len(), 3);
        assert_eq!(s.ntp_targets, vec![(0, 10), (1, 11), (2, EOS)]);
    }

    #[test]
    fn built_gen_counts_and_corruption_targets() {
        let config = ModelConfig { code_dim: 8, max_scales: 3, ..ModelConfig::desk_small() };
        let pixels = PixelLatentMap::new(config.code_dim, 7);
        let schedule = ScaleSchedule::custom(1.0, vec![(1, 1), (2, 2), (3, 3)]).unwrap();
        let image = synthetic_image(2, 0, 48, 48);
        let sample = gen_from_image(
            &image,
            Some(encode_caption("x")),
            None,
            &schedule,
            &pixels,
        )
        .unwrap();
        let mut rng = seeded(5);
        let built = build_gen(&sample, &config, 0.5, &mut rng).unwrap();
        // 3 caption tokens + 1+4+9 gen tokens
        assert_eq!(built.tokens.len(), 3 + 14);
        assert_eq!(built.nsp_targets.len(), 14);
        // targets stay clean regardless of conditioning corruption
        let clean = build_gen(&sample, &config, 0.0, &mut rng).unwrap();
        for (a, b) in built.nsp_targets.iter().zip(&clean.nsp_targets) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }
        // corrupted conditioning changes some scale-2+ inputs
        let inputs_differ = built
            .tokens
            .contents
            .iter()
            .zip(&clean.tokens.contents)
            .any(|(x, y)| match (x, y) {
                (TokenContent::Gen(a), TokenContent::Gen(b)) => a != b,
                _ => false,
            });
        assert!(inputs_differ);
    }

    #[test]
    fn unified_data_shapes() {
        let pixels = PixelLatentMap::new(16, 7);
        let data = toy_unified_data(&pixels).unwrap();
        assert_eq!(data.text.len(), 8);
        assert_eq!(data.und.len(), 8);
        assert_eq!(data.gen.len(), 12);
        let t2i = &data.gen[0];
        assert_eq!(t2i.schedule.final_size(), (8, 8));
        assert_eq!(t2i.codes.total_tokens(), 85);
        let edit = &data.gen[8];
        assert!(edit.reference.is_some());
        assert_eq!(edit.schedule.final_size(), (7, 7));
        assert_eq!(edit.codes.total_tokens(), 70);
    }
}
