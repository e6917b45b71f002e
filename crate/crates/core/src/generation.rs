//! Classifier-free guidance and the end-to-end image pipelines.
//!
//! Text-to-image runs two branches per scale step (with and without the
//! text prefix) and extrapolates their bit logits; editing runs three
//! (text+reference / text-only / unconditional) under dual guidance. The
//! combined logits are sampled once and the codes are committed to every
//! branch, so the branches only ever disagree about their condition
//! prefix. Decoded pyramids leave through the fixed pixel detokenizer —
//! no encoder runs at inference.

use crate::attention::{ModalityTag, SampleTokens, TokenContent};
use crate::error::{Error, Result};
use crate::model::{
    image_to_patch_tokens, map_to_rows, sample_scale_logits, GenSession, ModelConfig, BOS, EOS,
};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{self, resize_plain, Tensor};
use crate::tokenizer::{MultiScaleCode, PixelLatentMap, ScaleSchedule};

/// Guidance task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    TextToImage,
    Edit,
}

/// Guidance scales and sampling temperature.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceConfig {
    /// Text guidance scale λ_t.
    pub lambda_text: f64,
    /// Reference-image guidance scale λ_i (editing only).
    pub lambda_image: f64,
    pub temperature: f64,
    pub mode: GuidanceMode,
}

impl GuidanceConfig {
    /// Text-to-image default: λ_t = 20.
    pub fn t2i_default() -> Self {
        GuidanceConfig {
            lambda_text: 20.0,
            lambda_image: 0.0,
            temperature: 1.0,
            mode: GuidanceMode::TextToImage,
        }
    }

    /// Editing default: λ_i = 1, λ_t = 3.
    pub fn edit_default() -> Self {
        GuidanceConfig {
            lambda_text: 3.0,
            lambda_image: 1.0,
            temperature: 1.0,
            mode: GuidanceMode::Edit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_text < 0.0 || self.lambda_image < 0.0 || self.temperature <= 0.0 {
            return Err(Error::InvalidArgument {
                context: "GuidanceConfig",
                message: format!(
                    "λ_t {} and λ_i {} must be ≥ 0, temperature {} > 0",
                    self.lambda_text, self.lambda_image, self.temperature
                ),
            });
        }
        Ok(())
    }
}

/// λ_t·L_t + (1−λ_t)·L_∅.
pub fn cfg_t2i(cond: &Tensor, uncond: &Tensor, lambda_text: f64) -> Result<Tensor> {
    cond.check_same_shape(uncond, "cfg_t2i")?;
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&t, &n)| lambda_text * t + (1.0 - lambda_text) * n)
        .collect();
    Ok(Tensor::new(cond.shape().to_vec(), data))
}

/// Dual guidance: L_c = (L_ti + λ_i·L_t)/(1+λ_i), then
/// L_∅ + λ_t·(L_c − L_∅).
pub fn cfg_edit(
    cond_ti: &Tensor,
    cond_t: &Tensor,
    uncond: &Tensor,
    lambda_image: f64,
    lambda_text: f64,
) -> Result<Tensor> {
    cond_ti.check_same_shape(cond_t, "cfg_edit")?;
    cond_ti.check_same_shape(uncond, "cfg_edit")?;
    let data = cond_ti
        .data()
        .iter()
        .zip(cond_t.data())
        .zip(uncond.data())
        .map(|((&ti, &t), &n)| {
            let c = (ti + lambda_image * t) / (1.0 + lambda_image);
            n + lambda_text * (c - n)
        })
        .collect();
    Ok(Tensor::new(cond_ti.shape().to_vec(), data))
}

/// How bit logits turn into signs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    /// Sign of the logit; ties resolve positive.
    Greedy,
    /// Per bit, Bernoulli(σ(logit/τ)). τ → 0 recovers greedy.
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub seed: u64,
    pub use_cache: bool,
}

/// Convert one site's bit logits to a ±1/√d code vector.
pub fn sample_bits(logits: &[f64], mode: &DecodeMode, rng: &mut Rng) -> Result<Vec<f64>> {
    use rand::Rng as _;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample_bits"));
    }
    let unit = 1.0 / (logits.len() as f64).sqrt();
    let out = logits
        .iter()
        .map(|&z| {
            let positive = match mode {
                DecodeMode::Greedy => z >= 0.0,
                DecodeMode::Sample { temperature } => {
                    if *temperature < 1e-8 {
                        z >= 0.0
                    } else {
                        rng.gen::<f64>() < tensor::sigmoid(z / temperature)
                    }
                }
            };
            if positive { unit } else { -unit }
        })
        .collect();
    Ok(out)
}

/// One guidance branch: a condition prefix plus its decoding session.
struct Branch<'p> {
    session: GenSession<'p>,
}

/// Everything the pipelines need besides the prompt.
pub struct Pipeline<'p> {
    pub params: &'p ParamSet,
    pub config: &'p ModelConfig,
    pub pixels: &'p PixelLatentMap,
}

fn text_tokens(prompt: &str, vocab: usize) -> Result<Vec<(TokenContent, ModalityTag)>> {
    let mut out = Vec::with_capacity(prompt.len() + 2);
    out.push((TokenContent::Text(BOS), ModalityTag::Text));
    for b in prompt.bytes() {
        out.push((TokenContent::Text(b as u32), ModalityTag::Text));
    }
    out.push((TokenContent::Text(EOS), ModalityTag::Text));
    if out.iter().any(|(c, _)| matches!(c, TokenContent::Text(id) if *id as usize >= vocab)) {
        return Err(Error::InvalidArgument {
            context: "prompt",
            message: format!("byte outside the {vocab}-entry vocabulary"),
        });
    }
    Ok(out)
}

fn prefix_from(parts: &[&[(TokenContent, ModalityTag)]]) -> SampleTokens {
    let mut s = SampleTokens::default();
    for part in parts {
        for (c, t) in part.iter() {
            s.push(c.clone(), *t);
        }
    }
    s
}

impl<'p> Pipeline<'p> {
    /// Run guided next-scale decoding over a set of branches. Per scale:
    /// every branch predicts the new tokens, `combine` folds the branch
    /// logits, the result is sampled once, and the codes are committed to
    /// all branches.
    fn guided_pyramid(
        &self,
        mut branches: Vec<Branch<'p>>,
        schedule: &ScaleSchedule,
        decode: &DecodeConfig,
        combine: impl Fn(&[Tensor]) -> Result<Tensor>,
    ) -> Result<MultiScaleCode> {
        if schedule.len() > self.config.max_scales {
            return Err(Error::ScaleCountOutOfRange {
                requested: schedule.len(),
                max: self.config.max_scales,
            });
        }
        let d = self.config.code_dim;
        let (fh, fw) = schedule.final_size();
        let mut acc = Tensor::zeros(vec![d, fh, fw]);
        let mut scales = Vec::with_capacity(schedule.len());
        for (k0, &(h, w)) in schedule.entries().iter().enumerate() {
            let scale = k0 + 1;
            let inputs = if scale == 1 {
                Tensor::zeros(vec![h * w, d])
            } else {
                map_to_rows(&resize_plain(&acc, (h, w))?)
            };
            let mut logits = Vec::with_capacity(branches.len());
            for b in branches.iter_mut() {
                logits.push(b.session.step_scale(scale, &inputs)?);
            }
            let combined = combine(&logits)?;
            let code = sample_scale_logits(&combined, h, w, scale, decode)?;
            let up = resize_plain(&code, (fh, fw))?;
            acc = Tensor::new(acc.shape().to_vec(), tensor::add(acc.data(), up.data()));
            scales.push(code);
        }
        Ok(MultiScaleCode { dim: d, scales })
    }

    /// Text-to-image: two branches (text-conditioned, unconditional)
    /// combined per scale, then detokenized to pixels.
    pub fn run_t2i(
        &self,
        prompt: &str,
        schedule: &ScaleSchedule,
        guidance: &GuidanceConfig,
        seed: u64,
    ) -> Result<Tensor> {
        guidance.validate()?;
        let codes = self.t2i_codes(prompt, schedule, guidance, seed)?;
        self.detokenize(&codes, schedule)
    }

    pub fn t2i_codes(
        &self,
        prompt: &str,
        schedule: &ScaleSchedule,
        guidance: &GuidanceConfig,
        seed: u64,
    ) -> Result<MultiScaleCode> {
        guidance.validate()?;
        let text = text_tokens(prompt, self.config.vocab)?;
        let branches = vec![
            self.branch(prefix_from(&[&text]))?,
            self.branch(prefix_from(&[]))?,
        ];
        let decode = DecodeConfig {
            mode: DecodeMode::Sample { temperature: guidance.temperature },
            seed,
            use_cache: true,
        };
        let lambda = guidance.lambda_text;
        self.guided_pyramid(branches, schedule, &decode, move |logits| {
            cfg_t2i(&logits[0], &logits[1], lambda)
        })
    }

    /// Image editing: the reference image enters through the patch
    /// embedding as understanding-vision tokens (never the latent
    /// tokenizer); three branches under dual guidance.
    pub fn run_edit(
        &self,
        reference: &Tensor,
        instruction: &str,
        schedule: &ScaleSchedule,
        guidance: &GuidanceConfig,
        seed: u64,
    ) -> Result<Tensor> {
        let codes = self.edit_codes(reference, instruction, schedule, guidance, seed)?;
        self.detokenize(&codes, schedule)
    }

    pub fn edit_codes(
        &self,
        reference: &Tensor,
        instruction: &str,
        schedule: &ScaleSchedule,
        guidance: &GuidanceConfig,
        seed: u64,
    ) -> Result<MultiScaleCode> {
        guidance.validate()?;
        let text = text_tokens(instruction, self.config.vocab)?;
        let ref_tokens: Vec<(TokenContent, ModalityTag)> =
            image_to_patch_tokens(reference, self.config)?
                .into_iter()
                .map(|px| (TokenContent::Patch(px), ModalityTag::UndVision))
                .collect();
        let branches = vec![
            self.branch(prefix_from(&[&ref_tokens, &text]))?,
            self.branch(prefix_from(&[&text]))?,
            self.branch(prefix_from(&[]))?,
        ];
        let decode = DecodeConfig {
            mode: DecodeMode::Sample { temperature: guidance.temperature },
            seed,
            use_cache: true,
        };
        let (li, lt) = (guidance.lambda_image, guidance.lambda_text);
        self.guided_pyramid(branches, schedule, &decode, move |logits| {
            cfg_edit(&logits[0], &logits[1], &logits[2], li, lt)
        })
    }

    fn branch(&self, prefix: SampleTokens) -> Result<Branch<'p>> {
        Ok(Branch { session: GenSession::new(self.params, self.config, prefix, true)? })
    }

    /// Codes → latent → pixels, clamped to [0, 1].
    pub fn detokenize(&self, codes: &MultiScaleCode, schedule: &ScaleSchedule) -> Result<Tensor> {
        let latent = crate::tokenizer::decode_multiscale(codes, schedule)?;
        Ok(self.pixels.decode(&latent)?.map(|v| v.clamp(0.0, 1.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::rng::seeded;

    #[test]
    fn cfg_t2i_identities() {
        let mut rng = seeded(1);
        let a = Tensor::randn(vec![3, 4], 2.0, &mut rng);
        let b = Tensor::randn(vec![3, 4], 2.0, &mut rng);
        assert_eq!(cfg_t2i(&a, &b, 1.0).unwrap().data(), a.data());
        assert_eq!(cfg_t2i(&a, &b, 0.0).unwrap().data(), b.data());
        assert!(cfg_t2i(&a, &Tensor::zeros(vec![2, 2]), 1.0).is_err());
    }

    #[test]
    fn cfg_edit_reductions() {
        let mut rng = seeded(2);
        let ti = Tensor::randn(vec![5], 1.0, &mut rng);
        let t = Tensor::randn(vec![5], 1.0, &mut rng);
        let n = Tensor::randn(vec![5], 1.0, &mut rng);
        // λ_i = 0 collapses the blend to the joint branch
        let out = cfg_edit(&ti, &t, &n, 0.0, 3.0).unwrap();
        let expect = cfg_t2i(&ti, &n, 3.0).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
        // λ_i = 1, λ_t = 1 is the plain average of the two conditioned branches
        let avg = cfg_edit(&ti, &t, &n, 1.0, 1.0).unwrap();
        for ((&o, &a), &b) in avg.data().iter().zip(ti.data()).zip(t.data()) {
            assert!((o - (a + b) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn guidance_preserves_agreeing_argmax() {
        let mut rng = seeded(3);
        let t = Tensor::randn(vec![6], 1.0, &mut rng);
        for lambda in [0.0, 1.0, 3.0, 20.0] {
            let out = cfg_t2i(&t, &t, lambda).unwrap();
            // identical branches: guidance is a no-op on decisions
            for (&o, &x) in out.data().iter().zip(t.data()) {
                assert!((o - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn defaults_match_the_recipe() {
        let t2i = GuidanceConfig::t2i_default();
        assert_eq!(t2i.lambda_text, 20.0);
        assert_eq!(t2i.mode, GuidanceMode::TextToImage);
        let edit = GuidanceConfig::edit_default();
        assert_eq!(edit.lambda_image, 1.0);
        assert_eq!(edit.lambda_text, 3.0);
        assert!(GuidanceConfig { temperature: 0.0, ..t2i }.validate().is_err());
    }

    #[test]
    fn sample_bits_limits() {
        let mut rng = seeded(4);
        // huge logits pin the draw
        let v = sample_bits(&[1e6, -1e6, 1e6, 1e6], &DecodeMode::Sample { temperature: 1.0 }, &mut rng)
            .unwrap();
        assert_eq!(v, vec![0.5, -0.5, 0.5, 0.5]);
        // τ → 0 is greedy: sign of the logits
        let g = sample_bits(
            &[0.3, -0.2, 0.0, -0.7],
            &DecodeMode::Sample { temperature: 1e-12 },
            &mut rng,
        )
        .unwrap();
        assert_eq!(g, vec![0.5, -0.5, 0.5, -0.5]);
        assert!(sample_bits(&[f64::NAN], &DecodeMode::Greedy, &mut rng).is_err());
    }

    #[test]
    fn zero_logit_draws_are_balanced() {
        let mut rng = seeded(5);
        let mut positive = 0usize;
        for _ in 0..10_000 {
            let v = sample_bits(&[0.0], &DecodeMode::Sample { temperature: 1.0 }, &mut rng).unwrap();
            if v[0] > 0.0 {
                positive += 1;
            }
        }
        let frac = positive as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "positive fraction {frac}");
    }

    #[test]
    fn lambda_one_t2i_equals_unguided_conditional() {
        let config = ModelConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ff: 24,
            code_dim: 4,
            max_scales: 2,
            vocab: 260,
            saa_rank: 2,
            ..ModelConfig::desk_small()
        };
        let params = init_params(&config, 31);
        let pixels = PixelLatentMap::new(config.code_dim, 3);
        let pipe = Pipeline { params: &params, config: &config, pixels: &pixels };
        let schedule = ScaleSchedule::custom(1.0, vec![(1, 1), (2, 2)]).unwrap();
        let guidance = GuidanceConfig { lambda_text: 1.0, ..GuidanceConfig::t2i_default() };
        let guided = pipe.t2i_codes("ab", &schedule, &guidance, 40).unwrap();

        // single-branch conditional decoding with the same seed
        let text = text_tokens("ab", config.vocab).unwrap();
        let decode = DecodeConfig {
            mode: DecodeMode::Sample { temperature: 1.0 },
            seed: 40,
            use_cache: true,
        };
        let solo = crate::model::next_scale_generate(
            &params,
            &config,
            prefix_from(&[&text]),
            &schedule,
            &decode,
        )
        .unwrap();
        assert_eq!(guided, solo);
    }
}
