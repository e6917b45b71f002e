//! Stage-wise training machinery.
//!
//! Three desk-scale stage analogs mirror the recipe: expert pretraining
//! with the shared stack frozen (understanding distillation + generation
//! pretraining), unified mid-training with everything thawed, and a
//! lower-rate SFT pass. Around the stages sit the infrastructure pieces:
//! first-fit-decreasing sample packing, uneven gradient accumulation that
//! realizes a target token ratio, the global-batch loss scaling that makes
//! mean-reduced distributed gradients unbiased, and condition dropping for
//! classifier-free guidance.

pub mod data;
mod runner;

pub use runner::{
    build_toy_teacher, distill_loss, simulated_global_batch_gradients, LogLine, StageRunner,
    TeacherOutcome,
};

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::MultiScaleCode;

/// Task buckets for token-ratio accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskKind {
    Text,
    Und,
    Gen,
}

/// Stage configuration: what trains, what the losses weigh, and how
/// micro-batches accumulate.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub stage: u8,
    pub learning_rate: f64,
    pub steps: usize,
    pub grad_norm_clip: f64,
    pub weight_decay: f64,
    /// Understanding loss mix: L = L_ntp + λ·L_distill.
    pub lambda_distill: f64,
    /// Target token ratio T:U:G across tasks.
    pub token_ratio: (f64, f64, f64),
    /// Condition-drop probabilities for generation samples.
    pub drop_text: f64,
    pub drop_ref: f64,
    /// Self-correction: sign-flip probability on conditioning codes.
    pub flip_prob: f64,
    /// Packing bin capacity.
    pub sequence_length: usize,
    /// Generation schedule depth for stage data builders.
    pub num_scales: usize,
    /// Samples packed into one micro-batch, per task.
    pub samples_per_micro_batch: (usize, usize, usize),
    /// Accumulation-count search cap.
    pub accum_cap: usize,
}

impl TrainPlan {
    /// Expert pretraining: shared attention and the text FFN stay frozen;
    /// understanding (NTP + distillation) and generation (NSP) paths train.
    pub fn stage1(steps: usize) -> Self {
        TrainPlan {
            stage: 1,
            learning_rate: 1e-2,
            steps,
            grad_norm_clip: 1.0,
            weight_decay: 0.0,
            lambda_distill: 0.02,
            token_ratio: (0.0, 8.0, 1.0),
            drop_text: 0.1,
            drop_ref: 0.1,
            flip_prob: 0.1,
            sequence_length: 256,
            num_scales: 5,
            samples_per_micro_batch: (2, 12, 1),
            accum_cap: 64,
        }
    }

    /// Unified mid-training: everything thaws, text joins the mix.
    pub fn stage2(steps: usize) -> Self {
        TrainPlan {
            stage: 2,
            learning_rate: 5e-3,
            token_ratio: (1.0, 2.0, 6.0),
            weight_decay: 0.01,
            num_scales: 4,
            samples_per_micro_batch: (1, 1, 2),
            ..Self::stage1(steps)
        }
    }

    /// SFT analog: same mix machinery, lower rate, more text/und weight.
    pub fn stage3(steps: usize) -> Self {
        TrainPlan {
            stage: 3,
            learning_rate: 2.5e-3,
            token_ratio: (1.0, 5.0, 6.0),
            ..Self::stage2(steps)
        }
    }

    /// True when the plan freezes a parameter (stage-1 trains only the
    /// understanding/generation experts and the patch embedding).
    pub fn is_frozen(&self, name: &str) -> bool {
        if self.stage != 1 {
            return false;
        }
        let trainable = name.contains(".ffn.und.")
            || name.contains(".ffn.gen.")
            || name.starts_with("patch.");
        !trainable
    }

    /// Parse overrides from a flat `key=value` config file.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                context: "train config",
                message: format!("line {}: expected key=value, got `{line}`", lineno + 1),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |message: String| Error::Format { context: "train config", message };
            let parse_f64 = |v: &str| {
                v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")))
            };
            let parse_usize = |v: &str| {
                v.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")))
            };
            match key {
                "learning_rate" => self.learning_rate = parse_f64(value)?,
                "lr_scheduler" => {
                    if value != "cosine" {
                        return Err(bad(format!("unsupported lr_scheduler `{value}`")));
                    }
                }
                "weight_decay" => self.weight_decay = parse_f64(value)?,
                "grad_norm_clip" => self.grad_norm_clip = parse_f64(value)?,
                "steps" => self.steps = parse_usize(value)?,
                "sequence_length" => self.sequence_length = parse_usize(value)?,
                "num_scales" => self.num_scales = parse_usize(value)?,
                "lambda_distill" => self.lambda_distill = parse_f64(value)?,
                "drop_text" => self.drop_text = parse_f64(value)?,
                "drop_ref" => self.drop_ref = parse_f64(value)?,
                "flip_prob" => self.flip_prob = parse_f64(value)?,
                "token_ratio" => {
                    let parts: Vec<&str> = value.split(':').collect();
                    if parts.len() != 3 {
                        return Err(bad(format!("token_ratio `{value}` is not T:U:G")));
                    }
                    self.token_ratio = (
                        parse_f64(parts[0])?,
                        parse_f64(parts[1])?,
                        parse_f64(parts[2])?,
                    );
                }
                _ => return Err(bad(format!("unknown key `{key}`"))),
            }
        }
        Ok(())
    }
}

/// Smallest micro-batch counts per task whose realized token ratio lies
/// within ±10% (relative, per component) of the target. `tokens` is the
/// representative token count of one micro-batch per task; a zero target
/// forces a zero count. Candidates are ordered by total count, then
/// lexicographically.
pub fn plan_accumulation(
    token_ratio: (f64, f64, f64),
    tokens: (usize, usize, usize),
    cap: usize,
) -> Result<(usize, usize, usize)> {
    let targets = [token_ratio.0, token_ratio.1, token_ratio.2];
    let toks = [tokens.0 as f64, tokens.1 as f64, tokens.2 as f64];
    let tsum: f64 = targets.iter().sum();
    if tsum <= 0.0 || targets.iter().any(|&t| t < 0.0) {
        return Err(Error::InvalidArgument {
            context: "plan_accumulation",
            message: format!("token ratio {targets:?} must be nonnegative with a positive sum"),
        });
    }
    for (t, k) in targets.iter().zip(&toks) {
        if *t > 0.0 && *k <= 0.0 {
            return Err(Error::InvalidArgument {
                context: "plan_accumulation",
                message: "a task with positive ratio has empty micro-batches".into(),
            });
        }
    }
    let feasible = |c: [usize; 3]| -> bool {
        let realized: Vec<f64> = (0..3).map(|i| c[i] as f64 * toks[i]).collect();
        let rsum: f64 = realized.iter().sum();
        if rsum <= 0.0 {
            return false;
        }
        (0..3).all(|i| {
            let target = targets[i] / tsum;
            if target == 0.0 {
                return c[i] == 0;
            }
            if c[i] == 0 {
                return false;
            }
            ((realized[i] / rsum) - target).abs() / target <= 0.10
        })
    };
    let max_total = cap * 3;
    for total in 1..=max_total {
        for a in 0..=total.min(cap) {
            for b in 0..=(total - a).min(cap) {
                let c = total - a - b;
                if c > cap {
                    continue;
                }
                if feasible([a, b, c]) {
                    return Ok((a, b, c));
                }
            }
        }
    }
    Err(Error::InfeasibleRatio { cap })
}

/// Scale per-micro-batch token-sum losses by N/T_global so that a mean
/// all-reduce over N processes averages to (total token loss)/T_global.
pub fn global_batch_reduced_loss(
    token_sum_losses: &[f64],
    t_global: usize,
    n_procs: usize,
) -> Result<Vec<f64>> {
    if t_global == 0 {
        return Err(Error::InvalidArgument {
            context: "global_batch_reduced_loss",
            message: "global token count is zero".into(),
        });
    }
    assert!(n_procs > 0);
    let scale = n_procs as f64 / t_global as f64;
    Ok(token_sum_losses.iter().map(|l| l * scale).collect())
}

/// A generation training sample: optional text and reference-image
/// conditions, the target code pyramid, and its schedule.
#[derive(Debug, Clone)]
pub struct GenSample {
    /// Condition token ids including delimiters.
    pub caption: Option<Vec<u32>>,
    /// Reference image [3, H, W] for editing.
    pub reference: Option<Tensor>,
    pub codes: MultiScaleCode,
    pub schedule: crate::tokenizer::ScaleSchedule,
}

/// Independently drop the text and reference conditions, each with its own
/// probability. Both firing yields the fully unconditional sample.
pub fn drop_conditions(sample: &GenSample, p_text: f64, p_ref: f64, rng: &mut Rng) -> GenSample {
    assert!((0.0..=1.0).contains(&p_text) && (0.0..=1.0).contains(&p_ref));
    let mut out = sample.clone();
    if out.caption.is_some() && rng.gen::<f64>() < p_text {
        out.caption = None;
    }
    if out.reference.is_some() && rng.gen::<f64>() < p_ref {
        out.reference = None;
    }
    out
}

/// One packed bin: a multi-sample sequence plus its loss targets mapped to
/// bin-global positions.
#[derive(Debug, Clone)]
pub struct PackedBin {
    pub seq: crate::attention::TaggedSequence,
    /// (bin position, target id): the token at `position` predicts `id`.
    pub ntp_targets: Vec<(usize, u32)>,
    /// (bin position, d target bits) for generation positions.
    pub nsp_targets: Vec<(usize, Vec<f64>)>,
    pub token_count: usize,
    pub tokens_by_task: BTreeMap<TaskKind, usize>,
}

#[derive(Debug, Clone, Default)]
pub struct PackedBatch {
    pub bins: Vec<PackedBin>,
}

/// A single sample ready for packing: its tokens plus local loss targets.
#[derive(Debug, Clone)]
pub struct BuiltSample {
    pub tokens: crate::attention::SampleTokens,
    pub ntp_targets: Vec<(usize, u32)>,
    pub nsp_targets: Vec<(usize, Vec<f64>)>,
    pub task: TaskKind,
}

impl BuiltSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Deterministic first-fit-decreasing packing. Samples never split across
/// bins; ties keep input order.
pub fn pack_samples(samples: Vec<BuiltSample>, max_len: usize) -> Result<PackedBatch> {
    for s in &samples {
        if s.len() > max_len {
            return Err(Error::InvalidArgument {
                context: "pack_samples",
                message: format!("sample of {} tokens exceeds max_len {max_len}", s.len()),
            });
        }
        if s.is_empty() {
            return Err(Error::InvalidArgument {
                context: "pack_samples",
                message: "empty sample".into(),
            });
        }
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(samples[i].len()));
    let mut bins: Vec<Vec<usize>> = Vec::new();
    let mut room: Vec<usize> = Vec::new();
    for i in order {
        let need = samples[i].len();
        match room.iter().position(|&r| r >= need) {
            Some(b) => {
                bins[b].push(i);
                room[b] -= need;
            }
            None => {
                bins.push(vec![i]);
                room.push(max_len - need);
            }
        }
    }
    let mut out = PackedBatch::default();
    for bin in bins {
        let mut tokens = Vec::new();
        let mut ntp = Vec::new();
        let mut nsp = Vec::new();
        let mut by_task: BTreeMap<TaskKind, usize> = BTreeMap::new();
        let mut offset = 0;
        for i in bin {
            let s = &samples[i];
            tokens.push(s.tokens.clone());
            ntp.extend(s.ntp_targets.iter().map(|&(p, t)| (p + offset, t)));
            nsp.extend(s.nsp_targets.iter().map(|(p, b)| (p + offset, b.clone())));
            *by_task.entry(s.task).or_default() += s.len();
            offset += s.len();
        }
        let seq = crate::attention::TaggedSequence::from_samples(&tokens);
        out.bins.push(PackedBin {
            seq,
            ntp_targets: ntp,
            nsp_targets: nsp,
            token_count: offset,
            tokens_by_task: by_task,
        });
    }
    Ok(out)
}

/// Adam with cosine learning-rate decay, global gradient-norm clipping and
/// decoupled weight decay.
pub struct Optimizer {
    base_lr: f64,
    total_steps: usize,
    clip: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(plan: &TrainPlan) -> Self {
        Optimizer {
            base_lr: plan.learning_rate,
            total_steps: plan.steps.max(1),
            clip: plan.grad_norm_clip,
            weight_decay: plan.weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Cosine decay from the base rate toward zero over the plan's steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        let t = (step as f64 / self.total_steps as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Apply one update. Errors if any gradient targets a frozen tensor.
    pub fn step(
        &mut self,
        params: &mut crate::params::ParamSet,
        grads: &BTreeMap<String, Tensor>,
        frozen: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for name in grads.keys() {
            if frozen(name) || params.get(name)?.frozen {
                return Err(Error::FrozenGradient(name.clone()));
            }
        }
        let norm: f64 = grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        let lr = self.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let value = params.value(name)?.clone();
            let n = value.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut new = value.data().to_vec();
            for i in 0..n {
                let g = grad.data()[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                new[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * new[i]);
            }
            params.set_value(name, Tensor::new(value.shape().to_vec(), new))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{ModalityTag, SampleTokens, TokenContent};
    use crate::rng::seeded;

    fn text_built(len: usize) -> BuiltSample {
        let mut tokens = SampleTokens::default();
        let mut ntp = Vec::new();
        for i in 0..len {
            tokens.push(TokenContent::Text(i as u32 % 9), ModalityTag::Text);
            ntp.push((i, (i as u32 + 1) % 9));
        }
        BuiltSample { tokens, ntp_targets: ntp, nsp_targets: vec![], task: TaskKind::Text }
    }

    #[test]
    fn first_fit_decreasing_hand_case() {
        let batch =
            pack_samples(vec![text_built(6), text_built(5), text_built(3)], 8).unwrap();
        let lens: Vec<usize> = batch.bins.iter().map(|b| b.token_count).collect();
        assert_eq!(lens, vec![6, 8]);
        // second bin holds the 5-sample then the 3-sample
        assert_eq!(batch.bins[1].seq.sample_ids, [vec![0u32; 5], vec![1u32; 3]].concat());
        // target positions shifted by the packing offset
        assert_eq!(batch.bins[1].ntp_targets[5].0, 5);
    }

    #[test]
    fn single_sample_is_one_identical_bin() {
        let s = text_built(4);
        let batch = pack_samples(vec![s.clone()], 16).unwrap();
        assert_eq!(batch.bins.len(), 1);
        assert_eq!(batch.bins[0].seq.len(), 4);
        assert_eq!(batch.bins[0].ntp_targets, s.ntp_targets);
    }

    #[test]
    fn oversized_sample_is_rejected() {
        assert!(pack_samples(vec![text_built(9)], 8).is_err());
    }

    #[test]
    fn accumulation_simple_and_searched_cases() {
        assert_eq!(plan_accumulation((1.0, 2.0, 6.0), (100, 100, 100), 64).unwrap(), (1, 2, 6));
        // (50,100,300) realizes 1:2:6 exactly with a single micro-batch each
        assert_eq!(plan_accumulation((1.0, 2.0, 6.0), (50, 100, 300), 64).unwrap(), (1, 1, 1));
        // zero text target forces a zero text count
        let c = plan_accumulation((0.0, 8.0, 1.0), (10, 256, 100), 64).unwrap();
        assert_eq!(c.0, 0);
        let realized = (c.1 * 256) as f64 / (c.2 * 100) as f64;
        assert!((realized - 8.0).abs() / 8.0 <= 0.1, "realized U:G {realized}");
    }

    #[test]
    fn accumulation_infeasible_under_cap() {
        // widely skewed ratio cannot be met with counts ≤ 2
        assert!(matches!(
            plan_accumulation((1.0, 0.0, 1000.0), (1000, 1, 1), 2),
            Err(Error::InfeasibleRatio { .. })
        ));
    }

    #[test]
    fn global_batch_identity() {
        // N=2, token counts (2,6): mean over processes of L_i/(T/N) equals ΣL/T
        let losses = [4.0, 18.0];
        let scaled = global_batch_reduced_loss(&losses, 8, 2).unwrap();
        let mean = (scaled[0] + scaled[1]) / 2.0;
        assert!((mean - (4.0 + 18.0) / 8.0).abs() < 1e-15);
        // equal token counts reduce to the plain mean of per-token means
        let equal = global_batch_reduced_loss(&[3.0, 5.0], 8, 2).unwrap();
        assert!((((equal[0] + equal[1]) / 2.0) - 1.0).abs() < 1e-15);
        assert!(global_batch_reduced_loss(&losses, 0, 2).is_err());
    }

    #[test]
    fn drop_conditions_edges_and_rate() {
        let mut rng = seeded(3);
        let schedule = crate::tokenizer::ScaleSchedule::custom(1.0, vec![(1, 1)]).unwrap();
        let codes = crate::tokenizer::encode_multiscale(
            &Tensor::full(vec![4, 1, 1], 1.0),
            &schedule,
            crate::tokenizer::Quantizer::Bsq,
        )
        .unwrap();
        let sample = GenSample {
            caption: Some(vec![1, 2, 3]),
            reference: Some(Tensor::zeros(vec![3, 28, 28])),
            codes,
            schedule,
        };
        let same = drop_conditions(&sample, 0.0, 0.0, &mut rng);
        assert!(same.caption.is_some() && same.reference.is_some());
        let none = drop_conditions(&sample, 1.0, 1.0, &mut rng);
        assert!(none.caption.is_none() && none.reference.is_none());

        let mut dropped = 0;
        for _ in 0..10_000 {
            if drop_conditions(&sample, 0.1, 0.0, &mut rng).caption.is_none() {
                dropped += 1;
            }
        }
        let frac = dropped as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&frac), "drop fraction {frac}");
    }

    #[test]
    fn config_text_overrides() {
        let mut plan = TrainPlan::stage2(100);
        plan.apply_config_text(
            "learning_rate=0.001\n# comment\ntoken_ratio=1:5:6\nnum_scales=7\nsteps=42\n",
        )
        .unwrap();
        assert_eq!(plan.learning_rate, 0.001);
        assert_eq!(plan.token_ratio, (1.0, 5.0, 6.0));
        assert_eq!(plan.num_scales, 7);
        assert_eq!(plan.steps, 42);
        assert!(plan.apply_config_text("bogus_key=1\n").is_err());
        assert!(plan.apply_config_text("token_ratio=1:2\n").is_err());
    }

    #[test]
    fn stage1_freeze_covers_shared_stack() {
        let plan = TrainPlan::stage1(10);
        assert!(plan.is_frozen("block0.attn.wq"));
        assert!(plan.is_frozen("block0.ffn.text.gate"));
        assert!(plan.is_frozen("block1.saa.2.up.A"));
        assert!(plan.is_frozen("embed.text"));
        assert!(plan.is_frozen("head.bit"));
        assert!(!plan.is_frozen("block0.ffn.und.gate"));
        assert!(!plan.is_frozen("block1.ffn.gen.down"));
        assert!(!plan.is_frozen("patch.conv.w"));
        assert!(!TrainPlan::stage2(10).is_frozen("block0.attn.wq"));
    }

    #[test]
    fn cosine_schedule_shape() {
        let opt = Optimizer::new(&TrainPlan { learning_rate: 1.0, steps: 100, ..TrainPlan::stage2(100) });
        assert!((opt.lr_at(0) - 1.0).abs() < 1e-12);
        assert!((opt.lr_at(50) - 0.5).abs() < 1e-12);
        assert!(opt.lr_at(100) < 1e-12);
        assert!(opt.lr_at(25) > opt.lr_at(75));
    }

    #[test]
    fn optimizer_rejects_frozen_gradients() {
        let mut ps = crate::params::ParamSet::new();
        ps.insert("w", Tensor::zeros(vec![2]));
        let plan = TrainPlan::stage2(10);
        let mut opt = Optimizer::new(&plan);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::full(vec![2], 1.0));
        assert!(matches!(
            opt.step(&mut ps, &grads, |_| true),
            Err(Error::FrozenGradient(_))
        ));
        opt.step(&mut ps, &grads, |_| false).unwrap();
        assert!(ps.value("w").unwrap().data()[0] < 0.0);
    }
}
