//! Stage execution: micro-batch prefetch, uneven accumulation, the
//! distillation objective, teacher construction, and the simulated
//! multi-process gradient check.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom as _;

use crate::error::{Error, Result};
use crate::model::{
    forward, init_teacher_params, ForwardPath, ForwardOutput, ModelConfig,
};
use crate::params::{Binder, ParamSet};
use crate::rng;
use crate::tensor::{Tape, Tensor, Value};
use crate::training::data::{build_gen, build_text, build_und, StageData};
use crate::training::{
    drop_conditions, pack_samples, plan_accumulation, BuiltSample, Optimizer, PackedBin,
    TaskKind, TrainPlan,
};

/// Σ over layers of the mean squared error between student and teacher
/// hidden states. Teacher states are constants.
pub fn distill_loss<'t>(student: &[Value<'t>], teacher: &[Tensor]) -> Result<Value<'t>> {
    if student.len() != teacher.len() {
        return Err(Error::LayerCountMismatch { student: student.len(), teacher: teacher.len() });
    }
    assert!(!student.is_empty(), "distill_loss needs at least one layer");
    let mut total: Option<Value<'t>> = None;
    for (s, t) in student.iter().zip(teacher) {
        let term = s.mse_vs_const(t);
        total = Some(match total {
            Some(acc) => acc + term,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// One optimizer-step log record, TSV-formatted by `Display`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLine {
    pub step: usize,
    /// Global-batch scaled loss (token sums over T_step).
    pub loss: f64,
    pub ntp: f64,
    pub nsp: f64,
    pub distill: f64,
    pub tokens_text: usize,
    pub tokens_und: usize,
    pub tokens_gen: usize,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            self.step,
            self.loss,
            self.ntp,
            self.nsp,
            self.distill,
            self.tokens_text,
            self.tokens_und,
            self.tokens_gen
        )
    }
}

struct BinLoss<'t> {
    /// Token-sum loss (per-token means times token counts).
    token_sum: Value<'t>,
    loss_tokens: usize,
    ntp_sum: f64,
    ntp_tokens: usize,
    nsp_sum: f64,
    nsp_tokens: usize,
    distill_mean: f64,
}

/// Drives one training stage over fixed toy data.
pub struct StageRunner {
    pub config: ModelConfig,
    pub plan: TrainPlan,
    pub params: ParamSet,
    pub teacher: Option<ParamSet>,
    pub data: StageData,
    pub log: Vec<LogLine>,
    counts: (usize, usize, usize),
    opt: Optimizer,
    cursors: [usize; 3],
    seed: u64,
    steps_done: usize,
}

impl StageRunner {
    pub fn new(
        config: ModelConfig,
        mut params: ParamSet,
        teacher: Option<ParamSet>,
        data: StageData,
        plan: TrainPlan,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if plan.stage == 1 && !data.und.is_empty() && teacher.is_none() {
            return Err(Error::InvalidArgument {
                context: "StageRunner",
                message: "stage 1 understanding data needs a teacher".into(),
            });
        }
        params.set_frozen_where(|n| plan.is_frozen(n));
        // nominal micro-batch token counts (no condition drops) drive the
        // accumulation plan
        let mut rng = rng::stream(seed, 0xacc);
        let mut probe = |task: TaskKind, runner_cfg: &ModelConfig| -> Result<usize> {
            let samples =
                Self::take_samples_inner(&data, &plan, runner_cfg, task, 0, &mut rng, false)?;
            Ok(samples.iter().map(BuiltSample::len).sum())
        };
        let tokens = (
            if data.text.is_empty() { 0 } else { probe(TaskKind::Text, &config)? },
            if data.und.is_empty() { 0 } else { probe(TaskKind::Und, &config)? },
            if data.gen.is_empty() { 0 } else { probe(TaskKind::Gen, &config)? },
        );
        let counts = plan_accumulation(plan.token_ratio, tokens, plan.accum_cap)?;
        let opt = Optimizer::new(&plan);
        Ok(StageRunner {
            config,
            plan,
            params,
            teacher,
            data,
            log: Vec::new(),
            counts,
            opt,
            cursors: [0; 3],
            seed,
            steps_done: 0,
        })
    }

    pub fn accumulation_counts(&self) -> (usize, usize, usize) {
        self.counts
    }

    fn take_samples(
        data: &StageData,
        plan: &TrainPlan,
        config: &ModelConfig,
        task: TaskKind,
        cursor: usize,
        rng: &mut rng::Rng,
    ) -> Result<Vec<BuiltSample>> {
        Self::take_samples_inner(data, plan, config, task, cursor, rng, true)
    }

    fn take_samples_inner(
        data: &StageData,
        plan: &TrainPlan,
        config: &ModelConfig,
        task: TaskKind,
        cursor: usize,
        rng: &mut rng::Rng,
        with_drops: bool,
    ) -> Result<Vec<BuiltSample>> {
        let per = match task {
            TaskKind::Text => plan.samples_per_micro_batch.0,
            TaskKind::Und => plan.samples_per_micro_batch.1,
            TaskKind::Gen => plan.samples_per_micro_batch.2,
        }
        .max(1);
        let mut out = Vec::with_capacity(per);
        for j in 0..per {
            match task {
                TaskKind::Text => {
                    let ids = &data.text[(cursor + j) % data.text.len()];
                    out.push(build_text(ids));
                }
                TaskKind::Und => {
                    let (image, caption) = &data.und[(cursor + j) % data.und.len()];
                    out.push(build_und(image, caption, config)?);
                }
                TaskKind::Gen => {
                    let sample = &data.gen[(cursor + j) % data.gen.len()];
                    let flip = if with_drops { plan.flip_prob } else { 0.0 };
                    let built = if with_drops {
                        let dropped =
                            drop_conditions(sample, plan.drop_text, plan.drop_ref, rng);
                        build_gen(&dropped, config, flip, rng)?
                    } else {
                        build_gen(sample, config, flip, rng)?
                    };
                    out.push(built);
                }
            }
        }
        Ok(out)
    }

    /// Token-sum loss of one packed bin. Understanding bins in stage 1 add
    /// λ·L_distill against the teacher's hidden states on the same tokens.
    fn bin_loss<'t>(
        &self,
        binder: &Binder<'t, '_>,
        bin: &PackedBin,
        with_distill: bool,
    ) -> Result<BinLoss<'t>> {
        let out: ForwardOutput<'t> =
            forward(binder, &bin.seq, &self.config, ForwardPath::Student)?;
        let mut token_sum: Option<Value<'t>> = None;
        let mut add = |v: Value<'t>| {
            token_sum = Some(match token_sum.take() {
                Some(acc) => acc + v,
                None => v,
            })
        };
        let mut loss_tokens = 0;
        let (mut ntp_sum, mut ntp_tokens) = (0.0, 0usize);
        let (mut nsp_sum, mut nsp_tokens) = (0.0, 0usize);
        let mut distill_mean = 0.0;

        if !bin.ntp_targets.is_empty() {
            let logits = out.text_logits.expect("text targets without text positions");
            let row_of: BTreeMap<usize, usize> =
                out.text_rows.iter().enumerate().map(|(r, &p)| (p, r)).collect();
            let rows: Vec<usize> =
                bin.ntp_targets.iter().map(|&(p, _)| row_of[&p]).collect();
            let targets: Vec<u32> = bin.ntp_targets.iter().map(|&(_, t)| t).collect();
            let n = targets.len();
            let mean = logits
                .gather_rows(std::sync::Arc::new(rows))
                .cross_entropy_mean(std::sync::Arc::new(targets))?;
            ntp_sum += mean.value().item() * n as f64;
            ntp_tokens += n;
            loss_tokens += n;
            let mut term = mean.scale(n as f64);
            if with_distill {
                let teacher = self.teacher.as_ref().expect("stage-1 distillation needs a teacher");
                let teacher_tape = Tape::new();
                let tbinder = Binder::new(&teacher_tape, teacher);
                let tout = forward(&tbinder, &bin.seq, &self.config, ForwardPath::Teacher)?;
                let teacher_hiddens: Vec<Tensor> =
                    tout.hiddens.iter().map(Value::value).collect();
                let dloss = distill_loss(&out.hiddens, &teacher_hiddens)?;
                distill_mean = dloss.value().item();
                // per-token combined objective: NTP + λ·distill
                term = term + dloss.scale(self.plan.lambda_distill * n as f64);
            }
            add(term);
        }
        if !bin.nsp_targets.is_empty() {
            let logits = out.bit_logits.expect("bit targets without generation positions");
            let row_of: BTreeMap<usize, usize> =
                out.gen_rows.iter().enumerate().map(|(r, &p)| (p, r)).collect();
            let rows: Vec<usize> =
                bin.nsp_targets.iter().map(|&(p, _)| row_of[&p]).collect();
            let mut bits = Vec::new();
            for (_, b) in &bin.nsp_targets {
                bits.extend_from_slice(b);
            }
            let n = bin.nsp_targets.len();
            let mean = logits
                .gather_rows(std::sync::Arc::new(rows))
                .bce_with_logits_mean(std::sync::Arc::new(bits))?;
            nsp_sum += mean.value().item() * n as f64;
            nsp_tokens += n;
            loss_tokens += n;
            add(mean.scale(n as f64));
        }
        let token_sum = token_sum.ok_or(Error::EmptyTargets("bin_loss"))?;
        Ok(BinLoss { token_sum, loss_tokens, ntp_sum, ntp_tokens, nsp_sum, nsp_tokens, distill_mean })
    }

    /// One optimizer step: prefetch every micro-batch, derive the global
    /// token count, accumulate gradients of the scaled losses, update.
    pub fn step(&mut self) -> Result<LogLine> {
        let step_idx = self.steps_done;
        let mut rng = rng::stream(self.seed, 1 + step_idx as u64);
        let mut batches: Vec<(TaskKind, PackedBin)> = Vec::new();
        let mut tokens_by_task: BTreeMap<TaskKind, usize> = BTreeMap::new();
        for (task, count, cursor_idx) in [
            (TaskKind::Text, self.counts.0, 0usize),
            (TaskKind::Und, self.counts.1, 1),
            (TaskKind::Gen, self.counts.2, 2),
        ] {
            let per = match task {
                TaskKind::Text => self.plan.samples_per_micro_batch.0,
                TaskKind::Und => self.plan.samples_per_micro_batch.1,
                TaskKind::Gen => self.plan.samples_per_micro_batch.2,
            }
            .max(1);
            for _ in 0..count {
                let samples = Self::take_samples(
                    &self.data,
                    &self.plan,
                    &self.config,
                    task,
                    self.cursors[cursor_idx],
                    &mut rng,
                )?;
                self.cursors[cursor_idx] += per;
                let batch = pack_samples(samples, self.plan.sequence_length)?;
                for bin in batch.bins {
                    *tokens_by_task.entry(task).or_default() += bin.token_count;
                    batches.push((task, bin));
                }
            }
        }

        // prefetch done: global loss-token count for this step
        let mut probe_tokens = 0usize;
        for (_, bin) in &batches {
            probe_tokens += bin.ntp_targets.len() + bin.nsp_targets.len();
        }
        if probe_tokens == 0 {
            return Err(Error::EmptyTargets("training step"));
        }
        let t_step = probe_tokens as f64;

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut line = LogLine {
            step: step_idx,
            loss: 0.0,
            ntp: 0.0,
            nsp: 0.0,
            distill: 0.0,
            tokens_text: tokens_by_task.get(&TaskKind::Text).copied().unwrap_or(0),
            tokens_und: tokens_by_task.get(&TaskKind::Und).copied().unwrap_or(0),
            tokens_gen: tokens_by_task.get(&TaskKind::Gen).copied().unwrap_or(0),
        };
        let (mut ntp_sum, mut ntp_n) = (0.0, 0usize);
        let (mut nsp_sum, mut nsp_n) = (0.0, 0usize);
        let (mut distill_sum, mut distill_n) = (0.0, 0usize);
        for (task, bin) in &batches {
            let with_distill = self.plan.stage == 1
                && *task == TaskKind::Und
                && self.plan.lambda_distill > 0.0
                && self.teacher.is_some();
            let tape = Tape::new();
            let binder = Binder::new(&tape, &self.params);
            let loss = self.bin_loss(&binder, bin, with_distill)?;
            let scaled = loss.token_sum.scale(1.0 / t_step);
            line.loss += scaled.value().item();
            ntp_sum += loss.ntp_sum;
            ntp_n += loss.ntp_tokens;
            nsp_sum += loss.nsp_sum;
            nsp_n += loss.nsp_tokens;
            if with_distill {
                distill_sum += loss.distill_mean;
                distill_n += 1;
            }
            let _ = loss.loss_tokens;
            let bin_grads = binder.grads_by_name(tape.backward(scaled)?);
            for (name, g) in bin_grads {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        let sum = crate::tensor::add(acc.data(), g.data());
                        *acc = Tensor::new(g.shape().to_vec(), sum);
                    }
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        line.ntp = if ntp_n > 0 { ntp_sum / ntp_n as f64 } else { 0.0 };
        line.nsp = if nsp_n > 0 { nsp_sum / nsp_n as f64 } else { 0.0 };
        line.distill = if distill_n > 0 { distill_sum / distill_n as f64 } else { 0.0 };

        let plan = self.plan.clone();
        self.opt.step(&mut self.params, &grads, |n| plan.is_frozen(n))?;
        self.steps_done += 1;
        self.log.push(line.clone());
        Ok(line)
    }

    pub fn run(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    /// Mean NTP loss over the run's text-predicting samples — caption-only
    /// samples and, when present, image→caption pairs — teacher-forced, no
    /// gradients.
    pub fn eval_ntp(&self) -> Result<f64> {
        let mut built: Vec<BuiltSample> = self.data.text.iter().map(|ids| build_text(ids)).collect();
        for (image, caption) in &self.data.und {
            built.push(build_und(image, caption, &self.config)?);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for sample in built {
            let batch = pack_samples(vec![sample], self.plan.sequence_length)?;
            let tape = Tape::new();
            let binder = Binder::new(&tape, &self.params);
            let loss = self.bin_loss(&binder, &batch.bins[0], false)?;
            total += loss.ntp_sum;
            count += loss.ntp_tokens;
        }
        if count == 0 {
            return Err(Error::EmptyTargets("eval_ntp"));
        }
        Ok(total / count as f64)
    }
}

/// Teacher construction outcome: trained parameters and the NTP loss
/// trajectory of the connector training run.
pub struct TeacherOutcome {
    pub params: ParamSet,
    pub losses: Vec<f64>,
}

/// Build the toy teacher: frozen stand-in encoder + the student's initial
/// shared decoder, with only the two-layer MLP connector training on
/// caption pairs under NTP loss.
pub fn build_toy_teacher(
    config: &ModelConfig,
    student_init: &ParamSet,
    pairs: &[(Tensor, Vec<u32>)],
    steps: usize,
    seed: u64,
) -> Result<TeacherOutcome> {
    let mut teacher = init_teacher_params(config, student_init, seed);
    let plan = TrainPlan {
        learning_rate: 2e-2,
        steps,
        weight_decay: 0.0,
        ..TrainPlan::stage1(steps)
    };
    let mut opt = Optimizer::new(&plan);
    let mut losses = Vec::with_capacity(steps);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = rng::stream(seed, 0x7ea);
    let per = 4.min(pairs.len()).max(1);
    let mut cursor = 0usize;
    for _ in 0..steps {
        if cursor % pairs.len() == 0 {
            order.shuffle(&mut rng);
        }
        let mut samples = Vec::with_capacity(per);
        for j in 0..per {
            let (image, caption) = &pairs[order[(cursor + j) % pairs.len()]];
            samples.push(build_und(image, caption, config)?);
        }
        cursor += per;
        let batch = pack_samples(samples, 512)?;
        let mut total = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut tokens = 0usize;
        for bin in &batch.bins {
            tokens += bin.ntp_targets.len();
        }
        for bin in &batch.bins {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &teacher);
            let out = forward(&binder, &bin.seq, config, ForwardPath::Teacher)?;
            let logits = out.text_logits.expect("caption pairs always carry text");
            let row_of: BTreeMap<usize, usize> =
                out.text_rows.iter().enumerate().map(|(r, &p)| (p, r)).collect();
            let rows: Vec<usize> = bin.ntp_targets.iter().map(|&(p, _)| row_of[&p]).collect();
            let targets: Vec<u32> = bin.ntp_targets.iter().map(|&(_, t)| t).collect();
            let n = targets.len();
            let mean = logits
                .gather_rows(std::sync::Arc::new(rows))
                .cross_entropy_mean(std::sync::Arc::new(targets))?;
            total += mean.value().item() * n as f64;
            let scaled = mean.scale(n as f64 / tokens as f64);
            for (name, g) in binder.grads_by_name(tape.backward(scaled)?) {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        let sum = crate::tensor::add(acc.data(), g.data());
                        *acc = Tensor::new(g.shape().to_vec(), sum);
                    }
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        losses.push(total / tokens as f64);
        opt.step(&mut teacher, &grads, |n| !n.starts_with("connector."))?;
    }
    Ok(TeacherOutcome { params: teacher, losses })
}

/// Simulate N training processes sharing one parameter set: each worker
/// scales its micro-batch token-sum losses by N/T_global, the synchronized
/// gradient is the mean over workers, and the reference gradient optimizes
/// the global batch loss (total token loss / T_global) in one process.
pub fn simulated_global_batch_gradients(
    config: &ModelConfig,
    params: &ParamSet,
    workers: &[Vec<PackedBin>],
) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> {
    let n_procs = workers.len();
    assert!(n_procs > 0);
    // the all-reduce over local token counts
    let t_global: usize = workers
        .iter()
        .flat_map(|bins| bins.iter())
        .map(|b| b.ntp_targets.len() + b.nsp_targets.len())
        .sum();
    if t_global == 0 {
        return Err(Error::EmptyTargets("simulated_global_batch_gradients"));
    }

    let bin_token_sum = |bin: &PackedBin, scale: f64| -> Result<BTreeMap<String, Tensor>> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, params);
        let out = forward(&binder, &bin.seq, config, ForwardPath::Student)?;
        let mut loss: Option<Value<'_>> = None;
        if !bin.ntp_targets.is_empty() {
            let logits = out.text_logits.expect("text targets need text rows");
            let row_of: BTreeMap<usize, usize> =
                out.text_rows.iter().enumerate().map(|(r, &p)| (p, r)).collect();
            let rows: Vec<usize> = bin.ntp_targets.iter().map(|&(p, _)| row_of[&p]).collect();
            let targets: Vec<u32> = bin.ntp_targets.iter().map(|&(_, t)| t).collect();
            let n = targets.len();
            let term = logits
                .gather_rows(std::sync::Arc::new(rows))
                .cross_entropy_mean(std::sync::Arc::new(targets))?
                .scale(n as f64);
            loss = Some(match loss {
                Some(acc) => acc + term,
                None => term,
            });
        }
        if !bin.nsp_targets.is_empty() {
            let logits = out.bit_logits.expect("bit targets need gen rows");
            let row_of: BTreeMap<usize, usize> =
                out.gen_rows.iter().enumerate().map(|(r, &p)| (p, r)).collect();
            let rows: Vec<usize> = bin.nsp_targets.iter().map(|&(p, _)| row_of[&p]).collect();
            let mut bits = Vec::new();
            for (_, b) in &bin.nsp_targets {
                bits.extend_from_slice(b);
            }
            let n = bin.nsp_targets.len();
            let term = logits
                .gather_rows(std::sync::Arc::new(rows))
                .bce_with_logits_mean(std::sync::Arc::new(bits))?
                .scale(n as f64);
            loss = Some(match loss {
                Some(acc) => acc + term,
                None => term,
            });
        }
        let loss = loss.ok_or(Error::EmptyTargets("micro-batch"))?.scale(scale);
        binder
            .grads_by_name(tape.backward(loss)?)
            .into_iter()
            .map(|(k, v)| Ok((k, v)))
            .collect()
    };

    let add_into = |acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>, w: f64| {
        for (name, g) in grads {
            let scaled = crate::tensor::scale(g.data(), w);
            match acc.get_mut(&name) {
                Some(a) => {
                    let sum = crate::tensor::add(a.data(), &scaled);
                    *a = Tensor::new(g.shape().to_vec(), sum);
                }
                None => {
                    acc.insert(name, Tensor::new(g.shape().to_vec(), scaled));
                }
            }
        }
    };

    // synchronized path: per-worker sums of ∇(loss_sum·N/T), then the mean
    let mut sync: BTreeMap<String, Tensor> = BTreeMap::new();
    for bins in workers {
        let mut local: BTreeMap<String, Tensor> = BTreeMap::new();
        for bin in bins {
            let g = bin_token_sum(bin, n_procs as f64 / t_global as f64)?;
            add_into(&mut local, g, 1.0);
        }
        add_into(&mut sync, local, 1.0 / n_procs as f64);
    }

    // reference path: one process over the whole global batch
    let mut single: BTreeMap<String, Tensor> = BTreeMap::new();
    for bins in workers {
        for bin in bins {
            let g = bin_token_sum(bin, 1.0 / t_global as f64)?;
            add_into(&mut single, g, 1.0);
        }
    }
    Ok((sync, single))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tape;

    #[test]
    fn distill_loss_cases() {
        let mut rng = seeded(1);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let sa = tape.constant(a.clone());
        let sb = tape.constant(b.clone());
        // identical hiddens → 0
        let zero = distill_loss(&[sa, sb], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(zero.value().item(), 0.0);
        // constant offset c over N layers → N·c²
        let c = 0.3;
        let off_a = a.map(|v| v + c);
        let off_b = b.map(|v| v + c);
        let loss = distill_loss(&[sa, sb], &[off_a, off_b]).unwrap().value().item();
        assert!((loss - 2.0 * c * c).abs() < 1e-12);
        // layer count mismatch
        assert!(matches!(
            distill_loss(&[sa], &[a, b]),
            Err(Error::LayerCountMismatch { .. })
        ));
    }

    #[test]
    fn log_line_is_tab_separated() {
        let line = LogLine {
            step: 3,
            loss: 1.25,
            ntp: 2.5,
            nsp: 0.5,
            distill: 0.125,
            tokens_text: 10,
            tokens_und: 20,
            tokens_gen: 60,
        };
        let s = line.to_string();
        assert_eq!(s.split('\t').count(), 8);
        assert!(s.starts_with("3\t1.250000\t2.500000"));
    }
}
