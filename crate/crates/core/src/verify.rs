//! Registered invariant suite.
//!
//! Every invariant in the crate's contracts runs here under fixed seeds,
//! producing one record per check: name, status, measured value,
//! tolerance. Selections filter by module prefix; results are sorted by
//! name and a run is deterministic end to end.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;

use crate::attention::{
    build_mask, ModalityTag, SampleTokens, TaggedSequence, TokenContent,
};
use crate::error::{Error, Result};
use crate::generation::{cfg_edit, cfg_t2i, DecodeConfig, DecodeMode, GuidanceConfig};
use crate::model::{
    forward, init_params, next_scale_generate, ForwardPath, ModelConfig,
};
use crate::params::Binder;
use crate::rng;
use crate::tensor::{
    finite_difference_gradient, max_relative_error, resize_plain, Tape, Tensor,
};
use crate::tokenizer::{
    bsq_quantize, bsq_truncation_errors, corrupt_codes, decode_multiscale, encode_multiscale,
    random_smooth_feature, PixelLatentMap, Quantizer, ScaleSchedule, SCHEDULE_TABLE,
};
use crate::training::data::{caption_image_pairs, spectra_test_images};
use crate::training::{
    build_toy_teacher, pack_samples, plan_accumulation, simulated_global_batch_gradients,
    StageRunner, TrainPlan,
};

/// Outcome of one registered check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail: detail.into(),
        }
    }

    fn below(name: &str, measured: f64, bound: f64, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: measured < bound,
            measured,
            tolerance: bound,
            detail: detail.into(),
        }
    }
}

type CheckFn = fn() -> Result<CheckResult>;

/// All registered checks, sorted by name.
pub fn registry() -> Vec<(&'static str, CheckFn)> {
    let mut checks: Vec<(&'static str, CheckFn)> = vec![
        ("attention/mask_matches_oracle", check_mask_oracle),
        ("attention/no_cross_sample_leakage", check_zero_leakage),
        ("attention/packing_isolation", check_packing_isolation),
        ("generation/cfg_argmax_preserved", check_cfg_argmax),
        ("generation/cfg_identities", check_cfg_identities),
        ("generation/guidance_defaults", check_guidance_defaults),
        ("generation/sampling_order_independence", check_sampling_order),
        ("model/determinism", check_model_determinism),
        ("model/hidden_state_layout", check_hidden_layout),
        ("model/kv_cache_equivalence", check_kv_cache),
        ("model/scale_token_counts", check_scale_token_counts),
        ("moe/expert_shapes_equal", check_expert_shapes),
        ("moe/routing_gradient_purity", check_routing_purity),
        ("moe/saa_noop_at_init", check_saa_noop),
        ("tensor/grad_matches_finite_difference", check_grad_finite_difference),
        ("tensor/resize_constant_exact", check_resize_constant),
        ("tokenizer/bsq_alphabet", check_bsq_alphabet),
        ("tokenizer/corrupt_preserves_alphabet", check_corrupt_alphabet),
        ("tokenizer/mse_nonincreasing", check_mse_nonincreasing),
        ("tokenizer/pixel_map_projection", check_pixel_projection),
        ("tokenizer/schedule_table", check_schedule_table),
        ("tokenizer/telescoping_identity", check_telescoping),
        ("training/accumulation_ratio", check_accumulation_ratio),
        ("training/distill_monotonicity", check_distill_monotonicity),
        ("training/freeze_contract", check_freeze_contract),
        ("training/global_batch_equivalence", check_global_batch),
        ("harness/spectra_property", check_spectra_property),
    ];
    checks.sort_by_key(|(name, _)| *name);
    checks
}

/// Run one registered check by its full name.
pub fn run_check(name: &str) -> Result<CheckResult> {
    let (_, f) = registry()
        .into_iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::UnknownSelection(name.to_string()))?;
    f()
}

/// Run the selected checks (`all` or a module prefix such as `tokenizer`).
pub fn run_verify(selection: &str) -> Result<Vec<CheckResult>> {
    let registry = registry();
    let selected: Vec<_> = if selection == "all" {
        registry
    } else {
        let matches: Vec<_> = registry
            .into_iter()
            .filter(|(name, _)| name.split('/').next() == Some(selection))
            .collect();
        if matches.is_empty() {
            return Err(Error::UnknownSelection(selection.to_string()));
        }
        matches
    };
    let mut results = Vec::with_capacity(selected.len());
    for (_, f) in selected {
        results.push(f()?);
    }
    Ok(results)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ff: 24,
        code_dim: 4,
        max_scales: 3,
        vocab: 32,
        saa_rank: 2,
        ..ModelConfig::desk_small()
    }
}

// ─── tensor ─────────────────────────────────────────────────────────────

fn check_grad_finite_difference() -> Result<CheckResult> {
    // random 3-layer MLP scalar loss over ≤ 10³ elements
    let mut rng = rng::seeded(101);
    let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
    let params: Vec<(&str, Tensor)> = vec![
        ("w1", Tensor::randn(vec![6, 8], 0.5, &mut rng)),
        ("w2", Tensor::randn(vec![8, 8], 0.5, &mut rng)),
        ("w3", Tensor::randn(vec![8, 1], 0.5, &mut rng)),
    ];
    let eval = |over: &str, t: &Tensor| -> f64 {
        let tape = Tape::new();
        let xin = tape.constant(x.clone());
        let get = |name: &str| {
            if name == over {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(params.iter().find(|(n, _)| *n == name).unwrap().1.clone())
            }
        };
        let h1 = xin.matmul(get("w1")).silu();
        let h2 = h1.matmul(get("w2")).silu();
        h2.matmul(get("w3")).sum().value().item()
    };
    let mut worst: f64 = 0.0;
    for (name, tensor) in &params {
        let tape = Tape::new();
        let xin = tape.constant(x.clone());
        let mut leaves = BTreeMap::new();
        for (n, t) in &params {
            leaves.insert(*n, tape.leaf(t.clone().with_grad()));
        }
        let h1 = xin.matmul(leaves["w1"]).silu();
        let h2 = h1.matmul(leaves["w2"]).silu();
        let loss = h2.matmul(leaves["w3"]).sum();
        let grads = tape.backward(loss)?;
        let analytic = &grads[&leaves[name].id()];
        let numeric = finite_difference_gradient(|t| eval(name, t), tensor, 1e-5)?;
        worst = worst.max(max_relative_error(analytic, &numeric));
    }
    Ok(CheckResult::at_most(
        "tensor/grad_matches_finite_difference",
        worst,
        1e-6,
        "3-layer MLP, every weight against central differences",
    ))
}

fn check_resize_constant() -> Result<CheckResult> {
    let value = 0.371;
    let img = Tensor::full(vec![3, 5, 7], value);
    let down = resize_plain(&img, (11, 3))?;
    let mut worst: f64 = 0.0;
    for &v in down.data() {
        worst = worst.max((v - value).abs());
    }
    let back = resize_plain(&down, (5, 7))?;
    worst = worst.max(back.max_abs_diff(&img));
    Ok(CheckResult::at_most(
        "tensor/resize_constant_exact",
        worst,
        0.0,
        "constant image mean preserved exactly through resize and back",
    ))
}

// ─── tokenizer ──────────────────────────────────────────────────────────

fn check_telescoping() -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut rng = rng::seeded(202);
    for &(ratio, _) in SCHEDULE_TABLE.iter() {
        let schedule = ScaleSchedule::builtin(ratio, 13)?;
        let (h, w) = schedule.final_size();
        for _ in 0..2 {
            let f = random_smooth_feature(4, (h, w), &mut rng);
            let codes = encode_multiscale(&f, &schedule, Quantizer::Identity)?;
            let back = decode_multiscale(&codes, &schedule)?;
            worst = worst.max(f.max_abs_diff(&back));
        }
    }
    Ok(CheckResult::at_most(
        "tokenizer/telescoping_identity",
        worst,
        1e-9,
        "identity quantizer round trip over all 15 full schedules",
    ))
}

fn check_bsq_alphabet() -> Result<CheckResult> {
    let mut rng = rng::seeded(203);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let x = Tensor::randn(vec![8], 1.0, &mut rng);
        let q = bsq_quantize(x.data());
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max((norm - 1.0).abs());
        let qq = bsq_quantize(&q);
        if qq != q {
            worst = worst.max(1.0);
        }
    }
    let zero = bsq_quantize(&[0.0; 8]);
    if zero.iter().any(|&v| v <= 0.0) {
        worst = worst.max(1.0);
    }
    Ok(CheckResult::at_most(
        "tokenizer/bsq_alphabet",
        worst,
        1e-12,
        "unit norm, idempotence and the sign(0)=+1 convention on 10⁴ vectors",
    ))
}

fn check_corrupt_alphabet() -> Result<CheckResult> {
    let mut rng = rng::seeded(204);
    let f = Tensor::randn(vec![8, 6, 6], 1.0, &mut rng);
    let schedule = ScaleSchedule::builtin(1.0, 4)?;
    let codes = encode_multiscale(&f, &schedule, Quantizer::Bsq)?;
    let corrupted = corrupt_codes(&codes, 0.3, 17);
    let measured = if corrupted.alphabet_valid() { 0.0 } else { 1.0 };
    Ok(CheckResult::at_most(
        "tokenizer/corrupt_preserves_alphabet",
        measured,
        0.0,
        "sign flips keep every entry at ±1/√d",
    ))
}

fn check_schedule_table() -> Result<CheckResult> {
    let mut out_of_range: f64 = 0.0;
    for &(ratio, _) in SCHEDULE_TABLE.iter() {
        let s = ScaleSchedule::builtin(ratio, 13)?;
        let (h, w) = s.final_size();
        let area = (h * w) as f64;
        out_of_range = out_of_range.max((area - 4200.0).max(3800.0 - area).max(0.0));
    }
    let full = ScaleSchedule::builtin(1.0, 13)?;
    let half = ScaleSchedule::builtin(1.0, 10)?;
    let anchors_ok = full.pixel_size() == (1024, 1024)
        && half.pixel_size() == (512, 512)
        && full.total_tokens() == 10521
        && SCHEDULE_TABLE.len() == 15;
    let mut result = CheckResult::at_most(
        "tokenizer/schedule_table",
        out_of_range,
        0.0,
        "15 rows, final areas in [3800, 4200], 1024²/512² anchors, 10521 tokens",
    );
    result.passed &= anchors_ok;
    Ok(result)
}

fn check_mse_nonincreasing() -> Result<CheckResult> {
    let errs = bsq_truncation_errors(8, (16, 16), 5, 20);
    let mut worst_increase: f64 = f64::NEG_INFINITY;
    for k in 1..errs.len() {
        worst_increase = worst_increase.max(errs[k] - errs[k - 1]);
    }
    Ok(CheckResult::at_most(
        "tokenizer/mse_nonincreasing",
        worst_increase,
        0.0,
        format!("depth-1..5 mean reconstruction errors {errs:?}"),
    ))
}

fn check_pixel_projection() -> Result<CheckResult> {
    let mut rng = rng::seeded(205);
    let mut worst: f64 = 0.0;
    for dim in [16, 32] {
        let map = PixelLatentMap::new(dim, 7);
        let img = Tensor::randn(vec![3, 32, 32], 1.0, &mut rng);
        let once = map.decode(&map.encode(&img)?)?;
        let twice = map.decode(&map.encode(&once)?)?;
        worst = worst.max(once.max_abs_diff(&twice));
        let zero = map.encode(&Tensor::zeros(vec![3, 32, 32]))?;
        worst = worst.max(zero.data().iter().fold(0.0f64, |a, &v| a.max(v.abs())));
    }
    Ok(CheckResult::at_most(
        "tokenizer/pixel_map_projection",
        worst,
        1e-9,
        "decode∘encode is an idempotent projection at d = 16 and 32",
    ))
}

// ─── attention ──────────────────────────────────────────────────────────

/// Pairwise rule oracle, written independently of the range builder.
fn oracle_allow(seq: &TaggedSequence, i: usize, j: usize) -> bool {
    if seq.sample_ids[i] != seq.sample_ids[j] {
        return false;
    }
    if j <= i {
        return true;
    }
    match (seq.tags[i], seq.tags[j]) {
        (ModalityTag::UndVision, ModalityTag::UndVision) => (i..=j).all(|t| {
            seq.tags[t] == ModalityTag::UndVision && seq.sample_ids[t] == seq.sample_ids[i]
        }),
        (ModalityTag::GenVision(a), ModalityTag::GenVision(b)) => a == b,
        _ => false,
    }
}

fn random_layout(rng: &mut rng::Rng, max_len: usize) -> TaggedSequence {
    let n_samples = rng.gen_range(1..=3);
    let mut samples = Vec::new();
    for _ in 0..n_samples {
        let mut s = SampleTokens::default();
        let segments = rng.gen_range(1..=5);
        let mut scale = 1usize;
        for _ in 0..segments {
            let seg_len = rng.gen_range(1..=6);
            match rng.gen_range(0..3) {
                0 => (0..seg_len).for_each(|_| s.push(TokenContent::Text(0), ModalityTag::Text)),
                1 => (0..seg_len).for_each(|_| {
                    s.push(TokenContent::Patch(Arc::new(Vec::new())), ModalityTag::UndVision)
                }),
                _ => {
                    (0..seg_len)
                        .for_each(|_| s.push(TokenContent::Gen(Vec::new()), ModalityTag::GenVision(scale)));
                    scale += rng.gen_range(0..=1);
                }
            }
            if s.len() >= max_len / n_samples {
                break;
            }
        }
        samples.push(s);
    }
    TaggedSequence::from_samples(&samples)
}

fn check_mask_oracle() -> Result<CheckResult> {
    let mut rng = rng::seeded(301);
    let mut mismatches = 0u64;
    for _ in 0..200 {
        let seq = random_layout(&mut rng, 64);
        let mask = build_mask(&seq);
        for i in 0..seq.len() {
            for j in 0..seq.len() {
                if mask.allows(i, j) != oracle_allow(&seq, i, j) {
                    mismatches += 1;
                }
            }
        }
    }
    Ok(CheckResult::at_most(
        "attention/mask_matches_oracle",
        mismatches as f64,
        0.0,
        "200 random tagged layouts (≤64 tokens) against the pairwise rules",
    ))
}

/// Two small mixed samples used by the packing checks.
fn two_samples(config: &ModelConfig, rng: &mut rng::Rng) -> (SampleTokens, SampleTokens) {
    let gen_token = |rng: &mut rng::Rng| -> Vec<f64> {
        (0..config.code_dim).map(|_| rng.gen::<f64>() - 0.5).collect()
    };
    let mut a = SampleTokens::default();
    a.push(TokenContent::Text(1), ModalityTag::Text);
    a.push(TokenContent::Text(4), ModalityTag::Text);
    a.push(TokenContent::Gen(gen_token(rng)), ModalityTag::GenVision(1));
    a.push(TokenContent::Gen(gen_token(rng)), ModalityTag::GenVision(2));
    let mut b = SampleTokens::default();
    b.push(TokenContent::Text(9), ModalityTag::Text);
    b.push(TokenContent::Gen(gen_token(rng)), ModalityTag::GenVision(1));
    b.push(TokenContent::Text(2), ModalityTag::Text);
    (a, b)
}

fn check_packing_isolation() -> Result<CheckResult> {
    let config = tiny_config();
    let params = init_params(&config, 401);
    let mut rng = rng::seeded(402);
    let (a, b) = two_samples(&config, &mut rng);
    let packed = TaggedSequence::from_samples(&[a.clone(), b]);
    let alone = TaggedSequence::single(&a);

    let run = |seq: &TaggedSequence| -> Result<Tensor> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        Ok(forward(&binder, seq, &config, ForwardPath::Student)?.final_hidden.value())
    };
    let packed_out = run(&packed)?;
    let alone_out = run(&alone)?;
    let h = config.hidden;
    let mut worst: f64 = 0.0;
    for r in 0..a.len() {
        for c in 0..h {
            let d = (packed_out.data()[r * h + c] - alone_out.data()[r * h + c]).abs();
            worst = worst.max(d);
        }
    }
    Ok(CheckResult::at_most(
        "attention/packing_isolation",
        worst,
        1e-9,
        "sample A packed with B equals sample A alone, per-sample positions",
    ))
}

fn check_zero_leakage() -> Result<CheckResult> {
    let config = tiny_config();
    let params = init_params(&config, 403);
    let mut rng = rng::seeded(404);
    let (a, b) = two_samples(&config, &mut rng);
    let base = TaggedSequence::from_samples(&[a.clone(), b.clone()]);
    let mut perturbed_b = b;
    if let TokenContent::Gen(v) = &mut perturbed_b.contents[1] {
        v[0] += 7.5;
    }
    if let TokenContent::Text(id) = &mut perturbed_b.contents[0] {
        *id = 13;
    }
    let perturbed = TaggedSequence::from_samples(&[a.clone(), perturbed_b]);

    let run = |seq: &TaggedSequence| -> Result<Tensor> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        Ok(forward(&binder, seq, &config, ForwardPath::Student)?.final_hidden.value())
    };
    let x = run(&base)?;
    let y = run(&perturbed)?;
    let h = config.hidden;
    let mut worst: f64 = 0.0;
    for r in 0..a.len() {
        for c in 0..h {
            worst = worst.max((x.data()[r * h + c] - y.data()[r * h + c]).abs());
        }
    }
    Ok(CheckResult::at_most(
        "attention/no_cross_sample_leakage",
        worst,
        0.0,
        "perturbing sample B leaves every sample-A output bit-identical",
    ))
}

// ─── moe ────────────────────────────────────────────────────────────────

fn check_expert_shapes() -> Result<CheckResult> {
    let config = tiny_config();
    let params = init_params(&config, 501);
    let mut bad = 0.0;
    for layer in ["gate", "up", "down"] {
        let t = params.value(&format!("block0.ffn.text.{layer}"))?;
        for expert in ["und", "gen"] {
            let e = params.value(&format!("block0.ffn.{expert}.{layer}"))?;
            if e.shape() != t.shape() || e.data() != t.data() {
                bad += 1.0;
            }
        }
    }
    Ok(CheckResult::at_most(
        "moe/expert_shapes_equal",
        bad,
        0.0,
        "three experts replicated from one FFN at init",
    ))
}

fn check_routing_purity() -> Result<CheckResult> {
    // one block: a per-token loss must only reach that token's expert
    let config = ModelConfig { layers: 1, ..tiny_config() };
    let params = init_params(&config, 502);
    let mut rng = rng::seeded(503);
    let mut s = SampleTokens::default();
    s.push(TokenContent::Text(3), ModalityTag::Text);
    s.push(
        TokenContent::Gen((0..config.code_dim).map(|_| rng.gen::<f64>() - 0.5).collect()),
        ModalityTag::GenVision(1),
    );
    s.push(
        TokenContent::Gen((0..config.code_dim).map(|_| rng.gen::<f64>() - 0.5).collect()),
        ModalityTag::GenVision(2),
    );
    let seq = TaggedSequence::single(&s);
    let expert_of = ["text", "gen", "gen"];
    let scale_of = [0usize, 1, 2];
    let mut worst: f64 = 0.0;
    for (token, expected_expert) in expert_of.iter().enumerate() {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let out = forward(&binder, &seq, &config, ForwardPath::Student)?;
        let row = out.hiddens[0].gather_rows(Arc::new(vec![token])).sum();
        let grads = binder.grads_by_name(tape.backward(row)?);
        for (name, g) in &grads {
            let is_other_expert = ["text", "und", "gen"].iter().any(|e| {
                e != expected_expert && name.contains(&format!(".ffn.{e}."))
            });
            let is_other_scale = name.contains(".saa.")
                && (1..=config.max_scales).any(|k| {
                    k != scale_of[token] && name.contains(&format!(".saa.{k}."))
                });
            if is_other_expert || is_other_scale {
                let mag = g.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
                worst = worst.max(mag);
            }
        }
    }
    Ok(CheckResult::at_most(
        "moe/routing_gradient_purity",
        worst,
        0.0,
        "per-token losses reach only the routed expert and scale adapter",
    ))
}

fn check_saa_noop() -> Result<CheckResult> {
    let config = tiny_config();
    let params = init_params(&config, 504);
    let mut rng = rng::seeded(505);
    let mut s = SampleTokens::default();
    for k in 1..=2usize {
        s.push(
            TokenContent::Gen((0..config.code_dim).map(|_| rng.gen::<f64>() - 0.5).collect()),
            ModalityTag::GenVision(k),
        );
    }
    let seq = TaggedSequence::single(&s);
    let run = |ps: &crate::params::ParamSet| -> Result<Tensor> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, ps);
        Ok(forward(&binder, &seq, &config, ForwardPath::Student)?.final_hidden.value())
    };
    let base = run(&params)?;
    let mut scrambled = params.clone();
    for k in 1..=config.max_scales {
        for layer in ["gate", "up", "down"] {
            let name = format!("block0.saa.{k}.{layer}.A");
            let shape = scrambled.value(&name)?.shape().to_vec();
            scrambled.set_value(&name, Tensor::randn(shape, 5.0, &mut rng))?;
        }
    }
    let out = run(&scrambled)?;
    Ok(CheckResult::at_most(
        "moe/saa_noop_at_init",
        out.max_abs_diff(&base),
        0.0,
        "outputs independent of A factors while every B is zero",
    ))
}

// ─── model ──────────────────────────────────────────────────────────────

fn mixed_seq(config: &ModelConfig, rng: &mut rng::Rng) -> TaggedSequence {
    let (a, _) = two_samples(config, rng);
    TaggedSequence::single(&a)
}

fn check_model_determinism() -> Result<CheckResult> {
    let config = tiny_config();
    let params = init_params(&config, 601);
    let mut rng = rng::seeded(602);
    let seq = mixed_seq(&config, &mut rng);
    let run = |seq: &TaggedSequence| -> Result<Tensor> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        Ok(forward(&binder, seq, &config, ForwardPath::Student)?.final_hidden.value())
    };
    let a = run(&seq)?;
    let b = run(&seq)?;
    Ok(CheckResult::at_most(
        "model/determinism",
        a.max_abs_diff(&b),
        0.0,
        "identical inputs, two calls, bit-identical outputs",
    ))
}

fn check_hidden_layout() -> Result<CheckResult> {
    let config = tiny_config();
    let params = init_params(&config, 603);
    let mut rng = rng::seeded(604);
    let seq = mixed_seq(&config, &mut rng);
    let tape = Tape::new();
    let binder = Binder::new(&tape, &params);
    let out = forward(&binder, &seq, &config, ForwardPath::Student)?;
    let mut bad = 0.0;
    if out.hiddens.len() != config.layers {
        bad += 1.0;
    }
    for h in &out.hiddens {
        if h.shape() != vec![seq.len(), config.hidden] {
            bad += 1.0;
        }
    }
    Ok(CheckResult::at_most(
        "model/hidden_state_layout",
        bad,
        0.0,
        "one hidden state per layer, each [tokens, hidden]",
    ))
}

fn check_kv_cache() -> Result<CheckResult> {
    let config = tiny_config();
    let params = init_params(&config, 605);
    let schedule = ScaleSchedule::custom(1.0, vec![(1, 1), (2, 2), (3, 3)])?;
    let mut prefix = SampleTokens::default();
    prefix.push(TokenContent::Text(7), ModalityTag::Text);
    prefix.push(TokenContent::Text(3), ModalityTag::Text);
    let cached = next_scale_generate(
        &params,
        &config,
        prefix.clone(),
        &schedule,
        &DecodeConfig { mode: DecodeMode::Greedy, seed: 5, use_cache: true },
    )?;
    let plain = next_scale_generate(
        &params,
        &config,
        prefix,
        &schedule,
        &DecodeConfig { mode: DecodeMode::Greedy, seed: 5, use_cache: false },
    )?;
    let mut differing_bits = 0.0;
    for (a, b) in cached.scales.iter().zip(&plain.scales) {
        for (x, y) in a.data().iter().zip(b.data()) {
            if x.to_bits() != y.to_bits() {
                differing_bits += 1.0;
            }
        }
    }
    Ok(CheckResult::at_most(
        "model/kv_cache_equivalence",
        differing_bits,
        0.0,
        "greedy codes with KV reuse match full recomputation bit-for-bit",
    ))
}

fn check_scale_token_counts() -> Result<CheckResult> {
    let config = tiny_config();
    let params = init_params(&config, 606);
    let schedule = ScaleSchedule::custom(1.0, vec![(1, 1), (2, 2)])?;
    let mut prefix = SampleTokens::default();
    prefix.push(TokenContent::Text(1), ModalityTag::Text);
    let codes = next_scale_generate(
        &params,
        &config,
        prefix,
        &schedule,
        &DecodeConfig { mode: DecodeMode::Greedy, seed: 2, use_cache: true },
    )?;
    let mut bad = 0.0;
    if codes.scales[0].shape() != [config.code_dim, 1, 1] {
        bad += 1.0;
    }
    if codes.scales[1].shape() != [config.code_dim, 2, 2] {
        bad += 1.0;
    }
    if ScaleSchedule::builtin(1.0, 13)?.total_tokens() != 10521 {
        bad += 1.0;
    }
    Ok(CheckResult::at_most(
        "model/scale_token_counts",
        bad,
        0.0,
        "each scale emits h_k·w_k tokens; the full square schedule sums to 10521",
    ))
}

// ─── generation ─────────────────────────────────────────────────────────

fn check_cfg_identities() -> Result<CheckResult> {
    let mut rng = rng::seeded(701);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let t = Tensor::randn(vec![4, 6], 3.0, &mut rng);
        let n = Tensor::randn(vec![4, 6], 3.0, &mut rng);
        let ti = Tensor::randn(vec![4, 6], 3.0, &mut rng);
        worst = worst.max(cfg_t2i(&t, &n, 1.0)?.max_abs_diff(&t));
        worst = worst.max(cfg_t2i(&t, &n, 0.0)?.max_abs_diff(&n));
        // λ_i = 0 reduces dual guidance to single guidance on (L_ti, L_∅)
        let edge = cfg_edit(&ti, &t, &n, 0.0, 3.0)?;
        worst = worst.max(edge.max_abs_diff(&cfg_t2i(&ti, &n, 3.0)?));
        // λ_i = 1, λ_t = 1 averages the two conditioned branches
        let avg = cfg_edit(&ti, &t, &n, 1.0, 1.0)?;
        for ((&o, &a), &b) in avg.data().iter().zip(ti.data()).zip(t.data()) {
            worst = worst.max((o - (a + b) / 2.0).abs());
        }
    }
    Ok(CheckResult::at_most(
        "generation/cfg_identities",
        worst,
        1e-12,
        "guidance algebra at λ ∈ {0, 1} on random logits",
    ))
}

fn check_cfg_argmax() -> Result<CheckResult> {
    let mut rng = rng::seeded(702);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let t = Tensor::randn(vec![8], 2.0, &mut rng);
        for lambda in [0.5, 3.0, 20.0] {
            let out = cfg_t2i(&t, &t, lambda)?;
            worst = worst.max(out.max_abs_diff(&t));
        }
    }
    Ok(CheckResult::at_most(
        "generation/cfg_argmax_preserved",
        worst,
        1e-12,
        "agreeing branches make guidance a no-op on decisions",
    ))
}

fn check_guidance_defaults() -> Result<CheckResult> {
    let t2i = GuidanceConfig::t2i_default();
    let edit = GuidanceConfig::edit_default();
    let measured = (t2i.lambda_text - 20.0).abs()
        + (edit.lambda_image - 1.0).abs()
        + (edit.lambda_text - 3.0).abs();
    Ok(CheckResult::at_most(
        "generation/guidance_defaults",
        measured,
        0.0,
        "λ_t = 20 for text-to-image; λ_i = 1, λ_t = 3 for editing",
    ))
}

fn check_sampling_order() -> Result<CheckResult> {
    let mut rng = rng::seeded(703);
    let logits = Tensor::randn(vec![9, 4], 1.0, &mut rng);
    let decode = DecodeConfig { mode: DecodeMode::Sample { temperature: 1.0 }, seed: 11, use_cache: true };
    let forwards = crate::model::sample_scale_logits(&logits, 3, 3, 2, &decode)?;
    // resample sites in reverse order through the same per-site streams
    let mut reversed_rows = vec![0.0; 9 * 4];
    for p in (0..9).rev() {
        let mut site_rng = rng::stream(decode.seed, (2u64 << 32) | p as u64);
        let row = crate::generation::sample_bits(
            &logits.data()[p * 4..(p + 1) * 4],
            &decode.mode,
            &mut site_rng,
        )?;
        reversed_rows[p * 4..(p + 1) * 4].copy_from_slice(&row);
    }
    let reversed = crate::model::rows_to_map(&Tensor::new(vec![9, 4], reversed_rows), 3, 3);
    let mut mismatches = 0.0;
    for (a, b) in forwards.data().iter().zip(reversed.data()) {
        if a != b {
            mismatches += 1.0;
        }
    }
    Ok(CheckResult::at_most(
        "generation/sampling_order_independence",
        mismatches,
        0.0,
        "per-site RNG streams make draw order irrelevant",
    ))
}

// ─── training ───────────────────────────────────────────────────────────

fn check_accumulation_ratio() -> Result<CheckResult> {
    let cases = [
        ((1.0, 2.0, 6.0), (100usize, 100usize, 100usize)),
        ((1.0, 2.0, 6.0), (50, 100, 300)),
        ((0.0, 8.0, 1.0), (10, 256, 100)),
        ((1.0, 5.0, 6.0), (30, 60, 100)),
    ];
    let mut worst: f64 = 0.0;
    for (ratio, tokens) in cases {
        let counts = plan_accumulation(ratio, tokens, 64)?;
        let realized = [
            counts.0 as f64 * tokens.0 as f64,
            counts.1 as f64 * tokens.1 as f64,
            counts.2 as f64 * tokens.2 as f64,
        ];
        let rsum: f64 = realized.iter().sum();
        let tsum = ratio.0 + ratio.1 + ratio.2;
        for (r, t) in realized.iter().zip([ratio.0, ratio.1, ratio.2]) {
            if t > 0.0 {
                worst = worst.max(((r / rsum) - t / tsum).abs() / (t / tsum));
            }
        }
    }
    Ok(CheckResult::at_most(
        "training/accumulation_ratio",
        worst,
        0.10,
        "planned counts realize the target token ratios within ±10%",
    ))
}

fn check_freeze_contract() -> Result<CheckResult> {
    let config = ModelConfig {
        max_scales: 5,
        ..ModelConfig::desk_small()
    };
    let params = init_params(&config, 801);
    let pixels = PixelLatentMap::new(config.code_dim, 7);
    let pairs = caption_image_pairs(8, 56);
    let teacher = build_toy_teacher(&config, &params, &pairs, 20, 802)?;
    let data = crate::training::data::stage1_data(&pixels, 5, 8, 2)?;
    let plan = TrainPlan { steps: 10, ..TrainPlan::stage1(10) };
    let mut runner = StageRunner::new(config, params, Some(teacher.params), data, plan.clone(), 803)?;
    let frozen_before = runner.params.checksum_where(|n| plan.is_frozen(n));
    let trainable_before = runner.params.checksum_where(|n| !plan.is_frozen(n));
    runner.run(10)?;
    let frozen_after = runner.params.checksum_where(|n| plan.is_frozen(n));
    let trainable_after = runner.params.checksum_where(|n| !plan.is_frozen(n));
    let mut measured = if frozen_before == frozen_after { 0.0 } else { 1.0 };
    if trainable_before == trainable_after {
        // the run must actually have trained something
        measured += 1.0;
    }
    Ok(CheckResult::at_most(
        "training/freeze_contract",
        measured,
        0.0,
        "stage-1 frozen tensors bit-identical over 10 steps, trainables move",
    ))
}

fn check_global_batch() -> Result<CheckResult> {
    let config = tiny_config();
    let params = init_params(&config, 804);
    // three processes with loss-token counts 2, 5 and 9
    let mut workers = Vec::new();
    for (w, len) in [(0u32, 2usize), (1, 5), (2, 9)] {
        let ids: Vec<u32> = (0..=len as u32).map(|i| (i * 3 + w) % 31).collect();
        let built = crate::training::data::build_text(&ids);
        let batch = pack_samples(vec![built], 64)?;
        workers.push(batch.bins);
    }
    let (sync, single) = simulated_global_batch_gradients(&config, &params, &workers)?;
    let mut worst: f64 = 0.0;
    for (name, g) in &sync {
        let s = &single[name];
        worst = worst.max(g.max_abs_diff(s));
    }
    if sync.len() != single.len() {
        worst = worst.max(1.0);
    }
    Ok(CheckResult::at_most(
        "training/global_batch_equivalence",
        worst,
        1e-10,
        "3 simulated processes, token counts (2,5,9), mean-reduced gradient",
    ))
}

fn check_distill_monotonicity() -> Result<CheckResult> {
    let config = ModelConfig::desk_small();
    let params = init_params(&config, 805);
    let pairs = caption_image_pairs(64, 28);
    let teacher = build_toy_teacher(&config, &params, &pairs, 200, 806)?;
    let data = crate::training::data::StageData {
        und: pairs,
        ..Default::default()
    };
    let plan = TrainPlan {
        steps: 500,
        token_ratio: (0.0, 1.0, 0.0),
        samples_per_micro_batch: (1, 6, 1),
        ..TrainPlan::stage1(500)
    };
    let mut runner = StageRunner::new(config, params, Some(teacher.params), data, plan, 807)?;
    runner.run(500)?;
    let first = &runner.log[0];
    let last = &runner.log[499];
    let measured = (last.distill - first.distill).max(last.ntp - first.ntp);
    Ok(CheckResult::below(
        "training/distill_monotonicity",
        measured,
        0.0,
        format!(
            "500 steps on 64 pairs: distill {:.4}→{:.4}, ntp {:.4}→{:.4}",
            first.distill, last.distill, first.ntp, last.ntp
        ),
    ))
}

// ─── harness ────────────────────────────────────────────────────────────

fn check_spectra_property() -> Result<CheckResult> {
    let config = ModelConfig::desk_small();
    let pixels = PixelLatentMap::new(config.code_dim, 7);
    let schedule = ScaleSchedule::builtin(1.0, 7)?;
    let mut min_low = f64::INFINITY;
    let mut max_final: f64 = 0.0;
    for image in spectra_test_images() {
        let latent = pixels.encode(&image)?;
        let codes = encode_multiscale(&latent, &schedule, Quantizer::Bsq)?;
        let fractions = crate::spectra::scale_low_freq_fractions(&codes, &schedule)?;
        min_low = min_low.min(fractions[0]).min(fractions[1]);
        max_final = max_final.max(*fractions.last().unwrap());
    }
    let passed = min_low >= 0.8 && max_final < 0.8;
    Ok(CheckResult {
        name: "harness/spectra_property".to_string(),
        passed,
        measured: min_low.min(1.0 - max_final),
        tolerance: 0.2,
        detail: format!(
            "scale 1–2 low-frequency share ≥ {min_low:.3}, final scale {max_final:.3} (bound 0.8)"
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_sorted_and_unique() {
        let names: Vec<&str> = registry().iter().map(|(n, _)| *n).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(names, sorted);
    }

    #[test]
    fn unknown_selection_errors() {
        assert!(matches!(run_verify("bogus"), Err(Error::UnknownSelection(_))));
    }

    #[test]
    fn attention_selection_runs_only_attention() {
        let results = run_verify("attention").unwrap();
        assert!(!results.is_empty());
        for r in &results {
            assert!(r.name.starts_with("attention/"), "{}", r.name);
            assert!(r.passed, "{}: measured {} tol {}", r.name, r.measured, r.tolerance);
        }
    }

    #[test]
    fn quick_module_selections_pass() {
        for module in ["tensor", "moe", "generation", "model"] {
            for r in run_verify(module).unwrap() {
                assert!(r.passed, "{}: measured {} tol {} ({})", r.name, r.measured, r.tolerance, r.detail);
            }
        }
    }
}
