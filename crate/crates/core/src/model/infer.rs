//! No-grad inference: incremental forward with per-layer key/value reuse,
//! and the scale-by-scale generation loop.
//!
//! The cached and uncached paths run the same per-row kernels in the same
//! order, so greedy decoding produces bit-identical codes either way.


use crate::attention::{
    build_mask, AttentionMask, ModalityTag, SampleTokens, TaggedSequence, TokenContent,
};
use crate::error::{Error, Result};
use crate::generation::{sample_bits, DecodeConfig};
use crate::model::{code_map_bits, map_to_rows, rows_to_map, ModelConfig};
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::{self, resize_plain, Tensor};
use crate::tokenizer::{MultiScaleCode, ScaleSchedule};

/// Per-layer cached key/value rows, one row of [heads·head_dim] per token.
pub struct KvCache {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    tokens: usize,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        KvCache { layers: vec![(Vec::new(), Vec::new()); layers], tokens: 0 }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }
}

fn rope_row(row: &mut [f64], pos: u32, heads: usize, dh: usize, base: f64) {
    let half = dh / 2;
    for h in 0..heads {
        let off = h * dh;
        for j in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * j as f64 / dh as f64);
            let (sin, cos) = theta.sin_cos();
            let (a, b) = (row[off + 2 * j], row[off + 2 * j + 1]);
            row[off + 2 * j] = a * cos - b * sin;
            row[off + 2 * j + 1] = a * sin + b * cos;
        }
    }
}

/// Plain-tensor forward over the student path. Processes the rows from
/// `cache.tokens()` onward, appending their keys/values; pass a fresh cache
/// to process a whole sequence.
pub(crate) struct Infer<'p> {
    pub params: &'p ParamSet,
    pub config: &'p ModelConfig,
}

impl<'p> Infer<'p> {
    fn val(&self, name: &str) -> &Tensor {
        &self.params.get(name).unwrap_or_else(|e| panic!("{e}")).value
    }

    /// Embedding rows for tokens [from..] of the sequence.
    fn embed_rows(&self, seq: &TaggedSequence, from: usize) -> Result<Vec<f64>> {
        let cfg = self.config;
        let h = cfg.hidden;
        let m = seq.len() - from;
        let mut out = vec![0.0; m * h];
        for (r, content) in seq.contents[from..].iter().enumerate() {
            let row = &mut out[r * h..(r + 1) * h];
            match content {
                TokenContent::Text(id) => {
                    let table = self.val("embed.text");
                    let i = *id as usize;
                    assert!(i < table.shape()[0], "text id out of vocabulary");
                    row.copy_from_slice(&table.data()[i * h..(i + 1) * h]);
                }
                TokenContent::Gen(v) => {
                    if v.len() != cfg.code_dim {
                        return Err(Error::ShapeMismatch {
                            context: "gen token input",
                            expected: vec![cfg.code_dim],
                            got: vec![v.len()],
                        });
                    }
                    let table = self.val("embed.code");
                    for (c, &x) in v.iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for (o, &t) in row.iter_mut().zip(&table.data()[c * h..(c + 1) * h]) {
                            *o += x * t;
                        }
                    }
                }
                TokenContent::Patch(px) => {
                    let sub = 3 * cfg.patch_conv * cfg.patch_conv;
                    let squares = cfg.unshuffle * cfg.unshuffle;
                    let mut subs = Vec::with_capacity(squares * sub);
                    super::conv_subpatches(px, cfg, &mut subs);
                    let conv = tensor::matmul(
                        &subs,
                        self.val("patch.conv.w").data(),
                        squares,
                        sub,
                        cfg.patch_channels,
                    );
                    let mut unshuffled = conv;
                    for (i, v) in unshuffled.iter_mut().enumerate() {
                        *v += self.val("patch.conv.b").data()[i % cfg.patch_channels];
                    }
                    let mut hid = tensor::matmul(
                        &unshuffled,
                        self.val("patch.mlp.w1").data(),
                        1,
                        squares * cfg.patch_channels,
                        h,
                    );
                    for (i, v) in hid.iter_mut().enumerate() {
                        *v = tensor::silu(*v + self.val("patch.mlp.b1").data()[i]);
                    }
                    let mut out_row = tensor::matmul(&hid, self.val("patch.mlp.w2").data(), 1, h, h);
                    for (i, v) in out_row.iter_mut().enumerate() {
                        *v += self.val("patch.mlp.b2").data()[i];
                    }
                    row.copy_from_slice(&out_row);
                }
            }
        }
        Ok(out)
    }

    fn rms_rows(&self, x: &[f64], weight: &str) -> Vec<f64> {
        let w = self.val(weight).data();
        let h = w.len();
        let mut out = vec![0.0; x.len()];
        for (orow, xrow) in out.chunks_mut(h).zip(x.chunks(h)) {
            tensor::rms_norm_row(xrow, w, self.config.rms_eps, orow);
        }
        out
    }

    /// One block over rows [from..] with keys/values appended to `cache`.
    #[allow(clippy::too_many_arguments)]
    fn block_rows(
        &self,
        block: usize,
        x: &[f64],
        seq: &TaggedSequence,
        mask: &AttentionMask,
        from: usize,
        cache: &mut KvCache,
    ) -> Result<Vec<f64>> {
        let cfg = self.config;
        let h = cfg.hidden;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let m = x.len() / h;
        let p = |s: &str| format!("block{block}.{s}");

        let normed = self.rms_rows(x, &p("attn.norm"));
        let mut q = tensor::matmul(&normed, self.val(&p("attn.wq")).data(), m, h, h);
        let mut k = tensor::matmul(&normed, self.val(&p("attn.wk")).data(), m, h, h);
        let v = tensor::matmul(&normed, self.val(&p("attn.wv")).data(), m, h, h);
        for r in 0..m {
            let pos = seq.positions[from + r];
            rope_row(&mut q[r * h..(r + 1) * h], pos, heads, dh, cfg.rope_base);
            rope_row(&mut k[r * h..(r + 1) * h], pos, heads, dh, cfg.rope_base);
        }
        {
            let (ck, cv) = &mut cache.layers[block];
            ck.extend_from_slice(&k);
            cv.extend_from_slice(&v);
        }
        let (ck, cv) = &cache.layers[block];
        let total = ck.len() / h;
        debug_assert_eq!(total, from + m);

        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut attn = vec![0.0; m * h];
        let mut scores: Vec<(usize, f64)> = Vec::new();
        for r in 0..m {
            let qi = from + r;
            for head in 0..heads {
                let off = head * dh;
                let qrow = &q[r * h + off..r * h + off + dh];
                scores.clear();
                let mut mx = f64::NEG_INFINITY;
                for j in mask.allowed_iter(qi) {
                    debug_assert!(j < total, "mask allows a key that is not materialized yet");
                    let krow = &ck[j * h + off..j * h + off + dh];
                    let s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                    mx = mx.max(s);
                    scores.push((j, s));
                }
                if scores.is_empty() {
                    return Err(Error::NoAllowedKey { query: qi });
                }
                let mut z = 0.0;
                for (_, s) in scores.iter() {
                    z += (s - mx).exp();
                }
                let orow = &mut attn[r * h + off..r * h + off + dh];
                for &(j, s) in scores.iter() {
                    let pw = (s - mx).exp() / z;
                    for (o, &vv) in orow.iter_mut().zip(&cv[j * h + off..j * h + off + dh]) {
                        *o += pw * vv;
                    }
                }
            }
        }
        let proj = tensor::matmul(&attn, self.val(&p("attn.wo")).data(), m, h, h);
        let mid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();

        let ffn_in = self.rms_rows(&mid, &p("ffn.norm"));
        let mut out = mid.clone();
        for r in 0..m {
            let y = self.ffn_row(block, &ffn_in[r * h..(r + 1) * h], seq.tags[from + r])?;
            for (o, &x) in out[r * h..(r + 1) * h].iter_mut().zip(&y) {
                *o += x;
            }
        }
        Ok(out)
    }

    fn ffn_row(&self, block: usize, x: &[f64], tag: ModalityTag) -> Result<Vec<f64>> {
        let cfg = self.config;
        let h = cfg.hidden;
        let ff = cfg.ff;
        let (expert, scale) = match tag {
            ModalityTag::Text => ("text", None),
            ModalityTag::UndVision => ("und", None),
            ModalityTag::GenVision(k) => {
                if k == 0 || k > cfg.max_scales {
                    return Err(Error::InvalidArgument {
                        context: "expert_ffn_forward",
                        message: format!("adapter index {k} outside 1..={}", cfg.max_scales),
                    });
                }
                ("gen", Some(k))
            }
        };
        let linear = |x: &[f64], d_in: usize, d_out: usize, layer: &str| -> Vec<f64> {
            let w = self.val(&format!("block{block}.ffn.{expert}.{layer}"));
            let mut y = tensor::matmul(x, w.data(), 1, d_in, d_out);
            if let Some(k) = scale {
                let a = self.val(&format!("block{block}.saa.{k}.{layer}.A"));
                let b = self.val(&format!("block{block}.saa.{k}.{layer}.B"));
                let r = a.shape()[1];
                let xa = tensor::matmul(x, a.data(), 1, d_in, r);
                let xab = tensor::matmul(&xa, b.data(), 1, r, d_out);
                for (o, &s) in y.iter_mut().zip(&xab) {
                    *o += s;
                }
            }
            y
        };
        let gate = linear(x, h, ff, "gate");
        let up = linear(x, h, ff, "up");
        let inner: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| tensor::silu(g) * u).collect();
        Ok(linear(&inner, ff, h, "down"))
    }

    /// Process rows [cache.tokens()..] through the stack; returns the
    /// final-norm output rows for that span.
    pub(crate) fn forward_rows(
        &self,
        seq: &TaggedSequence,
        mask: &AttentionMask,
        cache: &mut KvCache,
    ) -> Result<Vec<f64>> {
        let from = cache.tokens;
        assert!(seq.len() > from, "no new rows to process");
        let mut x = self.embed_rows(seq, from)?;
        for block in 0..self.config.layers {
            x = self.block_rows(block, &x, seq, mask, from, cache)?;
        }
        cache.tokens = seq.len();
        Ok(self.rms_rows(&x, "final.norm"))
    }

    fn bit_logits(&self, final_rows: &[f64], take_last: usize) -> Tensor {
        let h = self.config.hidden;
        let d = self.config.code_dim;
        let m = final_rows.len() / h;
        assert!(take_last <= m);
        let tail = &final_rows[(m - take_last) * h..];
        let data = tensor::matmul(tail, self.val("head.bit").data(), take_last, h, d);
        Tensor::new(vec![take_last, d], data)
    }
}

/// Scale-by-scale decoding over a fixed condition prefix.
///
/// Appends each scale's query tokens, runs one incremental forward, and
/// returns that scale's bit logits; the caller samples codes and supplies
/// the next scale's inputs. With the cache disabled every step recomputes
/// the full sequence through a fresh cache — same kernels, same order.
pub struct GenSession<'p> {
    params: &'p ParamSet,
    config: &'p ModelConfig,
    sample: SampleTokens,
    cache: Option<KvCache>,
}

impl<'p> GenSession<'p> {
    pub fn new(
        params: &'p ParamSet,
        config: &'p ModelConfig,
        prefix: SampleTokens,
        use_cache: bool,
    ) -> Result<Self> {
        if prefix.tags.iter().any(ModalityTag::is_gen) {
            return Err(Error::InvalidArgument {
                context: "GenSession",
                message: "prefix must end where generation begins".into(),
            });
        }
        config.validate()?;
        let cache = use_cache.then(|| KvCache::new(config.layers));
        Ok(GenSession { params, config, sample: prefix, cache })
    }

    pub fn sequence_len(&self) -> usize {
        self.sample.len()
    }

    /// Append the scale's query tokens (one per spatial site, inputs in
    /// position-major rows) and return their bit logits [h·w, d].
    pub fn step_scale(&mut self, scale: usize, inputs: &Tensor) -> Result<Tensor> {
        if scale == 0 || scale > self.config.max_scales {
            return Err(Error::InvalidArgument {
                context: "step_scale",
                message: format!("scale {scale} outside 1..={}", self.config.max_scales),
            });
        }
        let m = inputs.shape()[0];
        for r in 0..m {
            let v = inputs.data()[r * self.config.code_dim..(r + 1) * self.config.code_dim].to_vec();
            self.sample.push(TokenContent::Gen(v), ModalityTag::GenVision(scale));
        }
        let seq = TaggedSequence::single(&self.sample);
        let mask = build_mask(&seq);
        let infer = Infer { params: self.params, config: self.config };
        let final_rows = match &mut self.cache {
            Some(cache) => infer.forward_rows(&seq, &mask, cache)?,
            None => {
                let mut fresh = KvCache::new(self.config.layers);
                infer.forward_rows(&seq, &mask, &mut fresh)?
            }
        };
        Ok(infer.bit_logits(&final_rows, m))
    }
}

/// Decode a full code pyramid: for each scale, embed the running
/// reconstruction (upsampled to the final grid, then resized to the
/// scale's grid; zeros at scale 1), predict all sites in parallel, sample,
/// commit, continue.
pub fn next_scale_generate(
    params: &ParamSet,
    config: &ModelConfig,
    prefix: SampleTokens,
    schedule: &ScaleSchedule,
    decode: &DecodeConfig,
) -> Result<MultiScaleCode> {
    if schedule.len() > config.max_scales {
        return Err(Error::ScaleCountOutOfRange {
            requested: schedule.len(),
            max: config.max_scales,
        });
    }
    let mut session = GenSession::new(params, config, prefix, decode.use_cache)?;
    let (fh, fw) = schedule.final_size();
    let d = config.code_dim;
    let mut acc = Tensor::zeros(vec![d, fh, fw]);
    let mut scales = Vec::with_capacity(schedule.len());
    for (k0, &(h, w)) in schedule.entries().iter().enumerate() {
        let scale = k0 + 1;
        let inputs = if scale == 1 {
            Tensor::zeros(vec![h * w, d])
        } else {
            map_to_rows(&resize_plain(&acc, (h, w))?)
        };
        let logits = session.step_scale(scale, &inputs)?;
        let code = sample_scale_logits(&logits, h, w, scale, decode)?;
        let up = resize_plain(&code, (fh, fw))?;
        acc = Tensor::new(acc.shape().to_vec(), tensor::add(acc.data(), up.data()));
        scales.push(code);
    }
    Ok(MultiScaleCode { dim: d, scales })
}

/// Sample one scale's code map from bit logits, one independent RNG stream
/// per spatial site so draw order never matters.
pub fn sample_scale_logits(
    logits: &Tensor,
    h: usize,
    w: usize,
    scale: usize,
    decode: &DecodeConfig,
) -> Result<Tensor> {
    let d = logits.shape()[1];
    assert_eq!(logits.shape()[0], h * w, "one logit row per spatial site");
    let mut rows = Vec::with_capacity(h * w * d);
    for p in 0..h * w {
        let mut rng = rng::stream(decode.seed, ((scale as u64) << 32) | p as u64);
        let row = sample_bits(&logits.data()[p * d..(p + 1) * d], &decode.mode, &mut rng)?;
        rows.extend_from_slice(&row);
    }
    Ok(rows_to_map(&Tensor::new(vec![h * w, d], rows), h, w))
}

/// Greedy bit accuracy of regenerating `target` from the prefix.
pub fn regeneration_bit_accuracy(
    params: &ParamSet,
    config: &ModelConfig,
    prefix: SampleTokens,
    schedule: &ScaleSchedule,
    target: &MultiScaleCode,
    decode: &DecodeConfig,
) -> Result<f64> {
    let generated = next_scale_generate(params, config, prefix, schedule, decode)?;
    Ok(1.0 - generated.bit_disagreement(target))
}

/// Teacher-forced bit targets for every scale, position-major.
pub fn pyramid_bits(codes: &MultiScaleCode) -> Vec<f64> {
    let mut bits = Vec::new();
    for map in &codes.scales {
        bits.extend(code_map_bits(map));
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::DecodeMode;
    use crate::model::{forward, init_params, ForwardPath};
    use crate::params::Binder;
    use crate::rng::seeded;
    use crate::tensor::Tape;
    use rand::Rng as _;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ff: 24,
            code_dim: 4,
            max_scales: 3,
            vocab: 16,
            saa_rank: 2,
            ..ModelConfig::desk_small()
        }
    }

    fn text_prefix(ids: &[u32]) -> SampleTokens {
        let mut s = SampleTokens::default();
        for &id in ids {
            s.push(TokenContent::Text(id), ModalityTag::Text);
        }
        s
    }

    #[test]
    fn infer_matches_tape_forward() {
        let config = tiny();
        let params = init_params(&config, 21);
        let mut rng = seeded(5);
        let mut s = text_prefix(&[1, 2, 3]);
        for k in 1..=2usize {
            for _ in 0..(k * k) {
                let v: Vec<f64> = (0..config.code_dim).map(|_| rng.gen::<f64>() - 0.5).collect();
                s.push(TokenContent::Gen(v), ModalityTag::GenVision(k));
            }
        }
        let seq = TaggedSequence::single(&s);

        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let out = forward(&binder, &seq, &config, ForwardPath::Student).unwrap();
        let tape_final = out.final_hidden.value();

        let infer = Infer { params: &params, config: &config };
        let mask = build_mask(&seq);
        let mut cache = KvCache::new(config.layers);
        let inf_final = infer.forward_rows(&seq, &mask, &mut cache).unwrap();
        let diff = tape_final
            .data()
            .iter()
            .zip(&inf_final)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "tape and inference paths diverge: {diff}");
    }

    #[test]
    fn cache_matches_no_cache_bit_for_bit() {
        let config = tiny();
        let params = init_params(&config, 22);
        let schedule = ScaleSchedule::custom(1.0, vec![(1, 1), (2, 2), (3, 3)]).unwrap();
        let decode_cached =
            DecodeConfig { mode: DecodeMode::Greedy, seed: 7, use_cache: true };
        let decode_plain =
            DecodeConfig { mode: DecodeMode::Greedy, seed: 7, use_cache: false };
        let a = next_scale_generate(&params, &config, text_prefix(&[4, 9]), &schedule, &decode_cached)
            .unwrap();
        let b = next_scale_generate(&params, &config, text_prefix(&[4, 9]), &schedule, &decode_plain)
            .unwrap();
        assert_eq!(a.scales.len(), b.scales.len());
        for (x, y) in a.scales.iter().zip(&b.scales) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_counts_tokens() {
        let config = tiny();
        let params = init_params(&config, 23);
        let schedule = ScaleSchedule::custom(1.0, vec![(1, 1), (2, 2)]).unwrap();
        let decode = DecodeConfig { mode: DecodeMode::Greedy, seed: 1, use_cache: true };
        let a = next_scale_generate(&params, &config, text_prefix(&[1]), &schedule, &decode).unwrap();
        let b = next_scale_generate(&params, &config, text_prefix(&[1]), &schedule, &decode).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scales[0].shape(), &[config.code_dim, 1, 1]);
        assert_eq!(a.scales[1].shape(), &[config.code_dim, 2, 2]);
        assert_eq!(a.total_tokens(), 5);
        assert!(a.alphabet_valid());
    }

    #[test]
    fn prefix_with_gen_tokens_is_rejected() {
        let config = tiny();
        let params = init_params(&config, 24);
        let mut s = SampleTokens::default();
        s.push(TokenContent::Gen(vec![0.0; config.code_dim]), ModalityTag::GenVision(1));
        assert!(GenSession::new(&params, &config, s, true).is_err());
    }

    #[test]
    fn schedule_beyond_adapter_bank_is_rejected() {
        let config = tiny();
        let params = init_params(&config, 25);
        let schedule = ScaleSchedule::builtin(1.0, 5).unwrap();
        let decode = DecodeConfig { mode: DecodeMode::Greedy, seed: 1, use_cache: true };
        assert!(matches!(
            next_scale_generate(&params, &config, text_prefix(&[1]), &schedule, &decode),
            Err(Error::ScaleCountOutOfRange { .. })
        ));
    }
}
