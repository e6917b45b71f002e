//! Model assembly: embeddings, the MoE block stack, prediction heads,
//! losses, and the next-scale decoding loop.
//!
//! One forward pass serves every task. Text ids resolve through an
//! embedding table, raw image blocks through the patch-embedding stack
//! (14×14 convolution, 2×2 pixel unshuffle, two-layer MLP), and discrete
//! generation tokens through a linear code embedding. Text positions are
//! read out with a vocabulary head, generation positions with a d-way
//! binary bit head.

mod infer;

pub use infer::{
    next_scale_generate, pyramid_bits, regeneration_bit_accuracy, sample_scale_logits,
    GenSession, KvCache,
};

use std::sync::Arc;

use crate::attention::{build_mask, ModalityTag, TaggedSequence, TokenContent};
use crate::error::{Error, Result};
use crate::moe::{block_forward, RoutingMode};
use crate::params::{Binder, ParamSet};
use crate::rng;
use crate::tensor::{Tensor, Value};

/// Text vocabulary: raw bytes plus sequence delimiters.
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const BYTE_VOCAB: usize = 258;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Gated-FFN inner width.
    pub ff: usize,
    /// Code (latent channel) dimension d.
    pub code_dim: usize,
    /// Scale count K; sizes the adapter bank.
    pub max_scales: usize,
    pub vocab: usize,
    /// Low-rank adapter rank.
    pub saa_rank: usize,
    /// Patchify convolution kernel/stride.
    pub patch_conv: usize,
    /// Pixel-unshuffle factor after the convolution.
    pub unshuffle: usize,
    /// Convolution output channels.
    pub patch_channels: usize,
    /// Width of the teacher's stand-in vision encoder features.
    pub vit_dim: usize,
    pub rope_base: f64,
    pub rms_eps: f64,
}

impl ModelConfig {
    /// Small defaults for desk-scale runs.
    pub fn desk_small() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ff: 128,
            code_dim: 16,
            max_scales: 13,
            vocab: BYTE_VOCAB,
            saa_rank: 8,
            patch_conv: 14,
            unshuffle: 2,
            patch_channels: 16,
            vit_dim: 32,
            rope_base: 10000.0,
            rms_eps: 1e-6,
        }
    }

    /// Same tiny stack but with the full-width code dimension and adapter
    /// rank; invariants must hold here too.
    pub fn paper_shaped() -> Self {
        ModelConfig { code_dim: 32, saa_rank: 64, ..Self::desk_small() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidArgument { context: "ModelConfig", message };
        if self.hidden % self.heads != 0 {
            return Err(bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if self.head_dim() % 2 != 0 {
            return Err(bad(format!("head dim {} must be even for rotary positions", self.head_dim())));
        }
        if self.layers == 0 || self.max_scales == 0 || self.code_dim == 0 {
            return Err(bad("zero-sized model axis".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Pixel block size one visual token covers.
    pub fn patch_block(&self) -> usize {
        self.patch_conv * self.unshuffle
    }

    /// Visual token count for an image, or an error when the sides don't
    /// divide by the block size.
    pub fn patch_tokens(&self, height: usize, width: usize) -> Result<usize> {
        let b = self.patch_block();
        if height % b != 0 || width % b != 0 {
            return Err(Error::InvalidArgument {
                context: "patch_embed",
                message: format!("{height}×{width} not divisible by {b}"),
            });
        }
        Ok((height / b) * (width / b))
    }
}

/// Initialize all learnable tensors under the checkpoint naming contract.
/// The three FFN experts are replicas of a single seeded FFN; adapter B
/// factors start at zero so the bank is a no-op.
pub fn init_params(config: &ModelConfig, seed: u64) -> ParamSet {
    config.validate().expect("invalid model config");
    let mut rng = rng::stream(seed, 0x1217);
    let mut ps = ParamSet::new();
    let std = 0.02;
    let h = config.hidden;

    ps.insert("embed.text", Tensor::randn(vec![config.vocab, h], std, &mut rng));
    ps.insert("embed.code", Tensor::randn(vec![config.code_dim, h], std, &mut rng));

    let sub = 3 * config.patch_conv * config.patch_conv;
    let unshuffled = config.patch_channels * config.unshuffle * config.unshuffle;
    ps.insert("patch.conv.w", Tensor::randn(vec![sub, config.patch_channels], std, &mut rng));
    ps.insert("patch.conv.b", Tensor::zeros(vec![config.patch_channels]));
    ps.insert("patch.mlp.w1", Tensor::randn(vec![unshuffled, h], std, &mut rng));
    ps.insert("patch.mlp.b1", Tensor::zeros(vec![h]));
    ps.insert("patch.mlp.w2", Tensor::randn(vec![h, h], std, &mut rng));
    ps.insert("patch.mlp.b2", Tensor::zeros(vec![h]));

    for i in 0..config.layers {
        let p = |s: &str| format!("block{i}.{s}");
        ps.insert(p("attn.norm"), Tensor::full(vec![h], 1.0));
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            ps.insert(p(w), Tensor::randn(vec![h, h], std, &mut rng));
        }
        ps.insert(p("ffn.norm"), Tensor::full(vec![h], 1.0));
        // one FFN, replicated across the three experts
        let gate = Tensor::randn(vec![h, config.ff], std, &mut rng);
        let up = Tensor::randn(vec![h, config.ff], std, &mut rng);
        let down = Tensor::randn(vec![config.ff, h], std, &mut rng);
        for expert in ["text", "und", "gen"] {
            ps.insert(p(&format!("ffn.{expert}.gate")), gate.clone());
            ps.insert(p(&format!("ffn.{expert}.up")), up.clone());
            ps.insert(p(&format!("ffn.{expert}.down")), down.clone());
        }
        for k in 1..=config.max_scales {
            for (layer, d_in, d_out) in [
                ("gate", h, config.ff),
                ("up", h, config.ff),
                ("down", config.ff, h),
            ] {
                let a_std = 1.0 / (d_in as f64).sqrt();
                ps.insert(
                    p(&format!("saa.{k}.{layer}.A")),
                    Tensor::randn(vec![d_in, config.saa_rank], a_std, &mut rng),
                );
                ps.insert(p(&format!("saa.{k}.{layer}.B")), Tensor::zeros(vec![config.saa_rank, d_out]));
            }
        }
    }

    ps.insert("final.norm", Tensor::full(vec![h], 1.0));
    ps.insert("head.text", Tensor::randn(vec![h, config.vocab], std, &mut rng));
    ps.insert("head.bit", Tensor::randn(vec![h, config.code_dim], std, &mut rng));
    ps
}

/// Teacher parameters: the same shared decoder tensors the student starts
/// from, plus a frozen stand-in vision encoder and the trainable two-layer
/// MLP connector. Only the connector thaws.
pub fn init_teacher_params(config: &ModelConfig, student_init: &ParamSet, seed: u64) -> ParamSet {
    let mut rng = rng::stream(seed, 0x7e4c);
    let mut ps = ParamSet::new();
    for (name, p) in student_init.iter() {
        // shared decoder stack: blocks, final norm, text embeddings/head
        let shared = name.starts_with("block")
            || name == "final.norm"
            || name == "embed.text"
            || name == "head.text";
        if shared {
            ps.insert(name.clone(), p.value.clone());
        }
    }
    let block = 3 * config.patch_block() * config.patch_block();
    ps.insert("vit.proj", Tensor::randn(vec![block, config.vit_dim], 0.02, &mut rng));
    ps.insert("connector.w1", Tensor::randn(vec![config.vit_dim, config.hidden], 0.02, &mut rng));
    ps.insert("connector.b1", Tensor::zeros(vec![config.hidden]));
    ps.insert("connector.w2", Tensor::randn(vec![config.hidden, config.hidden], 0.02, &mut rng));
    ps.insert("connector.b2", Tensor::zeros(vec![config.hidden]));
    ps.set_frozen_where(|n| !n.starts_with("connector."));
    ps
}

/// Which embedding path resolves continuous visual tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardPath {
    /// Patch-conv embeddings, MoE routing, both heads.
    Student,
    /// Stand-in encoder + connector embeddings, dense text FFN, text head.
    Teacher,
}

pub struct ForwardOutput<'t> {
    /// Residual-stream output of each transformer block, [n, hidden].
    pub hiddens: Vec<Value<'t>>,
    /// Final-norm output, [n, hidden].
    pub final_hidden: Value<'t>,
    /// Vocabulary logits for Text positions, in sequence order.
    pub text_logits: Option<Value<'t>>,
    /// Sequence index of each text-logit row.
    pub text_rows: Vec<usize>,
    /// Bit logits ([rows, d]) for GenVision positions, in sequence order.
    pub bit_logits: Option<Value<'t>>,
    /// Sequence index of each bit-logit row.
    pub gen_rows: Vec<usize>,
}

/// Split one token's pixel block into unshuffle² convolution sub-patches,
/// each flattened channel-major.
fn conv_subpatches(block: &[f64], config: &ModelConfig, out: &mut Vec<f64>) {
    let b = config.patch_block();
    let c = config.patch_conv;
    debug_assert_eq!(block.len(), 3 * b * b);
    for sy in 0..config.unshuffle {
        for sx in 0..config.unshuffle {
            for ch in 0..3 {
                for y in 0..c {
                    for x in 0..c {
                        out.push(block[ch * b * b + (sy * c + y) * b + (sx * c + x)]);
                    }
                }
            }
        }
    }
}

/// Flatten one token's pixel block for the teacher's stand-in encoder.
fn vit_rows(contents: &[&Arc<Vec<f64>>], config: &ModelConfig) -> Tensor {
    let block = 3 * config.patch_block() * config.patch_block();
    let mut data = Vec::with_capacity(contents.len() * block);
    for c in contents {
        assert_eq!(c.len(), block, "patch token has wrong pixel count");
        data.extend_from_slice(c);
    }
    Tensor::new(vec![contents.len(), block], data)
}

/// Resolve every token of a packed sequence to a hidden-dim embedding row.
fn assemble_embeddings<'t>(
    binder: &Binder<'t, '_>,
    seq: &TaggedSequence,
    config: &ModelConfig,
    path: ForwardPath,
) -> Result<Value<'t>> {
    let n = seq.len();
    let tape = binder.tape();
    let mut text_ids = Vec::new();
    let mut text_idx = Vec::new();
    let mut patch_contents: Vec<&Arc<Vec<f64>>> = Vec::new();
    let mut patch_idx = Vec::new();
    let mut gen_vecs: Vec<&[f64]> = Vec::new();
    let mut gen_idx = Vec::new();
    for (i, content) in seq.contents.iter().enumerate() {
        match content {
            TokenContent::Text(id) => {
                text_ids.push(*id);
                text_idx.push(i);
            }
            TokenContent::Patch(px) => {
                patch_contents.push(px);
                patch_idx.push(i);
            }
            TokenContent::Gen(v) => {
                if v.len() != config.code_dim {
                    return Err(Error::ShapeMismatch {
                        context: "gen token input",
                        expected: vec![config.code_dim],
                        got: vec![v.len()],
                    });
                }
                gen_vecs.push(v);
                gen_idx.push(i);
            }
        }
    }

    let mut pieces = Vec::new();
    if !text_idx.is_empty() {
        let rows = binder.get("embed.text").embed_lookup(Arc::new(text_ids));
        pieces.push((rows, Arc::new(text_idx)));
    }
    if !patch_idx.is_empty() {
        let rows = match path {
            ForwardPath::Student => {
                let m = patch_contents.len();
                let sub = 3 * config.patch_conv * config.patch_conv;
                let squares = config.unshuffle * config.unshuffle;
                let mut data = Vec::with_capacity(m * squares * sub);
                for c in &patch_contents {
                    assert_eq!(
                        c.len(),
                        3 * config.patch_block() * config.patch_block(),
                        "patch token has wrong pixel count"
                    );
                    conv_subpatches(c, config, &mut data);
                }
                let x = tape.constant(Tensor::new(vec![m * squares, sub], data));
                let conv = x
                    .matmul(binder.get("patch.conv.w"))
                    .add_row_vec(binder.get("patch.conv.b"));
                // pixel unshuffle: the unshuffle² conv outputs of one token
                // are consecutive rows; viewing them as one row concatenates
                // the channel groups
                let unshuffled = conv.reshape(vec![m, squares * config.patch_channels]);
                unshuffled
                    .matmul(binder.get("patch.mlp.w1"))
                    .add_row_vec(binder.get("patch.mlp.b1"))
                    .silu()
                    .matmul(binder.get("patch.mlp.w2"))
                    .add_row_vec(binder.get("patch.mlp.b2"))
            }
            ForwardPath::Teacher => {
                let x = tape.constant(vit_rows(&patch_contents, config));
                let feats = x.matmul(binder.get("vit.proj"));
                feats
                    .matmul(binder.get("connector.w1"))
                    .add_row_vec(binder.get("connector.b1"))
                    .silu()
                    .matmul(binder.get("connector.w2"))
                    .add_row_vec(binder.get("connector.b2"))
            }
        };
        pieces.push((rows, Arc::new(patch_idx)));
    }
    if !gen_idx.is_empty() {
        if path == ForwardPath::Teacher {
            return Err(Error::InvalidArgument {
                context: "teacher forward",
                message: "teacher sequences cannot contain generation tokens".into(),
            });
        }
        let d = config.code_dim;
        let mut data = Vec::with_capacity(gen_vecs.len() * d);
        for v in gen_vecs {
            data.extend_from_slice(v);
        }
        let x = tape.constant(Tensor::new(vec![gen_idx.len(), d], data));
        pieces.push((x.matmul(binder.get("embed.code")), Arc::new(gen_idx)));
    }
    if pieces.is_empty() {
        return Err(Error::InvalidArgument {
            context: "forward",
            message: "empty sequence".into(),
        });
    }
    if pieces.len() == 1 && pieces[0].1.len() == n {
        // single homogeneous group already in order
        let in_order = pieces[0].1.iter().enumerate().all(|(a, &b)| a == b);
        if in_order {
            return Ok(pieces.remove(0).0);
        }
    }
    Ok(Value::scatter_rows(pieces, n))
}

/// Run the block stack and heads over a packed sequence.
pub fn forward<'t>(
    binder: &Binder<'t, '_>,
    seq: &TaggedSequence,
    config: &ModelConfig,
    path: ForwardPath,
) -> Result<ForwardOutput<'t>> {
    seq.validate()?;
    let mask = Arc::new(build_mask(seq));
    let positions = Arc::new(seq.positions.clone());
    let routing = match path {
        ForwardPath::Student => RoutingMode::Moe,
        ForwardPath::Teacher => RoutingMode::DenseText,
    };

    let mut h = assemble_embeddings(binder, seq, config, path)?;
    let mut hiddens = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        h = block_forward(binder, h, &seq.tags, &positions, &mask, i, routing, config)?;
        hiddens.push(h);
    }
    let final_hidden = h.rms_norm(binder.get("final.norm"), config.rms_eps);

    let text_rows: Vec<usize> = seq
        .tags
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == ModalityTag::Text)
        .map(|(i, _)| i)
        .collect();
    let gen_rows: Vec<usize> = seq
        .tags
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_gen())
        .map(|(i, _)| i)
        .collect();

    let text_logits = if text_rows.is_empty() {
        None
    } else {
        Some(
            final_hidden
                .gather_rows(Arc::new(text_rows.clone()))
                .matmul(binder.get("head.text")),
        )
    };
    let bit_logits = if gen_rows.is_empty() || path == ForwardPath::Teacher {
        None
    } else {
        Some(
            final_hidden
                .gather_rows(Arc::new(gen_rows.clone()))
                .matmul(binder.get("head.bit")),
        )
    };

    Ok(ForwardOutput { hiddens, final_hidden, text_logits, text_rows, bit_logits, gen_rows })
}

/// Mean cross entropy of text logits against target ids.
pub fn ntp_loss<'t>(text_logits: Value<'t>, targets: &[u32]) -> Result<Value<'t>> {
    text_logits.cross_entropy_mean(Arc::new(targets.to_vec()))
}

/// Mean per-bit binary cross entropy of bit logits against target bits
/// (1.0 where the code entry is positive).
pub fn nsp_loss<'t>(bit_logits: Value<'t>, target_bits: &[f64]) -> Result<Value<'t>> {
    bit_logits.bce_with_logits_mean(Arc::new(target_bits.to_vec()))
}

/// Position-major bit targets (h·w rows × d) of one code map [d, h, w]:
/// 1.0 where the entry is +1/√d.
pub fn code_map_bits(map: &Tensor) -> Vec<f64> {
    let (d, hh, ww) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let plane = hh * ww;
    let mut bits = Vec::with_capacity(plane * d);
    for p in 0..plane {
        for c in 0..d {
            bits.push(if map.data()[c * plane + p] > 0.0 { 1.0 } else { 0.0 });
        }
    }
    bits
}

/// Position-major rows (h·w × d) of a channel-major [d, h, w] map.
pub fn map_to_rows(map: &Tensor) -> Tensor {
    let (d, hh, ww) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let plane = hh * ww;
    let mut data = Vec::with_capacity(plane * d);
    for p in 0..plane {
        for c in 0..d {
            data.push(map.data()[c * plane + p]);
        }
    }
    Tensor::new(vec![plane, d], data)
}

/// Channel-major [d, h, w] map from position-major rows.
pub fn rows_to_map(rows: &Tensor, h: usize, w: usize) -> Tensor {
    let d = rows.shape()[1];
    let plane = h * w;
    assert_eq!(rows.shape()[0], plane);
    let mut data = vec![0.0; d * plane];
    for p in 0..plane {
        for c in 0..d {
            data[c * plane + p] = rows.data()[p * d + c];
        }
    }
    Tensor::new(vec![d, h, w], data)
}

/// Cut an image [3, H, W] into non-overlapping patch-block tokens in raster
/// order, each flattened channel-major.
pub fn image_to_patch_tokens(image: &Tensor, config: &ModelConfig) -> Result<Vec<Arc<Vec<f64>>>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::ShapeMismatch {
            context: "image_to_patch_tokens",
            expected: vec![3, 0, 0],
            got: image.shape().to_vec(),
        });
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    config.patch_tokens(h, w)?;
    let b = config.patch_block();
    let plane = h * w;
    let mut tokens = Vec::new();
    for by in 0..h / b {
        for bx in 0..w / b {
            let mut block = Vec::with_capacity(3 * b * b);
            for c in 0..3 {
                for y in 0..b {
                    for x in 0..b {
                        block.push(image.data()[c * plane + (by * b + y) * w + (bx * b + x)]);
                    }
                }
            }
            tokens.push(Arc::new(block));
        }
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::SampleTokens;
    use crate::rng::seeded;
    use crate::tensor::Tape;

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

    fn mixed_sample(config: &ModelConfig, rng: &mut crate::rng::Rng) -> SampleTokens {
        use rand::Rng as _;
        let mut s = SampleTokens::default();
        s.push(TokenContent::Text(BOS % config.vocab as u32), ModalityTag::Text);
        s.push(TokenContent::Text(3), ModalityTag::Text);
        let block = 3 * config.patch_block() * config.patch_block();
        for _ in 0..2 {
            let px: Vec<f64> = (0..block).map(|_| rng.gen::<f64>()).collect();
            s.push(TokenContent::Patch(Arc::new(px)), ModalityTag::UndVision);
        }
        for k in 1..=2usize {
            for _ in 0..k {
                let v: Vec<f64> = (0..config.code_dim).map(|_| rng.gen::<f64>() - 0.5).collect();
                s.push(TokenContent::Gen(v), ModalityTag::GenVision(k));
            }
        }
        s
    }

    #[test]
    fn patch_token_counts() {
        let config = ModelConfig::desk_small();
        assert_eq!(config.patch_tokens(448, 448).unwrap(), 256);
        assert_eq!(config.patch_tokens(28, 28).unwrap(), 1);
        assert_eq!(config.patch_tokens(1792, 1792).unwrap(), 4096);
        assert!(config.patch_tokens(30, 28).is_err());
    }

    #[test]
    fn forward_is_deterministic_with_layerwise_hiddens() {
        let config = tiny();
        let params = init_params(&config, 3);
        let mut rng = seeded(4);
        let seq = TaggedSequence::single(&mixed_sample(&config, &mut rng));

        let run = || {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &params);
            let out = forward(&binder, &seq, &config, ForwardPath::Student).unwrap();
            (
                out.hiddens.iter().map(|h| h.value()).collect::<Vec<_>>(),
                out.text_logits.unwrap().value(),
                out.bit_logits.unwrap().value(),
            )
        };
        let (h1, t1, b1) = run();
        let (h2, t2, b2) = run();
        assert_eq!(h1.len(), config.layers);
        for h in &h1 {
            assert_eq!(h.shape(), &[seq.len(), config.hidden]);
        }
        assert_eq!(t1.data(), t2.data());
        assert_eq!(b1.data(), b2.data());
        for (a, b) in h1.iter().zip(&h2) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(t1.shape(), &[2, config.vocab]);
        assert_eq!(b1.shape(), &[3, config.code_dim]);
    }

    #[test]
    fn uniform_logits_with_zero_head() {
        let config = tiny();
        let mut params = init_params(&config, 3);
        params
            .set_value("head.text", Tensor::zeros(vec![config.hidden, config.vocab]))
            .unwrap();
        let mut s = SampleTokens::default();
        s.push(TokenContent::Text(1), ModalityTag::Text);
        let seq = TaggedSequence::single(&s);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let out = forward(&binder, &seq, &config, ForwardPath::Student).unwrap();
        let logits = out.text_logits.unwrap().value();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        // and the NTP loss of uniform logits is ln(vocab)
        let loss = ntp_loss(out.text_logits.unwrap(), &[5]).unwrap().value().item();
        assert!((loss - (config.vocab as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ntp_loss_matches_log_sum_exp_oracle() {
        let mut rng = seeded(9);
        let config = tiny();
        let logits = Tensor::randn(vec![5, config.vocab], 2.0, &mut rng);
        let targets: Vec<u32> = vec![0, 3, 7, 15, 2];
        let tape = Tape::new();
        let v = tape.constant(logits.clone());
        let loss = ntp_loss(v, &targets).unwrap().value().item();
        // independently coded log-sum-exp evaluation
        let mut expect = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &logits.data()[i * config.vocab..(i + 1) * config.vocab];
            let lse = row.iter().map(|&x| x.exp()).sum::<f64>().ln();
            expect += lse - row[t as usize];
        }
        expect /= targets.len() as f64;
        assert!((loss - expect).abs() < 1e-9);
    }

    #[test]
    fn ntp_loss_near_one_hot_and_empty_targets() {
        let tape = Tape::new();
        let mut logits = vec![0.0; 16];
        logits[4] = 30.0;
        let v = tape.constant(Tensor::new(vec![1, 16], logits));
        let loss = ntp_loss(v, &[4]).unwrap().value().item();
        assert!(loss < 1e-3);
        let v2 = tape.constant(Tensor::new(vec![0, 16], vec![]));
        assert!(ntp_loss(v2, &[]).is_err());
    }

    #[test]
    fn nsp_loss_values() {
        let tape = Tape::new();
        // zero logits → ln 2 per bit
        let z = tape.constant(Tensor::zeros(vec![3, 4]));
        let bits = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let loss = nsp_loss(z, &bits).unwrap().value().item();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        // +10 on the true side → tiny loss
        let sharp: Vec<f64> = bits.iter().map(|&b| if b > 0.5 { 10.0 } else { -10.0 }).collect();
        let v = tape.constant(Tensor::new(vec![3, 4], sharp));
        assert!(nsp_loss(v, &bits).unwrap().value().item() < 1e-4);
    }

    #[test]
    fn nsp_loss_equals_exhaustive_categorical_oracle() {
        // independent-bit factorization: sum of per-bit BCE equals the
        // 2³-way categorical cross entropy of the joint outcome
        let mut rng = seeded(11);
        for _ in 0..10 {
            let logits = Tensor::randn(vec![1, 3], 1.5, &mut rng);
            let bits: Vec<f64> = (0..3).map(|i| f64::from(i % 2 == 0) * f64::from(logits.data()[i] > -0.3)).collect();
            let tape = Tape::new();
            let v = tape.constant(logits.clone());
            let mean_bce = nsp_loss(v, &bits).unwrap().value().item();
            // joint probability of the target outcome over all 8 outcomes
            let p = |z: f64| 1.0 / (1.0 + (-z).exp());
            let mut target_prob = 1.0;
            for i in 0..3 {
                let pi = p(logits.data()[i]);
                target_prob *= if bits[i] > 0.5 { pi } else { 1.0 - pi };
            }
            let mut total = 0.0;
            for outcome in 0..8u32 {
                let mut prob = 1.0;
                for i in 0..3 {
                    let pi = p(logits.data()[i]);
                    prob *= if outcome >> i & 1 == 1 { pi } else { 1.0 - pi };
                }
                total += prob;
            }
            assert!((total - 1.0).abs() < 1e-12);
            let categorical = -(target_prob.ln());
            assert!((mean_bce * 3.0 - categorical).abs() < 1e-9);
        }
    }

    #[test]
    fn map_row_round_trip() {
        let mut rng = seeded(13);
        let map = Tensor::randn(vec![4, 3, 5], 1.0, &mut rng);
        let rows = map_to_rows(&map);
        assert_eq!(rows.shape(), &[15, 4]);
        let back = rows_to_map(&rows, 3, 5);
        assert_eq!(back.data(), map.data());
    }

    #[test]
    fn teacher_rejects_gen_tokens_and_shares_init() {
        let config = tiny();
        let student = init_params(&config, 3);
        let teacher = init_teacher_params(&config, &student, 4);
        // parameter consistency: shared tensors bit-equal the student init
        for name in ["block0.attn.wq", "block1.ffn.text.gate", "embed.text", "head.text"] {
            assert_eq!(
                teacher.value(name).unwrap().data(),
                student.value(name).unwrap().data()
            );
        }
        assert!(teacher.get("connector.w1").unwrap().frozen == false);
        assert!(teacher.get("vit.proj").unwrap().frozen);
        let mut s = SampleTokens::default();
        s.push(TokenContent::Gen(vec![0.0; config.code_dim]), ModalityTag::GenVision(1));
        let seq = TaggedSequence::single(&s);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &teacher);
        assert!(forward(&binder, &seq, &config, ForwardPath::Teacher).is_err());
    }
}
