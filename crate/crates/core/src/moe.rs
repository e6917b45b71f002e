//! Modality-MoE block internals.
//!
//! Attention (QKV, output projection, norms) is shared across modalities;
//! the feed-forward stage hard-routes each token by its tag to one of
//! three gated FFN experts — text, understanding vision, generation
//! vision. All three experts are replicas of one FFN at init. The
//! generation expert additionally carries one low-rank adapter per scale
//! and per linear layer, applied as a parallel skip: W·x + B_k·(A_k·x),
//! with B zero-initialized so adapters are exact no-ops at init.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::attention::{AttentionMask, ModalityTag};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::params::Binder;
use crate::tensor::Value;

/// Expert assignment for one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Text,
    Und,
    /// Generation expert with the 1-based scale adapter index.
    Gen(usize),
}

/// Hard routing: tag → expert, with the scale index selecting the adapter.
pub fn route(tags: &[ModalityTag]) -> Vec<Route> {
    tags.iter()
        .map(|t| match t {
            ModalityTag::Text => Route::Text,
            ModalityTag::UndVision => Route::Und,
            ModalityTag::GenVision(k) => Route::Gen(*k),
        })
        .collect()
}

/// How the FFN stage treats tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Hard routing by modality tag.
    Moe,
    /// Every token through the text FFN (the dense teacher configuration).
    DenseText,
}

pub const FFN_LAYERS: [&str; 3] = ["gate", "up", "down"];

fn expert_prefix(block: usize, route: Route) -> String {
    match route {
        Route::Text => format!("block{block}.ffn.text"),
        Route::Und => format!("block{block}.ffn.und"),
        Route::Gen(_) => format!("block{block}.ffn.gen"),
    }
}

/// One linear layer of the gated FFN, with the scale adapter skip for
/// generation tokens: x·W (+ (x·A_k)·B_k).
fn adapted_linear<'t>(
    binder: &Binder<'t, '_>,
    x: Value<'t>,
    weight: &str,
    adapter: Option<(usize, usize, &str)>, // (block, scale, layer)
) -> Value<'t> {
    let mut y = x.matmul(binder.get(weight));
    if let Some((block, scale, layer)) = adapter {
        let a = binder.get(&format!("block{block}.saa.{scale}.{layer}.A"));
        let b = binder.get(&format!("block{block}.saa.{scale}.{layer}.B"));
        y = y + x.matmul(a).matmul(b);
    }
    y
}

/// Gated FFN over a row group: (silu(x·Wg) ∘ (x·Wu))·Wd, each linear
/// optionally wrapped by this scale's adapter.
fn gated_ffn<'t>(
    binder: &Binder<'t, '_>,
    x: Value<'t>,
    block: usize,
    route: Route,
) -> Value<'t> {
    let prefix = expert_prefix(block, route);
    let adapter = |layer: &'static str| match route {
        Route::Gen(k) => Some((block, k, layer)),
        _ => None,
    };
    let gate = adapted_linear(binder, x, &format!("{prefix}.gate"), adapter("gate"));
    let up = adapted_linear(binder, x, &format!("{prefix}.up"), adapter("up"));
    let hidden = gate.silu() * up;
    adapted_linear(binder, hidden, &format!("{prefix}.down"), adapter("down"))
}

/// Route tokens to experts, run each group through its FFN, and reassemble
/// rows in the original order.
pub fn expert_ffn_forward<'t>(
    binder: &Binder<'t, '_>,
    x: Value<'t>,
    tags: &[ModalityTag],
    block: usize,
    mode: RoutingMode,
    config: &ModelConfig,
) -> Value<'t> {
    let n = tags.len();
    assert_eq!(x.shape()[0], n, "expert_ffn_forward: row count mismatch");
    let assignment = match mode {
        RoutingMode::Moe => route(tags),
        RoutingMode::DenseText => vec![Route::Text; n],
    };
    // deterministic group order: text, und, then gen scales ascending
    let mut groups: BTreeMap<(u8, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in assignment.iter().enumerate() {
        let key = match r {
            Route::Text => (0u8, 0usize),
            Route::Und => (1, 0),
            Route::Gen(k) => {
                assert!(
                    *k >= 1 && *k <= config.max_scales,
                    "scale adapter index {k} outside 1..={}",
                    config.max_scales
                );
                (2, *k)
            }
        };
        groups.entry(key).or_default().push(i);
    }
    if groups.len() == 1 {
        let (&(kind, scale), _) = groups.iter().next().unwrap();
        let r = match kind {
            0 => Route::Text,
            1 => Route::Und,
            _ => Route::Gen(scale),
        };
        return gated_ffn(binder, x, block, r);
    }
    let mut pieces = Vec::with_capacity(groups.len());
    for (&(kind, scale), idx) in groups.iter() {
        let r = match kind {
            0 => Route::Text,
            1 => Route::Und,
            _ => Route::Gen(scale),
        };
        let idx = Arc::new(idx.clone());
        let rows = x.gather_rows(Arc::clone(&idx));
        pieces.push((gated_ffn(binder, rows, block, r), idx));
    }
    Value::scatter_rows(pieces, n)
}

/// Pre-norm residual transformer block: x + Attn(norm(x)), then
/// x + MoE-FFN(norm(x)). QKV and the output projection are shared across
/// modalities; rotary positions come from the packed sequence.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<'t>(
    binder: &Binder<'t, '_>,
    x: Value<'t>,
    tags: &[ModalityTag],
    positions: &Arc<Vec<u32>>,
    mask: &Arc<AttentionMask>,
    block: usize,
    mode: RoutingMode,
    config: &ModelConfig,
) -> Result<Value<'t>> {
    let p = |s: &str| format!("block{block}.{s}");
    let normed = x.rms_norm(binder.get(&p("attn.norm")), config.rms_eps);
    let q = normed
        .matmul(binder.get(&p("attn.wq")))
        .split_heads(config.heads)
        .rope(Arc::clone(positions), config.rope_base);
    let k = normed
        .matmul(binder.get(&p("attn.wk")))
        .split_heads(config.heads)
        .rope(Arc::clone(positions), config.rope_base);
    let v = normed.matmul(binder.get(&p("attn.wv"))).split_heads(config.heads);
    let attn = Value::masked_attention(q, k, v, Arc::clone(mask))?
        .merge_heads()
        .matmul(binder.get(&p("attn.wo")));
    let h = x + attn;
    let ffn_in = h.rms_norm(binder.get(&p("ffn.norm")), config.rms_eps);
    let ffn_out = expert_ffn_forward(binder, ffn_in, tags, block, mode, config);
    Ok(h + ffn_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::params::ParamSet;
    use crate::rng::seeded;
    use crate::tensor::{Tape, Tensor};

    fn tiny_config() -> ModelConfig {
        ModelConfig { layers: 1, hidden: 8, heads: 2, ff: 12, max_scales: 3, ..ModelConfig::desk_small() }
    }

    fn routed_tags() -> Vec<ModalityTag> {
        vec![
            ModalityTag::Text,
            ModalityTag::GenVision(1),
            ModalityTag::UndVision,
            ModalityTag::GenVision(2),
            ModalityTag::Text,
        ]
    }

    #[test]
    fn route_assigns_by_tag() {
        let r = route(&routed_tags());
        assert_eq!(
            r,
            vec![Route::Text, Route::Gen(1), Route::Und, Route::Gen(2), Route::Text]
        );
    }

    #[test]
    fn zero_b_adapters_are_a_noop() {
        let config = tiny_config();
        let params = init_params(&config, 5);
        let mut rng = seeded(10);
        let x = Tensor::randn(vec![4, config.hidden], 1.0, &mut rng);
        let tags = vec![ModalityTag::GenVision(2); 4];

        let run = |ps: &ParamSet| {
            let tape = Tape::new();
            let binder = Binder::new(&tape, ps);
            let v = tape.constant(x.clone());
            expert_ffn_forward(&binder, v, &tags, 0, RoutingMode::Moe, &config).value()
        };
        let base = run(&params);

        // scrambling A must not change outputs while B is zero
        let mut scrambled = params.clone();
        let a_name = "block0.saa.2.gate.A";
        let shape = scrambled.value(a_name).unwrap().shape().to_vec();
        scrambled.set_value(a_name, Tensor::randn(shape, 3.0, &mut rng)).unwrap();
        assert_eq!(run(&scrambled).data(), base.data());

        // a nonzero B must change them
        let mut active = params.clone();
        let b_name = "block0.saa.2.gate.B";
        let bshape = active.value(b_name).unwrap().shape().to_vec();
        active.set_value(b_name, Tensor::randn(bshape, 0.3, &mut rng)).unwrap();
        assert!(run(&active).max_abs_diff(&base) > 1e-9);
    }

    #[test]
    fn different_scales_share_base_but_differ_with_adapters() {
        let config = tiny_config();
        let mut params = init_params(&config, 6);
        let mut rng = seeded(11);
        for layer in FFN_LAYERS {
            for k in 1..=config.max_scales {
                let name = format!("block0.saa.{k}.{layer}.B");
                let shape = params.value(&name).unwrap().shape().to_vec();
                params.set_value(&name, Tensor::randn(shape, 0.2, &mut rng)).unwrap();
            }
        }
        let row = Tensor::randn(vec![1, config.hidden], 1.0, &mut rng);
        let two = Tensor::new(
            vec![2, config.hidden],
            [row.data(), row.data()].concat(),
        );
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let v = tape.constant(two);
        let tags = vec![ModalityTag::GenVision(1), ModalityTag::GenVision(2)];
        let out = expert_ffn_forward(&binder, v, &tags, 0, RoutingMode::Moe, &config).value();
        let (a, b) = out.data().split_at(config.hidden);
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn permutation_equivariance() {
        let config = tiny_config();
        let params = init_params(&config, 7);
        let mut rng = seeded(12);
        let x = Tensor::randn(vec![5, config.hidden], 1.0, &mut rng);
        let tags = routed_tags();

        let forward = |xs: &Tensor, tg: &[ModalityTag]| {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &params);
            let v = tape.constant(xs.clone());
            expert_ffn_forward(&binder, v, tg, 0, RoutingMode::Moe, &config).value()
        };
        let base = forward(&x, &tags);

        let perm = [3usize, 0, 4, 1, 2];
        let mut px = vec![0.0; x.len()];
        let mut ptags = vec![ModalityTag::Text; 5];
        for (dst, &src) in perm.iter().enumerate() {
            px[dst * config.hidden..(dst + 1) * config.hidden]
                .copy_from_slice(&x.data()[src * config.hidden..(src + 1) * config.hidden]);
            ptags[dst] = tags[src];
        }
        let permuted = forward(&Tensor::new(vec![5, config.hidden], px), &ptags);
        for (dst, &src) in perm.iter().enumerate() {
            let got = &permuted.data()[dst * config.hidden..(dst + 1) * config.hidden];
            let expect = &base.data()[src * config.hidden..(src + 1) * config.hidden];
            for (g, e) in got.iter().zip(expect) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expert_shapes_are_equal_after_replication() {
        let config = tiny_config();
        let params = init_params(&config, 8);
        for layer in FFN_LAYERS {
            let t = params.value(&format!("block0.ffn.text.{layer}")).unwrap();
            let u = params.value(&format!("block0.ffn.und.{layer}")).unwrap();
            let g = params.value(&format!("block0.ffn.gen.{layer}")).unwrap();
            assert_eq!(t.shape(), u.shape());
            assert_eq!(t.shape(), g.shape());
            // replicated from one FFN: identical at init
            assert_eq!(t.data(), u.data());
            assert_eq!(t.data(), g.data());
        }
    }
}
