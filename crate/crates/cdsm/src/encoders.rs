//! The two text encoders: a lightweight CNN-attention encoder for the
//! neighbor selector and a small trainable transformer for the matching
//! network.
//!
//! Both are written against [`Tape`], so the same code path serves training
//! (gradients recorded) and inference (forward only).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CdsmError, Result};
use crate::graphstore::Document;
use crate::numerics::{seeded_rng, ParamStore, Tape, Var};

/// Dimensions of the selector's CNN-attention encoder.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LightConfig {
    pub vocab_size: usize,
    pub dim: usize,
    /// Convolution context window (odd, 2k+1).
    pub window: usize,
}

impl Default for LightConfig {
    fn default() -> Self {
        LightConfig {
            vocab_size: 0,
            dim: 64,
            window: 3,
        }
    }
}

/// Dimensions of the transformer encoder.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeavyConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for HeavyConfig {
    fn default() -> Self {
        HeavyConfig {
            vocab_size: 0,
            dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            max_len: 32,
        }
    }
}

impl HeavyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(CdsmError::Config("heavy encoder needs >= 1 layer".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(CdsmError::Config(format!(
                "head count {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

// Parameter names are namespaced so selector and matcher stores can coexist
// in one checkpoint ("light.*" / "heavy.*").

pub fn init_light_params(cfg: &LightConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed, "init/light");
    let d = cfg.dim;
    let emb_std = 1.0 / (d as f64).sqrt();
    store.insert_randn("light.embed", &[cfg.vocab_size, d], emb_std, &mut rng);
    let conv_std = 1.0 / ((cfg.window * d) as f64).sqrt();
    store.insert_randn("light.conv_w", &[d, cfg.window * d], conv_std, &mut rng);
    store.insert_zeros("light.conv_b", &[d]);
    store.insert_randn("light.attn_q", &[d], 1.0, &mut rng);
    store.insert_randn("light.attn_w", &[d, d], emb_std, &mut rng);
    store.insert_zeros("light.attn_b", &[d]);
    store
}

pub fn init_heavy_params(cfg: &HeavyConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed, "init/heavy");
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let std = 1.0 / (d as f64).sqrt();
    store.insert_randn("heavy.embed", &[cfg.vocab_size, d], std, &mut rng);
    // +1 position for the leading summary token
    store.insert_randn("heavy.pos", &[cfg.max_len + 1, d], std, &mut rng);
    store.insert_randn("heavy.cls", &[1, d], std, &mut rng);
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            store.insert_randn(format!("heavy.l{}.wq{}", l, h), &[d, dh], std, &mut rng);
            store.insert_randn(format!("heavy.l{}.wk{}", l, h), &[d, dh], std, &mut rng);
            store.insert_randn(format!("heavy.l{}.wv{}", l, h), &[d, dh], std, &mut rng);
            store.insert_randn(format!("heavy.l{}.wo{}", l, h), &[dh, d], std, &mut rng);
        }
        store.insert_zeros(format!("heavy.l{}.attn_b", l), &[d]);
        store.insert_ones(format!("heavy.l{}.ln1_g", l), &[d]);
        store.insert_zeros(format!("heavy.l{}.ln1_b", l), &[d]);
        store.insert_randn(
            format!("heavy.l{}.ff_w1", l),
            &[d, cfg.ff_dim],
            std,
            &mut rng,
        );
        store.insert_zeros(format!("heavy.l{}.ff_b1", l), &[cfg.ff_dim]);
        store.insert_randn(
            format!("heavy.l{}.ff_w2", l),
            &[cfg.ff_dim, d],
            1.0 / (cfg.ff_dim as f64).sqrt(),
            &mut rng,
        );
        store.insert_zeros(format!("heavy.l{}.ff_b2", l), &[d]);
        store.insert_ones(format!("heavy.l{}.ln2_g", l), &[d]);
        store.insert_zeros(format!("heavy.l{}.ln2_b", l), &[d]);
    }
    store.insert_ones("heavy.lnf_g", &[d]);
    store.insert_zeros("heavy.lnf_b", &[d]);
    store
}

fn check_tokens(doc: &Document, vocab_size: usize) -> Result<()> {
    if doc.tokens.is_empty() {
        return Err(CdsmError::Lookup(format!("document {} is empty", doc.id)));
    }
    for &t in &doc.tokens {
        if t as usize >= vocab_size {
            return Err(CdsmError::Lookup(format!(
                "token {} out of vocabulary (size {})",
                t, vocab_size
            )));
        }
    }
    Ok(())
}

/// CNN-attention encoding: embed, contextualize with a same-length 1-d
/// convolution + ReLU, then attention-pool the positions. The attention key
/// `tanh(W_q·q_w + b_q)` is constant per document by construction.
pub fn encode_light(
    tape: &Tape,
    params: &BTreeMap<String, Var>,
    cfg: &LightConfig,
    doc: &Document,
) -> Result<Var> {
    check_tokens(doc, cfg.vocab_size)?;
    let indices: Vec<usize> = doc.tokens.iter().map(|&t| t as usize).collect();
    let v = tape.gather_rows(params["light.embed"], indices)?;
    let conv = tape.conv1d_same(v, params["light.conv_w"], params["light.conv_b"], cfg.window)?;
    let c = tape.relu(conv);
    let key = tape.affine(params["light.attn_q"], params["light.attn_w"], params["light.attn_b"])?;
    let key = tape.tanh(key);
    let scores = tape.matvec(c, key)?;
    let alpha = tape.softmax_vec(scores)?;
    tape.vecmat(alpha, c)
}

/// Attention weights of the light encoder (exposed for tests).
pub fn light_attention_weights(
    tape: &Tape,
    params: &BTreeMap<String, Var>,
    cfg: &LightConfig,
    doc: &Document,
) -> Result<Var> {
    check_tokens(doc, cfg.vocab_size)?;
    let indices: Vec<usize> = doc.tokens.iter().map(|&t| t as usize).collect();
    let v = tape.gather_rows(params["light.embed"], indices)?;
    let conv = tape.conv1d_same(v, params["light.conv_w"], params["light.conv_b"], cfg.window)?;
    let c = tape.relu(conv);
    let key = tape.affine(params["light.attn_q"], params["light.attn_w"], params["light.attn_b"])?;
    let key = tape.tanh(key);
    let scores = tape.matvec(c, key)?;
    tape.softmax_vec(scores)
}

/// Transformer encoding with a leading summary token; returns that token's
/// final-layer vector. Pre-norm residual blocks, learned positions.
pub fn encode_heavy(
    tape: &Tape,
    params: &BTreeMap<String, Var>,
    cfg: &HeavyConfig,
    doc: &Document,
) -> Result<Var> {
    cfg.validate()?;
    check_tokens(doc, cfg.vocab_size)?;
    if doc.tokens.len() > cfg.max_len {
        return Err(CdsmError::dim(
            "encode_heavy",
            format!(
                "document length {} exceeds positional table {}",
                doc.tokens.len(),
                cfg.max_len
            ),
        ));
    }
    let s = doc.tokens.len() + 1;
    let indices: Vec<usize> = doc.tokens.iter().map(|&t| t as usize).collect();
    let body = tape.gather_rows(params["heavy.embed"], indices)?;
    let mut x = tape.concat_rows(params["heavy.cls"], body)?;
    let pos = tape.gather_rows(params["heavy.pos"], (0..s).collect())?;
    x = tape.add(x, pos)?;

    let dh = cfg.dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.layers {
        let p = |suffix: &str| params[&format!("heavy.l{}.{}", l, suffix)];
        // attention block
        let h = tape.layer_norm(x, p("ln1_g"), p("ln1_b"))?;
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let q = tape.matmul(h, p(&format!("wq{}", hd)))?;
            let k = tape.matmul(h, p(&format!("wk{}", hd)))?;
            let v = tape.matmul(h, p(&format!("wv{}", hd)))?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            let o = tape.matmul(attn, v)?;
            head_outs.push(tape.matmul(o, p(&format!("wo{}", hd)))?);
        }
        let merged = tape.add_n(&head_outs)?;
        let merged = tape.add_row_broadcast(merged, p("attn_b"))?;
        x = tape.add(x, merged)?;
        // feed-forward block
        let h2 = tape.layer_norm(x, p("ln2_g"), p("ln2_b"))?;
        let f1 = tape.matmul(h2, p("ff_w1"))?;
        let f1 = tape.add_row_broadcast(f1, p("ff_b1"))?;
        let f1 = tape.relu(f1);
        let f2 = tape.matmul(f1, p("ff_w2"))?;
        let f2 = tape.add_row_broadcast(f2, p("ff_b2"))?;
        x = tape.add(x, f2)?;
    }
    let out = tape.layer_norm(x, params["heavy.lnf_g"], params["heavy.lnf_b"])?;
    tape.row(out, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::numerics::Tensor;

    fn doc(tokens: Vec<u32>) -> Document {
        Document { id: 0, tokens }
    }

    fn small_light() -> (LightConfig, ParamStore) {
        let cfg = LightConfig {
            vocab_size: 12,
            dim: 6,
            window: 3,
        };
        (cfg, init_light_params(&cfg, 5))
    }

    fn small_heavy() -> (HeavyConfig, ParamStore) {
        let cfg = HeavyConfig {
            vocab_size: 12,
            dim: 8,
            layers: 2,
            heads: 2,
            ff_dim: 12,
            max_len: 6,
        };
        (cfg, init_heavy_params(&cfg, 5))
    }

    #[test]
    fn single_token_attention_is_one() {
        let (cfg, store) = small_light();
        let tape = Tape::inference();
        let leaves = store.leaves(&tape);
        let alpha = light_attention_weights(&tape, &leaves, &cfg, &doc(vec![3])).unwrap();
        assert_eq!(tape.value(alpha).data, vec![1.0]);
    }

    #[test]
    fn attention_weights_form_a_distribution() {
        let (cfg, store) = small_light();
        let tape = Tape::inference();
        let leaves = store.leaves(&tape);
        let alpha =
            light_attention_weights(&tape, &leaves, &cfg, &doc(vec![1, 5, 9, 2])).unwrap();
        let a = tape.value(alpha);
        assert!(a.data.iter().all(|&x| x >= 0.0));
        assert!((a.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_tokens_encode_identically() {
        let (cfg, store) = small_light();
        let tape = Tape::inference();
        let leaves = store.leaves(&tape);
        let a = encode_light(&tape, &leaves, &cfg, &doc(vec![1, 2, 3])).unwrap();
        let b = encode_light(&tape, &leaves, &cfg, &doc(vec![1, 2, 3])).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn light_output_within_convex_hull_norm() {
        // r is a convex combination of the c_i, so ‖r‖ ≤ max ‖c_i‖
        let (cfg, store) = small_light();
        let tape = Tape::inference();
        let leaves = store.leaves(&tape);
        let d = doc(vec![0, 4, 7, 11, 2]);
        let r = encode_light(&tape, &leaves, &cfg, &d).unwrap();
        let rn = tape.value(r).data.iter().map(|x| x * x).sum::<f64>().sqrt();
        // reconstruct the conv activations to bound them
        let idx: Vec<usize> = d.tokens.iter().map(|&t| t as usize).collect();
        let v = tape.gather_rows(leaves["light.embed"], idx).unwrap();
        let c = tape
            .conv1d_same(v, leaves["light.conv_w"], leaves["light.conv_b"], cfg.window)
            .unwrap();
        let c = tape.relu(c);
        let cv = tape.value(c);
        let max_row_norm = (0..cv.rows())
            .map(|i| cv.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0f64, f64::max);
        assert!(rn <= max_row_norm + 1e-12);
    }

    #[test]
    fn out_of_vocab_token_is_lookup_error() {
        let (cfg, store) = small_light();
        let tape = Tape::inference();
        let leaves = store.leaves(&tape);
        let err = encode_light(&tape, &leaves, &cfg, &doc(vec![99])).unwrap_err();
        assert!(matches!(err, CdsmError::Lookup(_)));
    }

    #[test]
    fn heavy_output_dim_and_purity() {
        let (cfg, store) = small_heavy();
        let tape = Tape::inference();
        let leaves = store.leaves(&tape);
        for len in [1usize, 3, 6] {
            let d = doc((0..len as u32).collect());
            let a = encode_heavy(&tape, &leaves, &cfg, &d).unwrap();
            assert_eq!(tape.shape(a), vec![cfg.dim]);
            let b = encode_heavy(&tape, &leaves, &cfg, &d).unwrap();
            assert_eq!(tape.value(a), tape.value(b));
        }
    }

    #[test]
    fn heavy_is_position_sensitive() {
        let (cfg, store) = small_heavy();
        let tape = Tape::inference();
        let leaves = store.leaves(&tape);
        let a = encode_heavy(&tape, &leaves, &cfg, &doc(vec![1, 2, 3])).unwrap();
        let b = encode_heavy(&tape, &leaves, &cfg, &doc(vec![2, 1, 3])).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
    }

    #[test]
    fn heavy_rejects_over_length() {
        let (cfg, store) = small_heavy();
        let tape = Tape::inference();
        let leaves = store.leaves(&tape);
        let err = encode_heavy(&tape, &leaves, &cfg, &doc((0..7).collect())).unwrap_err();
        assert!(matches!(err, CdsmError::Dimension { .. }));
    }

    #[test]
    fn light_encoder_grad_check() {
        let (cfg, store) = small_light();
        let probe = Tensor::vector(vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2]);
        let d = doc(vec![1, 5, 9]);
        let f = move |tape: &Tape, p: &BTreeMap<String, Var>| {
            let r = encode_light(tape, p, &cfg, &d)?;
            let w = tape.leaf(probe.clone());
            tape.dot(r, w)
        };
        let err = grad_check(&f, &store, 1e-5).unwrap();
        assert!(err <= 1e-4, "err = {}", err);
    }

    #[test]
    fn heavy_encoder_grad_check() {
        let (cfg, store) = small_heavy();
        let probe = Tensor::vector(vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.15, -0.05]);
        let d = doc(vec![1, 5, 9, 2]);
        let f = move |tape: &Tape, p: &BTreeMap<String, Var>| {
            let r = encode_heavy(tape, p, &cfg, &d)?;
            let w = tape.leaf(probe.clone());
            tape.dot(r, w)
        };
        let err = grad_check(&f, &store, 1e-5).unwrap();
        assert!(err <= 1e-4, "err = {}", err);
    }
}
