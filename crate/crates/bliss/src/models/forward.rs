//! Parameter layout, initialization, and the graph builders for the decoder
//! forward pass, next-token cross-entropy, distillation KL and the pooled
//! score head.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::{BlockVars, Graph, ParamVector, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Output projection to the vocabulary.
    Lm,
    /// Pooled affine + sigmoid influence head.
    Score,
}

/// Block names and shapes in their canonical order. The body (everything
/// before the head) is shape-identical across the two heads, which is what
/// lets a score model be initialized from a proxy.
pub fn layout(cfg: &ModelConfig, head: Head) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let f = cfg.ff_dim();
    let mut blocks = vec![
        ("embed".to_string(), vec![cfg.vocab_size, d]),
        ("pos".to_string(), vec![cfg.seq_len, d]),
    ];
    for l in 0..cfg.n_layers {
        for (suffix, shape) in [
            ("ln1.g", vec![1, d]),
            ("ln1.b", vec![1, d]),
            ("attn.wq", vec![d, d]),
            ("attn.bq", vec![1, d]),
            ("attn.wk", vec![d, d]),
            ("attn.bk", vec![1, d]),
            ("attn.wv", vec![d, d]),
            ("attn.bv", vec![1, d]),
            ("attn.wo", vec![d, d]),
            ("attn.bo", vec![1, d]),
            ("ln2.g", vec![1, d]),
            ("ln2.b", vec![1, d]),
            ("ff.w1", vec![d, f]),
            ("ff.b1", vec![1, f]),
            ("ff.w2", vec![f, d]),
            ("ff.b2", vec![1, d]),
        ] {
            blocks.push((format!("l{l}.{suffix}"), shape));
        }
    }
    blocks.push(("lnf.g".to_string(), vec![1, d]));
    blocks.push(("lnf.b".to_string(), vec![1, d]));
    match head {
        Head::Lm => blocks.push(("lm_head.w".to_string(), vec![d, cfg.vocab_size])),
        Head::Score => {
            blocks.push(("score.w".to_string(), vec![d, 1]));
            blocks.push(("score.b".to_string(), vec![1, 1]));
        }
    }
    blocks
}

pub fn body_block_names(cfg: &ModelConfig) -> Vec<String> {
    layout(cfg, Head::Lm)
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| n != "lm_head.w")
        .collect()
}

/// Gaussian initialization: weights N(0, 0.02), residual output projections
/// scaled down by sqrt(2 * n_layers), norms at identity, biases at zero.
pub fn init_params(cfg: &ModelConfig, head: Head, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resid_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
    let mut pv = ParamVector::new();
    for (name, shape) in layout(cfg, head) {
        let numel: usize = shape.iter().product();
        let last = name.rsplit('.').next().unwrap_or(&name);
        let data: Vec<f64> = if last == "g" {
            vec![1.0; numel]
        } else if last.starts_with('b') {
            vec![0.0; numel]
        } else {
            let std = if name.ends_with("attn.wo") || name.ends_with("ff.w2") {
                0.02 * resid_scale
            } else {
                0.02
            };
            (0..numel).map(|_| gauss(&mut rng) * std).collect()
        };
        pv.push(name, Tensor::new(shape, data)).expect("layout names are unique");
    }
    pv
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; kept local so initialization stays platform-stable.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Var {
    let (m, d) = (g.shape(x)[0], g.shape(x)[1]);
    let sums = g.row_sum(x);
    let mu = g.scale(sums, 1.0 / d as f64);
    let mu_b = g.broadcast_cols(mu, d);
    let xc = g.sub(x, mu_b);
    let sq = g.mul(xc, xc);
    let var_sums = g.row_sum(sq);
    let var = g.scale(var_sums, 1.0 / d as f64);
    let var_eps = g.add_const(var, LN_EPS);
    let sd = g.sqrt(var_eps);
    let sd_b = g.broadcast_cols(sd, d);
    let xn = g.div(xc, sd_b);
    let gain_b = g.broadcast_rows(gain, m);
    let bias_b = g.broadcast_rows(bias, m);
    let scaled = g.mul(xn, gain_b);
    g.add(scaled, bias_b)
}

/// Row softmax with a detached max shift: exact values and exact derivatives,
/// since the shift is constant per evaluation.
fn row_softmax(g: &mut Graph, x: Var) -> Var {
    let (m, n) = (g.shape(x)[0], g.shape(x)[1]);
    let maxes = row_max_constant(g, x, m, n);
    let max_b = g.broadcast_cols(maxes, n);
    let shifted = g.sub(x, max_b);
    let e = g.exp(shifted);
    let sums = g.row_sum(e);
    let sums_b = g.broadcast_cols(sums, n);
    g.div(e, sums_b)
}

fn row_max_constant(g: &mut Graph, x: Var, m: usize, n: usize) -> Var {
    let data = g.value(x).data();
    let maxes: Vec<f64> = (0..m)
        .map(|i| data[i * n..(i + 1) * n].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    g.constant(Tensor::new(vec![m, 1], maxes))
}

/// Row log-sum-exp (detached max), [m, n] -> [m, 1].
fn row_lse(g: &mut Graph, x: Var) -> Var {
    let (m, n) = (g.shape(x)[0], g.shape(x)[1]);
    let maxes = row_max_constant(g, x, m, n);
    let max_b = g.broadcast_cols(maxes, n);
    let shifted = g.sub(x, max_b);
    let e = g.exp(shifted);
    let sums = g.row_sum(e);
    let l = g.ln(sums);
    g.add(l, maxes)
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let m = g.shape(x)[0];
    let xw = g.matmul(x, w);
    let b_b = g.broadcast_rows(b, m);
    g.add(xw, b_b)
}

/// Decoder body: embeddings + positions, pre-norm causal attention blocks
/// with feed-forward, final norm. Returns [m, d] features.
pub fn features(g: &mut Graph, cfg: &ModelConfig, vars: &BlockVars, tokens: &[u32]) -> Var {
    assert_eq!(tokens.len(), cfg.seq_len, "sample length != seq_len");
    let m = tokens.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let ids: Arc<[u32]> = tokens.into();

    let emb = g.gather_rows(vars.var("embed"), ids);
    let mut x = g.add(emb, vars.var("pos"));

    let mask = causal_mask(g, m);
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("l{l}.{s}");
        let ln1 = layer_norm(g, x, vars.var(&name("ln1.g")), vars.var(&name("ln1.b")));
        let q = affine(g, ln1, vars.var(&name("attn.wq")), vars.var(&name("attn.bq")));
        let k = affine(g, ln1, vars.var(&name("attn.wk")), vars.var(&name("attn.bk")));
        let v = affine(g, ln1, vars.var(&name("attn.wv")), vars.var(&name("attn.bv")));

        let mut attn_out: Option<Var> = None;
        for h in 0..cfg.n_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, false, kh, true);
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let masked = g.add(scaled, mask);
            let probs = row_softmax(g, masked);
            let oh = g.matmul(probs, vh);
            let padded = g.pad_cols(oh, h * dh, d);
            attn_out = Some(match attn_out {
                Some(acc) => g.add(acc, padded),
                None => padded,
            });
        }
        let concat = attn_out.expect("at least one head");
        let proj = affine(g, concat, vars.var(&name("attn.wo")), vars.var(&name("attn.bo")));
        x = g.add(x, proj);

        let ln2 = layer_norm(g, x, vars.var(&name("ln2.g")), vars.var(&name("ln2.b")));
        let h1 = affine(g, ln2, vars.var(&name("ff.w1")), vars.var(&name("ff.b1")));
        let act = g.tanh(h1);
        let h2 = affine(g, act, vars.var(&name("ff.w2")), vars.var(&name("ff.b2")));
        x = g.add(x, h2);
    }
    layer_norm(g, x, vars.var("lnf.g"), vars.var("lnf.b"))
}

fn causal_mask(g: &mut Graph, m: usize) -> Var {
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            data[i * m + j] = MASK_NEG;
        }
    }
    g.constant(Tensor::new(vec![m, m], data))
}

/// [m, vocab] next-token logits.
pub fn lm_logits(g: &mut Graph, cfg: &ModelConfig, vars: &BlockVars, tokens: &[u32]) -> Var {
    let feats = features(g, cfg, vars, tokens);
    g.matmul(feats, vars.var("lm_head.w"))
}

/// Mean next-token cross-entropy over the sequence's m-1 predicting
/// positions.
pub fn ce_from_logits(g: &mut Graph, logits: Var, tokens: &[u32]) -> Var {
    let m = tokens.len();
    let lse = row_lse(g, logits);
    // Targets shifted left; the last row predicts nothing and is masked out.
    let mut targets: Vec<u32> = tokens[1..].to_vec();
    targets.push(0);
    let sel = g.select_cols(logits, targets.into());
    let per_pos = g.sub(lse, sel);
    let mut mask = vec![1.0; m];
    mask[m - 1] = 0.0;
    let mask_c = g.constant(Tensor::new(vec![m, 1], mask));
    let masked = g.mul(per_pos, mask_c);
    let total = g.sum_all(masked);
    g.scale(total, 1.0 / (m - 1) as f64)
}

/// Mean per-position KL(student || teacher) given the teacher's log
/// probabilities as constants.
pub fn kl_from_logits(g: &mut Graph, logits: Var, teacher_log_probs: &Tensor) -> Var {
    let (m, n) = (g.shape(logits)[0], g.shape(logits)[1]);
    assert_eq!(teacher_log_probs.shape(), &[m, n]);
    let lse = row_lse(g, logits);
    let lse_b = g.broadcast_cols(lse, n);
    let logp = g.sub(logits, lse_b);
    let p = g.exp(logp);
    let tlp = g.constant(teacher_log_probs.clone());
    let diff = g.sub(logp, tlp);
    let terms = g.mul(p, diff);
    let row = g.row_sum(terms);
    let total = g.sum_all(row);
    g.scale(total, 1.0 / m as f64)
}

/// Scalar influence score in (0, 1): mean-pooled final features through an
/// affine head and a logistic squash.
pub fn score_scalar(g: &mut Graph, cfg: &ModelConfig, vars: &BlockVars, tokens: &[u32]) -> Var {
    let feats = features(g, cfg, vars, tokens);
    let m = g.shape(feats)[0];
    let col_sums = g.col_sum(feats);
    let pooled = g.scale(col_sums, 1.0 / m as f64);
    let s = g.matmul(pooled, vars.var("score.w"));
    let s_b = g.add(s, vars.var("score.b"));
    let s_scalar = g.sum_all(s_b);
    g.sigmoid(s_scalar)
}

/// Log-probabilities [m, vocab] for a model evaluated at fixed parameters;
/// used to freeze a teacher's predictions as constants.
pub fn log_probs(cfg: &ModelConfig, params: &ParamVector, tokens: &[u32]) -> crate::error::Result<Tensor> {
    let mut g = Graph::new();
    let vars = BlockVars::bind(&mut g, params);
    let logits = lm_logits(&mut g, cfg, &vars, tokens);
    let n = g.shape(logits)[1];
    let lse = row_lse(&mut g, logits);
    let lse_b = g.broadcast_cols(lse, n);
    let logp = g.sub(logits, lse_b);
    if let Some(f) = g.fault() {
        return Err(crate::error::BlissError::Differentiation(f.to_string()));
    }
    Ok(g.value(logp).clone())
}
