//! The three models: a proxy (next-token surrogate), a score model (per-sample
//! influence regressor sharing the proxy body), and a target model (the larger
//! model being pretrained, frozen during bilevel phases), plus their losses.

pub mod config;
pub mod forward;

use std::path::Path;

use crate::autodiff::{self, checkpoint, BlockVars, Graph, ParamVector, ScalarFn, Tensor, Var};
use crate::data::{BatchIter, SampleBatch, TokenDataset};
use crate::error::{BlissError, Result};
use crate::util::Pool;

pub use config::{ModelConfig, ModelFamily};
pub use forward::Head;

/// Next-token language model; serves as both proxy and target depending on
/// its config family.
#[derive(Clone, Debug, PartialEq)]
pub struct LmModel {
    pub config: ModelConfig,
    pub params: ParamVector,
}

/// Influence regressor: proxy-shaped body plus a pooled affine head squashed
/// to (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    pub config: ModelConfig,
    pub params: ParamVector,
}

impl LmModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<LmModel> {
        config.validate()?;
        Ok(LmModel { config, params: forward::init_params(&config, Head::Lm, seed) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)?;
        self.config.save_manifest(&path.with_extension("manifest"))
    }

    pub fn load(path: &Path) -> Result<LmModel> {
        let config = ModelConfig::load_manifest(&path.with_extension("manifest"))?;
        Ok(LmModel { config, params: checkpoint::load(path)? })
    }
}

impl ScoreModel {
    /// Random body and head; bilevel runs normally start from
    /// `init_score_from_proxy` instead.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ScoreModel> {
        config.validate()?;
        Ok(ScoreModel { config, params: forward::init_params(&config, Head::Score, seed) })
    }

    /// Influence score for one sample, clamped into the open interval so a
    /// saturated sigmoid can never report exactly 0 or 1.
    pub fn score(&self, tokens: &[u32]) -> Result<f64> {
        check_tokens(&self.config, tokens)?;
        let f = score_fn(self.config, tokens.to_vec());
        let h = autodiff::eval(&f, &self.params)?;
        Ok(clamp_open_unit(h))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)?;
        self.config.save_manifest(&path.with_extension("manifest"))
    }

    pub fn load(path: &Path) -> Result<ScoreModel> {
        let config = ModelConfig::load_manifest(&path.with_extension("manifest"))?;
        Ok(ScoreModel { config, params: checkpoint::load(path)? })
    }
}

fn clamp_open_unit(h: f64) -> f64 {
    h.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.len() != cfg.seq_len {
        return Err(BlissError::Data(format!(
            "sample length {} != seq_len {}",
            tokens.len(),
            cfg.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(BlissError::Data(format!(
            "token id {bad} out of vocab {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn check_batch(cfg: &ModelConfig, batch: &SampleBatch) -> Result<()> {
    for row in batch.rows() {
        check_tokens(cfg, row)?;
    }
    Ok(())
}

// ---- scalar objectives -----------------------------------------------------

/// Mean next-token cross-entropy of the whole batch as one recorded scalar.
pub fn lm_loss(config: ModelConfig, batch: &SampleBatch) -> Result<impl ScalarFn> {
    let rows: Vec<Vec<u32>> = batch.rows().map(|r| r.to_vec()).collect();
    for row in &rows {
        check_tokens(&config, row)?;
    }
    Ok(move |g: &mut Graph, theta: &BlockVars| {
        let mut acc: Option<Var> = None;
        for row in &rows {
            let logits = forward::lm_logits(g, &config, theta, row);
            let ce = forward::ce_from_logits(g, logits, row);
            acc = Some(match acc {
                Some(a) => g.add(a, ce),
                None => ce,
            });
        }
        let total = acc.expect("non-empty batch");
        g.scale(total, 1.0 / rows.len() as f64)
    })
}

/// Cross-entropy of a single sample.
pub fn ce_fn(config: ModelConfig, tokens: Vec<u32>) -> impl ScalarFn {
    move |g: &mut Graph, theta: &BlockVars| {
        let logits = forward::lm_logits(g, &config, theta, &tokens);
        forward::ce_from_logits(g, logits, &tokens)
    }
}

/// Influence score of a single sample as a differentiable scalar.
pub fn score_fn(config: ModelConfig, tokens: Vec<u32>) -> impl ScalarFn {
    move |g: &mut Graph, theta: &BlockVars| forward::score_scalar(g, &config, theta, &tokens)
}

/// Mean per-position KL(student || teacher) over a batch, teacher frozen as
/// constants. Differentiable in the student's parameters only.
pub fn kl_loss(
    student_config: ModelConfig,
    teacher: &LmModel,
    batch: &SampleBatch,
) -> Result<impl ScalarFn> {
    check_batch(&student_config, batch)?;
    if teacher.config.vocab_size != student_config.vocab_size
        || teacher.config.seq_len != student_config.seq_len
    {
        return Err(BlissError::Usage(
            "teacher and student disagree on vocab or sequence length".into(),
        ));
    }
    let rows: Vec<Vec<u32>> = batch.rows().map(|r| r.to_vec()).collect();
    let teacher_logp: Vec<Tensor> = rows
        .iter()
        .map(|row| forward::log_probs(&teacher.config, &teacher.params, row))
        .collect::<Result<_>>()?;
    Ok(kl_from_cached(student_config, rows, teacher_logp))
}

/// KL objective against precomputed teacher log-probabilities (one [m, vocab]
/// tensor per row). Lets a frozen teacher be evaluated once per subset.
pub fn kl_from_cached(
    student_config: ModelConfig,
    rows: Vec<Vec<u32>>,
    teacher_log_probs: Vec<Tensor>,
) -> impl ScalarFn {
    assert_eq!(rows.len(), teacher_log_probs.len());
    move |g: &mut Graph, theta: &BlockVars| {
        let mut acc: Option<Var> = None;
        for (row, tlp) in rows.iter().zip(&teacher_log_probs) {
            let logits = forward::lm_logits(g, &student_config, theta, row);
            let kl = forward::kl_from_logits(g, logits, tlp);
            acc = Some(match acc {
                Some(a) => g.add(a, kl),
                None => kl,
            });
        }
        let total = acc.expect("non-empty batch");
        g.scale(total, 1.0 / rows.len() as f64)
    }
}

/// Plain KL between two explicit distributions with 0 * log 0 == 0; the
/// analytic oracle for the graph-built KL.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else { pi * (pi / qi).ln() })
        .sum()
}

// ---- batched helpers (per-sample graphs, ordered reduction) ------------------

/// Mean CE over the batch, computed per sample and reduced in sample order;
/// bit-identical for any worker count.
pub fn batch_ce_value(model: &LmModel, batch: &SampleBatch, pool: &Pool) -> Result<f64> {
    check_batch(&model.config, batch)?;
    let cfg = model.config;
    let params = &model.params;
    let per: Vec<Result<f64>> = pool.map_range(batch.size(), |i| {
        autodiff::eval(&ce_fn(cfg, batch.row(i).to_vec()), params)
    });
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / batch.size() as f64)
}

/// Mean-CE gradient via per-sample backward passes, reduced in sample order.
pub fn batch_ce_grad(model: &LmModel, batch: &SampleBatch, pool: &Pool) -> Result<(f64, ParamVector)> {
    check_batch(&model.config, batch)?;
    let cfg = model.config;
    let params = &model.params;
    let per: Vec<Result<(ParamVector, f64)>> = pool.map_range(batch.size(), |i| {
        autodiff::grad_and_value(&ce_fn(cfg, batch.row(i).to_vec()), params)
    });
    let inv = 1.0 / batch.size() as f64;
    let mut grad = model.params.zeros_like();
    let mut loss = 0.0;
    for r in per {
        let (g, v) = r?;
        grad = autodiff::axpy(inv, &g, &grad)?;
        loss += inv * v;
    }
    Ok((loss, grad))
}

/// Per-sample CE gradients (not averaged), in sample order.
pub fn per_sample_ce_grads(
    model: &LmModel,
    batch: &SampleBatch,
    pool: &Pool,
) -> Result<Vec<ParamVector>> {
    check_batch(&model.config, batch)?;
    let cfg = model.config;
    let params = &model.params;
    pool.map_range(batch.size(), |i| autodiff::grad(&ce_fn(cfg, batch.row(i).to_vec()), params))
        .into_iter()
        .collect()
}

/// Scores for a batch in sample order.
pub fn batch_scores(model: &ScoreModel, batch: &SampleBatch, pool: &Pool) -> Result<Vec<f64>> {
    let cfg = model.config;
    let params = &model.params;
    pool.map_range(batch.size(), |i| {
        check_tokens(&cfg, batch.row(i))?;
        let h = autodiff::eval(&score_fn(cfg, batch.row(i).to_vec()), params)?;
        Ok(clamp_open_unit(h))
    })
    .into_iter()
    .collect()
}

/// Per-sample score gradients d h_i / d theta_s, in sample order.
pub fn per_sample_score_grads(
    model: &ScoreModel,
    batch: &SampleBatch,
    pool: &Pool,
) -> Result<Vec<ParamVector>> {
    let cfg = model.config;
    let params = &model.params;
    pool.map_range(batch.size(), |i| {
        check_tokens(&cfg, batch.row(i))?;
        autodiff::grad(&score_fn(cfg, batch.row(i).to_vec()), params)
    })
    .into_iter()
    .collect()
}

// ---- initialization and warm-up ---------------------------------------------

/// Score model sharing the warmed proxy's body; head zeroed so every initial
/// score is exactly 0.5 and initial importance weights are uniform.
pub fn init_score_from_proxy(proxy: &LmModel) -> ScoreModel {
    let mut params = ParamVector::new();
    for name in forward::body_block_names(&proxy.config) {
        let t = proxy.params.block(&name).expect("proxy has every body block").clone();
        params.push(name, t).expect("unique");
    }
    params
        .push("score.w", Tensor::zeros(vec![proxy.config.d_model, 1]))
        .expect("unique");
    params.push("score.b", Tensor::zeros(vec![1, 1])).expect("unique");
    ScoreModel { config: proxy.config, params }
}

/// Plain unweighted cross-entropy SGD on uniformly sampled batches. Returns
/// the trained model and the last batch loss (NaN when steps == 0).
pub fn warmup_train(
    model: &LmModel,
    dataset: &TokenDataset,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    pool: &Pool,
) -> Result<(LmModel, f64)> {
    let mut current = model.clone();
    if steps == 0 {
        return Ok((current, f64::NAN));
    }
    let all: Vec<usize> = (0..dataset.num_seqs()).collect();
    let mut iter = BatchIter::new(&all, batch_size.min(all.len()), seed)?;
    let mut last = f64::NAN;
    for step in 0..steps {
        let batch = iter.next_batch(dataset)?;
        let (loss, grad) = batch_ce_grad(&current, &batch, pool).map_err(|e| {
            BlissError::Optimization { step, detail: e.to_string() }
        })?;
        current.params = autodiff::axpy(-lr, &grad, &current.params)?;
        last = loss;
    }
    Ok((current, last))
}
