//! The bilevel optimizer: weighted lower-level proxy updates, the GDLS
//! linear-system solver, hypergradient assembly via the softmax-Jacobian
//! contraction (cross-checked against the mixed second-order autodiff path),
//! and upper-level score updates, composed into the per-round inner loop.

use serde::Serialize;

use crate::autodiff::{self, BlockVars, Graph, ParamVector, ScalarFn2, Tensor, Var};
use crate::data::{BatchIter, SampleBatch, TokenDataset};
use crate::error::{BlissError, Result};
use crate::models::{self, forward, LmModel, ModelConfig, ScoreModel};
use crate::util::{derive_seed, Pool};
use crate::weighting::{self, ImportanceWeights, ShardLayout};

/// Lower-level objective coefficients and stepping.
#[derive(Clone, Copy, Debug)]
pub struct LowerConfig {
    /// KL alignment coefficient.
    pub gamma: f64,
    /// Weight decay coefficient (on |theta_p|^2).
    pub lambda: f64,
    /// Lower-level step size.
    pub eta1: f64,
    /// 1 = single loop; > 1 composes that many steps on the same batch.
    pub inner_steps: usize,
}

impl LowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.lambda < 0.0 || self.eta1 <= 0.0 || self.inner_steps == 0 {
            return Err(BlissError::Config(
                "lower config wants gamma >= 0, lambda >= 0, eta1 > 0, inner_steps >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Gradient-descent linear-system solver settings.
#[derive(Clone, Copy, Debug)]
pub struct GdlsConfig {
    pub eta: f64,
    pub k_steps: usize,
    /// Start from the previous iteration's solution instead of zero.
    pub warm_start: bool,
}

impl GdlsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 || self.k_steps == 0 {
            return Err(BlissError::Config("gdls config wants eta > 0, k_steps >= 1".into()));
        }
        Ok(())
    }
}

/// Upper-level (score model) stepping.
#[derive(Clone, Copy, Debug)]
pub struct UpperConfig {
    pub eta3: f64,
    pub t_steps: usize,
}

impl UpperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta3 <= 0.0 || self.t_steps == 0 {
            return Err(BlissError::Config("upper config wants eta3 > 0, t_steps >= 1".into()));
        }
        Ok(())
    }
}

/// How scores become per-sample weights in the lower loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightingMode {
    /// Batch softmax over scores.
    Softmax,
    /// Raw scores used directly as weights.
    Naive,
}

/// Mutable bilevel iterate plus the frozen teacher snapshot.
#[derive(Clone, Debug)]
pub struct BilevelState {
    pub theta_p: ParamVector,
    pub theta_s: ParamVector,
    pub z: ParamVector,
    pub t: usize,
    pub teacher: LmModel,
    pub proxy_config: ModelConfig,
    pub score_config: ModelConfig,
}

impl BilevelState {
    pub fn new(proxy: &LmModel, score: &ScoreModel, teacher: &LmModel) -> BilevelState {
        BilevelState {
            z: proxy.params.zeros_like(),
            theta_p: proxy.params.clone(),
            theta_s: score.params.clone(),
            t: 0,
            teacher: teacher.clone(),
            proxy_config: proxy.config,
            score_config: score.config,
        }
    }
}

/// One JSON-lines metrics row per upper step.
#[derive(Clone, Debug, Serialize)]
pub struct StepMetrics {
    pub t: usize,
    pub lower_loss: f64,
    pub upper_loss: f64,
    pub kl: f64,
    pub hypergrad_norm: f64,
    pub z_residual: f64,
}

// ---- weights from scores ----------------------------------------------------

/// Per-sample lower-loss weights for a batch: stabilized batch softmax over
/// scores, or the raw scores in naive mode. The softmax reduction always runs
/// in global sample order so results do not depend on the parallelism degree.
pub fn batch_weights(
    score: &ScoreModel,
    batch: &SampleBatch,
    mode: WeightingMode,
    pool: &Pool,
) -> Result<ImportanceWeights> {
    let scores = models::batch_scores(score, batch, pool)?;
    match mode {
        WeightingMode::Softmax => weighting::softmax_weights(&scores),
        WeightingMode::Naive => Ok(ImportanceWeights {
            denominator: scores.len() as f64,
            layout: ShardLayout::single(scores.len()),
            weights: scores,
        }),
    }
}

// ---- lower level -------------------------------------------------------------

/// Cached teacher log-probabilities for a fixed dataset (one tensor per row),
/// so the frozen teacher runs once per round instead of once per step.
pub struct TeacherCache {
    log_probs: Vec<Tensor>,
}

impl TeacherCache {
    pub fn build(teacher: &LmModel, dataset: &TokenDataset, pool: &Pool) -> Result<TeacherCache> {
        let rows: Vec<Vec<u32>> =
            (0..dataset.num_seqs()).map(|i| dataset.row(i).to_vec()).collect();
        let log_probs = pool
            .map_ordered(&rows, |row| forward::log_probs(&teacher.config, &teacher.params, row))
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(TeacherCache { log_probs })
    }

    fn for_row(&self, dataset_row: usize) -> &Tensor {
        &self.log_probs[dataset_row]
    }
}

/// Weighted-CE + scaled-KL scalar for one sample (the lambda term is handled
/// analytically by the callers).
fn sample_objective(
    cfg: ModelConfig,
    tokens: Vec<u32>,
    ce_weight: f64,
    kl_weight: f64,
    teacher_logp: Option<Tensor>,
) -> impl autodiff::ScalarFn {
    move |g: &mut Graph, theta: &BlockVars| {
        let logits = forward::lm_logits(g, &cfg, theta, &tokens);
        let ce = forward::ce_from_logits(g, logits, &tokens);
        let mut total = g.scale(ce, ce_weight);
        if let Some(tlp) = &teacher_logp {
            if kl_weight != 0.0 {
                let kl = forward::kl_from_logits(g, logits, tlp);
                let klw = g.scale(kl, kl_weight);
                total = g.add(total, klw);
            }
        }
        total
    }
}

/// Value and gradient of the full lower objective
/// G = sum_i P_i CE_i + gamma * mean KL_i + lambda |theta_p|^2
/// at fixed weights, decomposed per sample and reduced in sample order.
pub struct LowerEval {
    pub loss: f64,
    pub weighted_ce: f64,
    pub kl_mean: f64,
    pub grad: ParamVector,
}

pub fn lower_grad(
    proxy: &LmModel,
    weights: &[f64],
    batch: &SampleBatch,
    teacher_cache: &TeacherCache,
    cfg: &LowerConfig,
    pool: &Pool,
) -> Result<LowerEval> {
    if weights.len() != batch.size() {
        return Err(BlissError::Usage("one weight per sample required".into()));
    }
    let b = batch.size() as f64;
    let model_cfg = proxy.config;
    let params = &proxy.params;
    let gamma = cfg.gamma;

    // One graph per sample carrying both loss terms; (grad of P_i CE_i +
    // (gamma/B) KL_i, CE value, KL value).
    let per: Vec<Result<(ParamVector, f64, f64)>> = pool.map_range(batch.size(), |i| {
        let tokens = batch.row(i).to_vec();
        let tlp = teacher_cache.for_row(batch.indices[i]);
        let mut g = Graph::new();
        let theta = BlockVars::bind(&mut g, params);
        let logits = forward::lm_logits(&mut g, &model_cfg, &theta, &tokens);
        let ce = forward::ce_from_logits(&mut g, logits, &tokens);
        let kl = forward::kl_from_logits(&mut g, logits, tlp);
        if let Some(fault) = g.fault() {
            return Err(BlissError::Differentiation(fault.to_string()));
        }
        let ce_value = g.value(ce).item();
        let kl_value = g.value(kl).item();
        let ce_w = g.scale(ce, weights[i]);
        let kl_w = g.scale(kl, gamma / b);
        let total = g.add(ce_w, kl_w);
        let grads = g.backward(total, &theta.vars());
        let mut out = ParamVector::new();
        for ((name, _), var) in params.blocks().zip(&grads) {
            let t = g.value(*var).clone();
            if !t.all_finite() {
                return Err(BlissError::Differentiation(format!(
                    "non-finite lower gradient for block '{name}'"
                )));
            }
            out.push(name, t)?;
        }
        Ok((out, ce_value, kl_value))
    });

    let mut grad = proxy.params.zeros_like();
    let mut weighted_ce = 0.0;
    let mut kl_sum = 0.0;
    for (i, r) in per.into_iter().enumerate() {
        let (g, ce, kl) = r?;
        grad = autodiff::add(&grad, &g)?;
        weighted_ce += weights[i] * ce;
        kl_sum += kl;
    }
    if cfg.lambda != 0.0 {
        grad = autodiff::axpy(2.0 * cfg.lambda, &proxy.params, &grad)?;
    }
    let sq_norm = autodiff::dot(&proxy.params, &proxy.params)?;
    let kl_mean = kl_sum / b;
    Ok(LowerEval {
        loss: weighted_ce + cfg.gamma * kl_mean + cfg.lambda * sq_norm,
        weighted_ce,
        kl_mean,
        grad,
    })
}

/// `inner_steps` SGD iterations of the lower objective on one batch, score
/// model held fixed. Returns the updated proxy parameters and the first
/// iteration's evaluation (the loss the step saw before moving).
pub fn lower_step(
    proxy: &LmModel,
    weights: &[f64],
    batch: &SampleBatch,
    teacher_cache: &TeacherCache,
    cfg: &LowerConfig,
    pool: &Pool,
) -> Result<(ParamVector, LowerEval)> {
    cfg.validate()?;
    let mut current = proxy.clone();
    let mut first: Option<LowerEval> = None;
    for _ in 0..cfg.inner_steps {
        let eval = lower_grad(&current, weights, batch, teacher_cache, cfg, pool)?;
        current.params = autodiff::axpy(-cfg.eta1, &eval.grad, &current.params)?;
        if first.is_none() {
            first = Some(eval);
        }
    }
    Ok((current.params, first.expect("inner_steps >= 1")))
}

// ---- GDLS ---------------------------------------------------------------------

/// Matrix-free Hessian application.
pub trait HvpFn {
    fn apply(&mut self, v: &ParamVector) -> Result<ParamVector>;
}

impl<F: FnMut(&ParamVector) -> Result<ParamVector>> HvpFn for F {
    fn apply(&mut self, v: &ParamVector) -> Result<ParamVector> {
        self(v)
    }
}

pub struct GdlsOutcome {
    pub z: ParamVector,
    /// Residual norm |H z - a| observed at the last iteration, before its
    /// update was applied.
    pub residual_norm: f64,
}

/// K iterations of z <- z - eta (H z - a). A residual-norm guard halves eta
/// for the remaining iterations whenever the residual grows.
pub fn gdls(
    hessian: &mut dyn HvpFn,
    a: &ParamVector,
    z0: &ParamVector,
    cfg: &GdlsConfig,
) -> Result<GdlsOutcome> {
    cfg.validate()?;
    if !a.conformant(z0) {
        return Err(BlissError::Shape("gdls: a and z0 not conformant".into()));
    }
    let mut z = z0.clone();
    let mut eta = cfg.eta;
    let mut prev_residual: Option<f64> = None;
    let mut last_residual = f64::NAN;
    for _ in 0..cfg.k_steps {
        let hz = hessian.apply(&z).map_err(|e| BlissError::Solver(e.to_string()))?;
        let residual = autodiff::sub(&hz, a)?;
        let rnorm = autodiff::norm(&residual);
        if !rnorm.is_finite() {
            return Err(BlissError::Solver("non-finite GDLS residual".into()));
        }
        // Not improving counts as divergence: a marginal eta oscillates with
        // a constant residual and would otherwise never trip a strict test.
        if let Some(prev) = prev_residual {
            if rnorm >= prev {
                eta *= 0.5;
            }
        }
        prev_residual = Some(rnorm);
        last_residual = rnorm;
        z = autodiff::axpy(-eta, &residual, &z)?;
    }
    Ok(GdlsOutcome { z, residual_norm: last_residual })
}

/// Prepared per-sample Hessian of the composite lower loss on one batch at
/// fixed proxy parameters: forward and first backward recorded once per
/// sample, each hvp replaying only the final backward. The lambda term enters
/// analytically as 2 lambda v.
pub struct CompositeHvp<'a> {
    preps: Vec<autodiff::PreparedHvp>,
    lambda2: f64,
    pool: &'a Pool,
}

impl<'a> CompositeHvp<'a> {
    pub fn prepare(
        proxy: &LmModel,
        weights: &[f64],
        batch: &SampleBatch,
        teacher_cache: &TeacherCache,
        cfg: &LowerConfig,
        pool: &'a Pool,
    ) -> Result<CompositeHvp<'a>> {
        if weights.len() != batch.size() {
            return Err(BlissError::Usage("one weight per sample required".into()));
        }
        let b = batch.size() as f64;
        let model_cfg = proxy.config;
        let params = &proxy.params;
        let preps: Vec<Result<autodiff::PreparedHvp>> = pool.map_range(batch.size(), |i| {
            let f = sample_objective(
                model_cfg,
                batch.row(i).to_vec(),
                weights[i],
                cfg.gamma / b,
                Some(teacher_cache.for_row(batch.indices[i]).clone()),
            );
            autodiff::PreparedHvp::new(&f, params)
        });
        Ok(CompositeHvp {
            preps: preps.into_iter().collect::<Result<_>>()?,
            lambda2: 2.0 * cfg.lambda,
            pool,
        })
    }
}

impl HvpFn for CompositeHvp<'_> {
    fn apply(&mut self, v: &ParamVector) -> Result<ParamVector> {
        let per: Vec<Result<ParamVector>> =
            self.pool.map_mut_ordered(&mut self.preps, |prep| prep.apply(v));
        let mut out = autodiff::scale(self.lambda2, v);
        for r in per {
            out = autodiff::add(&out, &r?)?;
        }
        Ok(out)
    }
}

// ---- hypergradient -------------------------------------------------------------

/// Stochastic hypergradient wrt the score parameters on one batch:
/// c_i = <grad_p CE_i, z>, then minus the softmax-Jacobian contraction of
/// (P, grad_s h, c). In naive weighting the weight Jacobian is the identity
/// and the contraction reduces to the c-weighted sum of score gradients.
pub fn hypergradient(
    proxy: &LmModel,
    score: &ScoreModel,
    z: &ParamVector,
    batch: &SampleBatch,
    mode: WeightingMode,
    pool: &Pool,
) -> Result<ParamVector> {
    let ce_grads = models::per_sample_ce_grads(proxy, batch, pool)?;
    let c: Vec<f64> = ce_grads.iter().map(|g| autodiff::dot(g, z)).collect::<Result<_>>()?;
    let h_grads = models::per_sample_score_grads(score, batch, pool)?;
    match mode {
        WeightingMode::Softmax => {
            let weights = batch_weights(score, batch, mode, pool)?;
            let contraction = weighting::weight_jacobian_contraction(&weights, &h_grads, &c)?;
            Ok(autodiff::scale(-1.0, &contraction))
        }
        WeightingMode::Naive => {
            let mut acc = score.params.zeros_like();
            for (ci, hg) in c.iter().zip(&h_grads) {
                acc = autodiff::axpy(*ci, hg, &acc)?;
            }
            Ok(autodiff::scale(-1.0, &acc))
        }
    }
}

/// The cross-check path: hypergradient as minus the mixed second-order
/// product of a coupled two-parameter lower loss, contracted with z.
pub fn hypergrad_mixed_path(
    coupled: &dyn ScalarFn2,
    theta_s: &ParamVector,
    theta_p: &ParamVector,
    z: &ParamVector,
) -> Result<ParamVector> {
    let mixed = autodiff::mixed_vjp(coupled, theta_s, theta_p, z)?;
    Ok(autodiff::scale(-1.0, &mixed))
}

/// Coupled lower loss over both parameter vectors (outer = score, inner =
/// proxy), with the batch softmax inside the graph; the differentiable object
/// behind the dual-path equivalence checks.
pub fn lower_loss_coupled(
    proxy_cfg: ModelConfig,
    score_cfg: ModelConfig,
    batch: &SampleBatch,
    teacher_log_probs: Vec<Tensor>,
    cfg: LowerConfig,
    mode: WeightingMode,
) -> impl ScalarFn2 {
    let rows: Vec<Vec<u32>> = batch.rows().map(|r| r.to_vec()).collect();
    assert_eq!(rows.len(), teacher_log_probs.len());
    move |g: &mut Graph, outer: &BlockVars, inner: &BlockVars| {
        let b = rows.len();
        // Scores from the outer (score) parameters.
        let hs: Vec<Var> =
            rows.iter().map(|row| forward::score_scalar(g, &score_cfg, outer, row)).collect();
        let h_vec = g.stack(&hs);
        let weights = match mode {
            WeightingMode::Softmax => {
                let maxv =
                    g.value(h_vec).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let max_c = g.scalar(maxv);
                let max_fill = g.fill(max_c, vec![b]);
                let shifted = g.sub(h_vec, max_fill);
                let e = g.exp(shifted);
                let denom = g.sum_all(e);
                let denom_fill = g.fill(denom, vec![b]);
                g.div(e, denom_fill)
            }
            WeightingMode::Naive => h_vec,
        };
        // Per-sample CE and KL from the inner (proxy) parameters.
        let ces: Vec<Var> = rows
            .iter()
            .map(|row| {
                let logits = forward::lm_logits(g, &proxy_cfg, inner, row);
                forward::ce_from_logits(g, logits, row)
            })
            .collect();
        let ce_vec = g.stack(&ces);
        let weighted = g.mul(weights, ce_vec);
        let mut total = g.sum_all(weighted);

        if cfg.gamma != 0.0 {
            let mut kl_acc: Option<Var> = None;
            for (row, tlp) in rows.iter().zip(&teacher_log_probs) {
                let logits = forward::lm_logits(g, &proxy_cfg, inner, row);
                let kl = forward::kl_from_logits(g, logits, tlp);
                kl_acc = Some(match kl_acc {
                    Some(acc) => g.add(acc, kl),
                    None => kl,
                });
            }
            let kl_mean = g.scale(kl_acc.expect("non-empty"), cfg.gamma / b as f64);
            total = g.add(total, kl_mean);
        }
        if cfg.lambda != 0.0 {
            let mut sq: Option<Var> = None;
            for v in inner.vars() {
                let vv = g.mul(v, v);
                let s = g.sum_all(vv);
                sq = Some(match sq {
                    Some(acc) => g.add(acc, s),
                    None => s,
                });
            }
            let reg = g.scale(sq.expect("non-empty"), cfg.lambda);
            total = g.add(total, reg);
        }
        total
    }
}

/// Score update: theta_s <- theta_s - eta3 * hypergrad (descent on the
/// validation objective under the Eq. 3 sign convention).
pub fn upper_step(
    theta_s: &ParamVector,
    hypergrad: &ParamVector,
    cfg: &UpperConfig,
) -> Result<ParamVector> {
    if !theta_s.conformant(hypergrad) {
        return Err(BlissError::Shape("upper_step: non-conformant hypergradient".into()));
    }
    autodiff::axpy(-cfg.eta3, hypergrad, theta_s)
}

// ---- the inner loop ------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BilevelRunConfig {
    pub lower: LowerConfig,
    pub gdls: GdlsConfig,
    pub upper: UpperConfig,
    pub mode: WeightingMode,
    pub batch_size: usize,
    /// Periodic proxy reset: every `reset_every` upper steps, theta_p returns
    /// to the supplied snapshot.
    pub proxy_reset: Option<(usize, ParamVector)>,
    pub seed: u64,
}

pub struct BilevelOutcome {
    pub theta_p: ParamVector,
    pub theta_s: ParamVector,
    pub metrics: Vec<StepMetrics>,
}

/// The inner loop: for each t draw three independent training batches (lower
/// step, GDLS Hessian, mixed partial) and one validation batch, then
/// lower_step -> gdls -> hypergradient -> upper_step. The teacher snapshot is
/// never touched.
pub fn run_bilevel(
    mut state: BilevelState,
    bilevel_subset: &TokenDataset,
    validation_set: &TokenDataset,
    cfg: &BilevelRunConfig,
    pool: &Pool,
) -> Result<BilevelOutcome> {
    cfg.lower.validate()?;
    cfg.gdls.validate()?;
    cfg.upper.validate()?;
    if bilevel_subset.num_seqs() == 0 || validation_set.num_seqs() == 0 {
        return Err(BlissError::Usage("bilevel needs non-empty subsets".into()));
    }

    let teacher_cache = TeacherCache::build(&state.teacher, bilevel_subset, pool)?;

    let sub_idx: Vec<usize> = (0..bilevel_subset.num_seqs()).collect();
    let val_idx: Vec<usize> = (0..validation_set.num_seqs()).collect();
    let b_sub = cfg.batch_size.min(sub_idx.len());
    let b_val = cfg.batch_size.min(val_idx.len());
    let mut iter_xi = BatchIter::new(&sub_idx, b_sub, derive_seed(cfg.seed, "xi"))?;
    let mut iter_xt = BatchIter::new(&sub_idx, b_sub, derive_seed(cfg.seed, "xi_tilde"))?;
    let mut iter_pi = BatchIter::new(&sub_idx, b_sub, derive_seed(cfg.seed, "pi"))?;
    let mut iter_zeta = BatchIter::new(&val_idx, b_val, derive_seed(cfg.seed, "zeta"))?;

    let mut metrics = Vec::with_capacity(cfg.upper.t_steps);
    let mut proxy = LmModel { config: state.proxy_config, params: state.theta_p.clone() };
    let mut score = ScoreModel { config: state.score_config, params: state.theta_s.clone() };

    for t in 0..cfg.upper.t_steps {
        let step_err =
            |detail: String| BlissError::Optimization { step: t, detail };

        // Lower step on xi.
        let xi = iter_xi.next_batch(bilevel_subset)?;
        let w_xi = batch_weights(&score, &xi, cfg.mode, pool)?;
        let (new_p, lower_eval) =
            lower_step(&proxy, &w_xi.weights, &xi, &teacher_cache, &cfg.lower, pool)
                .map_err(|e| step_err(e.to_string()))?;
        proxy.params = new_p;
        if !lower_eval.loss.is_finite() {
            return Err(step_err(format!("non-finite lower loss {}", lower_eval.loss)));
        }

        // Validation gradient (plain cross-entropy, no regularizers).
        let zeta = iter_zeta.next_batch(validation_set)?;
        let (upper_loss, a) =
            models::batch_ce_grad(&proxy, &zeta, pool).map_err(|e| step_err(e.to_string()))?;

        // GDLS on the Hessian batch.
        let xt = iter_xt.next_batch(bilevel_subset)?;
        let w_xt = batch_weights(&score, &xt, cfg.mode, pool)?;
        let outcome = {
            let mut hvp =
                CompositeHvp::prepare(&proxy, &w_xt.weights, &xt, &teacher_cache, &cfg.lower, pool)
                    .map_err(|e| step_err(e.to_string()))?;
            let z0 = if cfg.gdls.warm_start { state.z.clone() } else { state.z.zeros_like() };
            gdls(&mut hvp, &a, &z0, &cfg.gdls).map_err(|e| step_err(e.to_string()))?
        };
        state.z = outcome.z;

        // Hypergradient on pi; upper step.
        let pi = iter_pi.next_batch(bilevel_subset)?;
        let hg = hypergradient(&proxy, &score, &state.z, &pi, cfg.mode, pool)
            .map_err(|e| step_err(e.to_string()))?;
        let hg_norm = autodiff::norm(&hg);
        if !hg_norm.is_finite() {
            return Err(step_err("non-finite hypergradient".into()));
        }
        score.params = upper_step(&score.params, &hg, &cfg.upper)?;

        metrics.push(StepMetrics {
            t,
            lower_loss: lower_eval.loss,
            upper_loss,
            kl: lower_eval.kl_mean,
            hypergrad_norm: hg_norm,
            z_residual: outcome.residual_norm,
        });

        if let Some((every, snapshot)) = &cfg.proxy_reset {
            if (t + 1) % every == 0 {
                proxy.params = snapshot.clone();
            }
        }
        state.t = t + 1;
    }

    Ok(BilevelOutcome { theta_p: proxy.params, theta_s: score.params, metrics })
}
