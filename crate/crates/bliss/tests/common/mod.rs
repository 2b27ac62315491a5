//! Shared oracles for the integration suites: central finite differences for
//! gradients, FD-of-gradient Hessian assembly, and tiny random instances.
//! These stay independent of the reverse-mode path they check: they only ever
//! call forward evaluation.

#![allow(dead_code)]

use bliss::autodiff::{self, ParamVector, ScalarFn};
use bliss::data::{SampleBatch, TokenDataset};
use bliss::models::{ModelConfig, ModelFamily};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference gradient, coordinate by coordinate.
pub fn fd_grad(f: &dyn ScalarFn, at: &ParamVector, step: f64) -> ParamVector {
    let flat = at.flat();
    let mut out = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[i] += step;
        minus[i] -= step;
        let fp = autodiff::eval(f, &at.with_flat(&plus).unwrap()).unwrap();
        let fm = autodiff::eval(f, &at.with_flat(&minus).unwrap()).unwrap();
        out.push((fp - fm) / (2.0 * step));
    }
    at.with_flat(&out).unwrap()
}

/// Directional central difference of f along u.
pub fn fd_directional(
    f: &dyn Fn(&ParamVector) -> f64,
    at: &ParamVector,
    u: &ParamVector,
    step: f64,
) -> f64 {
    let plus = autodiff::axpy(step, u, at).unwrap();
    let minus = autodiff::axpy(-step, u, at).unwrap();
    (f(&plus) - f(&minus)) / (2.0 * step)
}

/// Explicit Hessian (column-major over flat coordinates) assembled by central
/// finite differences of the analytic-free forward evaluations only is too
/// noisy; the spec's oracle differences the *gradient*, which is what this
/// does: column j = (grad(x + h e_j) - grad(x - h e_j)) / 2h.
pub fn fd_hessian(f: &dyn ScalarFn, at: &ParamVector, step: f64) -> Vec<Vec<f64>> {
    let flat = at.flat();
    let n = flat.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[j] += step;
        minus[j] -= step;
        let gp = autodiff::grad(f, &at.with_flat(&plus).unwrap()).unwrap().flat();
        let gm = autodiff::grad(f, &at.with_flat(&minus).unwrap()).unwrap().flat();
        cols.push(gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * step)).collect());
    }
    cols
}

pub fn matvec_cols(cols: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let n = cols.len();
    let mut out = vec![0.0; n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            out[i] += col[i] * v[j];
        }
    }
    out
}

pub fn max_rel_err(got: &[f64], want: &[f64], floor: f64) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(floor))
        .fold(0.0, f64::max)
}

pub fn max_abs_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
}

/// Small proxy-family config for oracle tests.
pub fn tiny_config(vocab: usize, seq_len: usize, d_model: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        seq_len,
        d_model,
        n_layers: layers,
        n_heads: if d_model % 2 == 0 { 2 } else { 1 },
        family: ModelFamily::Proxy,
    }
}

/// Random token dataset (uniform ids) for loss oracles.
pub fn random_rows(cfg: &ModelConfig, n: usize, seed: u64) -> TokenDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..n * cfg.seq_len)
        .map(|_| rng.random_range(0..cfg.vocab_size as u32))
        .collect();
    TokenDataset::new(cfg.vocab_size, cfg.seq_len, tokens, None).unwrap()
}

pub fn batch_of(cfg: &ModelConfig, n: usize, seed: u64) -> SampleBatch {
    let ds = random_rows(cfg, n, seed);
    let idx: Vec<usize> = (0..n).collect();
    SampleBatch::gather(&ds, &idx).unwrap()
}

/// Random conformant vector with entries in [-1, 1].
pub fn random_like(at: &ParamVector, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..at.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    at.with_flat(&vals).unwrap()
}

/// Tiny two-layer MLP classifier (30 parameters) with a smooth softmax loss:
/// small enough to materialize its Hessian.
pub fn tiny_mlp(
    seed: u64,
) -> (impl bliss::autodiff::ScalarFn, ParamVector) {
    use bliss::autodiff::{BlockVars, Graph, Tensor};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.8..0.8)).collect() };
    let mut params = ParamVector::new();
    params.push("w1", Tensor::new(vec![4, 4], draw(16))).unwrap();
    params.push("b1", Tensor::new(vec![1, 4], draw(4))).unwrap();
    params.push("w2", Tensor::new(vec![4, 2], draw(8))).unwrap();
    params.push("b2", Tensor::new(vec![1, 2], draw(2))).unwrap();
    let x: Vec<f64> = draw(4);
    let f = move |g: &mut Graph, theta: &BlockVars| {
        let input = g.constant(Tensor::new(vec![1, 4], x.clone()));
        let h1 = g.matmul(input, theta.var("w1"));
        let h1b = g.add(h1, theta.var("b1"));
        let a = g.tanh(h1b);
        let h2 = g.matmul(a, theta.var("w2"));
        let out = g.add(h2, theta.var("b2"));
        // log-sum-exp minus the first logit: a smooth cross-entropy
        let e = g.exp(out);
        let s = g.sum_all(e);
        let lse = g.ln(s);
        let t0 = g.slice_cols(out, 0, 1);
        let t0s = g.sum_all(t0);
        g.sub(lse, t0s)
    };
    (f, params)
}

// ---- neural bilevel oracle machinery ----------------------------------------
//
// Deterministic finite-sum bilevel instances on tiny proxies, with solvers
// strong enough to reach |grad| < 1e-8 on the lower level. The solvers here
// are test equipment only; the artifact's own loop is plain SGD + GDLS.

pub mod neural_oracle {
    use bliss::autodiff::{self, ParamVector};
    use bliss::bilevel::{self, GdlsConfig, HvpFn, LowerConfig, WeightingMode};
    use bliss::data::{SampleBatch, TokenDataset};
    use bliss::models::{self, LmModel, ModelFamily, ScoreModel};
    use bliss::util::Pool;

    pub struct Instance {
        pub proxy0: LmModel,
        pub score: ScoreModel,
        pub teacher: LmModel,
        pub train: SampleBatch,
        pub val: SampleBatch,
        pub cfg: LowerConfig,
    }

    pub fn instance(seed: u64) -> Instance {
        let cfg = super::tiny_config(6, 4, 4, 2);
        let proxy0 = LmModel::init(cfg, seed).unwrap();
        let score = ScoreModel::init(cfg, seed + 1).unwrap();
        let mut tcfg = cfg;
        tcfg.family = ModelFamily::Target;
        let teacher = LmModel::init(tcfg, seed + 2).unwrap();
        Instance {
            proxy0,
            score,
            teacher,
            train: super::batch_of(&cfg, 4, seed + 3),
            val: super::batch_of(&cfg, 4, seed + 4),
            cfg: LowerConfig { gamma: 0.1, lambda: 0.25, eta1: 0.2, inner_steps: 1 },
        }
    }

    pub fn batch_dataset(batch: &SampleBatch, vocab: usize) -> TokenDataset {
        let mut tokens = Vec::new();
        for row in batch.rows() {
            tokens.extend_from_slice(row);
        }
        TokenDataset::new(vocab, batch.seq_len(), tokens, None).unwrap()
    }

    impl Instance {
        pub fn weights(&self, theta_s: &ParamVector) -> Vec<f64> {
            let pool = Pool::serial();
            let score = ScoreModel { config: self.score.config, params: theta_s.clone() };
            bilevel::batch_weights(&score, &self.train, WeightingMode::Softmax, &pool)
                .unwrap()
                .weights
        }

        pub fn cache(&self) -> bilevel::TeacherCache {
            let pool = Pool::serial();
            bilevel::TeacherCache::build(
                &self.teacher,
                &batch_dataset(&self.train, self.proxy0.config.vocab_size),
                &pool,
            )
            .unwrap()
        }

        pub fn lower_grad(
            &self,
            weights: &[f64],
            cache: &bilevel::TeacherCache,
            params: &ParamVector,
        ) -> (f64, ParamVector) {
            let pool = Pool::serial();
            let proxy = LmModel { config: self.proxy0.config, params: params.clone() };
            let e = bilevel::lower_grad(&proxy, weights, &self.train, cache, &self.cfg, &pool)
                .unwrap();
            (e.loss, e.grad)
        }

        fn hvp_at<'a>(
            &self,
            weights: &[f64],
            cache: &bilevel::TeacherCache,
            params: &ParamVector,
            pool: &'a Pool,
        ) -> bilevel::CompositeHvp<'a> {
            let proxy = LmModel { config: self.proxy0.config, params: params.clone() };
            bilevel::CompositeHvp::prepare(&proxy, weights, &self.train, cache, &self.cfg, pool)
                .unwrap()
        }

        /// Adam approach followed by Levenberg-damped Newton-CG polish; test
        /// equipment for reaching tight stationarity on an ill-conditioned
        /// landscape.
        pub fn solve_lower(
            &self,
            theta_s: &ParamVector,
            start: &ParamVector,
            tol: f64,
            adam_steps: usize,
        ) -> (ParamVector, f64) {
            let weights = self.weights(theta_s);
            let cache = self.cache();
            let mut p = start.clone();

            // Phase 1: Adam.
            let n = p.num_params();
            let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
            let (b1, b2, lr, eps) = (0.9, 0.999, 0.02, 1e-8);
            for t in 1..=adam_steps {
                let (_, g) = self.lower_grad(&weights, &cache, &p);
                let gf = g.flat();
                let mut pf = p.flat();
                for i in 0..n {
                    m[i] = b1 * m[i] + (1.0 - b1) * gf[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * gf[i] * gf[i];
                    let mh = m[i] / (1.0 - b1.powi(t as i32));
                    let vh = v[i] / (1.0 - b2.powi(t as i32));
                    pf[i] -= lr * mh / (vh.sqrt() + eps);
                }
                p = p.with_flat(&pf).unwrap();
            }

            // Phase 2: Newton-CG with Levenberg damping.
            let pool = Pool::serial();
            let mut rho = 1e-2;
            let (mut loss, mut g) = self.lower_grad(&weights, &cache, &p);
            for _ in 0..200 {
                let gnorm = autodiff::norm(&g);
                if gnorm < tol {
                    return (p, gnorm);
                }
                let mut hvp = self.hvp_at(&weights, &cache, &p, &pool);
                let step = cg_solve(&mut hvp, rho, &autodiff::scale(-1.0, &g), 400, gnorm * 1e-4);
                let trial = autodiff::add(&p, &step).unwrap();
                let (trial_loss, trial_g) = self.lower_grad(&weights, &cache, &trial);
                if trial_loss.is_finite() && trial_loss < loss {
                    p = trial;
                    loss = trial_loss;
                    g = trial_g;
                    rho = (rho * 0.3).max(1e-12);
                } else {
                    rho *= 6.0;
                }
            }
            let gnorm = autodiff::norm(&g);
            (p, gnorm)
        }

        /// z-solve via GDLS run in blocks until the true residual drops below
        /// tol; step size from a power-iteration bound on the Hessian.
        pub fn solve_z_gdls(
            &self,
            theta_s: &ParamVector,
            theta_p: &ParamVector,
            a: &ParamVector,
            tol: f64,
        ) -> (ParamVector, f64) {
            let weights = self.weights(theta_s);
            let cache = self.cache();
            let pool = Pool::serial();
            let mut hvp = self.hvp_at(&weights, &cache, theta_p, &pool);
            let lmax = power_lambda_max(&mut hvp, theta_p, 60);
            let eta = 0.95 / lmax.abs().max(1e-6);
            let mut z = a.zeros_like();
            for _ in 0..400 {
                let out = bilevel::gdls(
                    &mut hvp,
                    a,
                    &z,
                    &GdlsConfig { eta, k_steps: 500, warm_start: true },
                )
                .unwrap();
                z = out.z;
                let hz = hvp.apply(&z).unwrap();
                let res = autodiff::norm(&autodiff::sub(&hz, a).unwrap());
                if res < tol {
                    return (z, res);
                }
            }
            let hz = hvp.apply(&z).unwrap();
            let res = autodiff::norm(&autodiff::sub(&hz, a).unwrap());
            (z, res)
        }

        /// Phi(theta_s) = validation CE at the solved lower level.
        pub fn phi(&self, theta_s: &ParamVector, warm: &ParamVector) -> f64 {
            let pool = Pool::serial();
            let (theta_p, gnorm) = self.solve_lower(theta_s, warm, 1e-9, 0);
            assert!(gnorm < 1e-8, "phi lower solve stalled at {gnorm:.2e}");
            let proxy = LmModel { config: self.proxy0.config, params: theta_p };
            models::batch_ce_value(&proxy, &self.val, &pool).unwrap()
        }
    }

    /// CG on (H + rho I) x = b with a negative-curvature bailout.
    pub fn cg_solve(
        hvp: &mut dyn HvpFn,
        rho: f64,
        b: &ParamVector,
        max_iters: usize,
        tol: f64,
    ) -> ParamVector {
        let mut x = b.zeros_like();
        let mut r = b.clone();
        let mut d = r.clone();
        let mut rs = autodiff::dot(&r, &r).unwrap();
        for _ in 0..max_iters {
            if rs.sqrt() < tol {
                break;
            }
            let hd0 = hvp.apply(&d).unwrap();
            let hd = autodiff::axpy(rho, &d, &hd0).unwrap();
            let dhd = autodiff::dot(&d, &hd).unwrap();
            if dhd <= 0.0 {
                break;
            }
            let alpha = rs / dhd;
            x = autodiff::axpy(alpha, &d, &x).unwrap();
            r = autodiff::axpy(-alpha, &hd, &r).unwrap();
            let rs_new = autodiff::dot(&r, &r).unwrap();
            d = autodiff::axpy(rs_new / rs, &d, &r).unwrap();
            rs = rs_new;
        }
        x
    }

    pub fn power_lambda_max(hvp: &mut dyn HvpFn, like: &ParamVector, iters: usize) -> f64 {
        let n = like.num_params();
        let mut v = like
            .with_flat(&(0..n).map(|i| ((i * 37 % 13) as f64 - 6.0) / 13.0).collect::<Vec<_>>())
            .unwrap();
        v = autodiff::scale(1.0 / autodiff::norm(&v), &v);
        let mut lam = 1.0;
        for _ in 0..iters {
            let hv = hvp.apply(&v).unwrap();
            lam = autodiff::dot(&v, &hv).unwrap();
            let nn = autodiff::norm(&hv);
            if nn == 0.0 {
                break;
            }
            v = autodiff::scale(1.0 / nn, &hv);
        }
        lam
    }
}
