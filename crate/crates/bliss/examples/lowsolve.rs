use bliss::autodiff::{self, ParamVector};
use bliss::bilevel::{self, HvpFn, LowerConfig, WeightingMode};
use bliss::data::{SampleBatch, TokenDataset};
use bliss::models::{LmModel, ModelFamily, ScoreModel};
use bliss::util::Pool;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch_of(cfg: &bliss::models::ModelConfig, n: usize, seed: u64) -> SampleBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..n * cfg.seq_len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
    let ds = TokenDataset::new(cfg.vocab_size, cfg.seq_len, tokens, None).unwrap();
    let idx: Vec<usize> = (0..n).collect();
    SampleBatch::gather(&ds, &idx).unwrap()
}

struct Inst {
    cfg: bliss::models::ModelConfig,
    proxy0: ParamVector,
    weights: Vec<f64>,
    train: SampleBatch,
    cache: bilevel::TeacherCache,
    lcfg: LowerConfig,
}

fn make(seed: u64) -> Inst {
    let cfg = bliss::models::ModelConfig {
        vocab_size: 6, seq_len: 4, d_model: 4, n_layers: 2, n_heads: 2,
        family: ModelFamily::Proxy,
    };
    let proxy0 = LmModel::init(cfg, seed).unwrap();
    let score = ScoreModel::init(cfg, seed + 1).unwrap();
    let mut tcfg = cfg; tcfg.family = ModelFamily::Target;
    let teacher = LmModel::init(tcfg, seed + 2).unwrap();
    let train = batch_of(&cfg, 4, seed + 3);
    let lcfg = LowerConfig { gamma: 0.1, lambda: 0.25, eta1: 0.2, inner_steps: 1 };
    let pool = Pool::serial();
    let mut tokens = Vec::new();
    for row in train.rows() { tokens.extend_from_slice(row); }
    let ds = TokenDataset::new(cfg.vocab_size, cfg.seq_len, tokens, None).unwrap();
    let cache = bilevel::TeacherCache::build(&teacher, &ds, &pool).unwrap();
    let weights = bilevel::batch_weights(&score, &train, WeightingMode::Softmax, &pool).unwrap().weights;
    Inst { cfg, proxy0: proxy0.params, weights, train, cache, lcfg }
}

fn grad(inst: &Inst, p: &ParamVector) -> (f64, ParamVector) {
    let pool = Pool::serial();
    let proxy = LmModel { config: inst.cfg, params: p.clone() };
    let e = bilevel::lower_grad(&proxy, &inst.weights, &inst.train, &inst.cache, &inst.lcfg, &pool).unwrap();
    (e.loss, e.grad)
}

fn lmax(inst: &Inst, p: &ParamVector) -> f64 {
    let pool = Pool::serial();
    let proxy = LmModel { config: inst.cfg, params: p.clone() };
    let mut hvp = bilevel::CompositeHvp::prepare(&proxy, &inst.weights, &inst.train, &inst.cache, &inst.lcfg, &pool).unwrap();
    let n = p.num_params();
    let mut v = p.with_flat(&(0..n).map(|i| ((i * 37 % 13) as f64 - 6.0) / 13.0).collect::<Vec<_>>()).unwrap();
    v = autodiff::scale(1.0 / autodiff::norm(&v), &v);
    let mut lam = 0.0;
    for _ in 0..60 {
        let hv = hvp.apply(&v).unwrap();
        lam = autodiff::dot(&v, &hv).unwrap();
        v = autodiff::scale(1.0 / autodiff::norm(&hv), &hv);
    }
    lam
}

// Adam to approach a basin
fn adam(inst: &Inst, p0: &ParamVector, steps: usize) -> (ParamVector, f64) {
    let mut p = p0.clone();
    let n = p.num_params();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (b1, b2, lr, eps) = (0.9, 0.999, 0.02, 1e-8);
    let mut gn = f64::NAN;
    for t in 1..=steps {
        let (_, g) = grad(inst, &p);
        gn = autodiff::norm(&g);
        let gf = g.flat();
        let mut pf = p.flat();
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * gf[i];
            v[i] = b2 * v[i] + (1.0 - b2) * gf[i] * gf[i];
            let mh = m[i] / (1.0 - b1f64.powi(t as i32));
            let vh = v[i] / (1.0 - b2f64.powi(t as i32));
            pf[i] -= lr * mh / (vh.sqrt() + eps);
        }
        p = p.with_flat(&pf).unwrap();
    }
    (p, gn)
}
use std::f64 as b1f64_mod;
#[allow(non_upper_case_globals)]
const b1f64: f64 = 0.9;
#[allow(non_upper_case_globals)]
const b2f64: f64 = 0.999;

fn main() {
    for seed in (0..200).step_by(20) {
        let inst = make(5000 + seed);
        let (p, gn) = adam(&inst, &inst.proxy0, 500);
        let lm = lmax(&inst, &p);
        println!("seed {}: after adam |g| {:.3e}, lambda_max {:.2}", 5000 + seed, gn, lm);
    }
    let _ = b1f64_mod::EPSILON;
}
