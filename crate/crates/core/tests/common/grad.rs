//! Central finite differences against reverse-mode gradients.
//!
//! Error metric: `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.

use lmvae_core::autodiff::{Activation, Graph, Mlp, ParamId, ParamStore, Var};
use lmvae_core::data::one_hot;
use lmvae_core::discrete::{
    categorical_kl_uniform_per_sample, cross_entropy, relax, sample_gumbel, semi_supervised_loss,
    supervised_elbo, unlabeled_elbo, SemiSupervisedBatch,
};
use lmvae_core::mixture::weighted_objective;
use lmvae_core::vae::{
    gaussian_kl, gaussian_log_likelihood, reparameterize, sample_noise, DisentangleSchedule,
    ExpertArch, VaeExpert,
};
use lmvae_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const CORE_TOL: f64 = 1e-4;
pub const GUMBEL_TOL: f64 = 1e-3;
pub const SEEDS: u64 = 20;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Reduces any node to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let w = uniform(
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        &shape,
        0.5,
        1.5,
    );
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

type InputFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Max error over every element of every input.
pub fn check_inputs(f: &InputFn<'_>, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
        })
        .collect();
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let x0 = t.data()[i];
            work[k].data_mut()[i] = x0 + H;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - H;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            worst = worst.max(rel_err(analytic[k].data()[i], (up - down) / (2.0 * H)));
        }
    }
    Ok(worst)
}

type ParamFn<'a> = dyn Fn(&mut Graph, &ParamStore) -> Result<Var> + 'a;

/// Max error over every element of the listed parameters.
pub fn check_params(store: &mut ParamStore, ids: &[ParamId], f: &ParamFn<'_>) -> Result<f64> {
    store.clear_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    store.accumulate_grads(&g);
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| {
            store
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
        })
        .collect();
    store.clear_grads();
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        Ok(g.scalar(loss))
    };
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        let original = store.value(id).clone();
        for i in 0..original.len() {
            let mut t = original.clone();
            t.data_mut()[i] += H;
            store.set_value(id, t.clone())?;
            let up = eval(store)?;
            t.data_mut()[i] -= 2.0 * H;
            store.set_value(id, t)?;
            let down = eval(store)?;
            worst = worst.max(rel_err(analytic[k].data()[i], (up - down) / (2.0 * H)));
        }
        store.set_value(id, original)?;
    }
    Ok(worst)
}

pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    /// Worst relative error for one seed.
    pub run: fn(u64) -> Result<f64>,
}

fn unary(seed: u64, lo: f64, hi: f64, op: fn(&mut Graph, Var) -> Var) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[3, 4], lo, hi);
    check_inputs(
        &|g, v| {
            let out = op(g, v[0]);
            project(g, out, seed)
        },
        &[x],
    )
}

fn binary(
    seed: u64,
    a: &[usize],
    b: &[usize],
    op: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, a, -2.0, 2.0);
    let y = uniform(&mut rng, b, -2.0, 2.0);
    check_inputs(
        &|g, v| {
            let out = op(g, v[0], v[1])?;
            project(g, out, seed)
        },
        &[x, y],
    )
}

fn tiny_arch(classes: Option<usize>) -> ExpertArch {
    ExpertArch {
        input_dim: 5,
        latent_dim: 2,
        hidden: vec![4],
        classes,
        output: Activation::Logistic,
    }
}

struct Fixture {
    store: ParamStore,
    experts: Vec<VaeExpert>,
    x: Tensor,
    noise: Tensor,
    labels: Tensor,
    rng: ChaCha8Rng,
}

fn fixture(seed: u64, k: usize, classes: Option<usize>) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let arch = tiny_arch(classes);
    let experts = (0..k)
        .map(|i| VaeExpert::new(&mut store, i, &arch, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let x = uniform(&mut rng, &[3, 5], 0.0, 1.0);
    let noise = sample_noise(&mut rng, 3, 2);
    let c = classes.unwrap_or(1);
    let picked: Vec<usize> = (0..3).map(|_| rng.random_range(0..c)).collect();
    let labels = one_hot(&picked, c)?;
    Ok(Fixture {
        store,
        experts,
        x,
        noise,
        labels,
        rng,
    })
}

fn all_params(f: &Fixture) -> Vec<ParamId> {
    f.experts.iter().flat_map(|e| e.params()).collect()
}

fn random_weights(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|r| r / s).collect()
}

fn elbo_case(seed: u64) -> Result<f64> {
    let mut f = fixture(seed, 1, None)?;
    let beta = f.rng.random_range(0.01..1.0);
    let (e, x, n) = (f.experts[0].clone(), f.x.clone(), f.noise.clone());
    let ids = all_params(&f);
    check_params(&mut f.store, &ids, &|g, s| {
        let (x, n) = (g.constant(x.clone()), g.constant(n.clone()));
        Ok(e.elbo(g, s, x, n, beta)?.elbo)
    })
}

fn melbo_case(seed: u64) -> Result<f64> {
    let mut f = fixture(seed, 3, None)?;
    let w = random_weights(&mut f.rng, 3);
    let (experts, x, n) = (f.experts.clone(), f.x.clone(), f.noise.clone());
    let ids = all_params(&f);
    check_params(&mut f.store, &ids, &|g, s| {
        let (x, n) = (g.constant(x.clone()), g.constant(n.clone()));
        weighted_objective(g, &experts, &w, |e, g| Ok(e.elbo(g, s, x, n, 1.0)?.elbo))
    })
}

fn disentangled_case(seed: u64) -> Result<f64> {
    let mut f = fixture(seed, 1, None)?;
    let progress = f.rng.random_range(0.0..1.0);
    let sched = DisentangleSchedule::new(4.0, 0.5, 25.0)?.with_progress(progress)?;
    let (e, x, n) = (f.experts[0].clone(), f.x.clone(), f.noise.clone());
    let ids = all_params(&f);
    check_params(&mut f.store, &ids, &|g, s| {
        let (x, n) = (g.constant(x.clone()), g.constant(n.clone()));
        e.disentangled_objective(g, s, x, n, &sched)
    })
}

fn supervised_case(seed: u64) -> Result<f64> {
    let mut f = fixture(seed, 2, Some(3))?;
    let w = random_weights(&mut f.rng, 2);
    let (experts, x, n, y) = (
        f.experts.clone(),
        f.x.clone(),
        f.noise.clone(),
        f.labels.clone(),
    );
    let ids = all_params(&f);
    check_params(&mut f.store, &ids, &|g, s| {
        let (x, n) = (g.constant(x.clone()), g.constant(n.clone()));
        weighted_objective(g, &experts, &w, |e, g| supervised_elbo(e, g, s, x, n, &y))
    })
}

fn cross_entropy_case(seed: u64) -> Result<f64> {
    let mut f = fixture(seed, 1, Some(3))?;
    let (e, x, y) = (f.experts[0].clone(), f.x.clone(), f.labels.clone());
    let ids = e.class_encoder().expect("class encoder").network().params();
    check_params(&mut f.store, &ids, &|g, s| {
        let x = g.constant(x.clone());
        cross_entropy(&e, g, s, x, &y)
    })
}

fn unlabeled_case(seed: u64) -> Result<f64> {
    let mut f = fixture(seed, 1, Some(3))?;
    let gumbel = sample_gumbel(&mut f.rng, 3, 3);
    let t = f.rng.random_range(0.5..1.0);
    let (e, x, n) = (f.experts[0].clone(), f.x.clone(), f.noise.clone());
    let ids = all_params(&f);
    check_params(&mut f.store, &ids, &|g, s| {
        let (x, n) = (g.constant(x.clone()), g.constant(n.clone()));
        unlabeled_elbo(&e, g, s, x, n, &gumbel, t)
    })
}

fn semi_case(seed: u64) -> Result<f64> {
    let mut f = fixture(seed, 2, Some(3))?;
    let w = random_weights(&mut f.rng, 2);
    let unlabeled = uniform(&mut f.rng, &[4, 5], 0.0, 1.0);
    let batch = SemiSupervisedBatch::new(f.x.clone(), f.labels.clone(), unlabeled)?;
    let experts = f.experts.clone();
    let ids = all_params(&f);
    check_params(&mut f.store, &ids, &|g, s| {
        // Same noise on every evaluation.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        semi_supervised_loss(&experts, &w, g, s, &batch, 0.5, 0.7, &mut rng)
    })
}

fn mlp_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let acts = [
        Activation::LeakyRelu,
        Activation::Tanh,
        Activation::Logistic,
    ];
    let hidden = acts[seed as usize % 3];
    let mlp = Mlp::new(
        &mut store,
        "m",
        &[4, 5, 3],
        hidden,
        Activation::Softmax,
        &mut rng,
    )?;
    let x = uniform(&mut rng, &[2, 4], -2.0, 2.0);
    let ids = mlp.params();
    check_params(&mut store, &ids, &|g, s| {
        let x = g.constant(x.clone());
        let out = mlp.forward(g, s, x)?;
        project(g, out, seed)
    })
}

pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "matmul",
            tol: CORE_TOL,
            run: |s| binary(s, &[3, 4], &[4, 2], |g, a, b| g.matmul(a, b)),
        },
        GradCase {
            name: "add_row",
            tol: CORE_TOL,
            run: |s| binary(s, &[3, 4], &[4], |g, a, b| g.add_row(a, b)),
        },
        GradCase {
            name: "add",
            tol: CORE_TOL,
            run: |s| binary(s, &[3, 4], &[3, 4], |g, a, b| g.add(a, b)),
        },
        GradCase {
            name: "sub",
            tol: CORE_TOL,
            run: |s| binary(s, &[3, 4], &[3, 4], |g, a, b| g.sub(a, b)),
        },
        GradCase {
            name: "mul",
            tol: CORE_TOL,
            run: |s| binary(s, &[3, 4], &[3, 4], |g, a, b| g.mul(a, b)),
        },
        GradCase {
            name: "concat_cols",
            tol: CORE_TOL,
            run: |s| binary(s, &[3, 2], &[3, 3], |g, a, b| g.concat_cols(a, b)),
        },
        GradCase {
            name: "weighted_sum",
            tol: CORE_TOL,
            run: |s| {
                binary(s, &[3, 4], &[3, 4], |g, a, b| {
                    g.weighted_sum(&[(a, 0.3), (b, -1.7)])
                })
            },
        },
        GradCase {
            name: "scale",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.scale(a, -2.5)),
        },
        GradCase {
            name: "add_scalar",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.add_scalar(a, 0.75)),
        },
        GradCase {
            name: "exp",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.exp(a)),
        },
        GradCase {
            name: "log",
            tol: CORE_TOL,
            run: |s| unary(s, 0.1, 2.0, |g, a| g.log(a)),
        },
        GradCase {
            name: "square",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.square(a)),
        },
        GradCase {
            name: "abs",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.abs(a)),
        },
        GradCase {
            name: "tanh",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.tanh(a)),
        },
        GradCase {
            name: "sigmoid",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.sigmoid(a)),
        },
        GradCase {
            name: "leaky_relu",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.leaky_relu(a, 0.01)),
        },
        GradCase {
            name: "clamp_min",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.clamp_min(a, 0.0)),
        },
        GradCase {
            name: "softmax",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.softmax(a)),
        },
        GradCase {
            name: "log_softmax",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.log_softmax(a)),
        },
        GradCase {
            name: "sum",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.sum(a)),
        },
        GradCase {
            name: "mean",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.mean(a)),
        },
        GradCase {
            name: "sum_cols",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.sum_cols(a).unwrap()),
        },
        GradCase {
            name: "slice_cols",
            tol: CORE_TOL,
            run: |s| unary(s, -2.0, 2.0, |g, a| g.slice_cols(a, 1, 3).unwrap()),
        },
        GradCase {
            name: "mlp_forward",
            tol: CORE_TOL,
            run: mlp_case,
        },
    ]
}

pub fn latent_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "reparameterize",
            tol: CORE_TOL,
            run: |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let shape = [3, 2];
                let ins = [
                    uniform(&mut rng, &shape, -2.0, 2.0),
                    uniform(&mut rng, &shape, -2.0, 2.0),
                    uniform(&mut rng, &shape, -2.0, 2.0),
                ];
                check_inputs(
                    &|g, v| {
                        let z = reparameterize(g, v[0], v[1], v[2])?;
                        project(g, z, s)
                    },
                    &ins,
                )
            },
        },
        GradCase {
            name: "gaussian_kl",
            tol: CORE_TOL,
            run: |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let ins = [
                    uniform(&mut rng, &[3, 2], -2.0, 2.0),
                    uniform(&mut rng, &[3, 2], -2.0, 2.0),
                ];
                check_inputs(&|g, v| gaussian_kl(g, v[0], v[1]), &ins)
            },
        },
        GradCase {
            name: "gaussian_log_likelihood",
            tol: CORE_TOL,
            run: |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let ins = [
                    uniform(&mut rng, &[3, 4], 0.0, 1.0),
                    uniform(&mut rng, &[3, 4], -2.0, 2.0),
                ];
                check_inputs(
                    &|g, v| {
                        let l = gaussian_log_likelihood(g, v[0], v[1])?;
                        project(g, l, s)
                    },
                    &ins,
                )
            },
        },
        GradCase {
            name: "categorical_kl_uniform",
            tol: CORE_TOL,
            run: |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let logits = uniform(&mut rng, &[3, 4], -2.0, 2.0);
                check_inputs(
                    &|g, v| {
                        let p = g.softmax(v[0]);
                        let k = categorical_kl_uniform_per_sample(g, p)?;
                        project(g, k, s)
                    },
                    &[logits],
                )
            },
        },
        GradCase {
            name: "gumbel_relax",
            tol: GUMBEL_TOL,
            run: |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let logits = uniform(&mut rng, &[3, 4], -2.0, 2.0);
                let noise = sample_gumbel(&mut rng, 3, 4);
                let t = rng.random_range(0.5..1.0);
                check_inputs(
                    &|g, v| {
                        let p = g.softmax(v[0]);
                        let d = relax(g, p, &noise, t)?;
                        project(g, d, s)
                    },
                    &[logits],
                )
            },
        },
    ]
}

pub fn loss_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "elbo",
            tol: CORE_TOL,
            run: elbo_case,
        },
        GradCase {
            name: "melbo",
            tol: CORE_TOL,
            run: melbo_case,
        },
        GradCase {
            name: "disentangled",
            tol: CORE_TOL,
            run: disentangled_case,
        },
        GradCase {
            name: "supervised_elbo",
            tol: CORE_TOL,
            run: supervised_case,
        },
        GradCase {
            name: "cross_entropy",
            tol: CORE_TOL,
            run: cross_entropy_case,
        },
        GradCase {
            name: "unlabeled_elbo",
            tol: GUMBEL_TOL,
            run: unlabeled_case,
        },
        GradCase {
            name: "semi_supervised",
            tol: GUMBEL_TOL,
            run: semi_case,
        },
    ]
}

pub fn all_cases() -> Vec<GradCase> {
    let mut v = primitive_cases();
    v.extend(latent_cases());
    v.extend(loss_cases());
    v
}

/// Worst error over `SEEDS` seeds per case, in case order.
pub fn run_cases(cases: &[GradCase]) -> Vec<(&'static str, f64, f64)> {
    cases
        .iter()
        .map(|c| {
            let worst = (0..SEEDS)
                .map(|s| (c.run)(1000 + s).unwrap_or_else(|e| panic!("{}: {e}", c.name)))
                .fold(0.0, f64::max);
            (c.name, worst, c.tol)
        })
        .collect()
}
