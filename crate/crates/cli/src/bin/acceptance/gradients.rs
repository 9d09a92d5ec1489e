//! Finite-difference checks for every differentiable op and every loss.

use alfa_core::losses::{
    alignment_loss, classification_loss, cov_loss, kl_var, mine_semi_hard, mined_triplet_loss, soft_confusion_rows,
    specific_loss, ssl_triplet_loss, total_loss, LossWeights,
};
use alfa_core::model::layer_norm;
use alfa_core::tensor::{concat, grad_check, ParamSet};
use alfa_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const SEEDS: u64 = 100;
const TOLERANCE: f64 = 1e-5;
/// Central-difference step; smaller steps let f64 rounding dominate the
/// tiniest gradient entries.
const EPS: f64 = 1e-5;

type Case = (
    &'static str,
    Vec<usize>,
    for<'g> fn(&'g Graph, Var<'g>, u64) -> Result<Var<'g>>,
);

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Weighted sum with fixed random weights, so that every output element
/// contributes a distinct gradient.
fn weigh<'g>(g: &'g Graph, v: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let w = g.constant(random(&v.shape(), seed ^ 0x5eed));
    v.mul(w)?.sum()
}

fn op_cases() -> Vec<Case> {
    vec![
        ("matmul/lhs", vec![3, 4], |g, x, s| {
            let b = g.constant(random(&[4, 2], s + 1));
            weigh(g, x.matmul(b)?, s)
        }),
        ("matmul/rhs", vec![4, 2], |g, x, s| {
            let a = g.constant(random(&[3, 4], s + 1));
            weigh(g, a.matmul(x)?, s)
        }),
        ("add", vec![2, 3], |g, x, s| {
            weigh(g, x.add(g.constant(random(&[2, 3], s + 1)))?, s)
        }),
        ("sub", vec![2, 3], |g, x, s| {
            weigh(g, g.constant(random(&[2, 3], s + 1)).sub(x)?, s)
        }),
        ("mul", vec![2, 3], |g, x, s| {
            weigh(g, x.mul(g.constant(random(&[2, 3], s + 1)))?, s)
        }),
        ("mul/self", vec![2, 3], |g, x, s| weigh(g, x.mul(x)?, s)),
        ("add_row", vec![1, 3], |g, x, s| {
            weigh(g, g.constant(random(&[4, 3], s + 1)).add_row(x)?, s)
        }),
        ("mul_row/row", vec![1, 3], |g, x, s| {
            weigh(g, g.constant(random(&[4, 3], s + 1)).mul_row(x)?, s)
        }),
        ("mul_row/matrix", vec![4, 3], |g, x, s| {
            weigh(g, x.mul_row(g.constant(random(&[1, 3], s + 1)))?, s)
        }),
        ("scale", vec![2, 2], |g, x, s| weigh(g, x.scale(-1.7)?, s)),
        ("add_scalar", vec![2, 2], |g, x, s| {
            weigh(g, x.add_scalar(0.3)?.mul(x)?, s)
        }),
        ("relu", vec![3, 3], |g, x, s| weigh(g, x.relu()?, s)),
        ("hinge", vec![3, 3], |g, x, s| weigh(g, x.add_scalar(0.1)?.hinge()?, s)),
        ("log", vec![2, 3], |g, x, s| {
            weigh(g, x.mul(x)?.add_scalar(0.5)?.log()?, s)
        }),
        ("exp", vec![2, 3], |g, x, s| weigh(g, x.exp()?, s)),
        ("softmax", vec![3, 4], |g, x, s| weigh(g, x.scale(2.0)?.softmax()?, s)),
        ("log_softmax", vec![3, 4], |g, x, s| weigh(g, x.log_softmax()?, s)),
        ("sum", vec![2, 3], |_, x, _| x.mul(x)?.sum()),
        ("mean", vec![2, 3], |_, x, _| x.mul(x)?.mean()),
        ("sum_axis/0", vec![3, 2], |g, x, s| weigh(g, x.sum_axis(0)?, s)),
        ("sum_axis/1", vec![3, 2], |g, x, s| weigh(g, x.sum_axis(1)?, s)),
        ("mean_axis/0", vec![3, 2], |g, x, s| weigh(g, x.mean_axis(0)?, s)),
        ("mean_axis/1", vec![3, 2], |g, x, s| weigh(g, x.mean_axis(1)?, s)),
        ("row_norm", vec![3, 4], |g, x, s| weigh(g, x.row_norm()?, s)),
        ("frobenius_norm", vec![3, 4], |_, x, _| x.frobenius_norm()),
        ("concat", vec![3, 2], |g, x, s| {
            let b = g.constant(random(&[3, 3], s + 1));
            weigh(g, concat(&[b, x, x])?, s)
        }),
        ("center_batch", vec![4, 3], |g, x, s| weigh(g, x.center_batch()?, s)),
        ("normalize_rows", vec![3, 5], |g, x, s| {
            weigh(g, x.normalize_rows(1e-5)?, s)
        }),
        ("transpose", vec![2, 3], |g, x, s| weigh(g, x.transpose()?, s)),
        ("select_rows", vec![4, 2], |g, x, s| {
            weigh(g, x.select_rows(&[3, 0, 3, 1])?, s)
        }),
        ("pick", vec![3, 4], |g, x, s| weigh(g, x.pick(&[2, 0, 3])?, s)),
    ]
}

const PSEUDO_IDS: [usize; 6] = [0, 0, 1, 1, 2, 2];
const DOMAINS: [usize; 9] = [0, 0, 0, 1, 1, 1, 2, 2, 2];
const CLASSES: [usize; 9] = [0, 1, 0, 1, 0, 1, 1, 0, 0];

fn head(g: &Graph, d: usize, n_c: usize, seed: u64) -> alfa_core::tensor::BoundParams<'_> {
    let mut p = ParamSet::new();
    p.insert("head_beta.w", random(&[d, n_c], seed ^ 0x4ead));
    p.insert("head_beta.b", random(&[1, n_c], seed ^ 0xb1a5));
    p.bind(g, |_| false)
}

fn alignment<'g>(g: &'g Graph, z: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let p = head(g, z.shape()[1], 2, seed);
    let rows = soft_confusion_rows(&p, z, &CLASSES, &DOMAINS, 2.0)?;
    Ok(alignment_loss(g, &rows, 2, &LossWeights::default())?.loss)
}

fn mined<'g>(z: Var<'g>, seed: u64) -> Result<Var<'g>> {
    // Mining is a discrete choice made on the unperturbed point.
    let base = random(&z.shape(), seed);
    let triples = mine_semi_hard(&base, &PSEUDO_IDS, 0.7)?;
    mined_triplet_loss(z, &triples, 1.5)
}

fn distribution<'g>(g: &'g Graph, seed: u64) -> Var<'g> {
    g.constant(random(&[1, 4], seed + 7)).softmax().expect("finite")
}

fn loss_cases() -> Vec<Case> {
    vec![
        ("l_ssl/anchor", vec![4, 3], |g, x, s| {
            ssl_triplet_loss(
                x,
                g.constant(random(&[4, 3], s + 1)),
                g.constant(random(&[4, 3], s + 2)),
                1.5,
            )
        }),
        ("l_ssl/positive", vec![4, 3], |g, x, s| {
            ssl_triplet_loss(
                g.constant(random(&[4, 3], s + 1)),
                x,
                g.constant(random(&[4, 3], s + 2)),
                1.5,
            )
        }),
        ("l_ssl/negative", vec![4, 3], |g, x, s| {
            ssl_triplet_loss(
                g.constant(random(&[4, 3], s + 1)),
                g.constant(random(&[4, 3], s + 2)),
                x,
                1.5,
            )
        }),
        ("l_ssl/mined", vec![6, 3], |_, x, s| mined(x, s)),
        ("kl/p", vec![1, 4], |g, x, s| kl_var(x.softmax()?, distribution(g, s))),
        ("kl/q", vec![1, 4], |g, x, s| kl_var(distribution(g, s), x.softmax()?)),
        ("l_i", vec![9, 3], |g, x, s| alignment(g, x, s)),
        ("l_s", vec![5, 3], |_, x, _| specific_loss(x, &[0, 1, 2, 1, 0])),
        ("l_cov/first", vec![6, 3], |g, x, s| {
            cov_loss(x, g.constant(random(&[6, 2], s + 1)))
        }),
        ("l_cov/second", vec![6, 2], |g, x, s| {
            cov_loss(g.constant(random(&[6, 3], s + 1)), x)
        }),
        ("l_c", vec![5, 2], |_, x, _| classification_loss(x, &[0, 1, 1, 0, 1])),
        ("layer_norm/input", vec![4, 5], |g, x, s| {
            let gain = g.constant(random(&[1, 5], s + 1));
            let bias = g.constant(random(&[1, 5], s + 2));
            weigh(g, layer_norm(x, gain, bias, 1e-5)?, s)
        }),
        ("layer_norm/gain", vec![1, 5], |g, x, s| {
            let z = g.constant(random(&[4, 5], s + 1));
            weigh(g, layer_norm(z, x, g.constant(random(&[1, 5], s + 2)), 1e-5)?, s)
        }),
        ("layer_norm/bias", vec![1, 5], |g, x, s| {
            let z = g.constant(random(&[4, 5], s + 1));
            weigh(g, layer_norm(z, g.constant(random(&[1, 5], s + 2)), x, 1e-5)?, s)
        }),
        ("total", vec![9, 3], |g, x, s| {
            let proj = |k: u64| g.constant(random(&[3, 3], s + k));
            let six = x.select_rows(&[0, 1, 2, 3, 4, 5])?;
            let comps = [
                Some(mined(six, s)?),
                Some(alignment(g, x, s)?),
                Some(specific_loss(x.matmul(proj(1))?, &DOMAINS)?),
                Some(cov_loss(x, x.matmul(proj(2))?)?),
                Some(cov_loss(x, x.matmul(proj(3))?)?),
                Some(cov_loss(x.matmul(proj(2))?, x.matmul(proj(3))?)?),
                Some(classification_loss(x, &CLASSES)?),
            ];
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xa11);
            let a: [f64; 7] = std::array::from_fn(|_| rng.gen_range(0.1..2.0));
            Ok(total_loss(g, &comps, &a)?.0)
        }),
    ]
}

pub fn criterion() -> anyhow::Result<Verdict> {
    let cases: Vec<(bool, Case)> = op_cases()
        .into_iter()
        .map(|c| (false, c))
        .chain(loss_cases().into_iter().map(|c| (true, c)))
        .collect();
    let mut worst = (0.0f64, "", 0u64);
    let mut failures = Vec::new();
    for (_, (name, shape, build)) in &cases {
        for seed in 0..SEEDS {
            let x = random(shape, seed);
            let err = grad_check(|g, v| build(g, v, seed), &x, EPS)?;
            if err > worst.0 {
                worst = (err, name, seed);
            }
            // Written so that a NaN error counts as a failure.
            if err.is_nan() || err >= TOLERANCE {
                failures.push(format!("{name}@{seed}={err:.2e}"));
            }
        }
    }
    let n_ops = cases.iter().filter(|c| !c.0).count();
    let n_losses = cases.len() - n_ops;
    let mut detail = format!(
        "{n_ops} ops + {n_losses} loss cases x {SEEDS} seeds; max rel err {:.2e} ({} seed {}), tolerance {TOLERANCE:.0e}",
        worst.0, worst.1, worst.2
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; failing: {}", failures.join(" ")));
    }
    Ok(Verdict {
        pass: failures.is_empty(),
        detail,
    })
}
