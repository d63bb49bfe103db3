//! Central-difference gradient oracle and the registry of checked ops.
//!
//! The oracle only ever runs forward passes, so it stays independent of the
//! vector-Jacobian products it is used to verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};

fn scalar_of(g: &Graph<'_>, y: Var, what: &str) -> Result<f64> {
    if g.data(y).len() != 1 {
        return Err(Error::NonScalarLoss(g.shape(y).to_vec()));
    }
    let v = g.item(y);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{what} evaluated to {v}")));
    }
    Ok(v)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Max over elements of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'static>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone().with_requires_grad(true));
        let y = f(&mut g, xv)?;
        scalar_of(&g, y, "grad_check f(x)")?;
        g.backward(y)?;
        g.grad(xv)
    };
    let eval = |xp: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(xp.clone());
        let y = f(&mut g, xv)?;
        scalar_of(&g, y, "grad_check f(x±eps)")
    };
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + eps;
        let fp = eval(&xp)?;
        xp.data_mut()[i] = orig - eps;
        let fm = eval(&xp)?;
        xp.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * eps)));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Scalar parameter entries that were perturbed.
    pub checked: usize,
    /// Size of the check set (all non-frozen entries).
    pub check_set: usize,
}

/// Gradient check over every non-frozen parameter of `store`.
///
/// `max_per_param` caps how many entries of each parameter are perturbed
/// (evenly spaced); `None` checks all of them.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64, max_per_param: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let y = f(&mut g)?;
        scalar_of(&g, y, "grad_check_params f")?;
        g.backward(y)?;
        g.param_grads()
    };
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let y = f(&mut g)?;
        scalar_of(&g, y, "grad_check_params f(±eps)")
    };
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, p)| (id, p.tensor.numel())).collect();
    let check_set = ids.iter().map(|(_, n)| n).sum();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (id, n) in ids {
        let analytic = grads
            .iter()
            .find(|(gid, _)| *gid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = match max_per_param {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = work.get(id)?.tensor.data()[i];
            work.get_mut(id)?.tensor.data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.get_mut(id)?.tensor.data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.get_mut(id)?.tensor.data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * eps)));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked,
        check_set,
    })
}

type Builder = fn(&mut Graph<'static>, &[Var]) -> Result<Var>;

/// A differentiable op together with the input shapes it is checked at.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<usize>>,
    /// Inputs are drawn from `[lo, hi)`.
    pub range: (f64, f64),
    pub build: Builder,
}

#[derive(Debug, Clone)]
pub struct OpSuiteResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

fn case(name: &'static str, inputs: &[&[usize]], build: Builder) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|s| s.to_vec()).collect(),
        range: (-1.0, 1.0),
        build,
    }
}

/// Every op exposed by [`Graph`] that carries a gradient.
pub fn registered_ops() -> Vec<OpCase> {
    let mut ops = vec![
        case("matmul", &[&[2, 3, 4], &[4, 5]], |g, x| g.matmul(x[0], x[1])),
        case("batch_matmul", &[&[2, 3, 4], &[2, 4, 2]], |g, x| g.matmul(x[0], x[1])),
        case("add", &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1])),
        case("sub", &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1])),
        case("add_row", &[&[3, 4], &[4]], |g, x| g.add_row(x[0], x[1])),
        case("mul_row", &[&[3, 4], &[4]], |g, x| g.mul_row(x[0], x[1])),
        case("scale", &[&[5]], |g, x| Ok(g.scale(x[0], -1.7))),
        case("add_scalar", &[&[5]], |g, x| Ok(g.add_scalar(x[0], 0.3))),
        case("transpose", &[&[2, 3, 4]], |g, x| g.transpose(x[0])),
        case("permute", &[&[2, 3, 4]], |g, x| g.permute(x[0], &[1, 2, 0])),
        case("reshape", &[&[2, 6]], |g, x| g.reshape(x[0], &[3, 4])),
        case("concat", &[&[2, 3], &[2, 1]], |g, x| g.concat(&[x[0], x[1]], 1)),
        case("slice", &[&[4, 3]], |g, x| g.slice(x[0], 0, 1, 3)),
        case("repeat", &[&[2, 1, 3]], |g, x| g.repeat(x[0], 1, 4)),
        case("gather_rows", &[&[5, 3]], |g, x| g.gather_rows(x[0], &[4, 0, 4, 2])),
        case("softmax", &[&[3, 5]], |g, x| Ok(g.softmax(x[0]))),
        case("layer_norm", &[&[4, 8], &[8], &[8]], |g, x| g.layer_norm(x[0], Some(x[1]), Some(x[2]), 1e-5)),
        case("gelu", &[&[6]], |g, x| Ok(g.gelu(x[0]))),
        case("silu", &[&[6]], |g, x| Ok(g.silu(x[0]))),
        case("sum", &[&[2, 3]], |g, x| Ok(g.sum(x[0]))),
        case("mean", &[&[2, 3]], |g, x| Ok(g.mean(x[0]))),
        case("mse", &[&[3, 4], &[3, 4]], |g, x| g.mse(x[0], x[1])),
        case("cosine_similarity", &[&[3, 6], &[3, 6]], |g, x| g.cosine_similarity(x[0], x[1])),
    ];
    let mut ts = case("timestep_embedding", &[&[3]], |g, x| g.timestep_embedding(x[0], 8));
    ts.range = (0.0, 1.0);
    ops.push(ts);
    ops
}

/// Checks each input of `op` at one random point; returns the worst error.
fn check_case(op: &OpCase, rng: &mut impl Rng, eps: f64) -> Result<f64> {
    let inputs: Vec<Tensor> = op
        .inputs
        .iter()
        .map(|s| Tensor::uniform(s.clone(), op.range.0, op.range.1, rng))
        .collect();
    // fixed random projection turns any output into a scalar
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = (op.build)(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let probe = Tensor::uniform(probe_shape, -1.0, 1.0, rng);
    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        let f = |g: &mut Graph<'static>, xv: Var| -> Result<Var> {
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| if i == which { xv } else { g.constant(t.clone()) })
                .collect();
            let y = (op.build)(g, &vars)?;
            let w = g.constant(probe.clone());
            let yw = g.mul(y, w)?;
            Ok(g.sum(yw))
        };
        worst = worst.max(grad_check(f, &inputs[which], eps)?);
    }
    Ok(worst)
}

/// Runs every registered op through `trials` random gradient checks.
pub fn run_op_suite(trials: usize, seed: u64, eps: f64) -> Result<Vec<OpSuiteResult>> {
    if trials == 0 {
        return Err(invalid("run_op_suite", "trials must be ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    registered_ops()
        .iter()
        .map(|op| {
            let mut worst = 0.0f64;
            for _ in 0..trials {
                worst = worst.max(check_case(op, &mut rng, eps)?);
            }
            Ok(OpSuiteResult {
                name: op.name,
                trials,
                max_rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([8], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_params_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let gamma = store.add("ln.gamma", Tensor::uniform([8], 0.5, 1.5, &mut rng)).unwrap();
        let beta = store.add("ln.beta", Tensor::uniform([8], -0.5, 0.5, &mut rng)).unwrap();
        let x = Tensor::uniform([4, 8], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform([4, 8], -1.0, 1.0, &mut rng);
        let report = grad_check_params(
            &store,
            |g| {
                let xv = g.constant(x.clone());
                let (gm, bt) = (g.param(gamma)?, g.param(beta)?);
                let y = g.layer_norm(xv, Some(gm), Some(bt), 1e-5)?;
                let wv = g.constant(w.clone());
                let yw = g.mul(y, wv)?;
                Ok(g.sum(yw))
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.check_set, 16);
    }

    #[test]
    fn frozen_params_leave_check_set() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full([3], 0.5)).unwrap();
        let b = store.add("b", Tensor::full([4], 0.25)).unwrap();
        let f = |g: &mut Graph<'_>| {
            let (va, vb) = (g.param(a)?, g.param(b)?);
            let (sa, sb) = (g.sum(va), g.sum(vb));
            let p = g.mul(sa, sb)?;
            Ok(p)
        };
        let full = grad_check_params(&store, f, 1e-5, None).unwrap();
        store.set_frozen("b", true);
        let part = grad_check_params(&store, f, 1e-5, None).unwrap();
        assert_eq!(full.check_set - part.check_set, 4);
        assert_eq!(part.checked, 3);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::full([2], 1.0);
        let r = grad_check(
            |g, x| {
                let y = g.scale(x, f64::INFINITY);
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
