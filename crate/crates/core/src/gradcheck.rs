//! Finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::excitation::{
    action_graph, action_sum, ce_graph, me_graph, ste_graph, ActionVars, ActionWeights, CeVars, CeWeights, MeVars, MeWeights, SteVars,
    SteWeights,
};
use crate::optim::Parameter;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input and flat element where the worst error occurred.
    pub worst: (usize, usize),
    /// Analytic and central-difference values at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar function, got shape {:?}", v.shape())));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::Numeric(format!("function value {y} is not finite")));
    }
    Ok(y)
}

/// Compares the analytic gradient of the scalar function `f` against
/// five-point central differences, element by element over every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().zip(inputs).map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), worst_values: (0.0, 0.0), checked: 0 };
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            let mut at = |d: f64| -> Result<f64> {
                probe[i].data_mut()[j] = orig + d;
                eval(&f, &probe)
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            probe[i].data_mut()[j] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic[i].data()[j];
            if !a.is_finite() {
                return Err(Error::Numeric(format!("analytic gradient of input {i}[{j}] is {a}")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
                report.worst_values = (a, numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces an arbitrary tensor to a scalar through fixed random weights so
/// that every output element carries a distinct gradient.
pub fn project(g: &Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

/// Worst error of one operator at one shape configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub op: String,
    pub config: String,
    pub max_rel_error: f64,
    pub worst_values: (f64, f64),
    pub checked: usize,
}

fn check_projected<F>(op: &str, config: String, f: F, inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng) -> Result<SuiteEntry>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let probe = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.input(t.clone())).collect();
    let shape = probe.shape(f(&probe, &vars)?);
    let weights = Tensor::randn(&shape, 1.0, rng);
    let r = grad_check(|g, v| project(g, f(g, v)?, &weights), &inputs, DEFAULT_EPS)?;
    Ok(SuiteEntry { op: op.into(), config, max_rel_error: r.max_rel_error, worst_values: r.worst_values, checked: r.checked })
}

fn values(params: Vec<&Parameter<f64>>) -> Vec<Tensor<f64>> {
    params.into_iter().map(|p| p.value.clone()).collect()
}

/// (N, C_in, C_out, spatial, kernel, stride, pad) per rank.
fn conv_configs(rank: usize) -> [(usize, usize, usize, usize, usize, usize, usize); 5] {
    match rank {
        1 => [(1, 2, 2, 7, 3, 1, 1), (2, 4, 2, 6, 3, 2, 1), (1, 4, 4, 5, 1, 1, 0), (2, 2, 4, 8, 5, 1, 2), (1, 6, 3, 9, 3, 3, 0)],
        2 => [(1, 2, 2, 5, 3, 1, 1), (2, 4, 2, 4, 3, 2, 1), (1, 4, 4, 4, 1, 1, 0), (1, 2, 4, 6, 3, 1, 0), (2, 6, 3, 5, 3, 2, 1)],
        _ => [(1, 2, 2, 3, 3, 1, 1), (1, 4, 2, 4, 3, 2, 1), (2, 2, 2, 3, 1, 1, 0), (1, 2, 4, 4, 3, 1, 0), (1, 6, 3, 3, 3, 1, 1)],
    }
}

fn conv_entries(rank: usize, grouped: bool, rng: &mut ChaCha8Rng) -> Result<Vec<SuiteEntry>> {
    let op = format!("conv{rank}d{}", if grouped { "_grouped" } else { "" });
    let mut out = Vec::new();
    for (n, cin, cout, sp, k, stride, pad) in conv_configs(rank) {
        let groups = if grouped { gcd(cin, cout).max(2).min(cin) } else { 1 };
        let groups = if cin % groups == 0 && cout % groups == 0 { groups } else { 1 };
        let spec = ConvSpec::new(rank, &vec![stride; rank], &vec![pad; rank], groups)?;
        let mut xs = vec![n, cin];
        xs.extend(std::iter::repeat_n(sp, rank));
        let mut ws = vec![cout, cin / groups];
        ws.extend(std::iter::repeat_n(k, rank));
        let inputs = vec![Tensor::randn(&xs, 1.0, rng), Tensor::randn(&ws, 0.5, rng), Tensor::randn(&[cout], 0.5, rng)];
        let config = format!("x{xs:?} w{ws:?} stride {stride} pad {pad} groups {groups}");
        out.push(check_projected(&op, config, |g, v| g.conv(v[0], v[1], Some(v[2]), &spec), inputs, rng)?);
    }
    Ok(out)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// (N, T, C, H, W, ratio) for the excitation paths.
const EXCITATION_CONFIGS: [[usize; 6]; 5] =
    [[1, 2, 4, 3, 3, 2], [2, 3, 4, 2, 2, 4], [1, 4, 8, 2, 3, 4], [1, 3, 6, 3, 2, 16], [2, 2, 8, 2, 2, 3]];

/// Finite-difference check of every differentiable operator and path over
/// five shape configurations each.
pub fn suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for rank in 1..=3 {
        for grouped in [false, true] {
            out.extend(conv_entries(rank, grouped, &mut rng)?);
        }
    }
    for shape in [vec![5], vec![2, 3], vec![3, 1, 4], vec![2, 2, 2, 2], vec![1, 2, 3, 2, 2]] {
        let x = Tensor::randn(&shape, 2.0, &mut rng);
        out.push(check_projected("sigmoid", format!("x{shape:?}"), |g, v| Ok(g.sigmoid(v[0])), vec![x], &mut rng)?);
    }
    for (shape, axis, keep) in [
        (vec![4], 0, false),
        (vec![2, 3], 1, true),
        (vec![3, 2, 4], 0, false),
        (vec![2, 3, 2, 2], 2, true),
        (vec![1, 2, 3, 2, 2], 4, false),
    ] {
        let x = Tensor::randn(&shape, 1.0, &mut rng);
        let config = format!("x{shape:?} axis {axis} keepdim {keep}");
        out.push(check_projected("mean", config, |g, v| g.mean_axis(v[0], axis, keep), vec![x], &mut rng)?);
    }
    for [n, t, c, h, w, _] in EXCITATION_CONFIGS {
        let x = Tensor::randn(&[n, t, c, h, w], 1.0, &mut rng);
        let (mshape, label) = match c % 3 {
            0 => (vec![n, t, 1, h, w], "spatial"),
            1 => (vec![n, t, c, 1, 1], "channel"),
            _ => (vec![n, t, c, h, w], "full"),
        };
        let m = Tensor::uniform(&mshape, 0.05, 0.95, &mut rng);
        let config = format!("x{:?} mask{mshape:?} {label}", [n, t, c, h, w]);
        out.push(check_projected("broadcast_mul_add", config, |g, v| g.mask_residual(v[0], v[1]), vec![x, m], &mut rng)?);
    }
    for [n, t, c, h, w, r] in EXCITATION_CONFIGS {
        let shape = [n, t, c, h, w];
        let config = format!("x{shape:?} ratio {r}");
        let x = Tensor::randn(&shape, 1.0, &mut rng);

        let ste = SteWeights::<f64>::random(&mut rng);
        let mut inputs = vec![x.clone()];
        inputs.extend(values(ste.params().into_iter().map(|(_, p)| p).collect()));
        let f = |g: &Graph<f64>, v: &[Var]| Ok(ste_graph(g, v[0], &SteVars { k3d: v[1], bias: v[2] })?.y);
        out.push(check_projected("ste", config.clone(), f, inputs, &mut rng)?);

        let ce = CeWeights::<f64>::random(c, r, &mut rng);
        let mut inputs = vec![x.clone()];
        inputs.extend(values(ce.params().into_iter().map(|(_, p)| p).collect()));
        let f = |g: &Graph<f64>, v: &[Var]| Ok(ce_graph(g, v[0], &ce_vars(&v[1..7]))?.y);
        out.push(check_projected("ce", config.clone(), f, inputs, &mut rng)?);

        let me = MeWeights::<f64>::random(c, r, &mut rng);
        let mut inputs = vec![x.clone()];
        inputs.extend(values(me.params().into_iter().map(|(_, p)| p).collect()));
        let f = |g: &Graph<f64>, v: &[Var]| Ok(me_graph(g, v[0], &me_vars(&v[1..7]))?.y);
        out.push(check_projected("me", config.clone(), f, inputs, &mut rng)?);

        let action = ActionWeights::<f64>::random(c, r, &mut rng);
        let mut inputs = vec![x];
        inputs.extend(values(action.params().into_iter().map(|(_, p)| p).collect()));
        let f = |g: &Graph<f64>, v: &[Var]| {
            let w = ActionVars { ste: SteVars { k3d: v[1], bias: v[2] }, ce: ce_vars(&v[3..9]), me: me_vars(&v[9..15]) };
            action_sum(g, &action_graph(g, v[0], &w)?)
        };
        out.push(check_projected("action", config, f, inputs, &mut rng)?);
    }
    Ok(out)
}

fn ce_vars(v: &[Var]) -> CeVars {
    CeVars { k1: v[0], b1: v[1], k2: v[2], b2: v[3], k3: v[4], b3: v[5] }
}

fn me_vars(v: &[Var]) -> MeVars {
    MeVars { k1: v[0], b1: v[1], kd: v[2], bd: v[3], k3: v[4], b3: v[5] }
}

/// Largest error per operator, in first-seen order.
pub fn worst_per_op(entries: &[SuiteEntry]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for e in entries {
        match out.iter_mut().find(|(op, _)| *op == e.op) {
            Some((_, m)) => *m = m.max(e.max_rel_error),
            None => out.push((e.op.clone(), e.max_rel_error)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_has_unit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let r = grad_check(|g, v| Ok(g.sum_all(v[0])), &[x], DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[5, 2], 1.5, &mut rng);
        let r = grad_check(
            |g, v| {
                let s = g.sigmoid(v[0]);
                Ok(g.sum_all(s))
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_reported() {
        let x = Tensor::<f64>::from_f64(&[1], &[f64::INFINITY]).unwrap();
        let err = grad_check(|g, v| Ok(g.sum_all(v[0])), &[x], DEFAULT_EPS).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
