//! Central finite-difference checking of recorded gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Denominator floor of [`rel_err`]: gradients smaller than this are
/// compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Result of comparing analytic and numeric gradients.
#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Checks the gradient of `f` with respect to every entry of every input.
/// Non-scalar outputs are reduced with fixed random weights first.
pub fn check_all<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> FdReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let picks: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_entries(inputs, &picks, eps, f)
}

/// Checks up to `per_input` randomly chosen entries of each input.
pub fn check_sampled<F>(inputs: &[Tensor<f64>], per_input: usize, seed: u64, eps: f64, f: F) -> FdReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.len() <= per_input {
                (0..t.len()).collect()
            } else {
                (0..per_input).map(|_| rng.random_range(0..t.len())).collect()
            }
        })
        .collect();
    check_entries(inputs, &picks, eps, f)
}

fn check_entries<F>(inputs: &[Tensor<f64>], picks: &[Vec<usize>], eps: f64, f: F) -> FdReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let weights = {
        let g = Graph::<f64>::inference();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars).value();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let w: Vec<f64> = (0..out.len()).map(|_| rng.random_range(0.5..1.5)).collect();
        Tensor::new(out.rows, out.cols, w)
    };
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let g = Graph::<f64>::inference();
        let vars: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars).value();
        out.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
    };
    let g = Graph::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward_seeded(out, weights.clone());

    let mut report = FdReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, pick) in picks.iter().enumerate() {
        let analytic = grads.of(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].rows, inputs[k].cols));
        for &e in pick {
            let orig = work[k].data[e];
            work[k].data[e] = orig + eps;
            let fp = eval(&work);
            work[k].data[e] = orig - eps;
            let fm = eval(&work);
            work[k].data[e] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data[e];
            let r = rel_err(a, numeric);
            report.checked += 1;
            if r > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(r);
                report.worst = Some((k, e, a, numeric));
            }
        }
    }
    report
}

/// Central difference of `f` at offset zero, refined by one Richardson step:
/// `(4·D(h/2) − D(h)) / 3` with `D(h) = (f(h) − f(−h)) / 2h`.
pub fn richardson_central(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let d = |s: f64| (f(s) - f(-s)) / (2.0 * s);
    (4.0 * d(h * 0.5) - d(h)) / 3.0
}
