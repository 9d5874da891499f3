//! Gradient verification suite: every differentiable op in isolation, the
//! closed-form proxy-loss derivative, and the whole training objective.

use std::cell::RefCell;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Precision, RunConfig};
use super::model::{Model, ModelPlan};
use super::train::forward_seed;
use crate::autograd::check::{check_all, rel_err, richardson_central, FdReport};
use crate::autograd::{softmax_rows, with_sign_fault, Csr, Graph, MapDims, NeighborTable, ParamId, ParamStore, Real, Segments, Tensor, Var, NO_NEIGHBOR, OP_NAMES};
use crate::error::{Error, Result};
use crate::losses::{proxy_loss_from_distances, proxy_loss_grad_wrt_distance, proxy_loss_on_distances};
use crate::synthdata::{derive_rng, generate_sequence, NUM_CLASSES};

/// End-to-end tolerance at 64-bit precision.
pub const E2E_TOL_F64: f64 = 1e-4;
/// End-to-end tolerance when the check runs at 32-bit precision.
pub const E2E_TOL_F32: f64 = 5e-2;
pub const PROXY_ORACLE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Worst entry, free text.
    pub worst: String,
}

impl CheckResult {
    fn from_fd(name: impl Into<String>, r: &FdReport, tolerance: f64) -> Self {
        let worst = r.worst.map_or(String::new(), |(i, e, a, n)| format!("input {i} entry {e}: analytic {a:.6e} numeric {n:.6e}"));
        Self { name: name.into(), checked: r.checked, max_rel_err: r.max_rel_err, tolerance, passed: r.max_rel_err < tolerance, worst }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub warnings: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    /// One line per check.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let status = if r.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!("{status} {:<28} max_rel_err={:.3e} tol={:.0e} n={}", r.name, r.max_rel_err, r.tolerance, r.checked));
            if !r.passed {
                s.push_str(&format!("  [{}]", r.worst));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Scalar parameters sampled for the end-to-end check.
    pub e2e_params: usize,
    pub proxy_instances: usize,
    /// Negates the backward pass of this op for the whole run.
    pub inject_sign_error: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { seed: 0, e2e_params: 16, proxy_instances: 100, inject_sign_error: None }
    }
}

/// Runs the full suite. The end-to-end check records gradients at the
/// configured precision on [`gradient_scene`]; differences are always taken
/// in 64-bit, and 32-bit runs use [`E2E_TOL_F32`] and say so in the warnings.
pub fn run_gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    match &opts.inject_sign_error {
        Some(op) => {
            let op: &'static str = OP_NAMES.iter().find(|n| **n == op.as_str()).ok_or_else(|| Error::Config(format!("unknown op `{op}`; known ops: {}", OP_NAMES.join(", "))))?;
            with_sign_fault(op, || run_suite(cfg, opts))
        }
        None => run_suite(cfg, opts),
    }
}

fn run_suite(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport { results: op_checks(opts.seed), warnings: Vec::new() };
    report.results.push(proxy_oracle_check(opts.proxy_instances, opts.seed));
    report.results.push(proxy_autograd_check(opts.seed));
    let scene = gradient_scene(cfg);
    let cfg = &scene;
    let e2e = match cfg.model.precision {
        Precision::F64 => end_to_end_check::<f64>(cfg, opts.e2e_params, opts.seed, 1e-4, E2E_TOL_F64)?,
        Precision::F32 => {
            report.warnings.push(format!("64-bit precision is off: end-to-end tolerance loosened from {E2E_TOL_F64:.0e} to {E2E_TOL_F32:.0e}"));
            end_to_end_check::<f32>(cfg, opts.e2e_params, opts.seed, 1e-4, E2E_TOL_F32)?
        }
    };
    report.results.push(e2e);
    Ok(report)
}

/// Lateral extent (voxels) of the scene used by the end-to-end check.
pub const GRADIENT_SCENE_SIDE: usize = 16;

/// The configuration's model on a small scene: at most
/// [`GRADIENT_SCENE_SIDE`] voxels per lateral axis (centred on the ego
/// vehicle), three objects and 1024 rays. Fewer ReLU units and mask
/// boundaries sit within a finite-difference step of the evaluation point.
pub fn gradient_scene(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    let up = c.model.upsample.max(1);
    for a in 0..2 {
        let side = GRADIENT_SCENE_SIDE.max(up) / up * up;
        if c.data.grid_dims[a] > side {
            c.data.grid_dims[a] = side;
            c.data.grid_origin[a] = -(side as f64) * c.data.voxel_size / 2.0;
        }
    }
    c.data.n_objects = c.data.n_objects.min(3);
    c.data.lidar_rays = c.data.lidar_rays.min(1024);
    c
}

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor<f64> {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect())
}

fn op<F>(out: &mut Vec<CheckResult>, name: &str, inputs: &[Tensor<f64>], eps: f64, tol: f64, f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    out.push(CheckResult::from_fd(format!("op:{name}"), &check_all(inputs, eps, f), tol));
}

/// One finite-difference check per recorded op, each on a small random instance.
pub fn op_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05);
    let rng = &mut rng;
    let mut out = Vec::new();
    let o = &mut out;
    let a = rand_t(rng, 5, 4, 1.0);
    let b = rand_t(rng, 4, 3, 1.0);
    let c = rand_t(rng, 5, 4, 1.0);
    let row4 = rand_t(rng, 1, 4, 1.0);
    op(o, "matmul", &[a.clone(), b], 1e-6, 1e-6, |_, v| v[0].matmul(v[1]));
    op(o, "add", &[a.clone(), c.clone()], 1e-6, 1e-6, |_, v| v[0].add(v[1]));
    op(o, "sub", &[a.clone(), c.clone()], 1e-6, 1e-6, |_, v| v[0].sub(v[1]));
    op(o, "mul", &[a.clone(), c.clone()], 1e-6, 1e-6, |_, v| v[0].mul(v[1]));
    op(o, "add_row", &[a.clone(), row4.clone()], 1e-6, 1e-6, |_, v| v[0].add_row(v[1]));
    op(o, "scale", &[a.clone()], 1e-6, 1e-6, |_, v| v[0].scale(-0.7));
    op(o, "reshape", &[a.clone()], 1e-6, 1e-6, |_, v| v[0].reshape(10, 2));
    op(o, "add_scalar", &[a.clone()], 1e-6, 1e-6, |_, v| v[0].add_scalar(0.3));
    op(o, "relu", &[a.clone()], 1e-6, 1e-6, |_, v| v[0].relu());
    op(o, "sum", &[a.clone()], 1e-6, 1e-6, |_, v| v[0].sum());
    op(o, "softmax_rows", &[a.clone()], 1e-6, 1e-6, |_, v| v[0].softmax_rows());
    op(o, "log_softmax_rows", &[a.clone()], 1e-6, 1e-6, |_, v| v[0].log_softmax_rows());
    let beta = rand_t(rng, 1, 4, 1.0);
    op(o, "layer_norm_rows", &[a.clone(), row4.clone(), beta], 1e-6, 1e-5, |_, v| v[0].layer_norm_rows(v[1], v[2], 1e-5));
    let labels: Rc<[usize]> = vec![0, 3, 1, 1, 2].into();
    let l = labels.clone();
    op(o, "pick", &[a.clone()], 1e-6, 1e-6, move |_, v| v[0].pick(l.clone()));

    let p = softmax_rows(&rand_t(rng, 6, 4, 2.0));
    let q = softmax_rows(&rand_t(rng, 3, 4, 2.0));
    op(o, "hellinger_pairs", &[p.clone(), q], 1e-7, 1e-6, |_, v| v[0].hellinger_pairs(v[1]));
    let mut segs = Segments::new();
    segs.push([0, 5, 7]);
    segs.push([11]);
    segs.push([1, 2, 3, 4, 5]);
    let segs = Rc::new(segs);
    let x = rand_t(rng, 3, 4, 2.0);
    let s2 = segs.clone();
    op(o, "segment_logsumexp", &[x], 1e-6, 1e-6, move |_, v| v[0].segment_logsumexp(s2.clone()));
    let lab6: Rc<[usize]> = vec![0, 1, 1, 3, 0, 0].into();
    let l = lab6.clone();
    op(o, "lovasz_softmax", &[p.clone()], 1e-7, 1e-5, move |_, v| v[0].lovasz_softmax(l.clone()));
    let l = lab6.clone();
    op(o, "scal_geo", &[p.clone()], 1e-6, 1e-6, move |_, v| v[0].scal_geo(l.clone()));
    let l = lab6;
    op(o, "scal_sem", &[p], 1e-6, 1e-6, move |_, v| v[0].scal_sem(l.clone()));

    let base = rand_t(rng, 6, 3, 1.0);
    let src = rand_t(rng, 2, 3, 1.0);
    let row3 = rand_t(rng, 1, 3, 1.0);
    let gidx: Rc<[usize]> = vec![0, 5, 5, 2].into();
    op(o, "gather_rows", &[base.clone()], 1e-6, 1e-6, move |_, v| v[0].gather_rows(gidx.clone()));
    let sidx: Rc<[usize]> = vec![4, 1].into();
    op(o, "scatter_rows", &[base.clone(), src], 1e-6, 1e-6, move |_, v| v[0].scatter_rows(sidx.clone(), v[1]));
    op(o, "concat_rows", &[base.clone(), row3.clone()], 1e-6, 1e-6, |_, v| Var::concat_rows(&[v[0], v[1]]));
    op(o, "repeat_rows", &[row3], 1e-6, 1e-6, |_, v| v[0].repeat_rows(3));
    let mut csr = Csr::new(6);
    csr.push_row([(0, 0.5), (3, 0.25)]);
    csr.push_row([]);
    csr.push_row([(5, 2.0)]);
    let csr = Rc::new(csr);
    op(o, "sparse_combine", &[base], 1e-6, 1e-6, move |_, v| v[0].sparse_combine(csr.clone()));

    let n = 5;
    let idx = (0..n as i64)
        .flat_map(|s| (-1..=1).map(move |t| if (0..n as i64).contains(&(s + t)) { (s + t) as u32 } else { NO_NEIGHBOR }))
        .collect();
    let table = Rc::new(NeighborTable { n_in: n, k: 3, idx });
    let (x, w, bias) = (rand_t(rng, n, 2, 1.0), rand_t(rng, 6, 4, 1.0), rand_t(rng, 1, 4, 1.0));
    op(o, "neighbor_conv", &[x, w, bias], 1e-6, 1e-6, move |_, v| v[0].neighbor_conv(table.clone(), v[1], Some(v[2])));

    let dims = MapDims { width: 5, height: 4 };
    let (heads, points) = (2, 3);
    let value = rand_t(rng, 20, 4, 1.0);
    let refs: Rc<[[f64; 2]]> = (0..3).map(|_| [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)]).collect();
    let offsets = rand_t(rng, 3, heads * points * 2, 0.1);
    let attn = softmax_rows(&rand_t(rng, 3, heads * points, 1.0));
    op(o, "deform_sample", &[value, offsets, attn], 1e-7, 1e-5, move |_, v| v[0].deform_sample(dims, heads, points, refs.clone(), v[1], v[2]));

    let (qm, km, vm) = (rand_t(rng, 3, 4, 1.0), rand_t(rng, 5, 4, 1.0), rand_t(rng, 5, 4, 1.0));
    let mut segs = Segments::new();
    segs.push([0, 2, 4]);
    segs.push([]);
    segs.push([1, 3, 2]);
    let segs = Rc::new(segs);
    op(o, "segment_attention", &[qm, km, vm], 1e-6, 1e-6, move |_, x| x[0].segment_attention(x[1], x[2], segs.clone(), 2, 0.7));
    out
}

/// Random proxy-loss instance: distances from random features to a random
/// bank. Instance 0 has a single voxel; instance 1 has one voxel off the
/// majority label, so that label's negative set is a singleton.
fn proxy_instance(rng: &mut ChaCha8Rng, case: usize) -> (Tensor<f64>, Vec<usize>, f64, f64) {
    let n = match case {
        0 => 1,
        _ => rng.random_range(2..24),
    };
    let feats = softmax_rows(&rand_t(rng, n, NUM_CLASSES, 3.0));
    let bank = softmax_rows(&rand_t(rng, NUM_CLASSES, NUM_CLASSES, 3.0));
    let labels: Vec<usize> = match case {
        1 => {
            let major = rng.random_range(0..NUM_CLASSES);
            (0..n).map(|i| if i == 0 { (major + 1) % NUM_CLASSES } else { major }).collect()
        }
        _ => (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect(),
    };
    let g = Graph::<f64>::inference();
    let dist = g.constant(feats).hellinger_pairs(g.constant(bank)).value();
    ((*dist).clone(), labels, rng.random_range(0.5..8.0), rng.random_range(0.5..16.0))
}

/// Closed-form derivative against Richardson-refined central differences of
/// the loss itself.
pub fn proxy_oracle_check(instances: usize, seed: u64) -> CheckResult {
    let mut rng = derive_rng(seed, 41, 0, 0);
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for case in 0..instances {
        let (dist, labels, alpha, beta) = proxy_instance(&mut rng, case);
        let grad = proxy_loss_grad_wrt_distance(&dist, &labels, alpha, beta);
        for e in 0..dist.len() {
            let fd = richardson_central(
                |h| {
                    let mut d = dist.clone();
                    d.data[e] += h;
                    proxy_loss_from_distances(&d, &labels, alpha, beta)
                },
                4e-3,
            );
            let r = rel_err(grad.data[e], fd);
            checked += 1;
            if r > worst.0 || worst.1.is_empty() {
                worst = (r.max(worst.0), format!("instance {case} entry {e}: closed form {:.6e} numeric {fd:.6e}", grad.data[e]));
            }
        }
    }
    CheckResult { name: "proxy_loss:closed_form".into(), checked, max_rel_err: worst.0, tolerance: PROXY_ORACLE_TOL, passed: worst.0 < PROXY_ORACLE_TOL, worst: worst.1 }
}

/// Recorded proxy-loss gradient against the closed form.
pub fn proxy_autograd_check(seed: u64) -> CheckResult {
    let mut rng = derive_rng(seed, 42, 0, 0);
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for case in 0..20 {
        let (dist, labels, alpha, beta) = proxy_instance(&mut rng, case);
        let closed = proxy_loss_grad_wrt_distance(&dist, &labels, alpha, beta);
        let g = Graph::new();
        let d = g.leaf(dist.clone());
        let grads = g.backward(proxy_loss_on_distances(d, &labels, alpha, beta));
        let auto = grads.of(d).cloned().unwrap_or_else(|| Tensor::zeros(dist.rows, dist.cols));
        for (e, (&a, &c)) in auto.data.iter().zip(&closed.data).enumerate() {
            let r = rel_err(a, c);
            checked += 1;
            if r > worst.0 || worst.1.is_empty() {
                worst = (r.max(worst.0), format!("instance {case} entry {e}: recorded {a:.6e} closed form {c:.6e}"));
            }
        }
    }
    CheckResult { name: "proxy_loss:recorded".into(), checked, max_rel_err: worst.0, tolerance: 1e-9, passed: worst.0 < 1e-9, worst: worst.1 }
}

/// Picks `n` scalar parameters, cycling over modules (the first segment of
/// each parameter name) in random order so every module is represented.
pub fn sample_parameters<T: Real>(store: &ParamStore<T>, n: usize, rng: &mut impl Rng) -> Vec<(ParamId, usize)> {
    let mut modules: Vec<(String, Vec<ParamId>)> = Vec::new();
    for (id, name, _) in store.iter() {
        let m = name.split('.').next().unwrap_or(name).to_string();
        match modules.iter_mut().find(|(k, _)| *k == m) {
            Some((_, ids)) => ids.push(id),
            None => modules.push((m, vec![id])),
        }
    }
    modules.shuffle(rng);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let ids = &modules[k % modules.len()].1;
        let id = ids[rng.random_range(0..ids.len())];
        out.push((id, rng.random_range(0..store.get(id).len())));
    }
    out
}

/// Analytic and numeric derivative of one sampled scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Left and right derivatives, measured only when the central estimate
    /// disagrees with the recorded gradient.
    pub one_sided: Option<[f64; 2]>,
    /// Left/right gap above which the point counts as a kink (reporting only).
    pub tol: f64,
}

/// Denominator floor for end-to-end comparisons: gradients below it are
/// compared in absolute terms, since the loss itself carries round-off near
/// 1e-14 that no step size removes.
pub const E2E_GRAD_FLOOR: f64 = 1e-5;

fn e2e_rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(E2E_GRAD_FLOOR)
}

impl ParamProbe {
    /// Distance to the central estimate, or to the nearer one-sided
    /// derivative when those were measured. A wrong gradient disagrees with
    /// all three; a kink or a discrete mask change near the point spoils only
    /// some of them.
    pub fn rel_err(&self) -> f64 {
        let central = e2e_rel(self.analytic, self.numeric);
        match self.one_sided {
            Some([l, r]) => central.min(e2e_rel(self.analytic, l)).min(e2e_rel(self.analytic, r)),
            None => central,
        }
    }

    pub fn is_kink(&self) -> bool {
        self.one_sided.is_some_and(|[l, r]| e2e_rel(l, r) > self.tol)
    }
}



/// Number of steps in the ladder `h, h/√10, h/10, …`.
const STEPS: usize = 4;

/// Richardson-refined central differences over a ladder of [`STEPS`] steps
/// `h, h/√10, h/10, …`. Steps that straddle a kink or a discrete mask change disagree
/// with their neighbours, while too-small steps drown in round-off; the
/// estimate kept is the one closest to its next-smaller neighbour.
pub fn stable_derivative(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let steps: Vec<f64> = (0..STEPS).map(|i| h / 10f64.powf(i as f64 / 2.0)).collect();
    let est: Vec<f64> = steps.iter().map(|&s| richardson_central(&f, s)).collect();
    let best = (0..est.len() - 1).min_by(|&a, &b| (est[a] - est[a + 1]).abs().total_cmp(&(est[b] - est[b + 1]).abs())).expect("several steps");
    est[best]
}

/// One-sided second-order differences on the side `dir` (±1), with the
/// same step selection as [`stable_derivative`].
pub fn stable_one_sided(f: impl Fn(f64) -> f64, h: f64, dir: f64) -> f64 {
    let f0 = f(0.0);
    let est: Vec<f64> = (0..STEPS)
        .map(|i| {
            let s = dir * h / 10f64.powf(i as f64 / 2.0);
            (4.0 * f(s) - f(2.0 * s) - 3.0 * f0) / (2.0 * s)
        })
        .collect();
    let best = (0..est.len() - 1).min_by(|&a, &b| (est[a] - est[a + 1]).abs().total_cmp(&(est[b] - est[b + 1]).abs())).expect("several steps");
    est[best]
}

/// Recorded gradient (at precision `T`) and [`stable_derivative`] (64-bit,
/// largest step `h`) of the total loss of one generated sequence, for
/// `n_params` sampled scalars. One-sided derivatives are added for probes
/// whose central estimate misses `tol`.
pub fn end_to_end_probes<T: Real>(cfg: &RunConfig, n_params: usize, seed: u64, h: f64, tol: f64) -> Result<Vec<ParamProbe>> {
    let eff = cfg.effective();
    let frames = generate_sequence(&eff.data.scene_spec(eff.data.sequence_seed(0))?)?;
    let mut store = ParamStore::<T>::new();
    let model = Model::new(&mut store, &eff, &mut derive_rng(seed, 43, 0, 0));
    let fseed = forward_seed(&eff, 0, 0);
    let picks = sample_parameters(&store, n_params, &mut derive_rng(seed, 44, 0, 0));

    let g = Graph::new();
    let out = model.forward(&g, &store, &ModelPlan::<T>::new(&eff)?, &eff, &frames, fseed)?;
    let (loss, _) = model.sample_loss(&g, &store, &eff, &out, &frames, 0, 0)?;
    let grads = g.backward(loss);

    let plan = ModelPlan::<f64>::new(&eff)?;
    let base = store.cast::<f64>();
    let mut probes = Vec::with_capacity(picks.len());
    for &(id, e) in &picks {
        let analytic = grads.param(id).map_or(0.0, |t| t.data[e].f64());
        let work = RefCell::new(base.clone());
        let orig = base.get(id).data[e];
        let failure = RefCell::new(None);
        let f = |dx: f64| {
            work.borrow_mut().get_mut(id).data[e] = orig + dx;
            let work = work.borrow();
            let g = Graph::inference();
            let r = model.forward(&g, &work, &plan, &eff, &frames, fseed).and_then(|o| model.sample_loss(&g, &work, &eff, &o, &frames, 0, 0));
            match r {
                Ok((l, _)) => l.item(),
                Err(err) => {
                    failure.borrow_mut().get_or_insert(err.to_string());
                    f64::NAN
                }
            }
        };
        let numeric = stable_derivative(&f, h);
        let one_sided = (e2e_rel(analytic, numeric) >= tol).then(|| [stable_one_sided(&f, h, -1.0), stable_one_sided(&f, h, 1.0)]);
        if let Some(err) = failure.into_inner() {
            return Err(Error::invalid(format!("end-to-end check: {err}")));
        }
        probes.push(ParamProbe { name: store.name(id).to_string(), index: e, analytic, numeric, one_sided, tol });
    }
    Ok(probes)
}

/// [`end_to_end_probes`] summarised against `tol`.
pub fn end_to_end_check<T: Real>(cfg: &RunConfig, n_params: usize, seed: u64, h: f64, tol: f64) -> Result<CheckResult> {
    let probes = end_to_end_probes::<T>(cfg, n_params, seed, h, tol)?;
    let kinks = probes.iter().filter(|p| p.is_kink()).count();
    let worst = probes.iter().max_by(|a, b| a.rel_err().total_cmp(&b.rel_err())).expect("at least one probe");
    let max = worst.rel_err();
    Ok(CheckResult {
        name: format!("end_to_end:{}", T::DTYPE),
        checked: probes.len(),
        max_rel_err: max,
        tolerance: tol,
        passed: max < tol,
        worst: format!("{}[{}]: analytic {:.6e} numeric {:.6e}; {kinks} probe(s) at kinks, matched one-sided", worst.name, worst.index, worst.analytic, worst.numeric),
    })
}
