//! Occupancy proxy loss over Hellinger distances to learnable category
//! proxies, the auxiliary segmentation losses and their total.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_into, Graph, ParamId, ParamStore, Real, Segments, Tensor, Var};
use crate::error::{Error, Result};
use crate::synthdata::NUM_CLASSES;

/// Softmax of `v`.
pub fn to_distribution(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    out
}

/// Tolerance on the total mass of a distribution accepted by [`hellinger`].
pub const DIST_TOL: f64 = 1e-9;

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::invalid(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(Error::invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `‖√p − √q‖₂ / √2`.
pub fn hellinger(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!("distribution lengths differ: {} vs {}", p.len(), q.len())));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let ss: f64 = p.iter().zip(q).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    Ok((ss * 0.5).sqrt().min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Voxels per sample entering the proxy loss.
    pub proxy_max_voxels: usize,
    /// Weight of the cross-entropy on the entropy-proposal heads.
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 6.0, beta: 12.0, proxy_max_voxels: 4096, aux_weight: 0.25 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config(format!("loss.alpha and loss.beta must be positive, got {} and {}", self.alpha, self.beta)));
        }
        if self.proxy_max_voxels == 0 {
            return Err(Error::Config("loss.proxy_max_voxels must be >= 1".into()));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::Config("loss.aux_weight must be a non-negative number".into()));
        }
        Ok(())
    }
}

/// Learnable proxies, one `NUM_CLASSES`-vector per category including empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyBank {
    pub vectors: ParamId,
}

pub const PROXY_INIT_STD: f64 = 0.1;

impl ProxyBank {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, PROXY_INIT_STD).expect("valid std");
        let data = (0..NUM_CLASSES * NUM_CLASSES).map(|_| T::c(normal.sample(rng))).collect();
        Self { vectors: store.add("proxies", Tensor::new(NUM_CLASSES, NUM_CLASSES, data)) }
    }
}

/// Positive and negative voxel sets of every category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProxyPartition {
    pub positive: Vec<Vec<usize>>,
    pub negative: Vec<Vec<usize>>,
}

impl ProxyPartition {
    pub fn new(labels: &[usize], n_categories: usize) -> Self {
        let mut positive = vec![Vec::new(); n_categories];
        let mut negative = vec![Vec::new(); n_categories];
        for (v, &l) in labels.iter().enumerate() {
            assert!(l < n_categories, "label {l} out of range");
            for s in 0..n_categories {
                if s == l {
                    positive[s].push(v);
                } else {
                    negative[s].push(v);
                }
            }
        }
        Self { positive, negative }
    }

    pub fn in_positive(&self, s: usize) -> bool {
        !self.positive[s].is_empty()
    }

    pub fn in_negative(&self, s: usize) -> bool {
        !self.negative[s].is_empty()
    }
}

fn logsumexp(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Proxy loss evaluated directly on a distance matrix `dist[v, s]`.
pub fn proxy_loss_from_distances(dist: &Tensor<f64>, labels: &[usize], alpha: f64, beta: f64) -> f64 {
    let (n, s_count) = dist.shape();
    assert_eq!(labels.len(), n);
    let part = ProxyPartition::new(labels, s_count);
    let mut total = 0.0;
    for s in 0..s_count {
        if part.in_positive(s) {
            total += logsumexp(part.positive[s].iter().map(|&v| alpha * dist.at(v, s)));
        }
        if part.in_negative(s) {
            total += logsumexp(part.negative[s].iter().map(|&v| -beta * dist.at(v, s)));
        }
    }
    total / s_count as f64
}

/// Closed-form derivative of the proxy loss with respect to every distance.
pub fn proxy_loss_grad_wrt_distance(dist: &Tensor<f64>, labels: &[usize], alpha: f64, beta: f64) -> Tensor<f64> {
    let (n, s_count) = dist.shape();
    let part = ProxyPartition::new(labels, s_count);
    let h = s_count as f64;
    let mut grad = Tensor::zeros(n, s_count);
    for s in 0..s_count {
        if part.in_positive(s) {
            let lse = logsumexp(part.positive[s].iter().map(|&v| alpha * dist.at(v, s)));
            for &v in &part.positive[s] {
                grad.data[v * s_count + s] = alpha / h * (alpha * dist.at(v, s) - lse).exp();
            }
        }
        if part.in_negative(s) {
            let lse = logsumexp(part.negative[s].iter().map(|&v| -beta * dist.at(v, s)));
            for &v in &part.negative[s] {
                grad.data[v * s_count + s] = -beta / h * (-beta * dist.at(v, s) - lse).exp();
            }
        }
    }
    grad
}

/// Proxy loss on a recorded distance matrix.
pub fn proxy_loss_on_distances<'g, T: Real>(dist: Var<'g, T>, labels: &[usize], alpha: f64, beta: f64) -> Var<'g, T> {
    let g = dist.graph();
    let (n, s_count) = dist.shape();
    assert_eq!(labels.len(), n);
    let coef: Vec<T> = (0..n * s_count).map(|e| if labels[e / s_count] == e % s_count { T::c(alpha) } else { T::c(-beta) }).collect();
    let scaled = dist.mul(g.constant(Tensor::new(n, s_count, coef)));
    let part = ProxyPartition::new(labels, s_count);
    let mut segs = Segments::new();
    for s in 0..s_count {
        if part.in_positive(s) {
            segs.push(part.positive[s].iter().map(|&v| v * s_count + s));
        }
        if part.in_negative(s) {
            segs.push(part.negative[s].iter().map(|&v| v * s_count + s));
        }
    }
    if segs.is_empty() {
        return g.constant(Tensor::scalar(T::zero()));
    }
    scaled.segment_logsumexp(Rc::new(segs)).sum().scale(T::c(1.0 / s_count as f64))
}

/// Hellinger distances between softmaxed per-voxel logits and softmaxed proxies.
pub fn proxy_distances<'g, T: Real>(g: &'g Graph<T>, store: &ParamStore<T>, bank: &ProxyBank, logits: Var<'g, T>) -> Var<'g, T> {
    let proxies = g.param(store, bank.vectors).softmax_rows();
    logits.softmax_rows().hellinger_pairs(proxies)
}

pub fn proxy_loss<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    bank: &ProxyBank,
    logits: Var<'g, T>,
    labels: &[usize],
    alpha: f64,
    beta: f64,
) -> Var<'g, T> {
    proxy_loss_on_distances(proxy_distances(g, store, bank, logits), labels, alpha, beta)
}

/// At most `max` voxel indices (ascending) with every present category kept.
pub fn proxy_subsample(labels: &[usize], max: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = labels.len();
    if n <= max {
        return (0..n).collect();
    }
    let mut by_cat: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (v, &l) in labels.iter().enumerate() {
        by_cat[l].push(v);
    }
    let mut keep = vec![false; n];
    let mut count = 0;
    for members in by_cat.iter().filter(|m| !m.is_empty()) {
        if count < max {
            keep[members[rng.random_range(0..members.len())]] = true;
            count += 1;
        }
    }
    let rest: Vec<usize> = (0..n).filter(|&v| !keep[v]).collect();
    for i in sample(rng, rest.len(), max - count) {
        keep[rest[i]] = true;
    }
    (0..n).filter(|&v| keep[v]).collect()
}

/// Mean voxelwise cross-entropy.
pub fn ce_loss<'g, T: Real>(logits: Var<'g, T>, labels: Rc<[usize]>) -> Var<'g, T> {
    logits.log_softmax_rows().pick(labels).mean().neg()
}

pub fn lovasz_loss<'g, T: Real>(probs: Var<'g, T>, labels: Rc<[usize]>) -> Var<'g, T> {
    probs.lovasz_softmax(labels)
}

pub fn scal_geo<'g, T: Real>(probs: Var<'g, T>, labels: Rc<[usize]>) -> Var<'g, T> {
    probs.scal_geo(labels)
}

pub fn scal_sem<'g, T: Real>(probs: Var<'g, T>, labels: Rc<[usize]>) -> Var<'g, T> {
    probs.scal_sem(labels)
}

/// Recorded loss terms of one sample. Absent terms are disabled.
#[derive(Clone, Copy)]
pub struct LossTerms<'g, T: Real> {
    pub proxy: Option<Var<'g, T>>,
    pub ce: Var<'g, T>,
    pub lovasz: Var<'g, T>,
    pub scal_geo: Var<'g, T>,
    pub scal_sem: Var<'g, T>,
    /// Already weighted cross-entropy of the proposal heads.
    pub aux: Option<Var<'g, T>>,
}

/// Per-term values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub proxy: f64,
    pub ce: f64,
    pub lovasz: f64,
    pub scal_geo: f64,
    pub scal_sem: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        self.proxy += w * other.proxy;
        self.ce += w * other.ce;
        self.lovasz += w * other.lovasz;
        self.scal_geo += w * other.scal_geo;
        self.scal_sem += w * other.scal_sem;
        self.aux += w * other.aux;
        self.total += w * other.total;
    }
}

/// Unweighted sum of the enabled terms; a non-finite term is an error naming it.
pub fn total_loss<'g, T: Real>(terms: &LossTerms<'g, T>) -> Result<(Var<'g, T>, LossBreakdown)> {
    let named: [(&str, Option<Var<'g, T>>); 6] = [
        ("proxy", terms.proxy),
        ("ce", Some(terms.ce)),
        ("lovasz", Some(terms.lovasz)),
        ("scal_geo", Some(terms.scal_geo)),
        ("scal_sem", Some(terms.scal_sem)),
        ("aux", terms.aux),
    ];
    let mut vals = [0.0; 6];
    let mut total: Option<Var<'g, T>> = None;
    for (k, (name, v)) in named.iter().enumerate() {
        let Some(v) = v else { continue };
        let x = v.item().f64();
        if !x.is_finite() {
            return Err(Error::NonFinite { term: (*name).to_string(), value: x });
        }
        vals[k] = x;
        total = Some(match total {
            Some(t) => t.add(*v),
            None => *v,
        });
    }
    let total = total.expect("ce is always present");
    let b = LossBreakdown {
        proxy: vals[0],
        ce: vals[1],
        lovasz: vals[2],
        scal_geo: vals[3],
        scal_sem: vals[4],
        aux: vals[5],
        total: total.item().f64(),
    };
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::check::{check_all, rel_err, richardson_central};

    const LN3: f64 = 1.098_612_288_668_109_8;

    #[test]
    fn distribution_examples() {
        let u = to_distribution(&[0.4; 9]);
        assert!(u.iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
        let a = to_distribution(&[0.0, LN3]);
        assert!((a[0] - 0.25).abs() < 1e-15 && (a[1] - 0.75).abs() < 1e-15);
        let b = to_distribution(&[5.0, 5.0 + LN3]);
        assert!((a[0] - b[0]).abs() < 1e-15);
    }

    #[test]
    fn hellinger_examples() {
        assert_eq!(hellinger(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((hellinger(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let expect = (1.0 - std::f64::consts::SQRT_2 / 2.0).sqrt();
        assert!((hellinger(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.541_20).abs() < 1e-5);
        assert!(hellinger(&[0.5, 0.6], &[1.0, 0.0]).is_err());
        assert!(hellinger(&[1.5, -0.5], &[1.0, 0.0]).is_err());
        assert!(hellinger(&[1.0], &[1.0, 0.0]).is_err());
    }

    fn rand_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        to_distribution(&v)
    }

    proptest! {
        #[test]
        fn hellinger_is_a_bounded_metric(seed in 0u64..100_000, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, q, r) = (rand_dist(&mut rng, n), rand_dist(&mut rng, n), rand_dist(&mut rng, n));
            let pq = hellinger(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&pq));
            prop_assert_eq!(pq, hellinger(&q, &p).unwrap());
            prop_assert!(hellinger(&p, &p).unwrap() <= 1e-12);
            prop_assert!(pq <= hellinger(&p, &r).unwrap() + hellinger(&r, &q).unwrap() + 1e-12);
        }
    }

    #[test]
    fn one_voxel_sample_hand_value() {
        let s = 3;
        let h = NUM_CLASSES as f64;
        let mut dist = Tensor::full(1, NUM_CLASSES, 1.0);
        dist.data[s] = 0.0;
        let l = proxy_loss_from_distances(&dist, &[s], 1.0, 1.0);
        assert!((l + (h - 1.0) / h).abs() < 1e-12);

        // The same value through the recorded path with saturated logits and proxies.
        let mut store = ParamStore::new();
        let bank = ProxyBank::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut onehots = Tensor::full(NUM_CLASSES, NUM_CLASSES, -1e4);
        for c in 0..NUM_CLASSES {
            *onehots.row_mut(c).get_mut(c).unwrap() = 0.0;
        }
        *store.get_mut(bank.vectors) = onehots.clone();
        let g = Graph::inference();
        let logits = g.constant(Tensor::new(1, NUM_CLASSES, onehots.row(s).to_vec()));
        let v = proxy_loss(&g, &store, &bank, logits, &[s], 1.0, 1.0).item();
        assert!((v + (h - 1.0) / h).abs() < 1e-12);
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Tensor<f64>, Vec<usize>) {
        let dist = Tensor::new(n, NUM_CLASSES, (0..n * NUM_CLASSES).map(|_| rng.random_range(0.0..1.0)).collect());
        let labels = (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
        (dist, labels)
    }

    #[test]
    fn small_exponents_collapse_to_set_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (dist, labels) = random_instance(&mut rng, 30);
        let part = ProxyPartition::new(&labels, NUM_CLASSES);
        let expect: f64 = (0..NUM_CLASSES)
            .map(|s| {
                let p = if part.in_positive(s) { (part.positive[s].len() as f64).ln() } else { 0.0 };
                let q = if part.in_negative(s) { (part.negative[s].len() as f64).ln() } else { 0.0 };
                p + q
            })
            .sum::<f64>()
            / NUM_CLASSES as f64;
        let l = proxy_loss_from_distances(&dist, &labels, 1e-9, 1e-9);
        assert!((l - expect).abs() < 1e-8);
    }

    #[test]
    fn duplicating_voxels_adds_log2_per_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (dist, labels) = random_instance(&mut rng, 17);
        let part = ProxyPartition::new(&labels, NUM_CLASSES);
        let active = (0..NUM_CLASSES).map(|s| part.in_positive(s) as usize + part.in_negative(s) as usize).sum::<usize>();
        let mut d2 = dist.data.clone();
        d2.extend_from_slice(&dist.data);
        let l2 = labels.iter().chain(&labels).copied().collect::<Vec<_>>();
        let a = proxy_loss_from_distances(&dist, &labels, 6.0, 12.0);
        let b = proxy_loss_from_distances(&Tensor::new(34, NUM_CLASSES, d2), &l2, 6.0, 12.0);
        assert!((b - a - active as f64 * 2f64.ln() / NUM_CLASSES as f64).abs() < 1e-12);
    }

    #[test]
    fn closed_form_gradient_identities() {
        let h = NUM_CLASSES as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(1..40);
            let (dist, labels) = random_instance(&mut rng, n);
            let (alpha, beta) = (rng.random_range(0.5..8.0), rng.random_range(0.5..16.0));
            let grad = proxy_loss_grad_wrt_distance(&dist, &labels, alpha, beta);
            let part = ProxyPartition::new(&labels, NUM_CLASSES);
            for s in 0..NUM_CLASSES {
                if part.in_positive(s) {
                    let sum: f64 = part.positive[s].iter().map(|&v| grad.at(v, s)).sum();
                    assert!((sum - alpha / h).abs() < 1e-12);
                }
                if part.in_negative(s) {
                    let sum: f64 = part.negative[s].iter().map(|&v| grad.at(v, s)).sum();
                    assert!((sum + beta / h).abs() < 1e-12);
                    let nonzero = part.negative[s].iter().filter(|&&v| grad.at(v, s) != 0.0).count();
                    assert_eq!(nonzero, part.negative[s].len());
                }
            }
        }
        let dist = Tensor::from_f64(1, NUM_CLASSES, &[0.3; NUM_CLASSES]);
        let grad = proxy_loss_grad_wrt_distance(&dist, &[2], 6.0, 12.0);
        assert!((grad.at(0, 2) - 6.0 / h).abs() < 1e-15);
        assert!((grad.at(0, 0) + 12.0 / h).abs() < 1e-15);
    }

    #[test]
    fn closed_form_gradient_matches_fd_and_autodiff() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..30 {
            let n = if case < 2 { 1 } else { rng.random_range(2..25) };
            let (dist, labels) = random_instance(&mut rng, n);
            let (alpha, beta) = (rng.random_range(0.5..8.0), rng.random_range(0.5..16.0));
            let grad = proxy_loss_grad_wrt_distance(&dist, &labels, alpha, beta);
            for e in 0..dist.len() {
                let fd = richardson_central(
                    |h| {
                        let mut a = dist.clone();
                        a.data[e] += h;
                        proxy_loss_from_distances(&a, &labels, alpha, beta)
                    },
                    4e-3,
                );
                assert!(rel_err(grad.data[e], fd) < 1e-6, "case {case} entry {e}: {} vs {fd}", grad.data[e]);
            }
            let g = Graph::new();
            let d = g.leaf(dist.clone());
            let l = proxy_loss_on_distances(d, &labels, alpha, beta);
            assert!((l.item() - proxy_loss_from_distances(&dist, &labels, alpha, beta)).abs() < 1e-12);
            let ad = g.backward(l);
            for (x, y) in ad.of(d).unwrap().data.iter().zip(&grad.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn recorded_proxy_loss_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::new(12, NUM_CLASSES, (0..12 * NUM_CLASSES).map(|_| rng.random_range(-2.0..2.0)).collect());
        let bank = Tensor::new(NUM_CLASSES, NUM_CLASSES, (0..NUM_CLASSES * NUM_CLASSES).map(|_| rng.random_range(-1.0..1.0)).collect());
        let labels: Vec<usize> = (0..12).map(|i| [0, 0, 0, 1, 2, 0, 1, 5, 0, 0, 8, 1][i]).collect();
        let report = check_all(&[logits, bank], 1e-6, |_, v| {
            let p = v[0].softmax_rows();
            let q = v[1].softmax_rows();
            proxy_loss_on_distances(p.hellinger_pairs(q), &labels, 6.0, 12.0)
        });
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    proptest! {
        #[test]
        fn proxy_loss_is_permutation_invariant(seed in 0u64..10_000, n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (dist, labels) = random_instance(&mut rng, n);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pd: Vec<f64> = perm.iter().flat_map(|&v| dist.row(v).to_vec()).collect();
            let pl: Vec<usize> = perm.iter().map(|&v| labels[v]).collect();
            let a = proxy_loss_from_distances(&dist, &labels, 6.0, 12.0);
            let b = proxy_loss_from_distances(&Tensor::new(n, NUM_CLASSES, pd), &pl, 6.0, 12.0);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn subsample_keeps_every_present_category(seed in 0u64..10_000, n in 1usize..400, max in 9usize..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..n).map(|_| if rng.random_bool(0.8) { 0 } else { rng.random_range(1..NUM_CLASSES) }).collect();
            let keep = proxy_subsample(&labels, max, &mut rng);
            prop_assert_eq!(keep.len(), n.min(max));
            prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
            for c in 0..NUM_CLASSES {
                if labels.contains(&c) {
                    prop_assert!(keep.iter().any(|&v| labels[v] == c));
                }
            }
        }
    }

    #[test]
    fn segmentation_loss_examples() {
        let g = Graph::inference();
        let labels: Rc<[usize]> = vec![0, 3, 8, 1].into();
        let uniform = g.constant(Tensor::<f64>::zeros(4, NUM_CLASSES));
        assert!((ce_loss(uniform, labels.clone()).item() - (NUM_CLASSES as f64).ln()).abs() < 1e-12);
        let mut sharp = Tensor::full(4, NUM_CLASSES, -50.0);
        for (r, &l) in labels.iter().enumerate() {
            *sharp.row_mut(r).get_mut(l).unwrap() = 50.0;
        }
        let sharp = g.constant(sharp);
        assert!(ce_loss(sharp, labels.clone()).item() < 1e-12);
        assert!(lovasz_loss(sharp.softmax_rows(), labels.clone()).item() < 1e-12);
    }

    #[test]
    fn affinity_terms_on_two_voxels() {
        let g = Graph::inference();
        let mut p = Tensor::zeros(2, NUM_CLASSES);
        p.row_mut(0)[..2].copy_from_slice(&[0.8, 0.2]);
        p.row_mut(1)[..2].copy_from_slice(&[0.3, 0.7]);
        let probs = g.constant(p);
        let labels: Rc<[usize]> = vec![0, 1].into();
        let geo = -(0.7f64 / 0.9).ln() - 0.7f64.ln() - 0.8f64.ln();
        assert!((scal_geo(probs, labels.clone()).item() - geo).abs() < 1e-12);
        let c0 = -(0.8f64 / 1.1).ln() - 0.8f64.ln() - 0.7f64.ln();
        let c1 = -(0.7f64 / 0.9).ln() - 0.7f64.ln() - 0.8f64.ln();
        assert!((scal_sem(probs, labels).item() - (c0 + c1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_sums_and_rejects_non_finite() {
        let g = Graph::inference();
        let c = |x: f64| g.constant(Tensor::scalar(x));
        let mut terms = LossTerms { proxy: Some(c(1.0)), ce: c(2.0), lovasz: c(3.0), scal_geo: c(4.0), scal_sem: c(5.0), aux: None };
        let (t, b) = total_loss(&terms).unwrap();
        assert_eq!(t.item(), 15.0);
        assert_eq!(b.total, 15.0);
        terms.proxy = None;
        assert_eq!(total_loss(&terms).unwrap().0.item(), 14.0);
        let zero = LossTerms { proxy: Some(c(0.0)), ce: c(0.0), lovasz: c(0.0), scal_geo: c(0.0), scal_sem: c(0.0), aux: Some(c(0.0)) };
        assert_eq!(total_loss(&zero).unwrap().0.item(), 0.0);
        terms.scal_geo = c(f64::NAN);
        match total_loss(&terms) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "scal_geo"),
            _ => panic!("expected a non-finite error"),
        }
    }
}
