//! Reductions used by the loss functions: pairwise Hellinger distances,
//! segment log-sum-exp, Lovász-softmax and scene-class affinity terms.

use std::cmp::Ordering;
use std::rc::Rc;

use super::attention::Segments;
use super::graph::Var;
use super::ops::logsumexp;
use super::tensor::{Real, Tensor};

/// Floor applied to the logarithm inside the affinity terms, matching the
/// usual binary-cross-entropy clamp.
const LOG_FLOOR: f64 = -100.0;

impl<'g, T: Real> Var<'g, T> {
    /// Hellinger distance between every row of `self` (`n×C` distributions)
    /// and every row of `other` (`S×C` distributions): `n×S`.
    pub fn hellinger_pairs(self, other: Var<'g, T>) -> Var<'g, T> {
        let p = self.value();
        let q = other.value();
        assert_eq!(p.cols, q.cols, "distribution width mismatch");
        let (n, s, c) = (p.rows, q.rows, p.cols);
        let sp: Vec<T> = p.data.iter().map(|v| v.sqrt()).collect();
        let sq: Vec<T> = q.data.iter().map(|v| v.sqrt()).collect();
        let inv_sqrt2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
        let mut out = Tensor::zeros(n, s);
        for i in 0..n {
            for j in 0..s {
                let ss: T = (0..c).map(|k| {
                    let diff = sp[i * c + k] - sq[j * c + k];
                    diff * diff
                }).sum();
                out.data[i * s + j] = inv_sqrt2 * ss.sqrt();
            }
        }
        let dist = Rc::new(out.clone());
        let (ip, iq) = (self.id, other.id);
        self.graph.op("hellinger_pairs", out, &[ip, iq], move |g, sink| {
            let four = T::c(4.0);
            // d√p/dp is unbounded at p = 0, which a softmax reaches by
            // underflow; flooring √p keeps the product with p finite.
            let floor = T::epsilon();
            if sink.wants(ip) {
                let buf = sink.buf(ip);
                for i in 0..n {
                    for j in 0..s {
                        let dv = dist.data[i * s + j];
                        let gv = g.data[i * s + j];
                        if dv == T::zero() || gv == T::zero() {
                            continue;
                        }
                        for k in 0..c {
                            let a = sp[i * c + k].max(floor);
                            buf.data[i * c + k] += gv * (sp[i * c + k] - sq[j * c + k]) / (four * dv * a);
                        }
                    }
                }
            }
            if sink.wants(iq) {
                let buf = sink.buf(iq);
                for i in 0..n {
                    for j in 0..s {
                        let dv = dist.data[i * s + j];
                        let gv = g.data[i * s + j];
                        if dv == T::zero() || gv == T::zero() {
                            continue;
                        }
                        for k in 0..c {
                            let b = sq[j * c + k].max(floor);
                            buf.data[j * c + k] += gv * (sq[j * c + k] - sp[i * c + k]) / (four * dv * b);
                        }
                    }
                }
            }
        })
    }

    /// `log Σ exp` over each segment of the flattened (row-major) entries of
    /// `self`; one output row per segment. Segments must be non-empty.
    pub fn segment_logsumexp(self, segments: Rc<Segments>) -> Var<'g, T> {
        let x = self.value();
        let mut out = Tensor::zeros(segments.len(), 1);
        let mut buf = Vec::new();
        for i in 0..segments.len() {
            let seg = segments.get(i);
            assert!(!seg.is_empty(), "empty log-sum-exp segment");
            buf.clear();
            buf.extend(seg.iter().map(|&e| x.data[e]));
            out.data[i] = logsumexp(&buf);
        }
        let lse = Rc::new(out.clone());
        let ix = self.id;
        self.graph.op("segment_logsumexp", out, &[ix], move |g, sink| {
            if sink.wants(ix) {
                let b = sink.buf(ix);
                for i in 0..segments.len() {
                    let gi = g.data[i];
                    for &e in segments.get(i) {
                        b.data[e] += gi * (x.data[e] - lse.data[i]).exp();
                    }
                }
            }
        })
    }

    /// Lovász-softmax surrogate of the per-class Jaccard loss, averaged over
    /// the classes present in `labels`. `self` holds class probabilities.
    pub fn lovasz_softmax(self, labels: Rc<[usize]>) -> Var<'g, T> {
        let p = self.value();
        let (n, c) = p.shape();
        assert_eq!(labels.len(), n);
        let mut grad = Tensor::zeros(n, c);
        let mut total = T::zero();
        let mut present = 0usize;
        let mut order: Vec<usize> = Vec::with_capacity(n);
        let mut errors = vec![T::zero(); n];
        for cls in 0..c {
            let n_fg = labels.iter().filter(|&&l| l == cls).count();
            if n_fg == 0 {
                continue;
            }
            present += 1;
            for i in 0..n {
                let fg = if labels[i] == cls { T::one() } else { T::zero() };
                errors[i] = (fg - p.at(i, cls)).abs();
            }
            order.clear();
            order.extend(0..n);
            order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            let gts = T::c(n_fg as f64);
            let mut cum_fg = T::zero();
            let mut cum_bg = T::zero();
            let mut prev_jac = T::zero();
            for &i in &order {
                if labels[i] == cls {
                    cum_fg += T::one();
                } else {
                    cum_bg += T::one();
                }
                let inter = gts - cum_fg;
                let union = gts + cum_bg;
                let jac = T::one() - inter / union;
                let step = jac - prev_jac;
                prev_jac = jac;
                total += errors[i] * step;
                let sign = if labels[i] == cls { -T::one() } else { T::one() };
                grad.data[i * c + cls] = step * sign;
            }
        }
        let denom = T::c(present.max(1) as f64);
        let loss = total / denom;
        grad.data.iter_mut().for_each(|v| *v /= denom);
        let ip = self.id;
        self.graph.op("lovasz_softmax", Tensor::scalar(loss), &[ip], move |g, sink| {
            if sink.wants(ip) {
                let gv = g.item();
                let b = sink.buf(ip);
                for (o, &d) in b.data.iter_mut().zip(&grad.data) {
                    *o += gv * d;
                }
            }
        })
    }

    /// Scene-class affinity on the binary empty / occupied split; class 0 is
    /// empty. Sum of `-log` precision, recall and specificity.
    pub fn scal_geo(self, labels: Rc<[usize]>) -> Var<'g, T> {
        let p = self.value();
        let (n, c) = p.shape();
        assert_eq!(labels.len(), n);
        let occ: Vec<T> = (0..n).map(|i| T::one() - p.at(i, 0)).collect();
        let tgt: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
        let mut d_occ = vec![T::zero(); n];
        let mut loss = T::zero();
        let inter: T = (0..n).filter(|&i| tgt[i]).map(|i| occ[i]).sum();
        let pred_sum: T = occ.iter().copied().sum();
        let n_pos = T::c(tgt.iter().filter(|&&t| t).count() as f64);
        let n_neg = T::c(n as f64) - n_pos;
        if pred_sum > T::zero() {
            let (l, dl) = neg_log(inter / pred_sum);
            loss += l;
            if dl {
                for i in 0..n {
                    let ti = if tgt[i] { T::one() } else { T::zero() };
                    d_occ[i] -= ti / inter - T::one() / pred_sum;
                }
            }
        }
        if n_pos > T::zero() {
            let (l, dl) = neg_log(inter / n_pos);
            loss += l;
            if dl {
                for i in 0..n {
                    if tgt[i] {
                        d_occ[i] -= T::one() / inter;
                    }
                }
            }
        }
        let mut d_empty = vec![T::zero(); n];
        if n_neg > T::zero() {
            let spec_num: T = (0..n).filter(|&i| !tgt[i]).map(|i| p.at(i, 0)).sum();
            let (l, dl) = neg_log(spec_num / n_neg);
            loss += l;
            if dl {
                for i in 0..n {
                    if !tgt[i] {
                        d_empty[i] -= T::one() / spec_num;
                    }
                }
            }
        }
        let mut grad = Tensor::zeros(n, c);
        for i in 0..n {
            grad.data[i * c] = d_empty[i] - d_occ[i];
        }
        scalar_with_grad("scal_geo", self, loss, grad)
    }

    /// Scene-class affinity computed per class present in `labels` (including
    /// empty) and averaged.
    pub fn scal_sem(self, labels: Rc<[usize]>) -> Var<'g, T> {
        let p = self.value();
        let (n, c) = p.shape();
        assert_eq!(labels.len(), n);
        let mut grad = Tensor::zeros(n, c);
        let mut loss = T::zero();
        let mut count = 0usize;
        for cls in 0..c {
            let n_pos = labels.iter().filter(|&&l| l == cls).count();
            if n_pos == 0 {
                continue;
            }
            count += 1;
            let n_pos_t = T::c(n_pos as f64);
            let n_neg_t = T::c((n - n_pos) as f64);
            let nom: T = (0..n).filter(|&i| labels[i] == cls).map(|i| p.at(i, cls)).sum();
            let p_sum: T = (0..n).map(|i| p.at(i, cls)).sum();
            if p_sum > T::zero() {
                let (l, dl) = neg_log(nom / p_sum);
                loss += l;
                if dl {
                    for i in 0..n {
                        let t = if labels[i] == cls { T::one() } else { T::zero() };
                        grad.data[i * c + cls] -= t / nom - T::one() / p_sum;
                    }
                }
            }
            let (l, dl) = neg_log(nom / n_pos_t);
            loss += l;
            if dl {
                for i in 0..n {
                    if labels[i] == cls {
                        grad.data[i * c + cls] -= T::one() / nom;
                    }
                }
            }
            if n_pos < n {
                let spec: T = (0..n).filter(|&i| labels[i] != cls).map(|i| T::one() - p.at(i, cls)).sum();
                let (l, dl) = neg_log(spec / n_neg_t);
                loss += l;
                if dl {
                    for i in 0..n {
                        if labels[i] != cls {
                            grad.data[i * c + cls] += T::one() / spec;
                        }
                    }
                }
            }
        }
        let denom = T::c(count.max(1) as f64);
        grad.data.iter_mut().for_each(|v| *v /= denom);
        scalar_with_grad("scal_sem", self, loss / denom, grad)
    }
}

/// `-max(ln x, floor)` and whether the gradient is live.
fn neg_log<T: Real>(x: T) -> (T, bool) {
    let floor = T::c(LOG_FLOOR);
    if x > T::zero() && x.ln() > floor {
        (-x.ln(), true)
    } else {
        (-floor, false)
    }
}

fn scalar_with_grad<'g, T: Real>(name: &'static str, x: Var<'g, T>, value: T, grad: Tensor<T>) -> Var<'g, T> {
    let ix = x.id;
    x.graph.op(name, Tensor::scalar(value), &[ix], move |g, sink| {
        if sink.wants(ix) {
            let gv = g.item();
            let b = sink.buf(ix);
            for (o, &d) in b.data.iter_mut().zip(&grad.data) {
                *o += gv * d;
            }
        }
    })
}
