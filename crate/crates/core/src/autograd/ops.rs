//! Dense elementwise, linear-algebra and normalisation ops.

use super::graph::Var;
use super::tensor::{matmul_into, Real, Tensor};

impl<'g, T: Real> Var<'g, T> {
    pub fn matmul(self, rhs: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.cols, b.rows, "matmul shape mismatch {:?} x {:?}", a.shape(), b.shape());
        let mut out = Tensor::zeros(a.rows, b.cols);
        matmul_into(&a.data, a.rows, a.cols, false, &b.data, b.rows, b.cols, false, &mut out.data, false);
        let (ia, ib) = (self.id, rhs.id);
        self.graph.op("matmul", out, &[ia, ib], move |g, sink| {
            if sink.wants(ia) {
                let buf = sink.buf(ia);
                matmul_into(&g.data, g.rows, g.cols, false, &b.data, b.rows, b.cols, true, &mut buf.data, true);
            }
            if sink.wants(ib) {
                let buf = sink.buf(ib);
                matmul_into(&a.data, a.rows, a.cols, true, &g.data, g.rows, g.cols, false, &mut buf.data, true);
            }
        })
    }

    /// `x · W + b` with `b` broadcast over rows.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Var<'g, T> {
        let y = self.matmul(w);
        match b {
            Some(b) => y.add_row(b),
            None => y,
        }
    }

    pub fn add(self, rhs: Var<'g, T>) -> Var<'g, T> {
        self.zip("add", rhs, |a, b| a + b, |_, _| (T::one(), T::one()))
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Var<'g, T> {
        self.zip("sub", rhs, |a, b| a - b, |_, _| (T::one(), -T::one()))
    }

    pub fn mul(self, rhs: Var<'g, T>) -> Var<'g, T> {
        self.zip("mul", rhs, |a, b| a * b, |a, b| (b, a))
    }

    fn zip(self, name: &'static str, rhs: Var<'g, T>, f: fn(T, T) -> T, df: fn(T, T) -> (T, T)) -> Var<'g, T> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.rows, a.cols, data);
        let (ia, ib) = (self.id, rhs.id);
        self.graph.op(name, out, &[ia, ib], move |g, sink| {
            let wa = sink.wants(ia);
            let wb = sink.wants(ib);
            if wa {
                let buf = sink.buf(ia);
                for i in 0..g.data.len() {
                    buf.data[i] += g.data[i] * df(a.data[i], b.data[i]).0;
                }
            }
            if wb {
                let buf = sink.buf(ib);
                for i in 0..g.data.len() {
                    buf.data[i] += g.data[i] * df(a.data[i], b.data[i]).1;
                }
            }
        })
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(self, bias: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let b = bias.value();
        assert_eq!((1, x.cols), b.shape(), "bias shape mismatch");
        let mut out = (*x).clone();
        for r in 0..out.rows {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        let (ix, ib) = (self.id, bias.id);
        self.graph.op("add_row", out, &[ix, ib], move |g, sink| {
            sink.add(ix, g);
            if sink.wants(ib) {
                let buf = sink.buf(ib);
                for r in 0..g.rows {
                    for (o, &gv) in buf.data.iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
        })
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let x = self.value();
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| v * c).collect());
        let ix = self.id;
        self.graph.op("scale", out, &[ix], move |g, sink| {
            if sink.wants(ix) {
                let buf = sink.buf(ix);
                for (o, &gv) in buf.data.iter_mut().zip(&g.data) {
                    *o += gv * c;
                }
            }
        })
    }

    /// Same data, new row/column split.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.len(), rows * cols, "reshape changes element count");
        let out = Tensor::new(rows, cols, x.data.clone());
        let ix = self.id;
        self.graph.op("reshape", out, &[ix], move |g, sink| {
            if sink.wants(ix) {
                for (o, &gv) in sink.buf(ix).data.iter_mut().zip(&g.data) {
                    *o += gv;
                }
            }
        })
    }

    /// Softmax over consecutive groups of `group` columns within each row.
    pub fn softmax_groups(self, group: usize) -> Var<'g, T> {
        let (r, c) = self.shape();
        assert_eq!(c % group, 0, "row width not divisible by group");
        self.reshape(r * c / group, group).softmax_rows().reshape(r, c)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let x = self.value();
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| v + c).collect());
        let ix = self.id;
        self.graph.op("add_scalar", out, &[ix], move |g, sink| sink.add(ix, g))
    }

    pub fn relu(self) -> Var<'g, T> {
        let x = self.value();
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| v.max(T::zero())).collect());
        let ix = self.id;
        self.graph.op("relu", out, &[ix], move |g, sink| {
            if sink.wants(ix) {
                let buf = sink.buf(ix);
                for i in 0..g.data.len() {
                    if x.data[i] > T::zero() {
                        buf.data[i] += g.data[i];
                    }
                }
            }
        })
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let s: T = x.data.iter().copied().sum();
        let ix = self.id;
        self.graph.op("sum", Tensor::scalar(s), &[ix], move |g, sink| {
            if sink.wants(ix) {
                let gv = g.item();
                for o in sink.buf(ix).data.iter_mut() {
                    *o += gv;
                }
            }
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len().max(1);
        self.sum().scale(T::one() / T::c(n as f64))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(self) -> Var<'g, T> {
        let x = self.value();
        let y = std::rc::Rc::new(softmax_rows(&x));
        let ix = self.id;
        let yc = y.clone();
        self.graph.op("softmax_rows", (*y).clone(), &[ix], move |g, sink| {
            if sink.wants(ix) {
                let buf = sink.buf(ix);
                for r in 0..g.rows {
                    let yr = yc.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (c, o) in buf.row_mut(r).iter_mut().enumerate() {
                        *o += yr[c] * (gr[c] - dot);
                    }
                }
            }
        })
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(self) -> Var<'g, T> {
        let x = self.value();
        let mut out = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let lse = logsumexp(row);
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let y = std::rc::Rc::new(out);
        let yc = y.clone();
        let ix = self.id;
        self.graph.op("log_softmax_rows", (*y).clone(), &[ix], move |g, sink| {
            if sink.wants(ix) {
                let buf = sink.buf(ix);
                for r in 0..g.rows {
                    let gr = g.row(r);
                    let gs: T = gr.iter().copied().sum();
                    for (c, o) in buf.row_mut(r).iter_mut().enumerate() {
                        *o += gr[c] - yc.at(r, c).exp() * gs;
                    }
                }
            }
        })
    }

    /// Layer normalisation over the columns of each row, with affine `gamma`, `beta` (`1×cols`).
    pub fn layer_norm_rows(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let (n, d) = x.shape();
        assert_eq!(gm.shape(), (1, d));
        assert_eq!(bt.shape(), (1, d));
        let dn = T::c(d as f64);
        let mut xhat = Tensor::zeros(n, d);
        let mut inv_std = vec![T::zero(); n];
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let row = x.row(r);
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mu) * is;
                xhat.data[r * d + c] = h;
                out.data[r * d + c] = h * gm.data[c] + bt.data[c];
            }
        }
        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        self.graph.op("layer_norm_rows", out, &[ix, ig, ib], move |g, sink| {
            if sink.wants(ig) {
                let buf = sink.buf(ig);
                for r in 0..n {
                    for c in 0..d {
                        buf.data[c] += g.data[r * d + c] * xhat.data[r * d + c];
                    }
                }
            }
            if sink.wants(ib) {
                let buf = sink.buf(ib);
                for r in 0..n {
                    for c in 0..d {
                        buf.data[c] += g.data[r * d + c];
                    }
                }
            }
            if sink.wants(ix) {
                let buf = sink.buf(ix);
                for r in 0..n {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for c in 0..d {
                        let dh = g.data[r * d + c] * gm.data[c];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat.data[r * d + c];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for c in 0..d {
                        let dh = g.data[r * d + c] * gm.data[c];
                        buf.data[r * d + c] +=
                            inv_std[r] * (dh - mean_dh - xhat.data[r * d + c] * mean_dh_h);
                    }
                }
            }
        })
    }

    /// Picks column `labels[r]` of every row, giving `rows×1`.
    pub fn pick(self, labels: std::rc::Rc<[usize]>) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(labels.len(), x.rows);
        let data = labels.iter().enumerate().map(|(r, &c)| x.at(r, c)).collect();
        let out = Tensor::new(x.rows, 1, data);
        let ix = self.id;
        let cols = x.cols;
        self.graph.op("pick", out, &[ix], move |g, sink| {
            if sink.wants(ix) {
                let buf = sink.buf(ix);
                for (r, &c) in labels.iter().enumerate() {
                    buf.data[r * cols + c] += g.data[r];
                }
            }
        })
    }
}

pub(crate) fn logsumexp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        softmax_into(x.row(r), out.row_mut(r));
    }
    out
}

pub fn softmax_into<T: Real>(x: &[T], out: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}
