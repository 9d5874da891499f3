//! Row gathers/scatters, fixed sparse linear maps and neighbour-table convolution.

use std::rc::Rc;

use super::graph::Var;
use super::tensor::{matmul_into, Real, Tensor};

/// Fixed sparse row-combination matrix in CSR form: output row `r` is
/// `Σ weights[e] · input[cols[e]]` for `e` in `row_ptr[r]..row_ptr[r+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr<T> {
    pub n_in: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T: Real> Csr<T> {
    pub fn new(n_in: usize) -> Self {
        Self { n_in, row_ptr: vec![0], cols: Vec::new(), weights: Vec::new() }
    }

    pub fn push_row(&mut self, taps: impl IntoIterator<Item = (usize, T)>) {
        for (c, w) in taps {
            debug_assert!(c < self.n_in);
            self.cols.push(c);
            self.weights.push(w);
        }
        self.row_ptr.push(self.cols.len());
    }

    pub fn n_out(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.weights[span].iter().copied())
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.rows, self.n_in, "sparse map input rows mismatch");
        let d = x.cols;
        let mut out = Tensor::zeros(self.n_out(), d);
        for r in 0..self.n_out() {
            let o = &mut out.data[r * d..(r + 1) * d];
            for (c, w) in self.row(r) {
                for (ov, &xv) in o.iter_mut().zip(x.row(c)) {
                    *ov += w * xv;
                }
            }
        }
        out
    }
}

/// Marker for an absent neighbour in a [`NeighborTable`].
pub const NO_NEIGHBOR: u32 = u32::MAX;

/// For every output site, the input rows feeding each of `k` kernel taps.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable {
    pub n_in: usize,
    pub k: usize,
    pub idx: Vec<u32>,
}

impl NeighborTable {
    pub fn n_out(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.idx.len() / self.k
        }
    }
}

const CONV_CHUNK: usize = 2048;

impl<'g, T: Real> Var<'g, T> {
    pub fn gather_rows(self, idx: Rc<[usize]>) -> Var<'g, T> {
        let x = self.value();
        let d = x.cols;
        let mut out = Tensor::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        let ix = self.id;
        self.graph.op("gather_rows", out, &[ix], move |g, sink| {
            if sink.wants(ix) {
                let buf = sink.buf(ix);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &gv) in buf.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
        })
    }

    /// Copy of `self` with rows `idx` replaced by the rows of `src`. Rows not in
    /// `idx` are copied bit-for-bit. `idx` must not contain duplicates.
    pub fn scatter_rows(self, idx: Rc<[usize]>, src: Var<'g, T>) -> Var<'g, T> {
        let base = self.value();
        let s = src.value();
        assert_eq!(s.rows, idx.len());
        assert_eq!(s.cols, base.cols);
        let mut out = (*base).clone();
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(s.row(r));
        }
        let (ib, is) = (self.id, src.id);
        self.graph.op("scatter_rows", out, &[ib, is], move |g, sink| {
            if sink.wants(ib) {
                let mut gb = g.clone();
                for &i in idx.iter() {
                    gb.row_mut(i).iter_mut().for_each(|v| *v = T::zero());
                }
                sink.add_owned(ib, gb);
            }
            if sink.wants(is) {
                let buf = sink.buf(is);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &gv) in buf.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += gv;
                    }
                }
            }
        })
    }

    /// Vertical concatenation.
    pub fn concat_rows(parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let d = vals[0].cols;
        let mut data = Vec::with_capacity(vals.iter().map(|v| v.len()).sum());
        let mut offsets = Vec::with_capacity(parts.len());
        let mut rows = 0;
        for v in &vals {
            assert_eq!(v.cols, d, "concat column mismatch");
            offsets.push(rows);
            rows += v.rows;
            data.extend_from_slice(&v.data);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let lens: Vec<usize> = vals.iter().map(|v| v.rows).collect();
        let idc = ids.clone();
        graph.op("concat_rows", Tensor::new(rows, d, data), &ids, move |g, sink| {
            for (k, &id) in idc.iter().enumerate() {
                if sink.wants(id) {
                    let start = offsets[k] * d;
                    let part = Tensor::new(lens[k], d, g.data[start..start + lens[k] * d].to_vec());
                    sink.add_owned(id, part);
                }
            }
        })
    }

    /// Tiles a `1×d` row into `n×d`.
    pub fn repeat_rows(self, n: usize) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.rows, 1);
        let mut data = Vec::with_capacity(n * x.cols);
        for _ in 0..n {
            data.extend_from_slice(&x.data);
        }
        let ix = self.id;
        let d = x.cols;
        self.graph.op("repeat_rows", Tensor::new(n, d, data), &[ix], move |g, sink| {
            if sink.wants(ix) {
                let buf = sink.buf(ix);
                for r in 0..g.rows {
                    for (o, &gv) in buf.data.iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
        })
    }

    /// Applies a fixed sparse row map (interpolation, pooling, averaging).
    pub fn sparse_combine(self, map: Rc<Csr<T>>) -> Var<'g, T> {
        let x = self.value();
        let out = map.apply(&x);
        let ix = self.id;
        let d = x.cols;
        self.graph.op("sparse_combine", out, &[ix], move |g, sink| {
            if sink.wants(ix) {
                let buf = sink.buf(ix);
                for r in 0..map.n_out() {
                    let gr = &g.data[r * d..(r + 1) * d];
                    for (c, w) in map.row(r) {
                        for (o, &gv) in buf.row_mut(c).iter_mut().zip(gr) {
                            *o += w * gv;
                        }
                    }
                }
            }
        })
    }

    /// Convolution expressed through a neighbour table: output site `s` is
    /// `Σ_t x[table(s, t)] · W[t]` (+ bias), with `W` stored as `(k·c_in) × c_out`.
    /// Covers dense, strided and submanifold-sparse kernels alike.
    pub fn neighbor_conv(self, table: Rc<NeighborTable>, w: Var<'g, T>, bias: Option<Var<'g, T>>) -> Var<'g, T> {
        let x = self.value();
        let wv = w.value();
        let c_in = x.cols;
        assert_eq!(x.rows, table.n_in, "neighbour table input mismatch");
        assert_eq!(wv.rows, table.k * c_in, "conv weight shape mismatch");
        let c_out = wv.cols;
        let n_out = table.n_out();
        let kc = table.k * c_in;
        let mut out = Tensor::zeros(n_out, c_out);
        let mut cols = Vec::new();
        for start in (0..n_out).step_by(CONV_CHUNK) {
            let end = (start + CONV_CHUNK).min(n_out);
            im2col(&x, &table, start, end, &mut cols);
            matmul_into(
                &cols,
                end - start,
                kc,
                false,
                &wv.data,
                kc,
                c_out,
                false,
                &mut out.data[start * c_out..end * c_out],
                false,
            );
        }
        let (ix, iw) = (self.id, w.id);
        let y = self.graph.op("neighbor_conv", out, &[ix, iw], move |g, sink| {
            let want_x = sink.wants(ix);
            let want_w = sink.wants(iw);
            let mut cols = Vec::new();
            let mut gcols = Vec::new();
            for start in (0..n_out).step_by(CONV_CHUNK) {
                let end = (start + CONV_CHUNK).min(n_out);
                let gchunk = &g.data[start * c_out..end * c_out];
                if want_w {
                    im2col(&x, &table, start, end, &mut cols);
                    let buf = sink.buf(iw);
                    matmul_into(&cols, end - start, kc, true, gchunk, end - start, c_out, false, &mut buf.data, true);
                }
                if want_x {
                    gcols.clear();
                    gcols.resize((end - start) * kc, T::zero());
                    matmul_into(gchunk, end - start, c_out, false, &wv.data, kc, c_out, true, &mut gcols, false);
                    let buf = sink.buf(ix);
                    for s in start..end {
                        for t in 0..table.k {
                            let src = table.idx[s * table.k + t];
                            if src == super::index::NO_NEIGHBOR {
                                continue;
                            }
                            let gs = &gcols[(s - start) * kc + t * c_in..(s - start) * kc + (t + 1) * c_in];
                            for (o, &gv) in buf.row_mut(src as usize).iter_mut().zip(gs) {
                                *o += gv;
                            }
                        }
                    }
                }
            }
        });
        match bias {
            Some(b) => y.add_row(b),
            None => y,
        }
    }
}

fn im2col<T: Real>(x: &Tensor<T>, table: &NeighborTable, start: usize, end: usize, cols: &mut Vec<T>) {
    let c_in = x.cols;
    let kc = table.k * c_in;
    cols.clear();
    cols.resize((end - start) * kc, T::zero());
    for s in start..end {
        for t in 0..table.k {
            let src = table.idx[s * table.k + t];
            if src == NO_NEIGHBOR {
                continue;
            }
            let dst = (s - start) * kc + t * c_in;
            cols[dst..dst + c_in].copy_from_slice(x.row(src as usize));
        }
    }
}
