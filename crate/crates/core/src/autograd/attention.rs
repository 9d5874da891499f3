//! Fused attention kernels: multi-head deformable sampling and segment
//! (variable-length key set) scaled dot-product attention.

use std::rc::Rc;

use super::graph::Var;
use super::ops::softmax_into;
use super::tensor::{Real, Tensor};

/// Variable-length index lists, one per query (CSR layout).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Segments {
    pub ptr: Vec<usize>,
    pub idx: Vec<usize>,
}

impl Segments {
    pub fn new() -> Self {
        Self { ptr: vec![0], idx: Vec::new() }
    }

    pub fn push(&mut self, members: impl IntoIterator<Item = usize>) {
        self.idx.extend(members);
        self.ptr.push(self.idx.len());
    }

    pub fn len(&self) -> usize {
        self.ptr.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.idx[self.ptr[i]..self.ptr[i + 1]]
    }
}

/// Geometry of a single feature map sampled by [`Var::deform_sample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapDims {
    pub width: usize,
    pub height: usize,
}

/// Bilinear tap set at continuous pixel coordinates with border clamping.
/// Returns the four `(row, weight)` taps and whether each axis was clamped.
#[inline]
pub(crate) fn bilinear_taps<T: Real>(dims: MapDims, px: T, py: T) -> ([(usize, T); 4], T, T, bool, bool) {
    let xmax = T::c((dims.width - 1) as f64);
    let ymax = T::c((dims.height - 1) as f64);
    let cx = px < T::zero() || px > xmax;
    let cy = py < T::zero() || py > ymax;
    let px = px.max(T::zero()).min(xmax);
    let py = py.max(T::zero()).min(ymax);
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let x0 = x0.to_usize().unwrap_or(0).min(dims.width - 1);
    let y0 = y0.to_usize().unwrap_or(0).min(dims.height - 1);
    let x1 = (x0 + 1).min(dims.width - 1);
    let y1 = (y0 + 1).min(dims.height - 1);
    let one = T::one();
    let w = dims.width;
    (
        [
            (y0 * w + x0, (one - fx) * (one - fy)),
            (y0 * w + x1, fx * (one - fy)),
            (y1 * w + x0, (one - fx) * fy),
            (y1 * w + x1, fx * fy),
        ],
        fx,
        fy,
        cx,
        cy,
    )
}

/// Normalised image coordinates in `[0,1]²` to continuous pixel coordinates
/// (pixel centres at half-integers of the normalised grid).
#[inline]
pub fn normalized_to_pixel<T: Real>(dims: MapDims, u: T, v: T) -> (T, T) {
    (u * T::c(dims.width as f64) - T::c(0.5), v * T::c(dims.height as f64) - T::c(0.5))
}

impl<'g, T: Real> Var<'g, T> {
    /// Multi-head deformable sampling of `self` (a `width·height × D` value map).
    ///
    /// For query `n`, head `m` and point `k` the sample location is
    /// `refs[n] + offsets[n, (m·K+k)·2 ..]` in normalised coordinates; the head
    /// output is `Σ_k attn[n, m·K+k] · value_m(location)` where `value_m` is the
    /// `m`-th block of `D/H` channels. Heads are concatenated.
    pub fn deform_sample(
        self,
        dims: MapDims,
        n_heads: usize,
        n_points: usize,
        refs: Rc<[[T; 2]]>,
        offsets: Var<'g, T>,
        attn: Var<'g, T>,
    ) -> Var<'g, T> {
        let val = self.value();
        let off = offsets.value();
        let att = attn.value();
        let n = refs.len();
        let d = val.cols;
        assert_eq!(val.rows, dims.width * dims.height, "value map size mismatch");
        assert_eq!(d % n_heads, 0, "channels not divisible by heads");
        assert_eq!(off.shape(), (n, n_heads * n_points * 2));
        assert_eq!(att.shape(), (n, n_heads * n_points));
        let dh = d / n_heads;
        let mut out = Tensor::zeros(n, d);
        for q in 0..n {
            for m in 0..n_heads {
                for k in 0..n_points {
                    let hk = m * n_points + k;
                    let a = att.at(q, hk);
                    let u = refs[q][0] + off.at(q, 2 * hk);
                    let v = refs[q][1] + off.at(q, 2 * hk + 1);
                    let (px, py) = normalized_to_pixel(dims, u, v);
                    let (taps, ..) = bilinear_taps(dims, px, py);
                    let o = &mut out.data[q * d + m * dh..q * d + (m + 1) * dh];
                    for (row, w) in taps {
                        let aw = a * w;
                        if aw == T::zero() {
                            continue;
                        }
                        for (ov, &xv) in o.iter_mut().zip(&val.data[row * d + m * dh..row * d + (m + 1) * dh]) {
                            *ov += aw * xv;
                        }
                    }
                }
            }
        }
        let (iv, io, ia) = (self.id, offsets.id, attn.id);
        self.graph.op("deform_sample", out, &[iv, io, ia], move |g, sink| {
            let (wv, wo, wa) = (sink.wants(iv), sink.wants(io), sink.wants(ia));
            let mut gval = if wv { Some(Tensor::zeros(val.rows, d)) } else { None };
            let mut goff = Tensor::zeros(n, n_heads * n_points * 2);
            let mut gatt = Tensor::zeros(n, n_heads * n_points);
            let wf = T::c(dims.width as f64);
            let hf = T::c(dims.height as f64);
            let mut sample = vec![T::zero(); dh];
            for q in 0..n {
                for m in 0..n_heads {
                    let gq = &g.data[q * d + m * dh..q * d + (m + 1) * dh];
                    for k in 0..n_points {
                        let hk = m * n_points + k;
                        let a = att.at(q, hk);
                        let u = refs[q][0] + off.at(q, 2 * hk);
                        let v = refs[q][1] + off.at(q, 2 * hk + 1);
                        let (px, py) = normalized_to_pixel(dims, u, v);
                        let (taps, fx, fy, cx, cy) = bilinear_taps(dims, px, py);
                        sample.iter_mut().for_each(|s| *s = T::zero());
                        for &(row, w) in &taps {
                            for (s, &xv) in sample.iter_mut().zip(&val.data[row * d + m * dh..row * d + (m + 1) * dh]) {
                                *s += w * xv;
                            }
                        }
                        if wa {
                            gatt.data[q * n_heads * n_points + hk] =
                                gq.iter().zip(&sample).map(|(&a, &b)| a * b).sum();
                        }
                        if let Some(gv) = gval.as_mut() {
                            for &(row, w) in &taps {
                                let aw = a * w;
                                if aw == T::zero() {
                                    continue;
                                }
                                for (o, &gg) in gv.data[row * d + m * dh..row * d + (m + 1) * dh].iter_mut().zip(gq) {
                                    *o += aw * gg;
                                }
                            }
                        }
                        if wo {
                            let one = T::one();
                            let row = |i: usize| &val.data[taps[i].0 * d + m * dh..taps[i].0 * d + (m + 1) * dh];
                            let (v00, v10, v01, v11) = (row(0), row(1), row(2), row(3));
                            let mut dx = T::zero();
                            let mut dy = T::zero();
                            for c in 0..dh {
                                let gc = gq[c];
                                dx += gc * ((one - fy) * (v10[c] - v00[c]) + fy * (v11[c] - v01[c]));
                                dy += gc * ((one - fx) * (v01[c] - v00[c]) + fx * (v11[c] - v10[c]));
                            }
                            if !cx {
                                goff.data[q * n_heads * n_points * 2 + 2 * hk] = a * dx * wf;
                            }
                            if !cy {
                                goff.data[q * n_heads * n_points * 2 + 2 * hk + 1] = a * dy * hf;
                            }
                        }
                    }
                }
            }
            if let Some(gv) = gval {
                sink.add_owned(iv, gv);
            }
            if wo {
                sink.add_owned(io, goff);
            }
            if wa {
                sink.add_owned(ia, gatt);
            }
        })
    }

    /// Multi-head scaled dot-product attention where query `i` attends over the
    /// key/value rows listed in `segments.get(i)`. Queries with an empty key
    /// set produce zero rows.
    pub fn segment_attention(
        self,
        keys: Var<'g, T>,
        values: Var<'g, T>,
        segments: Rc<Segments>,
        n_heads: usize,
        scale: T,
    ) -> Var<'g, T> {
        let q = self.value();
        let k = keys.value();
        let v = values.value();
        let d = q.cols;
        assert_eq!(k.cols, d);
        assert_eq!(v.cols, d);
        assert_eq!(k.rows, v.rows);
        assert_eq!(segments.len(), q.rows);
        let weights = Rc::new(segment_attention_weights(&q, &k, &segments, n_heads, scale));
        let dh = d / n_heads;
        let mut out = Tensor::zeros(q.rows, d);
        for i in 0..q.rows {
            let seg = segments.get(i);
            let base = segments.ptr[i] * n_heads;
            for m in 0..n_heads {
                let o = &mut out.data[i * d + m * dh..i * d + (m + 1) * dh];
                for (j, &kj) in seg.iter().enumerate() {
                    let a = weights[base + m * seg.len() + j];
                    for (ov, &vv) in o.iter_mut().zip(&v.data[kj * d + m * dh..kj * d + (m + 1) * dh]) {
                        *ov += a * vv;
                    }
                }
            }
        }
        let (iq, ik, iv) = (self.id, keys.id, values.id);
        self.graph.op("segment_attention", out, &[iq, ik, iv], move |g, sink| {
            let (wq, wk, wv) = (sink.wants(iq), sink.wants(ik), sink.wants(iv));
            let mut gq = Tensor::zeros(q.rows, d);
            let mut gk = Tensor::zeros(k.rows, d);
            let mut gv = Tensor::zeros(v.rows, d);
            let mut ds = Vec::new();
            for i in 0..q.rows {
                let seg = segments.get(i);
                if seg.is_empty() {
                    continue;
                }
                let base = segments.ptr[i] * n_heads;
                for m in 0..n_heads {
                    let gi = &g.data[i * d + m * dh..i * d + (m + 1) * dh];
                    let a = &weights[base + m * seg.len()..base + (m + 1) * seg.len()];
                    ds.clear();
                    let mut dot = T::zero();
                    for (j, &kj) in seg.iter().enumerate() {
                        let vj = &v.data[kj * d + m * dh..kj * d + (m + 1) * dh];
                        let da: T = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        ds.push(da);
                        dot += a[j] * da;
                        if wv {
                            for (o, &gg) in gv.data[kj * d + m * dh..kj * d + (m + 1) * dh].iter_mut().zip(gi) {
                                *o += a[j] * gg;
                            }
                        }
                    }
                    for (j, &kj) in seg.iter().enumerate() {
                        let s = a[j] * (ds[j] - dot) * scale;
                        if s == T::zero() {
                            continue;
                        }
                        if wq {
                            let kr = &k.data[kj * d + m * dh..kj * d + (m + 1) * dh];
                            for (o, &kv) in gq.data[i * d + m * dh..i * d + (m + 1) * dh].iter_mut().zip(kr) {
                                *o += s * kv;
                            }
                        }
                        if wk {
                            let qr = &q.data[i * d + m * dh..i * d + (m + 1) * dh];
                            for (o, &qv) in gk.data[kj * d + m * dh..kj * d + (m + 1) * dh].iter_mut().zip(qr) {
                                *o += s * qv;
                            }
                        }
                    }
                }
            }
            if wq {
                sink.add_owned(iq, gq);
            }
            if wk {
                sink.add_owned(ik, gk);
            }
            if wv {
                sink.add_owned(iv, gv);
            }
        })
    }
}

/// Attention weights of [`Var::segment_attention`]. Layout: for query `i`,
/// head `m`, member `j`: `ptr[i]·H + m·len(i) + j`.
pub fn segment_attention_weights<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    segments: &Segments,
    n_heads: usize,
    scale: T,
) -> Vec<T> {
    let d = q.cols;
    let dh = d / n_heads;
    let mut weights = vec![T::zero(); segments.idx.len() * n_heads];
    let mut scores = Vec::new();
    for i in 0..q.rows {
        let seg = segments.get(i);
        if seg.is_empty() {
            continue;
        }
        let base = segments.ptr[i] * n_heads;
        for m in 0..n_heads {
            let qi = &q.data[i * d + m * dh..i * d + (m + 1) * dh];
            scores.clear();
            scores.extend(seg.iter().map(|&kj| {
                let kr = &k.data[kj * d + m * dh..kj * d + (m + 1) * dh];
                qi.iter().zip(kr).map(|(&a, &b)| a * b).sum::<T>() * scale
            }));
            softmax_into(&scores, &mut weights[base + m * seg.len()..base + (m + 1) * seg.len()]);
        }
    }
    weights
}
