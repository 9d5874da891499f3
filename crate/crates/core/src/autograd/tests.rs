use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::check_all;
use super::*;

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor<f64> {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect())
}

fn probs(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    softmax_rows(&rand_t(rng, r, c, 2.0))
}

const TOL: f64 = 1e-6;

#[test]
fn dense_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_t(&mut rng, 5, 4, 1.0);
    let b = rand_t(&mut rng, 4, 3, 1.0);
    let bias = rand_t(&mut rng, 1, 3, 1.0);
    let r = check_all(&[a.clone(), b, bias], 1e-6, |_, v| v[0].matmul(v[1]).add_row(v[2]).relu());
    assert!(r.max_rel_err < TOL, "{r:?}");

    let c = rand_t(&mut rng, 5, 4, 1.0);
    let r = check_all(&[a.clone(), c], 1e-6, |_, v| v[0].mul(v[1]).sub(v[1].scale(0.3)).add(v[0]).add_scalar(0.2));
    assert!(r.max_rel_err < TOL, "{r:?}");

    let r = check_all(&[a.clone()], 1e-6, |_, v| v[0].softmax_rows());
    assert!(r.max_rel_err < TOL, "{r:?}");
    let r = check_all(&[a.clone()], 1e-6, |_, v| v[0].log_softmax_rows().mean());
    assert!(r.max_rel_err < TOL, "{r:?}");

    let gamma = rand_t(&mut rng, 1, 4, 1.0);
    let beta = rand_t(&mut rng, 1, 4, 1.0);
    let r = check_all(&[a.clone(), gamma, beta], 1e-6, |_, v| v[0].layer_norm_rows(v[1], v[2], 1e-5));
    assert!(r.max_rel_err < 1e-5, "{r:?}");

    let labels: Rc<[usize]> = vec![0, 3, 1, 1, 2].into();
    let r = check_all(&[a], 1e-6, move |_, v| v[0].log_softmax_rows().pick(labels.clone()).mean().neg());
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn index_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = rand_t(&mut rng, 6, 3, 1.0);
    let src = rand_t(&mut rng, 2, 3, 1.0);
    let idx: Rc<[usize]> = vec![4, 1].into();
    let i2 = idx.clone();
    let r = check_all(&[base.clone(), src], 1e-6, move |_, v| v[0].scatter_rows(i2.clone(), v[1]).relu());
    assert!(r.max_rel_err < TOL, "{r:?}");
    let gidx: Rc<[usize]> = vec![0, 5, 5, 2].into();
    let r = check_all(&[base.clone()], 1e-6, move |_, v| v[0].gather_rows(gidx.clone()));
    assert!(r.max_rel_err < TOL, "{r:?}");

    let row = rand_t(&mut rng, 1, 3, 1.0);
    let r = check_all(&[base.clone(), row], 1e-6, |_, v| Var::concat_rows(&[v[0], v[1].repeat_rows(2)]).sum());
    assert!(r.max_rel_err < TOL, "{r:?}");

    let mut csr = Csr::new(6);
    csr.push_row([(0, 0.5), (3, 0.25)]);
    csr.push_row([]);
    csr.push_row([(5, 2.0)]);
    let csr = Rc::new(csr);
    let r = check_all(&[base], 1e-6, move |_, v| v[0].sparse_combine(csr.clone()));
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn neighbor_conv_matches_direct_convolution_and_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // 1-D line of 5 sites, 3-tap kernel, zero padding.
    let n = 5;
    let mut idx = Vec::new();
    for s in 0..n as i64 {
        for t in -1..=1 {
            let j = s + t;
            idx.push(if (0..n as i64).contains(&j) { j as u32 } else { NO_NEIGHBOR });
        }
    }
    let table = Rc::new(NeighborTable { n_in: n, k: 3, idx });
    let x = rand_t(&mut rng, n, 2, 1.0);
    let w = rand_t(&mut rng, 6, 4, 1.0);
    let b = rand_t(&mut rng, 1, 4, 1.0);
    let g = Graph::<f64>::inference();
    let y = g.constant(x.clone()).neighbor_conv(table.clone(), g.constant(w.clone()), Some(g.constant(b.clone())));
    let y = y.value();
    for s in 0..n {
        for o in 0..4 {
            let mut acc = b.data[o];
            for t in 0..3 {
                let j = s as i64 + t as i64 - 1;
                if j < 0 || j >= n as i64 {
                    continue;
                }
                for c in 0..2 {
                    acc += x.at(j as usize, c) * w.at(t * 2 + c, o);
                }
            }
            assert!((y.at(s, o) - acc).abs() < 1e-12);
        }
    }
    let r = check_all(&[x, w, b], 1e-6, move |_, v| v[0].neighbor_conv(table.clone(), v[1], Some(v[2])));
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn deform_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dims = MapDims { width: 5, height: 4 };
    let (heads, points, d) = (2, 3, 4);
    let value = rand_t(&mut rng, 20, d, 1.0);
    let n = 3;
    let refs: Rc<[[f64; 2]]> = (0..n).map(|_| [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)]).collect();
    // Keep sampling positions off the integer lattice so bilinear weights are smooth.
    let offsets = rand_t(&mut rng, n, heads * points * 2, 0.1);
    let attn = softmax_rows(&rand_t(&mut rng, n, heads * points, 1.0));
    let r = check_all(&[value, offsets, attn], 1e-7, move |_, v| {
        v[0].deform_sample(dims, heads, points, refs.clone(), v[1], v[2])
    });
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn deform_sample_bilinear_center_of_2x2() {
    let g = Graph::<f64>::inference();
    let value = g.constant(Tensor::from_f64(4, 1, &[1.0, 2.0, 3.0, 4.0]));
    let refs: Rc<[[f64; 2]]> = vec![[0.5, 0.5]].into();
    let off = g.constant(Tensor::zeros(1, 2));
    let att = g.constant(Tensor::scalar(1.0));
    let y = value.deform_sample(MapDims { width: 2, height: 2 }, 1, 1, refs, off, att);
    assert!((y.item() - 2.5).abs() < 1e-12);
}

#[test]
fn segment_attention_gradients_and_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 4;
    let q = rand_t(&mut rng, 3, d, 1.0);
    let k = rand_t(&mut rng, 5, d, 1.0);
    let v = rand_t(&mut rng, 5, d, 1.0);
    let mut segs = Segments::new();
    segs.push([0, 2, 4]);
    segs.push([]);
    segs.push([1, 3, 2]);
    let segs = Rc::new(segs);
    let s2 = segs.clone();
    let r = check_all(&[q.clone(), k.clone(), v], 1e-6, move |_, x| x[0].segment_attention(x[1], x[2], s2.clone(), 2, 0.7));
    assert!(r.max_rel_err < TOL, "{r:?}");

    let w = segment_attention_weights(&q, &k, &segs, 2, 0.7);
    for i in [0, 2] {
        for m in 0..2 {
            let base = segs.ptr[i] * 2 + m * 3;
            let s: f64 = w[base..base + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn hellinger_through_underflowed_softmax_has_finite_gradient() {
    // exp(-200) underflows to zero in f32.
    let g = Graph::<f32>::new();
    let logits = g.leaf(Tensor::new(1, 3, vec![0.0, 1.0, -200.0]));
    let q = g.leaf(Tensor::new(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]));
    assert_eq!(logits.softmax_rows().value().at(0, 2), 0.0);
    let d = logits.softmax_rows().hellinger_pairs(q).sum();
    let gr = g.backward(d);
    assert!(gr.of(logits).unwrap().is_finite());
    assert!(gr.of(q).unwrap().is_finite());
}

#[test]
fn loss_reductions_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = probs(&mut rng, 6, 4);
    let q = probs(&mut rng, 3, 4);
    let r = check_all(&[p.clone(), q], 1e-7, |_, v| v[0].hellinger_pairs(v[1]));
    assert!(r.max_rel_err < 1e-6, "{r:?}");

    let x = rand_t(&mut rng, 3, 4, 2.0);
    let mut segs = Segments::new();
    segs.push([0, 5, 7]);
    segs.push([11]);
    segs.push([1, 2, 3, 4, 5]);
    let segs = Rc::new(segs);
    let r = check_all(&[x], 1e-6, move |_, v| v[0].segment_logsumexp(segs.clone()));
    assert!(r.max_rel_err < TOL, "{r:?}");

    let labels: Rc<[usize]> = vec![0, 1, 1, 3, 0, 0].into();
    let logits = rand_t(&mut rng, 6, 4, 1.5);
    let l2 = labels.clone();
    let r = check_all(&[logits.clone()], 1e-6, move |_, v| v[0].softmax_rows().scal_geo(l2.clone()));
    assert!(r.max_rel_err < TOL, "{r:?}");
    let l2 = labels.clone();
    let r = check_all(&[logits.clone()], 1e-6, move |_, v| v[0].softmax_rows().scal_sem(l2.clone()));
    assert!(r.max_rel_err < TOL, "{r:?}");
    let r = check_all(&[logits], 1e-7, move |_, v| v[0].softmax_rows().lovasz_softmax(labels.clone()));
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn params_are_shared_within_a_graph() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::from_f64(1, 1, &[3.0]));
    let g = Graph::new();
    let a = g.param(&store, w);
    let b = g.param(&store, w);
    assert_eq!(a.id(), b.id());
    let y = a.mul(b);
    let grads = g.backward(y);
    assert_eq!(grads.param(w).unwrap().item(), 6.0);
}

#[test]
fn inference_graph_records_no_backward() {
    let g = Graph::<f32>::inference();
    let x = g.leaf(Tensor::full(2, 2, 1.0));
    assert!(!x.requires_grad());
    assert!(!x.relu().requires_grad());
}
