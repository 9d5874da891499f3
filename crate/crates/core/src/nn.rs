//! Parameter-holding layers built on the autograd engine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Uniform `±1/√fan_in` initialisation.
pub fn uniform_init<T: Real>(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| T::c(rng.random_range(-b..b))).collect())
}

pub fn scaled_init<T: Real>(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| T::c(rng.random_range(-scale..scale))).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(d_in, d_out, d_in, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), uniform_init(1, d_out, d_in, rng)));
        Self { w, b }
    }

    pub fn with_init<T: Real>(store: &mut ParamStore<T>, name: &str, w: Tensor<T>, b: Option<Tensor<T>>) -> Self {
        let w = store.add(format!("{name}.w"), w);
        let b = b.map(|b| store.add(format!("{name}.b"), b));
        Self { w, b }
    }

    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.linear(g.param(store, self.w), self.b.map(|b| g.param(store, b)))
    }
}

/// Convolution weights for [`Var::neighbor_conv`]: `(taps·c_in) × c_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub taps: usize,
}

impl Conv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, taps: usize, c_in: usize, c_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let fan = taps * c_in;
        let w = store.add(format!("{name}.w"), uniform_init(fan, c_out, fan, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, c_out)));
        Self { w, b, taps }
    }

    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
        table: std::rc::Rc<crate::autograd::NeighborTable>,
    ) -> Var<'g, T> {
        debug_assert_eq!(table.k, self.taps);
        x.neighbor_conv(table, g.param(store, self.w), self.b.map(|b| g.param(store, b)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, d, T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, d)),
        }
    }

    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm_rows(g.param(store, self.gamma), g.param(store, self.beta), T::c(LN_EPS))
    }
}
