use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Float, Tensor};

/// Dense layer, weight stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform([din, dout], bound, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::uniform([dout], bound, rng)));
        Self { w, b }
    }

    /// All-zero weights and bias.
    pub fn zeros<T: Float>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([din, dout]));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros([dout])));
        Self { w, b }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform([cout, cin, k, k], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::uniform([cout], bound, rng));
        Self { w, b, stride, pad }
    }

    /// Zero-initialized convolution (weights and bias exactly zero).
    pub fn zeros<T: Float>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([cout, cin, k, k]));
        let b = store.add(format!("{name}.b"), Tensor::zeros([cout]));
        Self { w, b, stride: 1, pad: k / 2 }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = groups.min(channels).max(1);
        assert!(channels % groups == 0, "{name}: {channels} channels do not split into {groups} groups");
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([dim], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([dim]));
        Self { gamma, beta }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}
