//! Parameterized layers built on [`Graph`] primitives.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// `y = x W + b` on `[N, in]` rows. Biases start at zero.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng)?;
        let bias = store.add_const(format!("{name}.bias"), &[out_dim], 0.0)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_last(y, b)
    }

    /// Applies the layer to a single vector `[in] -> [out]`.
    pub fn forward_vec(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let row = g.reshape(x, &[1, self.in_dim])?;
        let y = self.forward(g, store, row)?;
        g.reshape(y, &[self.out_dim])
    }
}

/// Convolution with a `[K, K, Cin, Cout]` kernel and zero-initialized bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let kernel = store.add_kaiming(format!("{name}.weight"), &[k, k, cin, cout], k * k * cin, rng)?;
        let bias = store.add_const(format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Self {
            kernel,
            bias,
            stride,
            pad,
        })
    }

    pub fn num_params(k: usize, cin: usize, cout: usize) -> usize {
        k * k * cin * cout + cout
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, k, self.stride, self.pad)?;
        g.add_last(y, b)
    }
}

/// Affine parameters of a layer normalization (gamma = 1, beta = 0).
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_const(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.add_const(format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}
