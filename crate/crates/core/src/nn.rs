//! Parameterised layers on top of [`Graph`].

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::rng::{standard_normal, uniform};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = libm::sqrt(2.0 / fan_in);
        let n = out_ch * in_ch * kernel * kernel;
        let data: Vec<f64> = (0..n).map(|_| standard_normal(rng) * std).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(alloc::vec![out_ch, in_ch, kernel, kernel], data).unwrap(),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.conv2d(x, self.weight, self.bias, self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(in)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(input as f64);
        let w: Vec<f64> = (0..input * output)
            .map(|_| uniform(rng, -bound, bound))
            .collect();
        let b: Vec<f64> = (0..output).map(|_| uniform(rng, -bound, bound)).collect();
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::new(alloc::vec![output, input], w).unwrap(),
                true,
            ),
            bias: Some(store.add(
                format!("{name}.bias"),
                Tensor::new(alloc::vec![output], b).unwrap(),
                true,
            )),
        }
    }

    /// A pure linear map, `y = W x`.
    pub fn without_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(input as f64);
        let w: Vec<f64> = (0..input * output)
            .map(|_| uniform(rng, -bound, bound))
            .collect();
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::new(alloc::vec![output, input], w).unwrap(),
                true,
            ),
            bias: None,
        }
    }

    pub fn in_features(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[1]
    }

    pub fn out_features(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.weight, self.bias)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(
                format!("{name}.weight"),
                Tensor::full(&[channels], 1.0),
                true,
            ),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
                false,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            BN_EPS,
        )
    }
}

/// Folds queued batch-norm statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[crate::graph::BatchNormUpdate]) {
    for u in updates {
        let m = store.get_mut(u.running_mean).data_mut();
        for (r, b) in m.iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let v = store.get_mut(u.running_var).data_mut();
        for (r, b) in v.iter_mut().zip(&u.batch_var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}
