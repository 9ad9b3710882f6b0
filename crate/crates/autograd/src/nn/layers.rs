use crate::error::Result;
use crate::nn::params::{ParamStore, Vars};
use crate::tensor::Tensor;

/// Affine map over the last axis: `x · W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
            bias,
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        store.init_uniform(&format!("{}.weight", self.name), &[self.in_dim, self.out_dim], self.in_dim)?;
        if self.bias {
            store.init_uniform(&format!("{}.bias", self.name), &[self.out_dim], self.in_dim)?;
        }
        Ok(())
    }

    pub fn forward(&self, vars: &Vars, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(vars.get(&format!("{}.weight", self.name))?)?;
        if self.bias {
            y.add(vars.get(&format!("{}.bias", self.name))?)
        } else {
            Ok(y)
        }
    }
}

/// NCHW convolution with optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        store.init_uniform(
            &format!("{}.weight", self.name),
            &[self.out_ch, self.in_ch, self.kernel, self.kernel],
            fan_in,
        )?;
        if self.bias {
            store.init_uniform(&format!("{}.bias", self.name), &[self.out_ch, 1, 1], fan_in)?;
        }
        Ok(())
    }

    pub fn forward(&self, vars: &Vars, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(vars.get(&format!("{}.weight", self.name))?, self.stride, self.pad)?;
        if self.bias {
            y.add(vars.get(&format!("{}.bias", self.name))?)
        } else {
            Ok(y)
        }
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
            eps: 1e-5,
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        store.init_const(&format!("{}.gain", self.name), &[self.dim], 1.0)?;
        store.init_const(&format!("{}.shift", self.name), &[self.dim], 0.0)
    }

    pub fn forward(&self, vars: &Vars, x: &Tensor) -> Result<Tensor> {
        let axis = x.rank() - 1;
        let mean = x.mean_axis(axis)?;
        let centered = x.sub(&mean)?;
        let var = centered.sqr().mean_axis(axis)?;
        let normed = centered.div(&var.add_scalar(self.eps).sqrt())?;
        normed
            .mul(vars.get(&format!("{}.gain", self.name))?)?
            .add(vars.get(&format!("{}.shift", self.name))?)
    }
}
