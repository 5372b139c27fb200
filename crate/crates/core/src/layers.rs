//! Parameter containers shared by every sub-network. The same structs hold
//! owned tensors (`T = Tensor`) or their handles on a tape (`T = Var`).

use alloc::vec::Vec;

use crate::error::Result;
use crate::math;
use crate::rng::Lcg;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut Lcg) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
    Tensor::from_parts(shape.to_vec(), data).with_grad()
}

impl Conv<Tensor> {
    /// `k×k` convolution with normal weights of the given std and zero bias.
    pub fn init(k: usize, cin: usize, cout: usize, std: f64, rng: &mut Lcg) -> Self {
        Self {
            weight: normal_tensor(&[k, k, cin, cout], std, rng),
            bias: Tensor::zeros(&[cout]).with_grad(),
        }
    }

    /// He-normal initialisation for a ReLU layer.
    pub fn he(k: usize, cin: usize, cout: usize, rng: &mut Lcg) -> Self {
        Self::init(k, cin, cout, math::sqrt(2.0 / (k * k * cin) as f64), rng)
    }

    pub fn bind(&self, tape: &mut Tape) -> Conv<Var> {
        Conv {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

impl Linear<Tensor> {
    pub fn init(inputs: usize, outputs: usize, std: f64, rng: &mut Lcg) -> Self {
        Self {
            weight: normal_tensor(&[inputs, outputs], std, rng),
            bias: Tensor::zeros(&[outputs]).with_grad(),
        }
    }

    pub fn he(inputs: usize, outputs: usize, rng: &mut Lcg) -> Self {
        Self::init(inputs, outputs, math::sqrt(2.0 / inputs as f64), rng)
    }

    pub fn bind(&self, tape: &mut Tape) -> Linear<Var> {
        Linear {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

impl Conv<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var, stride: usize, pad: usize) -> Result<Var> {
        tape.conv2d(x, self.weight, self.bias, stride, pad)
    }
}

impl Linear<Var> {
    /// `x · W + b` for a batch of row vectors.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_channel(y, self.bias)
    }
}
