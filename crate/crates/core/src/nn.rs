//! Parameter storage and the two basic affine layers.
//!
//! Layers hold indices into a [`Params`] store. A forward pass binds the
//! store into a [`Graph`] (one [`Var`] per tensor) and layers look their
//! weights up in that slice, which lets the discriminator substitute
//! spectrally normalized weights without the layers knowing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Inserts every tensor as a leaf; `trainable` decides whether
    /// gradients flow into them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Gradients for bound vars after [`Graph::backward`]; zero where the
    /// root did not reach a parameter.
    pub fn gradients(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| {
                g.gradient(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }
}

/// Glorot-normal initialisation for a weight with the given fan-in/out.
pub fn glorot<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(shape, std, rng)
}

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub w: usize,
    pub b: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            glorot(vec![fan_in, fan_out], fan_in, fan_out, rng),
        );
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(vec![fan_out])));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, vars[self.w])?;
        match self.b {
            Some(b) => g.add(y, vars[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub k: usize,
    pub b: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        size: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let fan_in = size * size * cin;
        let fan_out = size * size * cout;
        let k = params.add(
            format!("{name}.k"),
            glorot(vec![size, size, cin, cout], fan_in, fan_out, rng),
        );
        let b = params.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        Self {
            k,
            b,
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let y = g.conv2d(x, vars[self.k], self.stride, self.padding)?;
        g.add(y, vars[self.b])
    }
}

pub(crate) fn check_rows(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::dim(op, &[got], &[want]));
    }
    Ok(())
}
