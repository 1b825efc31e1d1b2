//! Parameter records shared by every module, and the binding of those
//! records into a [`Graph`].

use indexmap::IndexMap;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::init::kaiming_uniform;
use crate::reparam::{rim_remap_graph, RimParams};
use crate::tensor::{PadMode, Tensor};
use crate::Scalar;

/// `weight: [Cout, Cin, k, k]`, optional `bias: [Cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn init<R: Rng>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self {
            weight: kaiming_uniform(vec![cout, cin, k, k], cin * k * k, rng),
            bias: Some(Tensor::zeros(vec![cout])),
        }
    }

    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![cout, cin, k, k]),
            bias: Some(Tensor::zeros(vec![cout])),
        }
    }

    /// `1 x 1` identity map on `c` channels with zero bias.
    pub fn identity(c: usize) -> Self {
        let mut w = Tensor::zeros(vec![c, c, 1, 1]);
        for i in 0..c {
            w.data_mut()[i * c + i] = T::one();
        }
        Self {
            weight: w,
            bias: Some(Tensor::zeros(vec![c])),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn bias_slice(&self) -> Option<&[T]> {
        self.bias.as_ref().map(Tensor::data)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }
}

/// `weight: [in, out]`, `bias: [out]`; applied as `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn init<R: Rng>(inp: usize, out: usize, rng: &mut R) -> Self {
        Self {
            weight: kaiming_uniform(vec![inp, out], inp, rng),
            bias: Tensor::zeros(vec![out]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Binds parameter records into a graph, substituting re-mapped kernels
/// for convolutions that carry a re-interaction branch.
#[derive(Clone, Copy)]
pub struct Binder<'a, T> {
    rim: Option<&'a IndexMap<String, RimParams<T>>>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    /// Every kernel binds as itself.
    pub fn plain() -> Self {
        Self { rim: None }
    }

    pub fn with_rim(rim: &'a IndexMap<String, RimParams<T>>) -> Self {
        Self { rim: Some(rim) }
    }

    /// Effective convolution kernel for the record named `name`.
    pub fn kernel(&self, g: &mut Graph<T>, name: &str, weight: &Tensor<T>) -> Result<Var> {
        let w = g.param(name, weight);
        match self.rim.and_then(|m| m.get(name)) {
            Some(rim) => rim_remap_graph(g, w, rim, name),
            None => Ok(w),
        }
    }

    pub fn conv(
        &self,
        g: &mut Graph<T>,
        x: Var,
        p: &ConvParams<T>,
        prefix: &str,
        pad: PadMode,
    ) -> Result<Var> {
        let k = self.kernel(g, &format!("{prefix}.weight"), &p.weight)?;
        let b = p.bias.as_ref().map(|b| g.param(&format!("{prefix}.bias"), b));
        g.conv(x, k, b, pad, 1)
    }

    pub fn linear(&self, g: &mut Graph<T>, x: Var, p: &LinearParams<T>, prefix: &str) -> Result<Var> {
        let w = g.param(&format!("{prefix}.weight"), &p.weight);
        let b = g.param(&format!("{prefix}.bias"), &p.bias);
        g.linear(x, w, b)
    }
}
