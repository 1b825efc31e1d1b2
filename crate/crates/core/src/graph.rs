//! Reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Graph`] records every operation as it is evaluated; nodes are
//! appended in topological order, so the backward sweep is a single pass
//! from the root to the first node. Each model forward builds a fresh
//! graph, binding parameters by name with [`Graph::param`].

use indexmap::IndexMap;

use crate::coords::fourier_features;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{
    self, conv2d_grouped, conv2d_grouped_backward, local_attention, local_attention_backward,
    matmul, matmul_nt, matmul_tn, PadMode, Taps, Tensor,
};
use crate::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        pad: PadMode,
        groups: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Gelu(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    MatMul(Var, Var),
    AddBias {
        input: Var,
        bias: Var,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    Sample {
        field: Var,
        taps: Vec<Taps<T>>,
    },
    Attention {
        query: Var,
        keys: Var,
        values: Var,
        bias: Var,
        heads: usize,
        scale: T,
        weights: Tensor<T>,
    },
    Fourier {
        freqs: Var,
        offsets: Vec<[T; 2]>,
    },
    L1 {
        pred: Var,
        target: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf registered under `name`; binding the same name
    /// twice returns the first node.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn conv(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        pad: PadMode,
        groups: usize,
    ) -> Result<Var> {
        let b = bias.map(|b| self.value(b).data().to_vec());
        let out = conv2d_grouped(self.value(input), self.value(kernel), b.as_deref(), pad, groups)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let ng = self.needs(&deps);
        Ok(self.push(
            out,
            Op::Conv {
                input,
                kernel,
                bias,
                pad,
                groups,
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = tensor::gelu(self.value(a));
        let ng = self.needs(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat_axis(&vals, axis)?;
        let ng = self.needs(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = tensor::narrow_axis(self.value(input), axis, start, len)?;
        let ng = self.needs(&[input]);
        Ok(self.push(out, Op::Narrow { input, axis, start }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `[rows, n] + [n]` broadcast over rows.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(input).dims2()?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(shape_err!("bias of {} for {} columns", b.len(), n));
        }
        let bd = b.data().to_vec();
        let mut out = self.value(input).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(&bd) {
                *v += bv;
            }
        }
        let ng = self.needs(&[input, bias]);
        Ok(self.push(out, Op::AddBias { input, bias }, ng))
    }

    /// `x W + b` for `x: [rows, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    /// Gathers slices along axis 0; repeated indices accumulate gradient.
    pub fn select_rows(&mut self, input: Var, rows: Vec<usize>) -> Result<Var> {
        let src = self.value(input);
        let outer = src.shape()[0];
        let inner: usize = src.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in &rows {
            if r >= outer {
                return Err(invalid!("row {} of {}", r, outer));
            }
            data.extend_from_slice(&src.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(&[input]);
        Ok(self.push(out, Op::SelectRows { input, rows }, ng))
    }

    /// Weighted gathers from a `[1, C, H, W]` field into `[taps.len(), C]`.
    pub fn sample(&mut self, field: Var, taps: Vec<Taps<T>>) -> Result<Var> {
        let f = self.value(field);
        let (n, c, h, w) = f.dims4()?;
        if n != 1 {
            return Err(invalid!("sample expects a single field"));
        }
        let plane = h * w;
        let d = f.data();
        let mut out = Vec::with_capacity(taps.len() * c);
        for t in &taps {
            for ch in 0..c {
                let base = ch * plane;
                let mut acc = T::zero();
                for &(idx, wt) in t {
                    acc += wt * d[base + idx];
                }
                out.push(acc);
            }
        }
        let out = Tensor::new(vec![taps.len(), c], out)?;
        let ng = self.needs(&[field]);
        Ok(self.push(out, Op::Sample { field, taps }, ng))
    }

    pub fn attention(
        &mut self,
        query: Var,
        keys: Var,
        values: Var,
        bias: Var,
        heads: usize,
        scale: T,
    ) -> Result<Var> {
        let res = local_attention(
            self.value(query),
            self.value(keys),
            self.value(values),
            self.value(bias),
            heads,
            scale,
        )?;
        let ng = self.needs(&[query, keys, values, bias]);
        Ok(self.push(
            res.output,
            Op::Attention {
                query,
                keys,
                values,
                bias,
                heads,
                scale,
                weights: res.weights,
            },
            ng,
        ))
    }

    /// Fourier features `[offsets.len(), 4g]` of fixed offsets.
    pub fn fourier(&mut self, freqs: Var, offsets: Vec<[T; 2]>) -> Result<Var> {
        let out = fourier_features(self.value(freqs), &offsets)?;
        let ng = self.needs(&[freqs]);
        Ok(self.push(out, Op::Fourier { freqs, offsets }, ng))
    }

    /// Mean absolute error against a fixed target, as a `[1]` tensor.
    pub fn l1(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err!("l1 of {:?} against {:?}", p.shape(), target.shape()));
        }
        let n = T::of_usize(p.len().max(1));
        let total: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let ng = self.needs(&[pred]);
        Ok(self.push(Tensor::scalar(total / n), Op::L1 { pred, target }, ng))
    }

    /// Gradients of the sum of `root`'s elements with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op<T>,
        value: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv {
                input,
                kernel,
                bias,
                pad,
                groups,
            } => {
                let cg = conv2d_grouped_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *pad,
                    *groups,
                )?;
                self.accumulate(grads, *input, cg.input)?;
                self.accumulate(grads, *kernel, cg.kernel)?;
                if let Some(b) = bias {
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, cg.bias)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Gelu(a) => {
                let gx = g.zip_map(self.value(*a), |gv, x| gv * tensor::gelu_grad_scalar(x))?;
                self.accumulate(grads, *a, gx)?;
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(shape)?)?;
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    let gp = tensor::narrow_axis(g, *axis, start, len)?;
                    self.accumulate(grads, p, gp)?;
                    start += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let src = self.value(*input);
                let outer: usize = src.shape()[..*axis].iter().product();
                let inner: usize = src.shape()[*axis + 1..].iter().product();
                let ext = src.shape()[*axis];
                let len = value.shape()[*axis];
                let mut full = Tensor::zeros(src.shape().to_vec());
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    let from = o * len * inner;
                    full.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[from..from + len * inner]);
                }
                self.accumulate(grads, *input, full)?;
            }
            Op::MatMul(a, b) => {
                let ga = matmul_nt(g, self.value(*b))?;
                let gb = matmul_tn(self.value(*a), g)?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::AddBias { input, bias } => {
                let n = self.value(*bias).len();
                let mut gb = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *input, g.clone())?;
                self.accumulate(grads, *bias, Tensor::new(shape, gb)?)?;
            }
            Op::SelectRows { input, rows } => {
                let src = self.value(*input);
                let inner: usize = src.shape()[1..].iter().product();
                let mut full = Tensor::zeros(src.shape().to_vec());
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut full.data_mut()[r * inner..(r + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(&g.data()[k * inner..(k + 1) * inner]) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *input, full)?;
            }
            Op::Sample { field, taps } => {
                let f = self.value(*field);
                let (_, c, h, w) = f.dims4()?;
                let plane = h * w;
                let mut full = Tensor::zeros(f.shape().to_vec());
                let fd = full.data_mut();
                for (q, t) in taps.iter().enumerate() {
                    for ch in 0..c {
                        let gv = g.data()[q * c + ch];
                        for &(idx, wt) in t {
                            fd[ch * plane + idx] += wt * gv;
                        }
                    }
                }
                self.accumulate(grads, *field, full)?;
            }
            Op::Attention {
                query,
                keys,
                values,
                bias,
                heads,
                scale,
                weights,
            } => {
                let ag = local_attention_backward(
                    self.value(*query),
                    self.value(*keys),
                    self.value(*values),
                    weights,
                    g,
                    *heads,
                    *scale,
                )?;
                self.accumulate(grads, *query, ag.query)?;
                self.accumulate(grads, *keys, ag.keys)?;
                self.accumulate(grads, *values, ag.values)?;
                self.accumulate(grads, *bias, ag.bias)?;
            }
            Op::Fourier { freqs, offsets } => {
                let f = self.value(*freqs);
                let gcount = f.shape()[0];
                let tau = T::TAU();
                let mut gf = vec![T::zero(); f.len()];
                for (row, d) in offsets.iter().enumerate() {
                    let feat = &value.data()[row * 4 * gcount..(row + 1) * 4 * gcount];
                    let grow = &g.data()[row * 4 * gcount..(row + 1) * 4 * gcount];
                    for j in 0..gcount {
                        for a in 0..2 {
                            let s = feat[2 * j + a];
                            let c = feat[2 * gcount + 2 * j + a];
                            let gs = grow[2 * j + a];
                            let gc = grow[2 * gcount + 2 * j + a];
                            gf[2 * j + a] += tau * d[a] * (gs * c - gc * s);
                        }
                    }
                }
                self.accumulate(grads, *freqs, Tensor::new(f.shape().to_vec(), gf)?)?;
            }
            Op::L1 { pred, target } => {
                let p = self.value(*pred);
                let scale = g.data()[0] / T::of_usize(p.len().max(1));
                let gp = p.zip_map(target, |a, b| {
                    let d = a - b;
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *pred, gp)?;
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: IndexMap<String, Var>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter; `None` if it did not influence the root.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.get(v))
    }
}
