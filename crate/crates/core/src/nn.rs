//! Named parameter storage and the small set of layers the networks use.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Trainable parameter groups; each is an independently freezable unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    FlowComp,
    Propagation,
    Fusion,
    Blocks,
    Decoder,
    Discriminator,
}

impl ParamGroup {
    pub const GENERATOR: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::FlowComp,
        ParamGroup::Propagation,
        ParamGroup::Fusion,
        ParamGroup::Blocks,
        ParamGroup::Decoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::FlowComp => "flowcomp",
            ParamGroup::Propagation => "propagation",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Blocks => "blocks",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Discriminator => "discriminator",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Parameter values in store order.
    pub fn values(&self) -> Vec<Tensor> {
        self.iter().map(|p| p.value.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Record every parameter as a leaf; groups for which `trainable`
    /// returns false become constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: impl Fn(ParamGroup) -> bool) -> Bound<'g> {
        let vars = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), trainable(p.group)))
            .collect();
        Bound { graph, vars }
    }

    /// Replace all values with those of `other`, which must have identical
    /// names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

/// Parameters recorded on one graph.
pub struct Bound<'g> {
    graph: &'g Graph,
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Wrap variables created elsewhere, one per store entry in store order.
    pub fn from_vars(graph: &'g Graph, vars: Vec<Var<'g>>) -> Self {
        Bound { graph, vars }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// `(index in store, gradient)` for every trainable parameter.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}

/// Uniform fan-in scaled initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Square-kernel 2-D convolution over `[N, H, W, C]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Same-padded (for odd kernels) convolution with fan-in initialisation.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let weight = store.add(
            format!("{name}.weight"),
            group,
            init_uniform(&[kernel, kernel, c_in, c_out], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), group, init_uniform(&[c_out], fan_in, rng));
        Conv2d {
            weight,
            bias,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    /// Same as [`new`](Self::new) but with all weights and biases zero.
    pub fn zeros(store: &mut ParamStore, name: &str, group: ParamGroup, c_in: usize, c_out: usize, kernel: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), group, Tensor::zeros(&[kernel, kernel, c_in, c_out]));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[c_out]));
        Conv2d {
            weight,
            bias,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// 3-D convolution over `[N, D, H, W, C]`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel.iter().product::<usize>() * c_in;
        let weight = store.add(
            format!("{name}.weight"),
            group,
            init_uniform(&[kernel[0], kernel[1], kernel[2], c_in, c_out], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), group, init_uniform(&[c_out], fan_in, rng));
        Conv3d { weight, bias, stride, pad }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv(p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, init_uniform(&[d_in, d_out], d_in, rng));
        let bias = store.add(format!("{name}.bias"), group, init_uniform(&[d_out], d_in, rng));
        Linear { weight, bias }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), group, Tensor::zeros(&[d_in, d_out]));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[d_out]));
        Linear { weight, bias }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let d_in = *shape.last().unwrap_or(&0);
        let rows = x.value().numel() / d_in.max(1);
        let flat = x.reshape(&[rows, d_in])?;
        let y = flat.matmul(p.var(self.weight))?.add(p.var(self.bias))?;
        let mut out_shape = shape;
        let d_out = y.shape()[1];
        *out_shape.last_mut().expect("non-scalar") = d_out;
        y.reshape(&out_shape)
    }
}

/// Per-channel affine `x * gamma + beta` after layer normalisation.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::ones(&[dim]));
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(Self::EPS)?.mul(p.var(self.gamma))?.add(p.var(self.beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_groups_bind_as_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = Linear::new(&mut store, "a", ParamGroup::Encoder, 2, 3, &mut rng);
        let b = Linear::new(&mut store, "b", ParamGroup::FlowComp, 3, 1, &mut rng);
        let g = Graph::new();
        let p = store.bind(&g, |grp| grp != ParamGroup::FlowComp);
        let x = g.constant(Tensor::ones(&[4, 2]));
        let y = b.forward(&p, a.forward(&p, x).unwrap()).unwrap().sum().unwrap();
        g.backward(y).unwrap();
        assert!(p.var(a.weight).grad().is_some());
        assert!(p.var(b.weight).grad().is_none());
    }

    #[test]
    fn linear_keeps_leading_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", ParamGroup::Blocks, 4, 6, &mut rng);
        let g = Graph::new();
        let p = store.bind(&g, |_| true);
        let y = l.forward(&p, g.constant(Tensor::zeros(&[2, 3, 5, 4]))).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 5, 6]);
    }
}
