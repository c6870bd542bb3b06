//! Named parameter storage and binding onto a graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter initialization families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Every weight uniform in `[-1, 1]`.
    Uniform1,
    /// Uniform in `(-κ, κ)` with `κ = (input size)^-1/2`.
    #[default]
    FanIn,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::c(rng.gen_range(-bound..=bound))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape product"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn count_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph<S>) -> BoundParams {
        BoundParams { vars: self.tensors.iter().map(|t| g.input(t.clone())).collect() }
    }
}

/// Graph handles for a [`ParamSet`], in parameter order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps existing graph nodes, one per parameter in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Adds this graph's parameter gradients into `acc` (one buffer per parameter).
    pub fn accumulate<S: Scalar>(&self, grads: &Gradients<S>, acc: &mut [Vec<S>]) {
        for (v, buf) in self.vars.iter().zip(acc.iter_mut()) {
            if let Some(g) = grads.raw(*v) {
                buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

/// Affine map `W x + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        name: &str,
        input: usize,
        output: usize,
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        let bound = init_bound(init, input);
        let weight = params.add_uniform(format!("{name}.weight"), &[output, input], bound, rng);
        let bias = params.add_uniform(format!("{name}.bias"), &[output], bound, rng);
        Linear { weight, bias, input, output }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bound: &BoundParams, x: Var) -> crate::Result<Var> {
        let wx = g.matmul(bound.get(self.weight), x)?;
        Ok(g.add(wx, bound.get(self.bias))?)
    }
}

pub fn init_bound(init: InitScheme, input: usize) -> f64 {
    match init {
        InitScheme::Uniform1 => 1.0,
        InitScheme::FanIn => (input.max(1) as f64).powf(-0.5),
    }
}
