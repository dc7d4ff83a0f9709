//! Named parameter storage and the small layer set shared by every network.

use rand::Rng;

use crate::autograd::{Conv3dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Insertion order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Graph plus the parameters it reads from.
#[derive(Clone, Copy)]
pub struct Ctx<'g, S: Scalar> {
    pub g: &'g Graph<S>,
    pub store: &'g ParamStore<S>,
}

impl<'g, S: Scalar> Ctx<'g, S> {
    pub fn new(g: &'g Graph<S>, store: &'g ParamStore<S>) -> Self {
        Self { g, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, S> {
        self.g.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor<S>) -> Var<'g, S> {
        self.g.constant(t)
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform<S: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init_uniform(&[in_dim, out_dim], in_dim, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), init_uniform(&[out_dim], in_dim, rng)));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Applies to the last axis of `x` (rank >= 2).
    pub fn forward<'g, S: Scalar>(&self, cx: &Ctx<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let y = x.matmul(cx.p(self.w))?;
        match self.b {
            Some(b) => y.add(cx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_ch: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            init_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let b = store.add(format!("{name}.b"), init_uniform(&[out_ch], fan_in, rng));
        Self {
            w,
            b,
            stride,
            pad,
            out_ch,
        }
    }

    /// Same-size 3x3 convolution.
    pub fn same3<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_ch, out_ch, 3, 1, 1, rng)
    }

    pub fn pointwise<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_ch, out_ch, 1, 1, 0, rng)
    }

    pub fn forward<'g, S: Scalar>(&self, cx: &Ctx<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let y = x.conv2d(cx.p(self.w), self.stride, self.pad)?;
        y.add(cx.p(self.b).reshape(&[self.out_ch, 1, 1])?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv3dSpec,
    pub out_ch: usize,
}

impl Conv3d {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel.iter().product::<usize>();
        let shape = [out_ch, in_ch, kernel[0], kernel[1], kernel[2]];
        let w = store.add(format!("{name}.w"), init_uniform(&shape, fan_in, rng));
        let b = store.add(format!("{name}.b"), init_uniform(&[out_ch], fan_in, rng));
        Self { w, b, spec, out_ch }
    }

    pub fn forward<'g, S: Scalar>(&self, cx: &Ctx<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let y = x.conv3d(cx.p(self.w), self.spec)?;
        y.add(cx.p(self.b).reshape(&[self.out_ch, 1, 1, 1])?)
    }
}

/// Trainable scalar stored as a rank-0 tensor.
pub fn scalar_param<S: Scalar>(store: &mut ParamStore<S>, name: &str, init: f64) -> ParamId {
    store.add(name, Tensor::scalar(S::lit(init)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_applies_to_last_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let x = g.constant(Tensor::ones(&[4, 5, 3]));
        let y = lin.forward(&cx, x).unwrap();
        assert_eq!(y.shape(), vec![4, 5, 2]);
        let w = store.get(lin.w);
        let b = store.get(lin.b.unwrap());
        let expect = w.at(&[0, 1]) + w.at(&[1, 1]) + w.at(&[2, 1]) + b.at(&[1]);
        assert!((y.value().at(&[2, 3, 1]) - expect).abs() < 1e-12);
    }

    #[test]
    fn store_lookup_by_name() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::zeros(&[2]));
        assert_eq!(store.find("a"), Some(a));
        assert!(store.set(a, Tensor::zeros(&[3])).is_err());
    }
}
