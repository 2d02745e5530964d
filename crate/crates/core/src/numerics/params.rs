use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors plus their accumulated gradients.
///
/// Gradients only grow through [`ParamStore::accumulate`]; clearing them is
/// an explicit [`ParamStore::zero_grad`] call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name);
        Ok(ParamId(self.values.len() - 1))
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a gradient leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings::new(self.values.iter().map(|v| tape.leaf(v.clone())).collect())
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        Bindings::new(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }

    /// Adds the tape gradients of the bound leaves into the store.
    pub fn accumulate(&mut self, tape: &Tape, bound: &Bindings) {
        for (i, &v) in bound.vars.iter().enumerate() {
            if let Some(g) = tape.grad(v) {
                for (a, b) in self.grads[i].data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    /// Adds `g` into the stored gradient of `id`.
    pub fn add_grad(&mut self, id: ParamId, g: &Tensor) {
        for (a, b) in self.grads[id.0].data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Rounds every value to the nearest `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = f64::from(*x as f32);
            }
        }
    }
}

/// Tape handles for the parameters of one forward pass.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
    /// Handles read as constants; `replace` leaves them on the original
    /// binding.
    detached: Vec<Var>,
}

impl Bindings {
    fn new(vars: Vec<Var>) -> Self {
        Self {
            detached: vars.clone(),
            vars,
        }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Handle whose value a stop-gradient read should use. A gradient check
    /// that replaces `id` still sees the unperturbed value here, so the
    /// finite difference matches the stop-gradient derivative.
    pub fn detached(&self, id: ParamId) -> Var {
        self.detached[id.0]
    }

    /// Substitutes the handle of one parameter (used by gradient checks).
    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }
}

/// Seeded source for parameter initial values.
///
/// Affine weights are drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
/// biases start at zero.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    pub fn fan_in(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(&[fan_in, fan_out], bound)
    }
}

/// Affine map `x · W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.fan_in(in_dim, out_dim))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, p.get(self.weight))?;
        tape.add_row(xw, p.get(self.bias))
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Learned per-feature scale and shift for row-wise layer normalisation.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[1, width], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, width]))?;
        Ok(Self { gamma, beta, width })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.get(self.gamma), p.get(self.beta), super::LN_EPS)
    }

    pub fn num_scalars(&self) -> usize {
        2 * self.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[1, 1])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn init_bounds_and_determinism() {
        let a = Initializer::new(7).fan_in(16, 4);
        let b = Initializer::new(7).fan_in(16, 4);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.25));
        let c = Initializer::new(8).fan_in(16, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn accumulate_then_zero() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::row(&[1.0, 2.0])).unwrap();
        for _ in 0..2 {
            let mut t = Tape::new();
            let b = s.bind(&mut t);
            let sq = t.mul(b.get(id), b.get(id)).unwrap();
            let l = t.sum(sq);
            t.backward(l).unwrap();
            s.accumulate(&t, &b);
        }
        assert_eq!(s.grad(id).data(), &[4.0, 8.0]);
        s.zero_grad();
        assert_eq!(s.grad(id).data(), &[0.0, 0.0]);
    }
}
