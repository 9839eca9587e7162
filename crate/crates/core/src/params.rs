//! Named flat parameter storage and its binding onto a tape.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learnable tensors in registration order, each with a unique dotted name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform `rows x cols` matrix.
    pub fn add_xavier<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let t = Tensor::<f64>::uniform(&[rows, cols], bound, rng).cast();
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Number of scalar learnable parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Replace the value of `name`, which must keep its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, file has {:?}",
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Put every parameter on `tape`; they require gradients only when `grad` is set.
    pub fn bind(&self, tape: &mut Tape<T>, grad: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), grad)).collect() }
    }

    /// Gradients of all parameters in store order, zero-filled for unused ones.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Tape variables for each parameter of a store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[1, fan_out]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_row(y, bound.var(b)),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn linear_with_bias_counts_sixteen() {
        let mut store = ParamStore::<f64>::new();
        Linear::init(&mut store, "in", 3, 4, true, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.scalar_count(), 16);
    }

    #[test]
    fn xavier_respects_bound() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add_xavier("w", 10, 20, &mut ChaCha8Rng::seed_from_u64(1));
        let bound = (6.0f32 / 30.0).sqrt();
        assert!(store.get(id).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn assign_checks_name_and_shape() {
        let mut store = ParamStore::<f64>::new();
        store.add_zeros("b", &[1, 2]);
        assert!(store.assign("b", Tensor::ones(&[1, 2])).is_ok());
        assert!(store.assign("b", Tensor::ones(&[2, 1])).is_err());
        assert!(store.assign("c", Tensor::ones(&[1, 2])).is_err());
        assert_eq!(store.get(store.find("b").unwrap()).data(), &[1.0, 1.0]);
    }

    #[test]
    fn linear_forward_and_grads() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::init(&mut store, "l", 2, 3, true, &mut ChaCha8Rng::seed_from_u64(2));
        let unused = store.add_ones("unused", &[2]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let y = lin.forward(&mut tape, &bound, x).unwrap();
        let loss = tape.sum(y);
        let mut grads = tape.backward(loss).unwrap();
        let all = store.collect_grads(&bound, &mut grads);
        assert_eq!(all[lin.weight.index()].data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(all[unused.index()].data(), &[0.0, 0.0]);
    }
}
