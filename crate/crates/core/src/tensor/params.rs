use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// A trainable value together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Real = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter { value, grad }
    }
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.params.push(Parameter::new(value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| &self.params[id].value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let id = self.id(name)?;
        Some(&mut self.params[id].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<T>)> {
        self.names.iter().map(String::as_str).zip(self.params.iter_mut())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on the tape; the returned vector is indexed by id.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(id, p)| tape.param(id, &p.value))
            .collect()
    }

    /// Converts every value to another precision, keeping names and order.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            params: self.params.iter().map(|p| Parameter::new(p.value.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Convolution kernel `kh×kw×cin×cout`, uniform in `±sqrt(6/fan_in)`.
pub fn init_kernel<T: Real>(kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / (kh * kw * cin) as f64).sqrt();
    Tensor::uniform([kh, kw, cin, cout], -bound, bound, rng)
}

/// `n×n` identity plus Gaussian noise of standard deviation `sigma`.
pub fn init_identity_noise<T: Real>(n: usize, sigma: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Tensor::from_fn([n, n], |i| {
        let diag = if i / n == i % n { 1.0 } else { 0.0 };
        T::lit(diag + normal.sample(rng))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros([2])).unwrap();
        assert!(s.insert("a", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn grad_shape_follows_value() {
        let mut s = ParamStore::<f32>::new();
        let id = s.insert("k", Tensor::zeros([3, 3, 2, 4])).unwrap();
        assert_eq!(s.get(id).grad.shape(), s.get(id).value.shape());
    }

    #[test]
    fn kernel_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k: Tensor<f64> = init_kernel(3, 3, 8, 16, &mut rng);
        let bound = (6.0f64 / 72.0).sqrt();
        assert!(k.data().iter().all(|v| v.abs() <= bound));
        let mean = k.sum() / k.len() as f64;
        assert!(mean.abs() < 0.05);
    }
}
