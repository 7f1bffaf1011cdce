use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable array with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Uniform(f64),
}

/// Owns every parameter of a model. Iteration order is insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, param: Parameter) -> ParamId {
        assert!(
            !self.by_name.contains_key(&param.name),
            "duplicate parameter name {}",
            param.name
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        id
    }

    pub fn init<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let size: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; size],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..size).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
            Init::Uniform(bound) => (0..size).map(|_| rng.gen_range(-bound..=bound)).collect(),
        };
        self.add(Parameter::new(name, Tensor::new(shape.to_vec(), data)))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
}
