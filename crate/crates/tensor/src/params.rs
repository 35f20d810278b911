use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// U(-b, b) with b = gain * sqrt(3 / fan_in).
    KaimingUniform { fan_in: usize, gain: f64 },
    Normal { std: f64 },
}

impl Init {
    pub fn kaiming(fan_in: usize) -> Self {
        Init::KaimingUniform {
            fan_in,
            gain: std::f64::consts::SQRT_2,
        }
    }

    pub fn sample<T: Real>(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n = crate::tensor::numel(shape);
        let data: Vec<f64> = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::KaimingUniform { fan_in, gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        Tensor::from_f64(shape.to_vec(), &data)
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Tensors sit behind `Arc` so a forward graph can borrow them without
/// copying; the optimizer uses `Arc::make_mut` once the graph is gone.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.values[id.0] = Arc::new(value);
            return id;
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Overwrite every parameter from named tensors. The set of names and
    /// each shape must match exactly.
    pub fn assign(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<(), String> {
        if tensors.len() != self.len() {
            return Err(format!("expected {} tensors, got {}", self.len(), tensors.len()));
        }
        for (name, t) in tensors {
            let id = self.id(&name).ok_or_else(|| format!("unknown parameter {name}"))?;
            if self.get(id).shape() != t.shape() {
                return Err(format!(
                    "{name}: shape {:?} does not match {:?}",
                    t.shape(),
                    self.get(id).shape()
                ));
            }
            self.values[id.0] = Arc::new(t);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Hierarchical parameter registration, in the style of a `VarBuilder`.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child builder with `name` appended to the prefix.
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    /// Child builder drawing from `rng` instead of the shared stream.
    pub fn pp_with_rng<'b>(&'b mut self, name: &str, rng: &'b mut ChaCha8Rng) -> ParamBuilder<'b, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng,
            prefix,
        }
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let value = init.sample(shape, self.rng);
        self.store.insert(full, value)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    /// A fresh generator derived from the current stream, so a sub-module can
    /// be initialised without shifting the draws of its siblings.
    pub fn fork_rng(&mut self) -> ChaCha8Rng {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(self.rng.random())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn prefixes_compose() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let id = pb.pp("enc").pp("conv").var("weight", &[2, 3], Init::Zeros);
        assert_eq!(store.name(id), "enc.conv.weight");
        assert_eq!(store.num_scalars(), 6);
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = Init::KaimingUniform { fan_in: 12, gain: 1.0 }.sample(&[100], &mut rng);
        let bound = (3.0f64 / 12.0).sqrt();
        assert!(t.data().iter().all(|x| x.abs() <= bound));
    }
}
