use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{MuseError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Network weights train on the training split, architecture logits on the
/// validation split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Weights,
    Arch,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Weights => "weights",
            ParamGroup::Arch => "arch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weights" => Some(ParamGroup::Weights),
            "arch" => Some(ParamGroup::Arch),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub group: ParamGroup,
    pub requires_grad: bool,
}

/// Owns every trainable tensor of a model. Gradients land here after
/// `Graph::backward_into`; a second backward before `zero_grad` is refused.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    grads_pending: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(MuseError::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            group,
            requires_grad: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.params[id.0].requires_grad = flag;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.params[id.0].group == group).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
        self.grads_pending = false;
    }

    pub fn grads_pending(&self) -> bool {
        self.grads_pending
    }

    pub(crate) fn begin_accumulate(&mut self) -> Result<()> {
        if self.grads_pending {
            return Err(MuseError::Contract(
                "backward called again before zero_grad".into(),
            ));
        }
        self.grads_pending = true;
        Ok(())
    }

    pub(crate) fn set_grad(&mut self, id: ParamId, grad: Tensor) {
        self.params[id.0].grad = Some(grad);
    }

    /// Copies every parameter value, for best-checkpoint restore.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }
}

/// Stable 64-bit FNV-1a, used to derive per-parameter RNG streams so that a
/// parameter's initial value depends only on the seed and its name.
pub fn stable_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stable_hash(name))
}

/// Uniform(-bound, bound) initialisation drawn from the parameter's own stream.
pub fn uniform_init(shape: &[usize], bound: f64, seed: u64, name: &str) -> Tensor {
    let mut rng = named_rng(seed, name);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0), ParamGroup::Weights).unwrap();
        assert!(s.add("w", Tensor::scalar(2.0), ParamGroup::Weights).is_err());
    }

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let a = uniform_init(&[3, 2], 0.5, 7, "fc.weight");
        let b = uniform_init(&[3, 2], 0.5, 7, "fc.weight");
        let c = uniform_init(&[3, 2], 0.5, 7, "fc.bias");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|x| x.abs() <= 0.5));
    }
}
