//! Ordered registry of learnable arrays and non-learnable buffers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Learning-rate group. Conv and batch-norm parameters are `Conv`; attention,
/// FFN, layer-norm and positional tables are `Ste`. The head and stem count as
/// `Conv`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Conv,
    Ste,
}

/// What a parameter is, for weight decay and counting filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
    Positional,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

impl BufferId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with std `sqrt(2 / fan_out)`.
    KaimingFanOut {
        fan_out: usize,
    },
    /// Normal resampled until inside two standard deviations.
    TruncNormal {
        std: f64,
    },
}

#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Buffer<T: Element> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Owns every parameter and buffer of a model in registration order.
#[derive(Clone, Debug)]
pub struct ParameterStore<T: Element> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    rng: ChaCha8Rng,
}

impl<T: Element> ParameterStore<T> {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        kind: ParamKind,
        shape: &[usize],
        init: Init,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::KaimingFanOut { fan_out } => {
                let d = Normal::new(0.0, (2.0 / fan_out.max(1) as f64).sqrt()).expect("finite std");
                (0..n).map(|_| T::of(d.sample(&mut self.rng))).collect()
            }
            Init::TruncNormal { std } => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = d.sample(&mut self.rng);
                        if v.abs() <= 2.0 * std {
                            break T::of(v);
                        }
                    })
                    .collect()
            }
        };
        let tensor = Tensor::parameter(data, shape).expect("shape matches data");
        self.params.push(Param {
            name: name.into(),
            group,
            kind,
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, shape: &[usize], fill: T) -> BufferId {
        let n = shape.iter().product();
        self.buffers.push(Buffer {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![fill; n],
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> {
        (0..self.buffers.len()).map(BufferId)
    }

    pub fn buffer(&self, id: BufferId) -> &[T] {
        &self.buffers[id.0].data
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn set_buffer(&mut self, id: BufferId, data: Vec<T>) {
        assert_eq!(data.len(), self.buffers[id.0].data.len(), "buffer length");
        self.buffers[id.0].data = data;
    }

    /// Replaces a parameter's values with a fresh gradient-free leaf.
    pub fn set(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if data.len() != p.tensor.numel() {
            return Err(Error::shape(
                "ParameterStore::set",
                p.tensor.shape(),
                &[data.len()],
            ));
        }
        p.tensor = Tensor::parameter(data, p.tensor.shape())?;
        Ok(())
    }

    /// Installs `t` as the parameter's value as is, keeping any graph it
    /// carries.
    pub(crate) fn replace(&mut self, id: ParamId, t: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if t.shape() != p.tensor.shape() {
            return Err(Error::shape(
                "ParameterStore::replace",
                p.tensor.shape(),
                t.shape(),
            ));
        }
        p.tensor = t;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count over parameters accepted by `filter`.
    pub fn count(&self, filter: impl Fn(&Param<T>) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| filter(p))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    /// Same parameters and buffers cast to another precision.
    pub fn cast<U: Element>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    kind: p.kind,
                    tensor: p.tensor.cast::<U>().into_leaf(true),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    data: b.data.iter().map(|&v| U::of(v.as_f64())).collect(),
                })
                .collect(),
            rng: self.rng.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_order_and_lookup() {
        let mut s = ParameterStore::<f32>::new(0);
        let a = s.add(
            "a.weight",
            ParamGroup::Conv,
            ParamKind::Weight,
            &[2, 3],
            Init::Zeros,
        );
        let b = s.add(
            "b.gain",
            ParamGroup::Ste,
            ParamKind::NormGain,
            &[4],
            Init::Ones,
        );
        assert_eq!(s.find("b.gain"), Some(b));
        assert_eq!(s.ids().collect::<Vec<_>>(), vec![a, b]);
        assert_eq!(s.count(|_| true), 10);
        assert_eq!(s.count(|p| p.group == ParamGroup::Ste), 4);
        assert!(s.get(b).data().iter().all(|&v| v == 1.0));
        assert!(s.get(a).requires_grad());
    }

    #[test]
    fn init_is_seeded() {
        let draw = |seed| {
            let mut s = ParameterStore::<f64>::new(seed);
            let id = s.add(
                "w",
                ParamGroup::Ste,
                ParamKind::Weight,
                &[500],
                Init::TruncNormal { std: 0.02 },
            );
            s.get(id).to_vec()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
        assert!(draw(3).iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn kaiming_scale() {
        let mut s = ParameterStore::<f64>::new(1);
        let id = s.add(
            "w",
            ParamGroup::Conv,
            ParamKind::Weight,
            &[20000],
            Init::KaimingFanOut { fan_out: 50 },
        );
        let v = s.get(id).data();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.002, "{var}");
    }

    #[test]
    fn set_checks_length() {
        let mut s = ParameterStore::<f32>::new(0);
        let id = s.add("w", ParamGroup::Conv, ParamKind::Weight, &[3], Init::Zeros);
        assert!(s.set(id, vec![1.0; 2]).is_err());
        s.set(id, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, 2.0, 3.0]);
    }
}
