//! Named parameter tables shared by the model, the optimizer and checkpoints.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

/// Ordered collection of named tensors. Gradients use the same layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), value.len(), "{name}: shape/value mismatch");
        assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, shape, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Views a 2-D parameter as a matrix (copying).
    pub fn mat(&self, id: ParamId) -> Mat<T> {
        let e = &self.entries[id.0];
        let (r, c) = match e.shape[..] {
            [r, c] => (r, c),
            [n] => (1, n),
            _ => panic!("{} is not a matrix", e.name),
        };
        Mat::from_vec(r, c, e.value.clone())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), shape: e.shape.clone(), value: vec![T::zero(); e.value.len()] })
                .collect(),
        }
    }

    /// Elementwise `self += other`; layouts must match.
    pub fn accumulate(&mut self, other: &Self) {
        assert_eq!(self.entries.len(), other.entries.len());
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.value.iter_mut().zip(&b.value) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for e in &mut self.entries {
            for x in &mut e.value {
                *x = *x * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    value: e.value.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect(),
                })
                .collect(),
        }
    }
}

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
}

pub const INIT_STD: f64 = 0.02;

pub fn init_values<T: Real>(init: Init, n: usize, rng: &mut impl Rng) -> Vec<T> {
    match init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::TruncNormal(std) => (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::lit(z * std);
                }
            })
            .collect(),
    }
}
