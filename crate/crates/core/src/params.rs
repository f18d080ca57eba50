//! Named parameter arrays over one flat buffer.
//!
//! Every array of a model lives in a single `Vec<f64>`; a [`Slot`] is a typed
//! window into it. Gradients and optimizer moments share the same layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a>(&self, data: &'a [f64]) -> &'a [f64] {
        &data[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a>(&self, data: &'a mut [f64]) -> &'a mut [f64] {
        &mut data[self.offset..self.offset + self.len]
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Registry used while a model lays out its arrays.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    init: Vec<Init>,
    total: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// uniform(-a, a) with a = sqrt(1 / fan_in)
    FanIn(usize),
    Const(f64),
}

impl ParamBuilder {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
        let len = shape.iter().product();
        let slot = Slot {
            offset: self.total,
            len,
        };
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
        });
        self.init.push(init);
        self.total += len;
        slot
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn build<R: Rng + ?Sized>(self, rng: &mut R) -> ParamSet {
        let mut data = vec![0.0; self.total];
        for (spec, init) in self.specs.iter().zip(&self.init) {
            let out = &mut data[spec.offset..spec.offset + spec.len()];
            match *init {
                Init::FanIn(fan_in) => {
                    let a = (1.0 / fan_in.max(1) as f64).sqrt();
                    for v in out {
                        *v = rng.gen_range(-a..a);
                    }
                }
                Init::Const(c) => out.fill(c),
            }
        }
        ParamSet {
            specs: self.specs,
            data,
        }
    }
}

/// Named arrays plus their values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub specs: Vec<ParamSpec>,
    pub data: Vec<f64>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    /// Name of the array holding flat index `i`.
    pub fn name_of(&self, i: usize) -> Option<&str> {
        self.specs
            .iter()
            .find(|s| (s.offset..s.offset + s.len()).contains(&i))
            .map(|s| s.name.as_str())
    }

    pub fn check_layout(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.specs != specs {
            return Err(Error::LayoutMismatch(
                "parameter names or shapes differ from the model".into(),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
