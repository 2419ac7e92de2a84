use rand::Rng;

use crate::autodiff::{Mat, Real, Tape, Var};
use crate::error::{validation, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<F>>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self { names: Vec::new(), shapes: Vec::new(), values: Vec::new() }
    }
}

impl<F: Real> ParamSet<F> {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<F>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[F])> {
        self.names.iter().zip(&self.shapes).zip(&self.values).map(|((n, s), v)| (n.as_str(), s.as_slice(), v.as_slice()))
    }

    pub fn fill(&mut self, value: F) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = value);
        }
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self.values.iter().map(|v| v.iter().map(|&x| G::of(x.f64())).collect()).collect(),
        }
    }

    /// Replace every value from `(name, shape, values)` triples. Names and
    /// shapes must match this set exactly.
    pub fn load_from(&mut self, arrays: &[(String, Vec<usize>, Vec<F>)]) -> Result<()> {
        if arrays.len() != self.len() {
            return Err(validation(format!("expected {} parameter arrays, found {}", self.len(), arrays.len())));
        }
        for (name, shape, values) in arrays {
            let id = self.id(name).ok_or_else(|| validation(format!("unexpected parameter {name:?}")))?;
            if self.shapes[id.0] != *shape {
                return Err(validation(format!(
                    "parameter {name:?} has shape {shape:?}, model expects {:?}",
                    self.shapes[id.0]
                )));
            }
            if values.len() != shape.iter().product::<usize>() {
                return Err(validation(format!("parameter {name:?} has {} values for shape {shape:?}", values.len())));
            }
            self.values[id.0].clone_from(values);
        }
        Ok(())
    }

    /// Push every parameter onto `tape`, tracked when `trainable`.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let vars = self
            .shapes
            .iter()
            .zip(&self.values)
            .map(|(shape, v)| {
                let cols = *shape.last().unwrap_or(&1);
                let m = Mat::new(v.len() / cols.max(1), cols, v.clone());
                if trainable {
                    tape.param(m)
                } else {
                    tape.constant(m)
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape variables for a [`ParamSet`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform Kaiming initialisation for a leaky-ReLU network.
pub fn kaiming_uniform<F: Real>(rng: &mut impl Rng, fan_in: usize, count: usize, slope: f64) -> Vec<F> {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    (0..count).map(|_| F::of(rng.random_range(-bound..bound))).collect()
}
