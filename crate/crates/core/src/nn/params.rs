use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn, Zip};

use super::{join, Scalar};
use crate::error::{Error, Result};

/// What a stored array is for; decides optimizer treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Running normalization statistics. Not trained, but carried along by EMA and checkpoints.
    RunningStat,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningStat)
    }

    /// Weight decay skips normalization scales and offsets.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::Bias)
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub role: ParamRole,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: ArrayD<F>, role: ParamRole) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad, role }
    }

    pub fn filled(shape: &[usize], v: F, role: ParamRole) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v), role)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Anything that owns named parameters.
pub trait Parameterized<F: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>));

    fn parameter_set(&self, prefix: &str) -> ParameterSet<F> {
        let mut set = ParameterSet::new();
        self.visit(prefix, &mut |name, p| {
            set.insert(name, p.value.clone());
        });
        set
    }

    /// Gradients of the trainable parameters, keyed like [`Parameterized::parameter_set`].
    fn gradient_set(&self, prefix: &str) -> ParameterSet<F> {
        let mut set = ParameterSet::new();
        self.visit(prefix, &mut |name, p| {
            if p.role.trainable() {
                set.insert(name, p.grad.clone());
            }
        });
        set
    }

    /// Overwrites every parameter from `set`. Extra entries in `set` are ignored.
    fn load_parameter_set(&mut self, prefix: &str, set: &ParameterSet<F>) -> Result<()> {
        let mut failure = None;
        self.visit_mut(prefix, &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match set.get(&name) {
                None => failure = Some(Error::MissingBlob(name)),
                Some(v) if v.shape() != p.value.shape() => {
                    failure = Some(Error::ShapeMismatch {
                        name,
                        expected: p.value.shape().to_vec(),
                        found: v.shape().to_vec(),
                    })
                }
                Some(v) => p.value.assign(v),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.role.trainable() {
                n += p.value.len();
            }
        });
        n
    }
}

/// Ordered map of blob name to dense array.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<F> {
    blobs: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> ParameterSet<F> {
    pub fn new() -> Self {
        ParameterSet {
            blobs: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        self.blobs.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.blobs.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<F>> {
        self.blobs.remove(name)
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.blobs.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blobs.keys().map(String::as_str)
    }

    pub fn num_elements(&self) -> usize {
        self.blobs.values().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blobs.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// First blob holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.blobs
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(k, _)| k.as_str())
    }

    /// Entries whose name starts with `prefix.`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> ParameterSet<F> {
        let lead = format!("{prefix}.");
        let blobs = self
            .blobs
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParameterSet { blobs }
    }

    /// Copy of `other` merged in under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParameterSet<F>) {
        for (k, v) in other.iter() {
            self.blobs.insert(join(prefix, k), v.clone());
        }
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_compatible(&self, other: &ParameterSet<F>) -> Result<()> {
        for (name, v) in &self.blobs {
            match other.blobs.get(name) {
                None => return Err(Error::MissingBlob(name.clone())),
                Some(o) if o.shape() != v.shape() => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: v.shape().to_vec(),
                        found: o.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.blobs.keys().find(|k| !self.blobs.contains_key(*k)) {
            return Err(Error::UnexpectedBlob(extra.clone()));
        }
        Ok(())
    }

    pub fn map<G: Scalar>(&self, f: impl Fn(F) -> G) -> ParameterSet<G> {
        ParameterSet {
            blobs: self
                .blobs
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(&f)))
                .collect(),
        }
    }

    pub fn to_f32(&self) -> ParameterSet<f32> {
        self.map(Scalar::as_f32)
    }

    pub fn from_f32(set: &ParameterSet<f32>) -> Self {
        set.map(|v| F::lit(v as f64))
    }

    /// Elementwise `tau * self + (1 - tau) * other`, in place.
    pub fn ema_assign(&mut self, other: &ParameterSet<F>, tau: F) -> Result<()> {
        if !(tau >= F::zero() && tau <= F::one()) {
            return Err(Error::InvalidArgument(format!(
                "moving-average degree must lie in [0, 1], got {tau}"
            )));
        }
        self.check_compatible(other)?;
        let keep = F::one() - tau;
        for (name, t) in self.blobs.iter_mut() {
            let o = &other.blobs[name];
            Zip::from(t).and(o).for_each(|t, &o| {
                let mixed = tau * *t + keep * o;
                // rounding may leave the exact interval by one ulp
                let (lo, hi) = if *t <= o { (*t, o) } else { (o, *t) };
                *t = mixed.max(lo).min(hi);
            });
        }
        Ok(())
    }
}

impl<F> FromIterator<(String, ArrayD<F>)> for ParameterSet<F> {
    fn from_iter<I: IntoIterator<Item = (String, ArrayD<F>)>>(iter: I) -> Self {
        ParameterSet {
            blobs: iter.into_iter().collect(),
        }
    }
}
