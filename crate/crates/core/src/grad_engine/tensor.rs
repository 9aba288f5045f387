use std::fmt;

use serde::{Deserialize, Serialize};

use super::GradError;

/// Dense row-major `f64` array.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, GradError> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expected != data.len() {
            return Err(GradError::BadTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, GradError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(GradError::BadTensor {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Leading-axis slice `[start, start + count)` as a new tensor.
    pub fn rows(&self, start: usize, count: usize) -> Self {
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Self {
            shape,
            data: self.data[start * row..(start + count) * row].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self, GradError> {
        let first = items.first().ok_or(GradError::EmptyBatch)?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(GradError::ShapeMismatch {
                    context: "stack".into(),
                    expected: first.shape.clone(),
                    actual: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}...", &self.data[..PREVIEW])
        }
    }
}

/// Named tensors with a stable iteration order (insertion order).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), GradError> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(GradError::DuplicateParam(name));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.entries.iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    /// Concatenation of every tensor in iteration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites the values from a flat vector laid out as by [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), GradError> {
        if flat.len() != self.numel() {
            return Err(GradError::ShapeMismatch {
                context: "assign_flat".into(),
                expected: vec![self.numel()],
                actual: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Prefixes every name, e.g. to merge generator and critic into one checkpoint.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) -> Result<(), GradError> {
        for (n, t) in other.entries {
            self.insert(n, t)?;
        }
        Ok(())
    }
}

/// Whether a gradient belongs to one example or to a batch average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradScope {
    PerExample,
    BatchMean,
}

/// Gradients aligned with a [`ParamSet`], tagged with their scope.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRecord {
    grads: Vec<Tensor>,
    scope: GradScope,
}

impl GradRecord {
    pub fn new(grads: Vec<Tensor>, scope: GradScope) -> Self {
        Self { grads, scope }
    }

    pub fn zeros_like(params: &ParamSet, scope: GradScope) -> Self {
        Self {
            grads: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
            scope,
        }
    }

    /// Builds a record from one flat vector, shaped like `params`.
    pub fn from_flat(params: &ParamSet, flat: &[f64], scope: GradScope) -> Result<Self, GradError> {
        let mut tmp = params.clone();
        tmp.assign_flat(flat)?;
        Ok(Self {
            grads: tmp.entries.into_iter().map(|(_, t)| t).collect(),
            scope,
        })
    }

    pub fn scope(&self) -> GradScope {
        self.scope
    }

    pub fn with_scope(mut self, scope: GradScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// L2 norm over the full flattened parameter vector.
    pub fn norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.grads {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Errors unless the shapes equal those of `params`, in order.
    pub fn check_aligned(&self, params: &ParamSet) -> Result<(), GradError> {
        if self.grads.len() != params.len() {
            return Err(GradError::ShapeMismatch {
                context: "gradient record length".into(),
                expected: vec![params.len()],
                actual: vec![self.grads.len()],
            });
        }
        for ((name, p), g) in params.iter().zip(&self.grads) {
            if p.shape() != g.shape() {
                return Err(GradError::ShapeMismatch {
                    context: format!("gradient of {name}"),
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}
