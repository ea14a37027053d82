use super::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSegment<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
}

/// Ordered, uniquely named parameter tensors with matching gradient buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterVector<S> {
    segments: Vec<ParamSegment<S>>,
}

impl<S: Scalar> ParameterVector<S> {
    pub fn new() -> Self {
        ParameterVector { segments: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<usize, TensorError> {
        let name = name.into();
        if self.segments.iter().any(|s| s.name == name) {
            return Err(TensorError::Usage(format!("duplicate parameter name {name}")));
        }
        let grad = vec![S::zero(); value.numel()];
        self.segments.push(ParamSegment { name, value, grad });
        Ok(self.segments.len() - 1)
    }

    pub fn segments(&self) -> &[ParamSegment<S>] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [ParamSegment<S>] {
        &mut self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.segments.iter().find(|s| s.name == name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.segments.iter_mut().find(|s| s.name == name).map(|s| &mut s.value)
    }

    /// Total number of scalar parameters.
    pub fn total_dim(&self) -> usize {
        self.segments.iter().map(|s| s.value.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.total_dim());
        for s in &self.segments {
            out.extend_from_slice(s.value.data());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[S]) -> Result<(), TensorError> {
        if flat.len() != self.total_dim() {
            return Err(TensorError::Usage(format!(
                "flat vector of length {} does not match {} parameters",
                flat.len(),
                self.total_dim()
            )));
        }
        let mut off = 0;
        for s in &mut self.segments {
            let n = s.value.numel();
            s.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn grad_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.total_dim());
        for s in &self.segments {
            out.extend_from_slice(&s.grad);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.segments {
            s.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Binds every segment as a gradient-tracking leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<S>) -> Vec<Var> {
        self.segments.iter().map(|s| graph.param(s.value.clone())).collect()
    }

    /// Adds the leaf gradients found in `graph` onto the stored gradients.
    pub fn accumulate_grads(&mut self, graph: &Graph<S>, vars: &[Var]) {
        for (s, &v) in self.segments.iter_mut().zip(vars) {
            if let Some(g) = graph.grad(v) {
                s.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParameterVector<T> {
        ParameterVector {
            segments: self
                .segments
                .iter()
                .map(|s| ParamSegment {
                    name: s.name.clone(),
                    value: s.value.cast(),
                    grad: s.grad.iter().map(|g| T::of(g.f64())).collect(),
                })
                .collect(),
        }
    }
}
