use super::{Mat, Real};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Mat<F>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Ordered, named parameter tensors. Insertion order is the serialization
/// order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<F>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<F> {
        &mut self.params[id.0].value
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

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), decay: p.decay })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Gradients<F> {
        Gradients { grads: self.params.iter().map(|p| Mat::zeros(p.value.rows, p.value.cols)).collect() }
    }
}

/// One gradient matrix per parameter, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    pub grads: Vec<Mat<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: ParamId) -> &Mat<F> {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &Gradients<F>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in &mut self.grads {
            g.scale(s);
        }
    }

    /// Euclidean norm over every element, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt()
    }
}
