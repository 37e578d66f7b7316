//! Generalized fuzzy hyperbolic critic: `V(e) = theta^T tanh(Phi e_bar)`.
//!
//! Each error component `e_z` is expanded into one generalized input
//! `e_z - d_zj` per translation `d_zj`; the generalized inputs are ordered
//! lexicographically by `(z, j)`. `Phi` is a fixed positive diagonal, so the
//! model is linear in the weights. The constant offset is fixed at zero so
//! that `V(0) = 0` when all translations are zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GfhmCritic {
    translations: Vec<Vec<f64>>,
    phi: DVector<f64>,
    weights: DVector<f64>,
    // component index and translation of each generalized input
    layout: Vec<(usize, f64)>,
}

impl GfhmCritic {
    pub fn new(translations: Vec<Vec<f64>>, phi: DVector<f64>, weights: DVector<f64>) -> Result<Self> {
        if translations.is_empty() {
            return Err(Error::invalid("critic", "no error components"));
        }
        let layout: Vec<(usize, f64)> = translations
            .iter()
            .enumerate()
            .flat_map(|(z, ds)| ds.iter().map(move |&d| (z, d)))
            .collect();
        let m = layout.len();
        if let Some(z) = translations.iter().position(Vec::is_empty) {
            return Err(Error::invalid(
                "critic",
                format!("error component {} has no translations", z + 1),
            ));
        }
        if layout.iter().any(|(_, d)| !d.is_finite()) {
            return Err(Error::invalid("critic", "non-finite translation"));
        }
        if phi.len() != m {
            return Err(Error::dims("critic phi", m, phi.len()));
        }
        if phi.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::invalid("critic", "phi entries must be positive"));
        }
        if weights.len() != m {
            return Err(Error::dims("critic weights", m, weights.len()));
        }
        Ok(Self {
            translations,
            phi,
            weights,
            layout,
        })
    }

    /// One zero translation per component, `Phi = I`, zero weights.
    pub fn identity(n: usize) -> Self {
        Self::new(vec![vec![0.0]; n], DVector::from_element(n, 1.0), DVector::zeros(n))
            .expect("identity critic is valid for n > 0")
    }

    pub fn error_dim(&self) -> usize {
        self.translations.len()
    }

    /// Number of generalized inputs (and weights), `m`.
    pub fn gen_dim(&self) -> usize {
        self.layout.len()
    }

    pub fn translations(&self) -> &[Vec<f64>] {
        &self.translations
    }

    pub fn phi(&self) -> &DVector<f64> {
        &self.phi
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: DVector<f64>) -> Result<()> {
        if weights.len() != self.gen_dim() {
            return Err(Error::dims("critic weights", self.gen_dim(), weights.len()));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn with_weights(&self, weights: DVector<f64>) -> Result<Self> {
        let mut c = self.clone();
        c.set_weights(weights)?;
        Ok(c)
    }

    pub fn generalized_inputs(&self, e: &DVector<f64>) -> Result<DVector<f64>> {
        if e.len() != self.error_dim() {
            return Err(Error::dims("consensus error", self.error_dim(), e.len()));
        }
        Ok(self.gen_inputs(e))
    }

    fn gen_inputs(&self, e: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.gen_dim(), self.layout.iter().map(|&(z, d)| e[z] - d))
    }

    /// `tanh(Phi e_bar)`.
    pub fn basis(&self, e: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(e.len(), self.error_dim());
        let bar = self.gen_inputs(e);
        DVector::from_fn(self.gen_dim(), |k, _| (self.phi[k] * bar[k]).tanh())
    }

    pub fn value(&self, e: &DVector<f64>) -> f64 {
        self.weights.dot(&self.basis(e))
    }

    /// Value under arbitrary weights, without cloning the critic.
    pub fn value_with(&self, weights: &DVector<f64>, e: &DVector<f64>) -> f64 {
        weights.dot(&self.basis(e))
    }

    /// `Lambda(e_bar)`, the `n x m` Jacobian transpose of the basis with respect to `e`.
    pub fn gradient_matrix(&self, e: &DVector<f64>) -> DMatrix<f64> {
        debug_assert_eq!(e.len(), self.error_dim());
        let bar = self.gen_inputs(e);
        let mut lambda = DMatrix::zeros(self.error_dim(), self.gen_dim());
        for (k, &(z, _)) in self.layout.iter().enumerate() {
            let t = (self.phi[k] * bar[k]).tanh();
            lambda[(z, k)] = self.phi[k] * (1.0 - t * t);
        }
        lambda
    }

    /// `Lambda(e_bar) theta`.
    pub fn value_gradient(&self, e: &DVector<f64>) -> DVector<f64> {
        self.gradient_matrix(e) * &self.weights
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn zero_translations_reproduce_error() {
        let c = GfhmCritic::identity(3);
        let e = v(&[0.1, -0.4, 2.0]);
        assert_eq!(c.generalized_inputs(&e).unwrap(), e);
    }

    #[test]
    fn single_translation_subtracts() {
        let c = GfhmCritic::new(vec![vec![0.5]], v(&[1.0]), v(&[0.0])).unwrap();
        assert_eq!(c.generalized_inputs(&v(&[0.0])).unwrap()[0], -0.5);
    }

    #[test]
    fn two_translations_per_component() {
        let c = GfhmCritic::new(vec![vec![-1.0, 1.0], vec![-1.0, 1.0]], DVector::from_element(4, 1.0), DVector::zeros(4))
            .unwrap();
        let bar = c.generalized_inputs(&v(&[0.3, -0.2])).unwrap();
        assert_relative_eq!(bar, v(&[1.3, -0.7, 0.8, -1.2]), epsilon = 1e-15);
    }

    #[test]
    fn value_examples() {
        let c = GfhmCritic::identity(2);
        assert_eq!(c.value(&v(&[0.7, -3.0])), 0.0);
        let c = c.with_weights(v(&[1.0, -2.0])).unwrap();
        assert_eq!(c.value(&v(&[0.0, 0.0])), 0.0);
        let scalar = GfhmCritic::new(vec![vec![0.0]], v(&[1.0]), v(&[2.0])).unwrap();
        assert_relative_eq!(scalar.value(&v(&[1.0])), 1.523_188_311_911_53, epsilon = 1e-13);
    }

    #[test]
    fn gradient_at_origin_is_identity() {
        let c = GfhmCritic::identity(2);
        assert_eq!(c.gradient_matrix(&v(&[0.0, 0.0])), DMatrix::identity(2, 2));
        assert_eq!(c.value_gradient(&v(&[0.4, 0.1])), DVector::zeros(2));
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(GfhmCritic::new(vec![vec![0.0]], v(&[0.0]), v(&[0.0])).is_err());
        assert!(GfhmCritic::new(vec![vec![0.0]], v(&[1.0, 1.0]), v(&[0.0])).is_err());
        assert!(GfhmCritic::new(vec![vec![]], v(&[]), v(&[])).is_err());
        assert!(GfhmCritic::identity(2).generalized_inputs(&v(&[1.0])).is_err());
    }

    proptest! {
        #[test]
        fn value_bounded_by_weight_l1(w in prop::collection::vec(-5.0..5.0f64, 3), e in prop::collection::vec(-10.0..10.0f64, 3)) {
            let c = GfhmCritic::identity(3).with_weights(DVector::from_vec(w.clone())).unwrap();
            let l1: f64 = w.iter().map(|x| x.abs()).sum();
            prop_assert!(c.value(&DVector::from_vec(e)).abs() <= l1 + 1e-12);
        }

        #[test]
        fn value_is_odd_without_translations(w in prop::collection::vec(-5.0..5.0f64, 2), e in prop::collection::vec(-3.0..3.0f64, 2)) {
            let c = GfhmCritic::identity(2).with_weights(DVector::from_vec(w)).unwrap();
            let e = DVector::from_vec(e);
            prop_assert!((c.value(&-&e) + c.value(&e)).abs() < 1e-14);
        }
    }
}
