//! Ops expressed through the primitive tape ops, so their gradients come
//! for free.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::real::Real;

impl<T: Real> Graph<T> {
    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or(crate::TensorError::InvalidAxis {
                op: "mean",
                axis,
                rank: self.shape(x).len(),
            })?;
        let s = self.sum(x, axis, keepdim)?;
        Ok(self.scale(s, T::one() / T::from_usize(len).unwrap()))
    }

    /// Population variance along `axis`.
    pub fn var(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let mu = self.mean(x, axis, true)?;
        let d = self.sub(x, mu)?;
        let d2 = self.mul(d, d)?;
        self.mean(d2, axis, keepdim)
    }

    /// `Σ_i w_i x_i` along `axis`. `w` broadcasts against `x` and is
    /// expected to sum to one along `axis`.
    pub fn weighted_mean(&mut self, x: Var, w: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let wx = self.mul(x, w)?;
        self.sum(wx, axis, keepdim)
    }

    /// `Σ_i w_i (x_i − μ_w)²` along `axis`, same weight convention as
    /// [`Graph::weighted_mean`].
    pub fn weighted_var(&mut self, x: Var, w: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let mu = self.weighted_mean(x, w, axis, true)?;
        let d = self.sub(x, mu)?;
        let d2 = self.mul(d, d)?;
        self.weighted_mean(d2, w, axis, keepdim)
    }

    /// `x · w + b` over the last axis of a rank-2 input.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Normalises the last axis to zero mean and unit variance, then
    /// applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let last = self.shape(x).len() - 1;
        let mu = self.mean(x, last, true)?;
        let d = self.sub(x, mu)?;
        let d2 = self.mul(d, d)?;
        let v = self.mean(d2, last, true)?;
        let v = self.add_scalar(v, eps);
        let sd = self.sqrt(v);
        let n = self.div(d, sd)?;
        let n = self.mul(n, gamma)?;
        self.add(n, beta)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        Ok(self.scale(s, T::one() / T::from_usize(n).unwrap()))
    }
}
