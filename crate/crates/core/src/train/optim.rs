use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
    Adamw,
}

pub trait Optimizer<T: Real> {
    fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()>;
}

fn check<T: Real>(params: &[&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len()
        || params
            .iter()
            .zip(grads)
            .any(|(p, g)| p.shape() != g.shape())
    {
        return Err(Error::shape(
            "optimizer",
            "parameter and gradient lists disagree",
        ));
    }
    Ok(())
}

/// `g' = g + wd·w; v ← μv + g'; w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }
}

impl<T: Real> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        check(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = grads
                .iter()
                .map(|g| Tensor::zeros(g.shape().to_vec()))
                .collect();
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = mu * *v + (g + wd * *w);
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Adam moments with bias correction; decay `w ← w − lr·wd·w` is applied
/// separately from the adaptive step.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Real> Optimizer<T> for AdamW<T> {
    fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        check(params, grads)?;
        if self.m.is_empty() {
            self.m = grads
                .iter()
                .map(|g| Tensor::zeros(g.shape().to_vec()))
                .collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (tb1, tb2, teps) = (T::of(b1), T::of(b2), T::of(self.eps));
        let (tc1, tc2) = (T::of(c1), T::of(c2));
        let (tlr, decay) = (T::of(lr), T::of(lr * self.weight_decay));
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = tb1 * *m + (T::one() - tb1) * g;
                *v = tb2 * *v + (T::one() - tb2) * g * g;
                let m_hat = *m / tc1;
                let v_hat = *v / tc2;
                *w = *w - decay * *w;
                *w -= tlr * m_hat / (v_hat.sqrt() + teps);
            }
        }
        Ok(())
    }
}
