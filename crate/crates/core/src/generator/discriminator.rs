use serde::{Deserialize, Serialize};

use super::{init_dense, LEAK};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `logit = leaky(x W1 + b1) w2 + b2` on a flattened RGB row vector `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discriminator {
    pub input_dim: usize,
    pub hidden: usize,
}

/// R1 value and its parameter gradient for one real input.
#[derive(Debug, Clone, PartialEq)]
pub struct R1Term {
    /// `‖∂logit/∂x‖²`.
    pub penalty: f64,
    /// Gradient of the penalty, one tensor per parameter.
    pub grads: Vec<Tensor>,
}

fn leaky_slope(s: f64) -> f64 {
    if s > 0.0 {
        1.0
    } else {
        LEAK
    }
}

impl Discriminator {
    pub fn new(input_dim: usize, hidden: usize) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::invalid("discriminator", "dimensions must be positive"));
        }
        Ok(Self { input_dim, hidden })
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("d.w1".into(), vec![self.input_dim, self.hidden]),
            ("d.b1".into(), vec![1, self.hidden]),
            ("d.w2".into(), vec![self.hidden, 1]),
            ("d.b2".into(), vec![1, 1]),
        ]
    }

    pub fn init_params(&self, seed: u64) -> Vec<Tensor> {
        init_dense(&self.param_shapes(), seed)
    }

    /// Logit `[1, 1]` of an input of any shape with `input_dim` elements.
    pub fn logit_var<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let [w1, b1, w2, b2] = params else {
            return Err(Error::invalid("discriminator params", format!("expected 4 tensors, got {}", params.len())));
        };
        let row = x.reshape(&[1, self.input_dim])?;
        row.matmul(*w1)?.add(*b1)?.leaky_relu(LEAK).matmul(*w2)?.add(*b2)
    }

    pub fn logit(&self, params: &[Tensor], x: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let input = tape.constant(Tensor::new(&[1, x.len()], x.to_vec())?);
        Ok(self.logit_var(&vars, input)?.item())
    }

    fn pre_activation(&self, params: &[Tensor], x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim || params.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "discriminator",
                lhs: vec![self.input_dim],
                rhs: vec![x.len()],
            });
        }
        let (w1, b1) = (params[0].data(), params[1].data());
        let h = self.hidden;
        let mut s = b1.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            let row = &w1[i * h..(i + 1) * h];
            for (acc, &w) in s.iter_mut().zip(row) {
                *acc += xi * w;
            }
        }
        Ok(s)
    }

    /// Input gradient `g = W1 (a ⊙ w2)` with `a` the leaky-relu slopes.
    pub fn input_gradient(&self, params: &[Tensor], x: &[f64]) -> Result<Vec<f64>> {
        let s = self.pre_activation(params, x)?;
        let v: Vec<f64> = s.iter().zip(params[2].data()).map(|(&si, &w)| leaky_slope(si) * w).collect();
        let w1 = params[0].data();
        Ok((0..self.input_dim)
            .map(|i| w1[i * self.hidden..(i + 1) * self.hidden].iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Closed-form penalty gradient. The slopes are piecewise constant, so
    /// `∂P/∂W1 = 2 g vᵀ`, `∂P/∂w2 = 2 a ⊙ (W1ᵀ g)` and the biases get zero.
    pub fn r1(&self, params: &[Tensor], x: &[f64]) -> Result<R1Term> {
        let s = self.pre_activation(params, x)?;
        let a: Vec<f64> = s.iter().map(|&si| leaky_slope(si)).collect();
        let v: Vec<f64> = a.iter().zip(params[2].data()).map(|(ai, w)| ai * w).collect();
        let h = self.hidden;
        let w1 = params[0].data();
        let g: Vec<f64> = (0..self.input_dim)
            .map(|i| w1[i * h..(i + 1) * h].iter().zip(&v).map(|(p, q)| p * q).sum())
            .collect();
        let penalty = crate::autodiff::pairwise_sum(&g.iter().map(|x| x * x).collect::<Vec<_>>());
        let mut dw1 = vec![0.0; self.input_dim * h];
        for (i, gi) in g.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                dw1[i * h + j] = 2.0 * gi * vj;
            }
        }
        let mut w1t_g = vec![0.0; h];
        for (i, gi) in g.iter().enumerate() {
            for (acc, w) in w1t_g.iter_mut().zip(&w1[i * h..(i + 1) * h]) {
                *acc += w * gi;
            }
        }
        let dw2: Vec<f64> = a.iter().zip(&w1t_g).map(|(ai, t)| 2.0 * ai * t).collect();
        Ok(R1Term {
            penalty,
            grads: vec![
                Tensor::new(&[self.input_dim, h], dw1)?,
                Tensor::zeros(&[1, h]),
                Tensor::new(&[h, 1], dw2)?,
                Tensor::zeros(&[1, 1]),
            ],
        })
    }
}
