//! Central finite differences against reverse-mode gradients.

use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is zero are compared absolutely.
    pub denom_floor: f64,
    /// Relative disagreement between the one-sided slopes over `±2·step`
    /// above which the entry is treated as sitting near a kink and skipped.
    pub kink_rel: f64,
    pub kink_abs: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-4,
            denom_floor: 1e-6,
            kink_rel: 1e-2,
            kink_abs: 1e-8,
        }
    }
}

impl GradCheckConfig {
    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputReport {
    pub max_rel_err: f64,
    /// Flat index of the worst checked entry.
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
    /// Flat indices whose relative error exceeds the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.flagged.is_empty())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|r| r.skipped).sum()
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.with_value(|t| t.len()) != 1 {
        return Err(Error::invalid("grad_check", "function must return a scalar"));
    }
    Ok(out.item())
}

/// Compares reverse-mode gradients of the scalar function `f` with central
/// differences, entry by entry, for every input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(cfg.step > 0.0) {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let f0 = evaluate(&f, inputs)?;
    let h = cfg.step;
    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut rep = InputReport {
            max_rel_err: 0.0,
            worst_index: None,
            checked: 0,
            skipped: 0,
            flagged: Vec::new(),
        };
        for j in 0..input.len() {
            let x = input.data()[j];
            let mut at = |delta: f64| -> Result<f64> {
                work[i].data_mut()[j] = x + delta;
                let v = evaluate(&f, &work);
                work[i].data_mut()[j] = x;
                v
            };
            let (fp, fm) = (at(h)?, at(-h)?);
            let (fp2, fm2) = (at(2.0 * h)?, at(-2.0 * h)?);
            let right = (fp2 - f0) / (2.0 * h);
            let left = (f0 - fm2) / (2.0 * h);
            let scale = right.abs().max(left.abs());
            if (right - left).abs() > cfg.kink_rel * scale + cfg.kink_abs {
                rep.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let exact = analytic[i].data()[j];
            let rel = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(cfg.denom_floor);
            rep.checked += 1;
            if rel > rep.max_rel_err || rep.worst_index.is_none() {
                rep.max_rel_err = rep.max_rel_err.max(rel);
                rep.worst_index = Some(j);
            }
            if !(rel <= cfg.tol) {
                rep.flagged.push(j);
            }
        }
        reports.push(rep);
    }
    Ok(GradCheckReport {
        tol: cfg.tol,
        inputs: reports,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::autodiff::CustomOp;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::vector(vec![0.3, -1.5, 2.0, 0.25]);
        let x = Tensor::vector(vec![1.0, 2.0, -0.5, 0.75]);
        let rep = grad_check(
            |tape, v| {
                let wc = tape.constant(w.clone());
                Ok(v[0].mul(wc)?.sum())
            },
            &[x],
            &GradCheckConfig::default().with_step(1e-5).with_tol(1e-10),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.max_rel_err() < 1e-10);
        assert_eq!(rep.checked(), 4);
    }

    #[test]
    fn sigmoid_matmul_chain() {
        let x = Tensor::new(&[2, 3], vec![0.2, -0.4, 0.9, 1.1, -0.3, 0.05]).unwrap();
        let w = Tensor::new(&[3, 2], vec![0.7, -0.2, 0.4, 1.3, -0.8, 0.6]).unwrap();
        let rep = grad_check(
            |_, v| Ok(v[0].matmul(v[1])?.sigmoid().sum()),
            &[x, w],
            &GradCheckConfig::default().with_step(1e-5).with_tol(1e-6),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    struct WrongSquare;

    impl CustomOp for WrongSquare {
        fn name(&self) -> &str {
            "wrong_square"
        }
        fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
            Ok(inputs[0].map(|x| x * x))
        }
        fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
            // Off by a factor of two on purpose.
            vec![inputs[0].zip_map(grad, |x, g| x * g)]
        }
    }

    #[test]
    fn wrong_backward_rule_is_flagged() {
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let rep = grad_check(
            |tape, v| Ok(tape.custom(Arc::new(WrongSquare), &[v[0]])?.sum()),
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.inputs[0].flagged, vec![0, 1, 2]);
    }

    #[test]
    fn kinks_are_skipped() {
        // |x| at x = 0 sits on the kink.
        let x = Tensor::vector(vec![0.0, 0.5]);
        let rep = grad_check(|_, v| Ok(v[0].abs().sum()), &[x], &GradCheckConfig::default()).unwrap();
        assert!(rep.passed());
        assert_eq!(rep.inputs[0].skipped, 1);
        assert_eq!(rep.inputs[0].checked, 1);
    }
}
