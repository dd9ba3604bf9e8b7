//! Gradient verification against central finite differences.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from;

use super::{Tape, Tensor, TensorValue};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Max relative error allowed per parameter.
    pub tol: f64,
    /// Components checked per tensor; `None` checks every component.
    pub max_components: Option<usize>,
    /// Seed for component sampling and (in train mode) dropout masks.
    pub seed: u64,
    pub train_mode: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            tol: 1e-4,
            max_components: None,
            seed: 0,
            train_mode: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tol)
    }

    /// Worst offender first.
    pub fn ranked(&self) -> Vec<&ParamCheck> {
        let mut v: Vec<&ParamCheck> = self.params.iter().collect();
        v.sort_by(|a, b| b.max_rel_err.partial_cmp(&a.max_rel_err).unwrap());
        v
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    // below the resolution of the difference quotient both are noise
    if denom < 1e-6 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

/// Compares analytic gradients of `f` (a scalar-valued tensor function) with
/// central finite differences, component by component.
pub fn grad_check<F>(
    f: &F,
    params: &[(String, TensorValue)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let make_tape = || {
        if cfg.train_mode {
            Tape::training(cfg.seed)
        } else {
            Tape::new()
        }
    };
    let eval = |values: &[TensorValue]| -> Result<f64> {
        let tape = make_tape();
        let leaves: Vec<Tensor> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = f(&tape, &leaves)?;
        if !loss.is_scalar() {
            return Err(Error::domain("grad_check requires a scalar function"));
        }
        let v = loss.scalar_value();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {v}")));
        }
        Ok(v)
    };

    // analytic pass
    let tape = make_tape();
    let leaves: Vec<Tensor> = params.iter().map(|(_, v)| tape.leaf(v.clone())).collect();
    let loss = f(&tape, &leaves)?;
    if !loss.is_scalar() {
        return Err(Error::domain("grad_check requires a scalar function"));
    }
    let grads = tape.backward(&loss)?;

    let mut rng = rng_from(cfg.seed);
    let mut base: Vec<TensorValue> = params.iter().map(|(_, v)| v.clone()).collect();
    let mut checks = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let name = params[pi].0.clone();
        let len = base[pi].data.len();
        let analytic_full = grads
            .grad(&leaves[pi])
            .map(|g| g.data.clone())
            .unwrap_or_else(|| vec![0.0; len]);
        let indices: Vec<usize> = match cfg.max_components {
            Some(k) if k < len => {
                let mut picked = std::collections::BTreeSet::new();
                while picked.len() < k {
                    picked.insert(rng.gen_range(0..len));
                }
                picked.into_iter().collect()
            }
            _ => (0..len).collect(),
        };
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in indices {
            let orig = base[pi].data[idx];
            base[pi].data[idx] = orig + cfg.step;
            let plus = eval(&base)?;
            base[pi].data[idx] = orig - cfg.step;
            let minus = eval(&base)?;
            base[pi].data[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite finite-difference for {name}[{idx}]"
                )));
            }
            let e = rel_err(analytic_full[idx], numeric);
            if e > worst.max_rel_err {
                worst.max_rel_err = e;
                worst.worst_index = idx;
                worst.analytic = analytic_full[idx];
                worst.numeric = numeric;
            }
        }
        checks.push(worst);
    }
    Ok(GradCheckReport {
        params: checks,
        tol: cfg.tol,
    })
}
