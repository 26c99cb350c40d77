//! Reverse-mode vs central-difference gradient comparison.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::Tensor;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero up to truncation error are compared absolutely.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_per_input: Option<usize>,
    pub seed: u64,
    /// When the one-sided differences disagree, a kink lies inside the
    /// stencil; retry with the step divided by 10, at most this many times.
    pub refinements: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-3,
            tol: 1e-3,
            floor: 1e-2,
            max_per_input: None,
            seed: 0,
            refinements: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub name: String,
    pub checked: usize,
    /// Elements whose step was reduced because of a kink.
    pub refined: usize,
    pub passed: bool,
    pub worst_rel_err: f64,
    /// `(input, flat element)` of the worst comparison.
    pub worst_index: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} elements ({} refined), worst rel err {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.refined,
            self.worst_rel_err
        )?;
        if let Some((i, e)) = self.worst_index {
            write!(
                f,
                " at input {i} element {e} (analytic {:.6e}, numeric {:.6e})",
                self.worst_analytic, self.worst_numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare reverse-mode gradients of the scalar `f` at `inputs` against
/// central differences.
pub fn gradcheck<F>(name: &str, inputs: &[Tensor], f: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars)?;
        g.backward(out)?;
        vars.iter()
            .map(|v| v.grad().ok_or_else(|| Error::Autodiff("missing leaf gradient".into())))
            .collect::<Result<_>>()?
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars)?.value().item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        name: name.to_string(),
        checked: 0,
        refined: 0,
        passed: true,
        worst_rel_err: 0.0,
        worst_index: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let elements: Vec<usize> = match opts.max_per_input {
            Some(k) if k < n => {
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for e in elements {
            let orig = input.data()[e];
            let mut center = None;
            let mut step = opts.step;
            let mut numeric;
            let mut round = 0;
            loop {
                work[i].data_mut()[e] = orig + step;
                let plus = eval(&work)?;
                work[i].data_mut()[e] = orig - step;
                let minus = eval(&work)?;
                work[i].data_mut()[e] = orig;
                numeric = (plus - minus) / (2.0 * step);
                if round == opts.refinements {
                    break;
                }
                let c = match center {
                    Some(c) => c,
                    None => *center.insert(eval(&work)?),
                };
                let (right, left) = ((plus - c) / step, (c - minus) / step);
                if relative_error(right, left, opts.floor) <= opts.tol {
                    break;
                }
                step /= 10.0;
                round += 1;
            }
            report.refined += (round > 0) as usize;
            let a = analytic[i].data()[e];
            let rel = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if rel > report.worst_rel_err || report.worst_index.is_none() {
                report.worst_rel_err = rel;
                report.worst_index = Some((i, e));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.worst_rel_err <= opts.tol;
    Ok(report)
}
