//! Gradient descent with a backtracking line search.
//!
//! The shared optimizer contract for both fitting stages: one gradient per
//! iteration, step halving until the loss does not increase, step growth on
//! success, and termination on small relative decrease or exhausted budget.
//! Accepted iterates never increase the loss.

use crate::error::Result;

const ARMIJO_C: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GdOptions {
    pub max_iters: usize,
    /// Relative loss decrease below which the run counts as converged.
    pub rel_tol: f64,
    pub init_step: f64,
    /// Line-search floor; a step below this means no descent was found.
    pub min_step: f64,
}

impl Default for GdOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-6,
            init_step: 1e-2,
            min_step: 1e-14,
        }
    }
}

pub struct GdOutcome {
    pub x: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Minimizes `eval` starting from `x0`.
///
/// `eval(x, true)` must return the loss, a caller-defined breakdown, and the
/// gradient; `eval(x, false)` may skip the gradient. `on_accept` sees every
/// accepted iterate (including the start) with its breakdown and step size.
pub fn minimize<B>(
    x0: Vec<f64>,
    opts: &GdOptions,
    mut eval: impl FnMut(&[f64], bool) -> Result<(f64, B, Option<Vec<f64>>)>,
    mut on_accept: impl FnMut(usize, f64, &B, f64),
) -> Result<GdOutcome> {
    let mut x = x0;
    let (mut loss, breakdown, grad) = eval(&x, true)?;
    let mut grad = grad.expect("gradient requested");
    on_accept(0, loss, &breakdown, 0.0);
    if loss == 0.0 {
        return Ok(GdOutcome {
            x,
            converged: true,
            iterations: 0,
        });
    }

    let mut step = opts.init_step;
    let mut iterations = 0;
    let mut converged = false;
    for iter in 1..=opts.max_iters {
        iterations = iter;
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < 1e-15 {
            converged = true;
            break;
        }
        // Scale so the largest coordinate moves by `step`.
        let scale = step / gmax;
        let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha * step >= opts.min_step {
            let candidate: Vec<f64> = x
                .iter()
                .zip(&grad)
                .map(|(xi, gi)| xi - alpha * scale * gi)
                .collect();
            let (l, b, _) = eval(&candidate, false)?;
            // Armijo sufficient decrease. Plain non-increase is not enough:
            // a symmetric overshoot of an L1 kink yields an equal-loss
            // candidate that would trip the rel-tol check while far from a
            // minimum.
            if l <= loss - ARMIJO_C * alpha * scale * grad_sq {
                accepted = Some((candidate, l, b));
                break;
            }
            alpha *= 0.5;
        }
        let Some((candidate, new_loss, b)) = accepted else {
            converged = true; // no descent along -gradient at this scale
            break;
        };
        let rel = (loss - new_loss) / loss.max(1e-300);
        x = candidate;
        loss = new_loss;
        on_accept(iter, loss, &b, alpha * step);
        // Regrow the trust step after a success, shrink it after backtracks.
        step = (alpha * step * 2.0).clamp(opts.min_step, 1.0);
        if rel < opts.rel_tol || loss == 0.0 {
            converged = true;
            break;
        }
        let (_, _, g) = eval(&x, true)?;
        grad = g.expect("gradient requested");
    }
    Ok(GdOutcome {
        x,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic_bowl() {
        let eval = |x: &[f64], want_grad: bool| {
            let loss: f64 = x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum();
            let grad = want_grad.then(|| {
                x.iter()
                    .enumerate()
                    .map(|(i, v)| 2.0 * (i as f64 + 1.0) * v)
                    .collect()
            });
            Ok((loss, (), grad))
        };
        let out = minimize(vec![1.0, -2.0, 3.0], &GdOptions::default(), eval, |_, _, _, _| {}).unwrap();
        assert!(out.converged);
        let final_loss: f64 = out.x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum();
        assert!(final_loss < 1e-6);
    }

    #[test]
    fn accepted_losses_never_increase_on_l1() {
        let target = [0.3, -0.7, 0.1, 0.9];
        let eval = |x: &[f64], want_grad: bool| {
            let loss: f64 = x.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum();
            let grad = want_grad.then(|| {
                x.iter()
                    .zip(&target)
                    .map(|(a, b)| (a - b).signum())
                    .collect()
            });
            Ok((loss, (), grad))
        };
        let mut trace = Vec::new();
        let out = minimize(
            vec![0.0; 4],
            &GdOptions::default(),
            eval,
            |_, l, _, _| trace.push(l),
        )
        .unwrap();
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
        let final_loss: f64 = out.x.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum();
        assert!(final_loss < 1e-3, "final {final_loss}");
    }
}
