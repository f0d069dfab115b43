//! Central finite differences against reverse-mode gradients.

use crate::graph::Var;
use crate::tensor::Tensor;

/// Relative error used by every gradient check: `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps near-zero gradients from turning round-off into huge ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub points: usize,
    pub max_rel_error: f64,
    /// Coordinates of the worst point as `(input, flat index)`.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let worst_is_other = other.max_rel_error > self.max_rel_error;
        GradCheckReport {
            points: self.points + other.points,
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            worst: if worst_is_other {
                other.worst
            } else {
                self.worst
            },
        }
    }
}

/// Compares the gradient of the scalar `f(inputs)` with central differences.
///
/// `coords` limits which flat indices of each input are probed (all when `None`).
pub fn check_gradients(
    f: impl Fn(&[Var]) -> Var,
    inputs: &[Tensor],
    coords: Option<&[Vec<usize>]>,
    step: f64,
    floor: f64,
) -> GradCheckReport {
    let leaves: Vec<Var> = inputs.iter().cloned().map(Var::leaf).collect();
    let out = f(&leaves);
    assert_eq!(
        out.value().numel(),
        1,
        "gradient check needs a scalar function"
    );
    out.backward();
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| Tensor::zeros(l.shape())))
        .collect();

    let eval = |which: usize, idx: usize, delta: f64| {
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[idx] += delta;
                }
                Var::constant(t)
            })
            .collect();
        f(&vars).value().item()
    };

    let mut report = GradCheckReport {
        points: 0,
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    for (i, input) in inputs.iter().enumerate() {
        let all: Vec<usize>;
        let idxs: &[usize] = match coords {
            Some(c) => &c[i],
            None => {
                all = (0..input.numel()).collect();
                &all
            }
        };
        for &j in idxs {
            let numeric = (eval(i, j, step) - eval(i, j, -step)) / (2.0 * step);
            let err = relative_error(analytic[i].data()[j], numeric, floor);
            report.points += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    report
}
