//! Central finite-difference verification of [`Graph::backward`].

use crate::error::Result;
use crate::graph::{Graph, Var};

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Leaf (by name when available) and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of scalar `output` w.r.t. every trainable
/// leaf against central differences with step `step`. The graph is
/// replayed for each perturbation and restored before returning.
pub fn check_gradients(g: &mut Graph, output: Var, step: f64) -> Result<GradCheck> {
    let grads = g.backward(output)?;
    let leaves: Vec<(Var, String)> = g
        .trainable_leaves()
        .into_iter()
        .map(|(v, n)| (v, n.map_or_else(|| format!("#{}", v.index()), str::to_string)))
        .collect();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (leaf, name) in leaves {
        let original = g.value(leaf).clone();
        let analytic = grads.get(leaf).expect("trainable leaf has a gradient").clone();
        for i in 0..original.len() {
            let mut plus = original.clone();
            plus.data_mut()[i] += step;
            g.set_leaf(leaf, plus)?;
            g.replay()?;
            let f_plus = g.scalar_value(output)?;

            let mut minus = original.clone();
            minus.data_mut()[i] -= step;
            g.set_leaf(leaf, minus)?;
            g.replay()?;
            let f_minus = g.scalar_value(output)?;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let err = relative_error(analytic.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
        g.set_leaf(leaf, original)?;
    }
    g.replay()?;
    Ok(report)
}
