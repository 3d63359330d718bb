//! Finite-difference verification of outer-loop gradients.

use serde::{Deserialize, Serialize};

use super::loss::{outer_loss, total_loss, TaskBatch};
use super::{MetaModel, ParamGroup};
use crate::diff::{gradient, no_grad};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Outer,
    Total,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub elements: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`; 0 when both vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

fn objective_value(model: &MetaModel, batch: &TaskBatch, obj: Objective) -> Result<f64> {
    Ok(match obj {
        Objective::Outer => outer_loss(model, batch)?.item(),
        Objective::Total => total_loss(model, batch)?.item(),
    })
}

/// Compare the analytic gradient of `obj` with central differences of step
/// `h`, aggregated per parameter group.
pub fn finite_difference_check(model: &MetaModel, batch: &TaskBatch, obj: Objective, h: f64) -> Result<Vec<GroupCheck>> {
    let live = model.with_grad_leaves();
    let loss = match obj {
        Objective::Outer => outer_loss(&live, batch)?,
        Objective::Total => total_loss(&live, batch)?,
    };
    let analytic = gradient(&loss, &live.parameter_tensors(), false)?;

    let _g = no_grad();
    let base = model.detached();
    let values: Vec<Vec<f64>> = base.parameters().iter().map(|(_, t)| t.to_vec()).collect();
    let groups: Vec<ParamGroup> = base.parameters().iter().map(|(g, _)| *g).collect();

    let mut out: Vec<GroupCheck> = Vec::new();
    let mut sums: Vec<(ParamGroup, usize, f64, f64, f64)> = Vec::new();
    for (k, g) in groups.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for e in 0..values[k].len() {
            let mut plus = values.clone();
            plus[k][e] += h;
            let mut minus = values.clone();
            minus[k][e] -= h;
            let fp = objective_value(&base.with_values(&plus)?, batch, obj)?;
            let fm = objective_value(&base.with_values(&minus)?, batch, obj)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k].data()[e];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        match sums.iter_mut().find(|s| s.0 == *g) {
            Some(s) => {
                s.1 += values[k].len();
                s.2 += diff2;
                s.3 += a2;
                s.4 += n2;
            }
            None => sums.push((*g, values[k].len(), diff2, a2, n2)),
        }
    }
    for (group, elements, d2, a2, n2) in sums {
        let scale = a2.sqrt().max(n2.sqrt());
        out.push(GroupCheck {
            group,
            elements,
            rel_error: if scale == 0.0 { 0.0 } else { d2.sqrt() / scale },
            analytic_norm: a2.sqrt(),
        });
    }
    Ok(out)
}
