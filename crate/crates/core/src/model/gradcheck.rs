//! Central finite-difference verification of [`loss_and_gradients`].

use crate::diffusion::NoiseSchedule;
use crate::error::Result;

use super::{loss_and_gradients, ParameterSet, TrainItem};

/// Worst disagreement found by [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Compares every analytic gradient entry with `(L(w+h) − L(w−h)) / 2h`.
/// The relative error of an entry is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    params: &ParameterSet<f64>,
    batch: &[TrainItem<f64>],
    schedule: &NoiseSchedule<f64>,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_gradients(params, batch, schedule)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport { entries: 0, max_rel_error: 0.0, worst: String::new() };
    for (name, g) in &grads {
        for i in 0..g.len() {
            let orig = params.tensors[name].data()[i];
            probe.tensors.get_mut(name).expect("same names").data_mut()[i] = orig + h;
            let (up, _) = loss_and_gradients(&probe, batch, schedule)?;
            probe.tensors.get_mut(name).expect("same names").data_mut()[i] = orig - h;
            let (down, _) = loss_and_gradients(&probe, batch, schedule)?;
            probe.tensors.get_mut(name).expect("same names").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.entries += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]: analytic {analytic:e}, numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}
