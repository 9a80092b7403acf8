//! Central finite-difference gradient checking.
//!
//! The loss closure is evaluated in `f64` with every parameter perturbed by
//! `±h`; the numeric derivative is compared against the tape's analytic
//! gradient. Relative error is `|analytic - numeric| / max(|analytic|,
//! |numeric|, floor)`; the floor keeps vanishing components from dividing by
//! zero.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

pub const DEFAULT_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Checks up to `max_per_param` evenly spaced entries of every parameter.
pub fn check_gradients<F>(params: &ParamStore<f64>, h: f64, max_per_param: usize, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let eval = |p: &ParamStore<f64>, trainable: bool| -> Result<(Graph<f64>, Var)> {
        let mut g = Graph::new();
        p.bind(&mut g, trainable)?;
        let l = loss(&mut g)?;
        Ok((g, l))
    };
    let (mut g, l) = eval(params, true)?;
    g.backward(l)?;
    let analytic = params.grads(&g)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let n = t.numel();
        let stride = (n / max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = t.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + h;
            let (gp, lp) = eval(&probe, false)?;
            probe.get_mut(name)?.data_mut()[i] = orig - h;
            let (gm, lm) = eval(&probe, false)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            let a = analytic[name].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DEFAULT_FLOOR);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
