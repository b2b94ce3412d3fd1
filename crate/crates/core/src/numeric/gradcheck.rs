use super::tape::{Tape, Var};
use super::tensor::{Grads, ParamId, ParamStore};
use super::NumericError;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |g_fd − g_ad| / max(1, |g_fd|, |g_ad|) over every scalar parameter.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub checked: usize,
}

/// Compares reverse-mode gradients with central finite differences.
///
/// `f` records a scalar loss on the tape it is given; it must be a pure
/// function of the parameter values.
pub fn grad_check<F>(params: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport, NumericError>
where
    F: Fn(&mut Tape) -> Result<Var, NumericError>,
{
    let eval = |p: &ParamStore| -> Result<f64, NumericError> {
        let mut tape = Tape::new(p);
        let loss = f(&mut tape)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(NumericError::NonFiniteLoss);
        }
        Ok(v)
    };
    let analytic: Grads = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        if !tape.scalar(loss).is_finite() {
            return Err(NumericError::NonFiniteLoss);
        }
        tape.backward(loss)
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        checked: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = analytic.get(id)[i];
            let err = (fd - ad).abs() / 1f64.max(fd.abs()).max(ad.abs());
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(format!("{}[{i}]", params.name(id)));
            }
        }
    }
    Ok(report)
}
