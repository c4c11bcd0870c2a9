use super::{NumericsError, Params};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct FdTensorReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub tensors: Vec<FdTensorReport>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn worst(&self) -> Option<&FdTensorReport> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` against central differences of `f` around `params`, scalar by scalar.
pub fn finite_diff_check<P: Params>(
    mut f: impl FnMut(&P) -> f64,
    params: &P,
    analytic: &P,
    h: f64,
    tol: f64,
) -> Result<FdReport, NumericsError> {
    let base = f(params);
    if !base.is_finite() {
        return Err(NumericsError::NonFinite("objective at base point".into()));
    }
    let mut probe = params.clone();
    let n_tensors = params.tensors().len();
    let grads: Vec<Vec<f64>> = analytic
        .tensors()
        .iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut reports = Vec::with_capacity(n_tensors);
    for ti in 0..n_tensors {
        let len = grads[ti].len();
        let mut rep = FdTensorReport {
            name: names[ti].clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in 0..len {
            let orig = probe.tensors()[ti].1.data()[idx];
            set(&mut probe, ti, idx, orig + h);
            let fp = f(&probe);
            set(&mut probe, ti, idx, orig - h);
            let fm = f(&probe);
            set(&mut probe, ti, idx, orig);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(NumericsError::NonFinite(format!("{}[{idx}]", names[ti])));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(grads[ti][idx], numeric);
            if idx == 0 || err > rep.max_rel_err {
                rep.max_rel_err = err;
                rep.worst_index = idx;
                rep.analytic = grads[ti][idx];
                rep.numeric = numeric;
            }
        }
        reports.push(rep);
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(FdReport {
        tensors: reports,
        max_rel_err,
        tol,
        passed: max_rel_err < tol,
    })
}

fn set<P: Params>(p: &mut P, ti: usize, idx: usize, v: f64) {
    let mut ts = p.tensors_mut();
    ts[ti].1.data_mut()[idx] = v;
}
