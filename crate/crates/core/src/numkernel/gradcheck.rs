use super::{NumError, ParamSet};

/// Loss differences up to this many ulps of the loss are treated as zero.
const ROUNDOFF_ULPS: f64 = 8.0;

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_a - g_f| / max(|g_a|, |g_f|, 1e-8)` over every scalar.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss` around
/// `params`, one scalar at a time.
///
/// A central difference that is indistinguishable from rounding error in
/// the loss is taken to be exactly zero, so structurally vanishing
/// gradients compare equal instead of dividing roundoff by the floor.
///
/// `loss` must be a deterministic function of the parameters (any noise
/// frozen); this is probed by evaluating it twice at the base point.
pub fn finite_diff_check<P, F>(params: &P, analytic: &P, mut loss: F, epsilon: f64) -> Result<GradCheckReport, NumError>
where
    P: ParamSet,
    F: FnMut(&P) -> f64,
{
    finite_diff_check_parts(params, analytic, |p| [loss(p)], epsilon)
}

/// Like [`finite_diff_check`] for a loss given as a sum of parts. Each
/// part is differenced separately, so the rounding floor follows the size
/// of that part rather than of a sum that may cancel to near zero.
pub fn finite_diff_check_parts<P, F, const K: usize>(
    params: &P,
    analytic: &P,
    mut loss: F,
    epsilon: f64,
) -> Result<GradCheckReport, NumError>
where
    P: ParamSet,
    F: FnMut(&P) -> [f64; K],
{
    if !(epsilon > 1e-7 && epsilon < 1e-3) {
        return Err(NumError::Invalid(format!("finite-difference epsilon {epsilon} outside (1e-7, 1e-3)")));
    }
    let first = loss(params);
    let second = loss(params);
    if let Some((a, b)) = first.iter().zip(&second).find(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(NumError::NonDeterministicLoss { first: *a, second: *b });
    }

    let shapes: Vec<(String, usize)> = params.tensors().iter().map(|(n, m)| (n.to_string(), m.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, m)| m.as_slice().to_vec()).collect();
    if grads.len() != shapes.len() || grads.iter().zip(&shapes).any(|(g, (_, n))| g.len() != *n) {
        return Err(NumError::Invalid("analytic gradient does not match parameter layout".into()));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = params.clone();
    for (t, (name, _)) in shapes.iter().enumerate() {
        for (i, &ga) in grads[t].iter().enumerate() {
            let orig = probe.tensors()[t].1.as_slice()[i];
            set(&mut probe, t, i, orig + epsilon);
            let plus = loss(&probe);
            set(&mut probe, t, i, orig - epsilon);
            let minus = loss(&probe);
            set(&mut probe, t, i, orig);

            let mut numeric = 0.0;
            for (p, m) in plus.iter().zip(&minus) {
                // a difference within rounding of the part itself carries no signal
                let diff = p - m;
                let noise = ROUNDOFF_ULPS * f64::EPSILON * p.abs().max(m.abs());
                if diff.abs() > noise {
                    numeric += diff / (2.0 * epsilon);
                }
            }
            let denom = ga.abs().max(numeric.abs()).max(1e-8);
            let err = (ga - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = ga;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn set<P: ParamSet>(p: &mut P, tensor: usize, index: usize, value: f64) {
    let mut ts = p.tensors_mut();
    ts[tensor].1.as_mut_slice()[index] = value;
}
