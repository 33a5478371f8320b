use ndarray::Array2;
use rand::Rng as _;

use super::{Result, Rng, Tape, Var};

/// Magnitude below which gradients are compared absolutely rather than
/// relatively.
pub const GRADIENT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Sampled coordinates rejected because a perturbation crossed a kink.
    pub skipped_kinks: usize,
    /// (parameter index, flat element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

fn evaluate<F>(params: &[Array2<f64>], f: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape.scalar(loss), tape.kink_signature()))
}

/// Compare analytic gradients of `f` against central differences
/// `(f(x+eps) - f(x-eps)) / 2eps` on up to `max_coords` coordinates.
///
/// Coordinates are drawn round-robin across parameter tensors so every
/// tensor is represented. A coordinate whose perturbation changes any relu
/// sign or max-pool winner is resampled, since the difference quotient
/// straddles a kink there. `f` must be deterministic (no dropout).
pub fn finite_difference_check<F>(
    params: &mut [Array2<f64>],
    mut f: F,
    eps: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let signature = tape.kink_signature();
    let analytic: Vec<Array2<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("parameter leaf"))
        .collect();
    drop(tape);

    let total: usize = params.iter().map(|p| p.len()).sum();
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    if total <= max_coords {
        for (p, a) in params.iter().enumerate() {
            candidates.extend((0..a.len()).map(|i| (p, i)));
        }
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    let nonempty: Vec<usize> = (0..params.len()).filter(|&p| !params[p].is_empty()).collect();
    if nonempty.is_empty() {
        return Ok(report);
    }
    let mut seen = std::collections::HashSet::new();
    let budget = max_coords * 20;
    let mut attempts = 0;
    let mut round = 0;
    while report.checked < max_coords.min(total) && attempts < budget {
        let (p, idx) = if total <= max_coords {
            match candidates.get(attempts) {
                Some(&c) => c,
                None => break,
            }
        } else {
            let p = nonempty[round % nonempty.len()];
            round += 1;
            (p, rng.gen_range(0..params[p].len()))
        };
        attempts += 1;
        if !seen.insert((p, idx)) {
            continue;
        }

        let original = params[p].as_slice_memory_order().expect("contiguous")[idx];
        let set = |params: &mut [Array2<f64>], v: f64| {
            params[p].as_slice_memory_order_mut().expect("contiguous")[idx] = v;
        };
        set(params, original + eps);
        let (plus, sig_plus) = evaluate(params, &mut f)?;
        set(params, original - eps);
        let (minus, sig_minus) = evaluate(params, &mut f)?;
        set(params, original);

        if sig_plus != signature || sig_minus != signature {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let exact = analytic[p].as_slice_memory_order().expect("contiguous")[idx];
        let denom = exact.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
        let err = (exact - numeric).abs() / denom;
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((p, idx));
        }
    }
    Ok(report)
}
