//! Adaptive Simpson integration.

const MAX_DEPTH: u32 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadratureFailure;

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`.
///
/// The interval is first cut into `panels` equal pieces, each given an equal
/// share of the tolerance. Fails if the integrand is non-finite anywhere it
/// is sampled or a panel does not converge within the depth limit.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
    panels: usize,
) -> Result<f64, QuadratureFailure> {
    if b <= a {
        return Ok(0.0);
    }
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    let panel_tol = tol / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        let lo = a + i as f64 * h;
        let hi = if i + 1 == panels { b } else { lo + h };
        let mid = 0.5 * (lo + hi);
        let (fl, fm, fh) = (eval(f, lo)?, eval(f, mid)?, eval(f, hi)?);
        let whole = simpson(lo, hi, fl, fm, fh);
        total += refine(f, lo, hi, fl, fm, fh, whole, panel_tol, MAX_DEPTH)?;
    }
    Ok(total)
}

fn eval<F: Fn(f64) -> f64>(f: &F, x: f64) -> Result<f64, QuadratureFailure> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(QuadratureFailure)
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn refine<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64, QuadratureFailure> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = eval(f, lm)?;
    let frm = eval(f, rm)?;
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let diff = left + right - whole;
    if diff.abs() <= 15.0 * tol {
        return Ok(left + right + diff / 15.0);
    }
    if depth == 0 {
        return Err(QuadratureFailure);
    }
    Ok(refine(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
        + refine(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?)
}
