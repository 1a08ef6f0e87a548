//! Adaptive Simpson quadrature with interval bisection.
//!
//! Each interval is accepted once the two-halves estimate agrees with the
//! whole-interval estimate to within `15·tol_i`, where the local tolerance
//! `tol_i` is the global absolute target scaled by the interval's share of
//! the domain. The accepted value includes the Richardson correction term.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadOptions {
    pub rel_tol: f64,
    /// Cap on the number of bisections performed.
    pub max_subdivisions: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-8, max_subdivisions: 1 << 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub subdivisions: usize,
    /// Accumulated `|S2 - S1| / 15` over accepted intervals.
    pub error_estimate: f64,
}

struct Panel {
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    depth: u32,
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

/// Integrates `f` over `[a, b]` to relative tolerance `opts.rel_tol`.
///
/// Fails with `Error::Domain` if the integrand produces a non-finite value
/// or the subdivision cap is exhausted before convergence.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, opts: QuadOptions) -> Result<QuadResult>
where
    F: Fn(f64) -> f64,
{
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Domain(format!("integration bounds must be finite, got [{a}, {b}]")));
    }
    if !(opts.rel_tol > 0.0) {
        return Err(Error::InvalidInput(format!("rel_tol must be positive, got {}", opts.rel_tol)));
    }
    if a == b {
        return Ok(QuadResult { value: 0.0, subdivisions: 0, error_estimate: 0.0 });
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };

    let eval = |x: f64| -> Result<f64> {
        let y = f(x);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::Domain(format!("integrand is not finite at x = {x}")))
        }
    };

    let fa = eval(lo)?;
    let fb = eval(hi)?;
    let fm = eval(0.5 * (lo + hi))?;
    let whole = simpson(lo, hi, fa, fm, fb);

    // Seed the absolute target from a coarse five-point estimate so that
    // nearly-cancelling first panels do not force a zero tolerance.
    let q1 = eval(lo + 0.25 * (hi - lo))?;
    let q3 = eval(lo + 0.75 * (hi - lo))?;
    let coarse = simpson(lo, 0.5 * (lo + hi), fa, q1, fm) + simpson(0.5 * (lo + hi), hi, fm, q3, fb);
    let abs_target = opts.rel_tol * coarse.abs().max(f64::MIN_POSITIVE);
    let width = hi - lo;

    let mut stack = vec![Panel { a: lo, b: hi, fa, fm, fb, whole, depth: 0 }];
    let mut total = 0.0;
    let mut err = 0.0;
    let mut subdivisions = 0usize;

    while let Some(p) = stack.pop() {
        let m = 0.5 * (p.a + p.b);
        let lm = 0.5 * (p.a + m);
        let rm = 0.5 * (m + p.b);
        let flm = eval(lm)?;
        let frm = eval(rm)?;
        let left = simpson(p.a, m, p.fa, flm, p.fm);
        let right = simpson(m, p.b, p.fm, frm, p.fb);
        let delta = left + right - p.whole;
        let tol = abs_target * (p.b - p.a) / width;

        // Below this width bisection no longer changes the abscissae.
        let exhausted = p.depth >= 60 || (m - p.a) <= f64::EPSILON * p.a.abs().max(1.0);
        if delta.abs() <= 15.0 * tol || exhausted {
            total += left + right + delta / 15.0;
            err += delta.abs() / 15.0;
            continue;
        }
        subdivisions += 1;
        if subdivisions > opts.max_subdivisions {
            return Err(Error::Domain(format!(
                "adaptive quadrature exceeded {} subdivisions on [{lo}, {hi}]",
                opts.max_subdivisions
            )));
        }
        stack.push(Panel { a: m, b: p.b, fa: p.fm, fm: frm, fb: p.fb, whole: right, depth: p.depth + 1 });
        stack.push(Panel { a: p.a, b: m, fa: p.fa, fm: flm, fb: p.fm, whole: left, depth: p.depth + 1 });
    }

    Ok(QuadResult { value: sign * total, subdivisions, error_estimate: err })
}
