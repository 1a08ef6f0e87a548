//! Small derivative-free optimizers and robust-loss helpers shared by the
//! curve fitters.

/// Standard-normal draw by Box–Muller.
pub fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    // u1 in (0, 1] keeps the log finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Huber penalty of a residual: quadratic inside `delta`, linear outside.
pub fn huber(residual: f64, delta: f64) -> f64 {
    let r = residual.abs();
    if r <= delta {
        0.5 * r * r
    } else {
        delta * r - 0.5 * delta * delta
    }
}

/// Ordinary least squares `y = intercept + slope·x`. Returns `None` when
/// the abscissae are degenerate.
pub fn linear_regression(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
/// Returns `(x_best, f_best)`.
pub fn golden_section<F>(f: F, mut a: f64, mut b: f64, x_tol: f64, max_iter: usize) -> (f64, f64)
where
    F: Fn(f64) -> f64,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iter {
        if (b - a).abs() <= x_tol {
            break;
        }
        // NaN compares false, which moves the bracket away from it.
        if fc < fd || fd.is_nan() {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd || fd.is_nan() {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Convergence when the spread of simplex values falls below
    /// `f_abs_tol + f_rel_tol·|f_best|` and the simplex diameter below `x_tol`.
    pub f_abs_tol: f64,
    pub f_rel_tol: f64,
    pub x_tol: f64,
    /// Number of times the search is restarted from its best vertex.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_evals: 20_000, f_abs_tol: 1e-30, f_rel_tol: 1e-15, x_tol: 1e-12, restarts: 4 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

fn eval_safe<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> f64 {
    let v = f(x);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Nelder–Mead simplex minimization from `x0` with per-coordinate initial
/// steps `step`. Non-finite objective values are treated as `+∞`.
pub fn nelder_mead<F>(f: F, x0: &[f64], step: &[f64], opts: NelderMeadOptions) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    let mut best = Minimum { x: x0.to_vec(), value: eval_safe(&f, x0), evals: 1 };
    for _ in 0..=opts.restarts {
        let before = best.value;
        let run = nelder_mead_once(&f, &best.x, step, &opts);
        let evals = best.evals + run.evals;
        if run.value <= best.value {
            best = run;
        }
        best.evals = evals;
        let improved = before - best.value;
        if !(improved > opts.f_abs_tol + opts.f_rel_tol * best.value.abs()) || best.evals >= opts.max_evals {
            break;
        }
    }
    best
}

fn nelder_mead_once<F>(f: &F, x0: &[f64], step: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    const ALPHA: f64 = 1.0;
    const GAMMA: f64 = 2.0;
    const RHO: f64 = 0.5;
    const SIGMA: f64 = 0.5;

    let n = x0.len();
    let mut simplex: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n + 1);
    simplex.push((eval_safe(f, x0), x0.to_vec()));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step[i];
        simplex.push((eval_safe(f, &x), x));
    }
    let mut evals = n + 1;

    let sort = |s: &mut Vec<(f64, Vec<f64>)>| {
        s.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    };
    sort(&mut simplex);

    let along = |from: &[f64], to: &[f64], t: f64| -> Vec<f64> {
        from.iter().zip(to).map(|(c, w)| c + t * (c - w)).collect()
    };

    while evals < opts.max_evals {
        let f_best = simplex[0].0;
        let f_worst = simplex[n].0;
        let spread = f_worst - f_best;
        let diameter = simplex[1..]
            .iter()
            .map(|(_, x)| x.iter().zip(&simplex[0].1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread.is_finite()
            && spread <= opts.f_abs_tol + opts.f_rel_tol * f_best.abs()
            && diameter <= opts.x_tol
        {
            break;
        }
        if diameter <= f64::EPSILON * 4.0 {
            break;
        }

        let mut centroid = vec![0.0; n];
        for (_, x) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / n as f64;
            }
        }

        let worst = simplex[n].1.clone();
        let reflected = along(&centroid, &worst, ALPHA);
        let f_r = eval_safe(f, &reflected);
        evals += 1;

        if f_r < simplex[0].0 {
            let expanded = along(&centroid, &worst, GAMMA);
            let f_e = eval_safe(f, &expanded);
            evals += 1;
            simplex[n] = if f_e < f_r { (f_e, expanded) } else { (f_r, reflected) };
        } else if f_r < simplex[n - 1].0 {
            simplex[n] = (f_r, reflected);
        } else {
            let (contracted, f_c) = if f_r < simplex[n].0 {
                let x = along(&centroid, &worst, RHO * ALPHA);
                let v = eval_safe(f, &x);
                (x, v)
            } else {
                let x = along(&centroid, &worst, -RHO);
                let v = eval_safe(f, &x);
                (x, v)
            };
            evals += 1;
            if f_c < simplex[n].0.min(f_r) {
                simplex[n] = (f_c, contracted);
            } else {
                let x_best = simplex[0].1.clone();
                for (val, x) in simplex.iter_mut().skip(1) {
                    for (xi, bi) in x.iter_mut().zip(&x_best) {
                        *xi = bi + SIGMA * (*xi - bi);
                    }
                    *val = eval_safe(f, x);
                }
                evals += n;
            }
        }
        sort(&mut simplex);
    }

    let (value, x) = simplex.swap_remove(0);
    Minimum { x, value, evals }
}
