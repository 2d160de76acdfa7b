//! Bounded one-dimensional maximisation: coarse grid bracketing followed by
//! Brent's golden-section/parabolic search.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Optimum {
    pub x: f64,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Brent minimisation of `f` on `[a, b]` with absolute tolerance `tol`.
pub fn brent_minimize<F>(mut f: F, a: f64, b: f64, tol: f64, max_iter: usize) -> Optimum
where
    F: FnMut(f64) -> f64,
{
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = if a <= b { (a, b) } else { (b, a) };
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let mut evaluations = 1;

    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = 1e-10 * x.abs() + tol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            return Optimum { x, value: fx, evaluations, converged: true };
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            e = d;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else if d > 0.0 { x + tol1 } else { x - tol1 };
        let fu = f(u);
        evaluations += 1;
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Optimum { x, value: fx, evaluations, converged: false }
}

/// Maximises `f` over `[0, upper]`.
///
/// Evaluates `f` at zero and on a geometric grid, then refines with Brent
/// between the neighbours of the best grid point. The left endpoint is
/// returned exactly when no interior point beats it.
pub fn maximize_nonnegative<F>(mut f: F, upper: f64, tol: f64, max_iter: usize) -> Optimum
where
    F: FnMut(f64) -> f64,
{
    const GRID_POINTS: usize = 24;
    let lowest = 1e-6_f64.min(upper / 10.0);
    let ratio = (upper / lowest).powf(1.0 / (GRID_POINTS - 1) as f64);
    let mut grid = Vec::with_capacity(GRID_POINTS + 1);
    grid.push(0.0);
    let mut g = lowest;
    for i in 0..GRID_POINTS {
        grid.push(if i + 1 == GRID_POINTS { upper } else { g });
        g *= ratio;
    }
    let values: Vec<f64> = grid.iter().map(|x| f(*x)).collect();
    let mut evaluations = grid.len();
    let best = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
            Some((_, bv)) if bv >= *v => acc,
            _ => Some((i, *v)),
        });
    let Some((k, best_value)) = best else {
        return Optimum { x: 0.0, value: f64::NAN, evaluations, converged: false };
    };
    let lo = grid[k.saturating_sub(1)];
    let hi = grid[(k + 1).min(grid.len() - 1)];
    let inner = brent_minimize(|x| -f(x), lo, hi, tol, max_iter);
    evaluations += inner.evaluations;
    let (x, value) = if -inner.value > best_value { (inner.x, -inner.value) } else { (grid[k], best_value) };
    Optimum { x, value, evaluations, converged: inner.converged }
}
