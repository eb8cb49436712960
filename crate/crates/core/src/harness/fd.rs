//! One-dimensional finite-difference reference solver.
//!
//! Backward in time from `u(T) = g`, Crank–Nicolson on the linear part
//! `μ u_x + ½σ² u_xx` with a Rannacher start (four implicit half steps) to
//! damp the payoff kink. The generator is treated by Picard iteration at each
//! step. At both ends of the truncated domain `u_xx = 0` is imposed by
//! linear extrapolation.

use crate::error::{Error, Result};
use crate::generator::{Drift, PdeModel};

const PICARD_TOL: f64 = 1e-12;
const PICARD_MAX: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdGrid {
    pub space_points: usize,
    pub time_steps: usize,
    /// Half-width of the domain around the centre; defaults to six standard
    /// deviations (stationary law for OU drift, `σ√T` otherwise).
    pub half_width: Option<f64>,
}

impl Default for FdGrid {
    fn default() -> Self {
        FdGrid { space_points: 1201, time_steps: 800, half_width: None }
    }
}

/// Solution values on the full space-time grid.
#[derive(Clone, Debug)]
pub struct FdSolution {
    pub xs: Vec<f64>,
    pub times: Vec<f64>,
    /// `values[j][i] = u(times[j], xs[i])`.
    pub values: Vec<Vec<f64>>,
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let h = xs[1] - xs[0];
    let pos = ((x - xs[0]) / h).clamp(0.0, (xs.len() - 1) as f64);
    let i = (pos.floor() as usize).min(xs.len() - 2);
    let w = pos - i as f64;
    ys[i] * (1.0 - w) + ys[i + 1] * w
}

impl FdSolution {
    /// Bilinear interpolation of `u(t, x)`.
    pub fn value(&self, t: f64, x: f64) -> f64 {
        let dt = self.times[1] - self.times[0];
        let pos = ((t - self.times[0]) / dt).clamp(0.0, (self.times.len() - 1) as f64);
        let j = (pos.floor() as usize).min(self.times.len() - 2);
        let w = pos - j as f64;
        interp(&self.xs, &self.values[j], x) * (1.0 - w) + interp(&self.xs, &self.values[j + 1], x) * w
    }
}

fn default_half_width(model: &PdeModel, center: f64) -> f64 {
    let sigma = model.volatility().eval(0.0, &[center])[(0, 0)].abs();
    match model.drift() {
        Drift::Affine { linear, .. } if linear[(0, 0)] < 0.0 => 6.0 * sigma / (-2.0 * linear[(0, 0)]).sqrt(),
        _ => 6.0 * sigma * model.horizon().sqrt(),
    }
}

/// Solves `a_i u_{i−1} + b_i u_i + c_i u_{i+1} = r_i` (Thomas algorithm).
fn solve_tridiagonal(a: &[f64], b: &[f64], c: &[f64], r: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut rp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    rp[0] = r[0] / b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        rp[i] = (r[i] - a[i] * rp[i - 1]) / m;
    }
    let mut u = vec![0.0; n];
    u[n - 1] = rp[n - 1];
    for i in (0..n - 1).rev() {
        u[i] = rp[i] - cp[i] * u[i + 1];
    }
    u
}

struct Operator {
    /// Coefficients of `u_{i−1}, u_i, u_{i+1}` in `(L u)_i` for interior nodes.
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

fn operator(model: &PdeModel, t: f64, xs: &[f64], h: f64) -> Result<Operator> {
    let n = xs.len();
    let mut op = Operator { lower: vec![0.0; n], diag: vec![0.0; n], upper: vec![0.0; n] };
    for i in 1..n - 1 {
        let mu = model.drift().eval(t, &[xs[i]])[0];
        let sigma = model.volatility().eval(t, &[xs[i]])[(0, 0)];
        let half_var = 0.5 * sigma * sigma;
        if half_var <= 0.0 {
            return Err(Error::FiniteDifference(format!("zero diffusion at x = {}", xs[i])));
        }
        let peclet = mu.abs() * h / half_var;
        if peclet > 2.0 {
            return Err(Error::FiniteDifference(format!(
                "cell Peclet number {peclet:.3} exceeds 2 at x = {}; refine the grid",
                xs[i]
            )));
        }
        op.lower[i] = half_var / (h * h) - mu / (2.0 * h);
        op.diag[i] = -2.0 * half_var / (h * h);
        op.upper[i] = half_var / (h * h) + mu / (2.0 * h);
    }
    Ok(op)
}

fn apply(op: &Operator, u: &[f64]) -> Vec<f64> {
    let n = u.len();
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        out[i] = op.lower[i] * u[i - 1] + op.diag[i] * u[i] + op.upper[i] * u[i + 1];
    }
    out
}

fn extrapolate(u: &mut [f64]) {
    let n = u.len();
    u[0] = 2.0 * u[1] - u[2];
    u[n - 1] = 2.0 * u[n - 2] - u[n - 3];
}

fn source(model: &PdeModel, t: f64, xs: &[f64], u: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = xs.len();
    (0..n)
        .map(|i| {
            let ux = if i == 0 {
                (u[1] - u[0]) / h
            } else if i == n - 1 {
                (u[n - 1] - u[n - 2]) / h
            } else {
                (u[i + 1] - u[i - 1]) / (2.0 * h)
            };
            model.generator().eval(t, &[xs[i]], u[i], &[ux])
        })
        .collect()
}

/// One θ-step from `τ` to `τ + dτ` in time-to-maturity, i.e. from calendar
/// time `t_old` to `t_new = t_old − dτ`.
fn theta_step(model: &PdeModel, xs: &[f64], h: f64, u_old: &[f64], t_old: f64, t_new: f64, theta: f64) -> Result<Vec<f64>> {
    let n = xs.len();
    let dtau = t_old - t_new;
    let op_old = operator(model, t_old, xs, h)?;
    let op_new = operator(model, t_new, xs, h)?;
    let explicit = apply(&op_old, u_old);
    let f_old = source(model, t_old, xs, u_old, h)?;

    // interior unknowns 1..n−1 with the extrapolated ends folded in
    let m = n - 2;
    let mut a = vec![0.0; m];
    let mut b = vec![0.0; m];
    let mut c = vec![0.0; m];
    for k in 0..m {
        let i = k + 1;
        a[k] = -theta * dtau * op_new.lower[i];
        b[k] = 1.0 - theta * dtau * op_new.diag[i];
        c[k] = -theta * dtau * op_new.upper[i];
    }
    // u_0 = 2u_1 − u_2 and u_{n−1} = 2u_{n−2} − u_{n−3}
    b[0] += 2.0 * a[0];
    c[0] -= a[0];
    a[0] = 0.0;
    b[m - 1] += 2.0 * c[m - 1];
    a[m - 1] -= c[m - 1];
    c[m - 1] = 0.0;

    let mut u = u_old.to_vec();
    for _ in 0..PICARD_MAX {
        let f_new = source(model, t_new, xs, &u, h)?;
        let r: Vec<f64> = (0..m)
            .map(|k| {
                let i = k + 1;
                u_old[i] + (1.0 - theta) * dtau * explicit[i] + dtau * (theta * f_new[i] + (1.0 - theta) * f_old[i])
            })
            .collect();
        let interior = solve_tridiagonal(&a, &b, &c, &r);
        let mut next = vec![0.0; n];
        next[1..n - 1].copy_from_slice(&interior);
        extrapolate(&mut next);
        let change = next.iter().zip(&u).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let scale = next.iter().map(|v| v.abs()).fold(1.0, f64::max);
        u = next;
        if !change.is_finite() {
            break;
        }
        if change <= PICARD_TOL * scale {
            return Ok(u);
        }
    }
    Err(Error::FiniteDifference(format!("Picard iteration did not converge at t = {t_new}")))
}

/// Finite-difference solution of the one-dimensional model on
/// `[center − w, center + w] × [0, T]`.
pub fn fd_oracle_1d(model: &PdeModel, center: f64, grid: FdGrid) -> Result<FdSolution> {
    if model.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: model.dim() });
    }
    if grid.space_points < 5 || grid.time_steps < 4 {
        return Err(Error::FiniteDifference("grid needs at least 5 space points and 4 time steps".into()));
    }
    let width = grid.half_width.unwrap_or_else(|| default_half_width(model, center));
    let n = grid.space_points;
    let h = 2.0 * width / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| center - width + i as f64 * h).collect();
    let horizon = model.horizon();
    let dt = horizon / grid.time_steps as f64;

    let mut u: Vec<f64> = xs.iter().map(|x| model.terminal().eval(&[*x])).collect();
    let mut levels = vec![u.clone()];
    let mut times = vec![horizon];
    for j in 0..grid.time_steps {
        let t_old = horizon - j as f64 * dt;
        let t_new = horizon - (j + 1) as f64 * dt;
        if j < 2 {
            let t_mid = 0.5 * (t_old + t_new);
            u = theta_step(model, &xs, h, &u, t_old, t_mid, 1.0)?;
            u = theta_step(model, &xs, h, &u, t_mid, t_new, 1.0)?;
        } else {
            u = theta_step(model, &xs, h, &u, t_old, t_new, 0.5)?;
        }
        levels.push(u.clone());
        times.push(t_new);
    }
    levels.reverse();
    times.reverse();
    Ok(FdSolution { xs, times, values: levels })
}
