//! Explicit time integrators: fixed-step Euler and classical RK4, and an
//! adaptive Dormand–Prince 5(4) pair with PI step-size control.
//!
//! Solvers are generic over [`OdeState`] so the same code integrates plain
//! grid fields and the augmented (state, adjoint, parameter) systems used for
//! gradient computation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_grid::GridField;

pub trait OdeState: Clone {
    /// `self + a * x`.
    fn axpy(&self, a: f64, x: &Self) -> Self;

    /// Flat views of all components, in a fixed order.
    fn slices(&self) -> Vec<&[f64]>;

    /// `self + Σ c_i x_i`, summed left to right.
    fn lincomb(&self, terms: &[(f64, &Self)]) -> Self {
        let mut acc = self.clone();
        for (c, x) in terms {
            acc = acc.axpy(*c, x);
        }
        acc
    }

    fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl OdeState for GridField {
    fn axpy(&self, a: f64, x: &Self) -> Self {
        GridField::axpy(a, x, self).expect("solver states share one shape")
    }

    fn slices(&self) -> Vec<&[f64]> {
        vec![self.data()]
    }

    fn lincomb(&self, terms: &[(f64, &Self)]) -> Self {
        let mut data = self.data().to_vec();
        for (c, x) in terms {
            for (d, v) in data.iter_mut().zip(x.data()) {
                *d += c * v;
            }
        }
        self.with_data(self.channels(), data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Euler,
    Rk4,
    AdaptiveRk,
}

impl std::str::FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SolverMethod::Euler),
            "rk4" => Ok(SolverMethod::Rk4),
            "adaptive_rk" | "adaptive" | "dopri5" => Ok(SolverMethod::AdaptiveRk),
            _ => Err(Error::InvalidConfig(format!(
                "unknown solver `{s}` (expected euler, rk4 or adaptive_rk)"
            ))),
        }
    }
}

/// Step-size controller constants for the adaptive method.
const SAFETY: f64 = 0.9;
const PI_BETA: f64 = 0.04;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
const MAX_STEPS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub method: SolverMethod,
    /// Step for fixed-step methods; the largest step that evenly divides each
    /// output interval is used.
    pub dt: f64,
    pub rtol: f64,
    pub atol: f64,
    pub t0: f64,
    pub save_at: Vec<f64>,
}

impl SolveConfig {
    pub fn fixed(method: SolverMethod, dt: f64, t0: f64, save_at: Vec<f64>) -> Self {
        Self {
            method,
            dt,
            rtol: 1e-8,
            atol: 1e-8,
            t0,
            save_at,
        }
    }

    pub fn adaptive(rtol: f64, atol: f64, t0: f64, save_at: Vec<f64>) -> Self {
        Self {
            method: SolverMethod::AdaptiveRk,
            dt: 1.0,
            rtol,
            atol,
            t0,
            save_at,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.save_at.is_empty() {
            return bad("save_at must not be empty".into());
        }
        if !(self.save_at[0] >= self.t0) {
            return bad(format!("save_at[0] = {} precedes t0 = {}", self.save_at[0], self.t0));
        }
        if self.save_at.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("save_at must be strictly increasing".into());
        }
        if !(self.dt > 0.0) || !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return bad(format!(
                "dt, rtol and atol must be positive (dt = {}, rtol = {}, atol = {})",
                self.dt, self.rtol, self.atol
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S = GridField> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
}

/// Number of uniform fixed steps used to cover an interval of length `span`.
pub fn substeps(span: f64, dt: f64) -> usize {
    ((span / dt) - 1e-9).ceil().max(1.0) as usize
}

pub fn euler_step<S, F>(rhs: &mut F, t: f64, y: &S, h: f64) -> Result<S>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    let k = rhs(t, y)?;
    Ok(y.axpy(h, &k))
}

pub fn rk4_step<S, F>(rhs: &mut F, t: f64, y: &S, h: f64) -> Result<S>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    let k1 = rhs(t, y)?;
    let k2 = rhs(t + 0.5 * h, &y.axpy(0.5 * h, &k1))?;
    let k3 = rhs(t + 0.5 * h, &y.axpy(0.5 * h, &k2))?;
    let k4 = rhs(t + h, &y.axpy(h, &k3))?;
    Ok(y.lincomb(&[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)]))
}

/// Integrates `dy/dt = rhs(t, y)` and returns the states at `cfg.save_at`.
pub fn solve<S, F>(rhs: F, y0: &S, cfg: &SolveConfig) -> Result<Trajectory<S>>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    let mut traj = Trajectory {
        times: Vec::with_capacity(cfg.save_at.len()),
        states: Vec::with_capacity(cfg.save_at.len()),
    };
    solve_with(rhs, y0, cfg, |_, t, y| {
        traj.times.push(t);
        traj.states.push(y.clone());
        Ok(())
    })?;
    Ok(traj)
}

/// Like [`solve`], but hands each saved state to `observer(index, t, state)`
/// instead of collecting them.
pub fn solve_with<S, F, O>(mut rhs: F, y0: &S, cfg: &SolveConfig, mut observer: O) -> Result<()>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
    O: FnMut(usize, f64, &S) -> Result<()>,
{
    cfg.validate()?;
    match cfg.method {
        SolverMethod::Euler | SolverMethod::Rk4 => {
            let mut t = cfg.t0;
            let mut y = y0.clone();
            let mut step = 0;
            for (idx, &target) in cfg.save_at.iter().enumerate() {
                let span = target - t;
                if span > 0.0 {
                    let n = substeps(span, cfg.dt);
                    let h = span / n as f64;
                    for k in 0..n {
                        let tk = t + k as f64 * h;
                        y = match cfg.method {
                            SolverMethod::Euler => euler_step(&mut rhs, tk, &y, h)?,
                            _ => rk4_step(&mut rhs, tk, &y, h)?,
                        };
                        step += 1;
                        if !y.is_finite() {
                            return Err(Error::Divergence { t: tk + h, step });
                        }
                    }
                }
                t = target;
                observer(idx, target, &y)?;
            }
            Ok(())
        }
        SolverMethod::AdaptiveRk => dopri5(&mut rhs, y0, cfg, &mut observer),
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B5: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
/// Fifth-order minus fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn weighted_rms<S: OdeState>(v: &S, refs: &[&S], atol: f64, rtol: f64) -> f64 {
    let vs = v.slices();
    let rs: Vec<Vec<&[f64]>> = refs.iter().map(|r| r.slices()).collect();
    let mut acc = 0.0;
    let mut n = 0usize;
    for (si, s) in vs.iter().enumerate() {
        for (j, &e) in s.iter().enumerate() {
            let mag = rs.iter().fold(0.0f64, |m, r| m.max(r[si][j].abs()));
            let w = e / (atol + rtol * mag);
            acc += w * w;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (acc / n as f64).sqrt()
    }
}

fn initial_step<S, F>(rhs: &mut F, t0: f64, y0: &S, f0: &S, span: f64, atol: f64, rtol: f64) -> Result<f64>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    let d0 = weighted_rms(y0, &[y0], atol, rtol);
    let d1 = weighted_rms(f0, &[y0], atol, rtol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1 = y0.axpy(h0, f0);
    let f1 = rhs(t0 + h0, &y1)?;
    let d2 = weighted_rms(&f1.axpy(-1.0, f0), &[y0], atol, rtol) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

fn dopri5<S, F, O>(rhs: &mut F, y0: &S, cfg: &SolveConfig, observer: &mut O) -> Result<()>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
    O: FnMut(usize, f64, &S) -> Result<()>,
{
    let (atol, rtol) = (cfg.atol, cfg.rtol);
    let t_end = *cfg.save_at.last().expect("validated");
    let span = t_end - cfg.t0;
    let mut t = cfg.t0;
    let mut y = y0.clone();
    let mut save_idx = 0;
    while save_idx < cfg.save_at.len() && cfg.save_at[save_idx] <= t {
        observer(save_idx, cfg.save_at[save_idx], &y)?;
        save_idx += 1;
    }
    if save_idx == cfg.save_at.len() {
        return Ok(());
    }

    let mut k1 = rhs(t, &y)?;
    if !k1.is_finite() {
        return Err(Error::Divergence { t, step: 0 });
    }
    let mut h = initial_step(rhs, t, &y, &k1, span, atol, rtol)?;
    let expo = 0.2 - PI_BETA * 0.75;
    let mut err_old: f64 = 1e-4;
    let mut steps = 0usize;
    let mut rejected_last = false;

    while save_idx < cfg.save_at.len() {
        let target = cfg.save_at[save_idx];
        let mut hs = h;
        let lands = t + 1.01 * hs >= target;
        if lands {
            hs = target - t;
        }
        if hs < 1e-12 * span || steps >= MAX_STEPS {
            return Err(Error::Stiffness { t, h: hs, span });
        }

        let k2 = rhs(t + C[1] * hs, &y.lincomb(&[(hs * A2[0], &k1)]))?;
        let k3 = rhs(t + C[2] * hs, &y.lincomb(&[(hs * A3[0], &k1), (hs * A3[1], &k2)]))?;
        let k4 = rhs(
            t + C[3] * hs,
            &y.lincomb(&[(hs * A4[0], &k1), (hs * A4[1], &k2), (hs * A4[2], &k3)]),
        )?;
        let k5 = rhs(
            t + C[4] * hs,
            &y.lincomb(&[
                (hs * A5[0], &k1),
                (hs * A5[1], &k2),
                (hs * A5[2], &k3),
                (hs * A5[3], &k4),
            ]),
        )?;
        let k6 = rhs(
            t + C[5] * hs,
            &y.lincomb(&[
                (hs * A6[0], &k1),
                (hs * A6[1], &k2),
                (hs * A6[2], &k3),
                (hs * A6[3], &k4),
                (hs * A6[4], &k5),
            ]),
        )?;
        let y_new = y.lincomb(&[
            (hs * B5[0], &k1),
            (hs * B5[2], &k3),
            (hs * B5[3], &k4),
            (hs * B5[4], &k5),
            (hs * B5[5], &k6),
        ]);
        steps += 1;
        if !y_new.is_finite() {
            return Err(Error::Divergence { t: t + hs, step: steps });
        }
        let k7 = rhs(t + hs, &y_new)?;
        if !k7.is_finite() {
            return Err(Error::Divergence { t: t + hs, step: steps });
        }
        let zero = y.axpy(-1.0, &y);
        let err_vec = zero.lincomb(&[
            (hs * E[0], &k1),
            (hs * E[2], &k3),
            (hs * E[3], &k4),
            (hs * E[4], &k5),
            (hs * E[5], &k6),
            (hs * E[6], &k7),
        ]);
        let err = weighted_rms(&err_vec, &[&y, &y_new], atol, rtol);
        if !err.is_finite() {
            return Err(Error::Divergence { t: t + hs, step: steps });
        }

        let fac_err = err.powf(expo);
        if err <= 1.0 {
            // PI controller; growth limited to [MIN_FACTOR, MAX_FACTOR].
            let mut fac = fac_err / err_old.powf(PI_BETA) / SAFETY;
            fac = fac.clamp(1.0 / MAX_FACTOR, 1.0 / MIN_FACTOR);
            let mut h_next = hs / fac;
            if rejected_last {
                h_next = h_next.min(hs);
            }
            err_old = err.max(1e-4);
            t = if lands { target } else { t + hs };
            y = y_new;
            k1 = k7;
            rejected_last = false;
            // keep the controller's proposal when the step was shortened to land
            h = if lands { h_next.max(h) } else { h_next };
            while save_idx < cfg.save_at.len() && cfg.save_at[save_idx] <= t {
                observer(save_idx, cfg.save_at[save_idx], &y)?;
                save_idx += 1;
            }
        } else {
            let fac = (fac_err / SAFETY).min(1.0 / MIN_FACTOR);
            h = hs / fac;
            rejected_last = true;
        }
    }
    Ok(())
}

/// Empirical convergence order of `method` on `y' = -y`, `y(0) = 1` at `t = 1`:
/// least-squares slope of log error against log step over dt ∈ {0.1, 0.05, 0.025}.
pub fn order_probe(method: SolverMethod) -> Result<f64> {
    let dts = [0.1, 0.05, 0.025];
    let y0 = scalar_field(1.0);
    let exact = (-1.0f64).exp();
    let mut pts = Vec::with_capacity(dts.len());
    for dt in dts {
        let cfg = SolveConfig::fixed(method, dt, 0.0, vec![1.0]);
        let traj = solve(|_, y: &GridField| Ok(y.scale(-1.0)), &y0, &cfg)?;
        let err = (traj.states[0].data()[0] - exact).abs();
        pts.push((dt.ln(), err.ln()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

pub(crate) fn scalar_field(v: f64) -> GridField {
    use crate::tensor_grid::Shape;
    GridField::new(Shape::new(1, 1, 1), 1.0, 1.0, vec![v]).expect("1x1x1 field")
}
