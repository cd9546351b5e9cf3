//! Explicit Runge–Kutta integrators: adaptive Dormand–Prince 5(4) and
//! fixed-grid classical RK4.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverCfg {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Grid size for the differentiable fixed-step path.
    pub fixed_steps: usize,
    pub safety: f64,
}

impl Default for SolverCfg {
    fn default() -> Self {
        Self {
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 100_000,
            fixed_steps: 64,
            safety: 0.9,
        }
    }
}

impl SolverCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::config("rtol and atol must be positive"));
        }
        if self.fixed_steps < 8 {
            return Err(Error::config("fixed_steps must be at least 8"));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::config("safety factor must lie in (0, 1]"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OdeSolution {
    pub y: Vec<f64>,
    /// Right-hand-side evaluations.
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus the embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;
const EXPO: f64 = 0.2 - BETA * 0.75;

fn check_state(y: &[f64], t: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("ODE state at t = {t}")))
    }
}

/// Scaled RMS norm used for the initial step heuristic.
fn rms(v: &[f64], scale: &[f64]) -> f64 {
    let s: f64 = v.iter().zip(scale).map(|(a, s)| (a / s).powi(2)).sum();
    (s / v.len().max(1) as f64).sqrt()
}

/// Integrates `dy/dt = f(t, y)` from `t0` to `t1` with Dormand–Prince 5(4)
/// and PI step-size control. A step is accepted when every component
/// satisfies `|err_i| ≤ atol + rtol·max(|y_i|, |y_new_i|)`.
pub fn rk45_integrate<F>(mut f: F, y0: &[f64], t0: f64, t1: f64, cfg: &SolverCfg) -> Result<OdeSolution>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if t0 == t1 || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::config("integration interval must be nonempty and finite"));
    }
    check_state(y0, t0)?;
    let n = y0.len();
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut nfe = 0;
    let mut eval = |t: f64, y: &[f64], nfe: &mut usize| -> Result<Vec<f64>> {
        *nfe += 1;
        let k = f(t, y)?;
        if k.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: k.len() });
        }
        check_state(&k, t)?;
        Ok(k)
    };

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k0 = eval(t, &y, &mut nfe)?;

    // Initial step (Hairer, Nørsett & Wanner, II.4)
    let scale: Vec<f64> = y.iter().map(|v| cfg.atol + cfg.rtol * v.abs()).collect();
    let d0 = rms(&y, &scale);
    let d1 = rms(&k0, &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }.min(span);
    let y1: Vec<f64> = y.iter().zip(&k0).map(|(a, k)| a + dir * h0 * k).collect();
    let k1 = eval(t + dir * h0, &y1, &mut nfe)?;
    let diff: Vec<f64> = k1.iter().zip(&k0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff, &scale) / h0;
    let mut h = if d1.max(d2) <= 1e-15 {
        // Constant field: one step spans the interval.
        span
    } else {
        let h1 = (0.01 / d1.max(d2)).powf(0.2);
        (100.0 * h0).min(h1)
    };

    let mut err_old: f64 = 1e-4;
    let mut accepted = 0;
    let mut rejected = 0;
    let mut last_rejected = false;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut ys = vec![0.0; n];

    while (t1 - t) * dir > 0.0 {
        if accepted + rejected >= cfg.max_steps {
            return Err(Error::MaxStepsExceeded { max_steps: cfg.max_steps, t });
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        let hs = dir * h;
        k[0].clone_from(&k0);
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                ys[i] = y[i] + hs * acc;
            }
            let ts = if s == 6 || (s == 5 && last) { t + hs } else { t + C[s] * hs };
            k[s] = eval(ts, &ys, &mut nfe)?;
        }
        // ys now holds the fifth-order solution (stage 7 is evaluated there).
        let mut err: f64 = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (s, ks) in k.iter().enumerate() {
                e += E[s] * ks[i];
            }
            let sc = cfg.atol + cfg.rtol * y[i].abs().max(ys[i].abs());
            err = err.max((hs * e).abs() / sc);
        }
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("error estimate at t = {t}")));
        }

        if err <= 1.0 {
            t = if last { t1 } else { t + hs };
            y.clone_from(&ys);
            k0.clone_from(&k[6]);
            accepted += 1;
            let mut fac = if err == 0.0 {
                FAC_MAX
            } else {
                cfg.safety * err.powf(-EXPO) * err_old.powf(BETA)
            };
            fac = fac.clamp(FAC_MIN, FAC_MAX);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h *= fac;
            err_old = err.max(1e-4);
            last_rejected = false;
        } else {
            rejected += 1;
            h *= (cfg.safety * err.powf(-0.2)).max(FAC_MIN);
            last_rejected = true;
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::NonFinite(format!("step size underflow at t = {t}")));
        }
    }
    Ok(OdeSolution { y, nfe, accepted, rejected })
}

/// Classical RK4 on `n_steps` uniform steps. Returns the states at every
/// grid point (`n_steps + 1` rows).
pub fn rk4_fixed<F>(mut f: F, y0: &[f64], t0: f64, t1: f64, n_steps: usize) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if n_steps == 0 {
        return Err(Error::config("n_steps must be positive"));
    }
    let h = (t1 - t0) / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(y0.to_vec());
    for i in 0..n_steps {
        let t = t0 + i as f64 * h;
        let y = states.last().expect("nonempty");
        let k1 = f(t, y)?;
        let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
        let k2 = f(t + 0.5 * h, &y2)?;
        let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, k)| a + 0.5 * h * k).collect();
        let k3 = f(t + 0.5 * h, &y3)?;
        let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
        let k4 = f(t + h, &y4)?;
        let next: Vec<f64> = (0..y.len())
            .map(|j| y[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
            .collect();
        check_state(&next, t + h)?;
        states.push(next);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn exponential_decay() {
        let sol = rk45_integrate(|_, y| Ok(vec![-y[0]]), &[1.0], 0.0, 1.0, &SolverCfg::default()).unwrap();
        assert!((sol.y[0] - (-1.0f64).exp()).abs() < 1e-6, "{}", sol.y[0]);
    }

    #[test]
    fn constant_field_takes_one_step() {
        let sol = rk45_integrate(|_, _| Ok(vec![0.0, 0.0]), &[1.5, -2.0], 0.0, 1.0, &SolverCfg::default()).unwrap();
        assert_eq!(sol.y, vec![1.5, -2.0]);
        assert_eq!(sol.accepted, 1);
        assert_eq!(sol.rejected, 0);
    }

    #[test]
    fn cosine_integrates_to_sine() {
        let sol = rk45_integrate(|t, _| Ok(vec![t.cos()]), &[0.0], 0.0, FRAC_PI_2, &SolverCfg::default()).unwrap();
        assert!((sol.y[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn integrates_backwards_in_time() {
        let sol = rk45_integrate(|_, y| Ok(vec![-y[0]]), &[1.0], 1.0, 0.0, &SolverCfg::default()).unwrap();
        assert!((sol.y[0] - 1.0f64.exp()).abs() < 1e-5);
    }

    #[test]
    fn harmonic_oscillator_energy() {
        let sol = rk45_integrate(
            |_, y| Ok(vec![y[1], -y[0]]),
            &[1.0, 0.0],
            0.0,
            10.0,
            &SolverCfg::default(),
        )
        .unwrap();
        assert!((sol.y[0] - 10f64.cos()).abs() < 1e-4);
        assert!((sol.y[1] + 10f64.sin()).abs() < 1e-4);
    }

    #[test]
    fn tighter_tolerance_reduces_error() {
        let exact = (-3.0f64).exp();
        let err = |tol: f64| {
            let cfg = SolverCfg { rtol: tol, atol: tol, ..Default::default() };
            let sol = rk45_integrate(|_, y| Ok(vec![-3.0 * y[0]]), &[1.0], 0.0, 1.0, &cfg).unwrap();
            (sol.y[0] - exact).abs()
        };
        assert!(err(1e-8) < err(1e-4));
    }

    #[test]
    fn failures_are_reported() {
        let cfg = SolverCfg { max_steps: 3, ..Default::default() };
        assert!(matches!(
            rk45_integrate(|t, _| Ok(vec![(50.0 * t).sin()]), &[0.0], 0.0, 10.0, &cfg),
            Err(Error::MaxStepsExceeded { .. })
        ));
        assert!(matches!(
            rk45_integrate(|_, _| Ok(vec![f64::NAN]), &[0.0], 0.0, 1.0, &SolverCfg::default()),
            Err(Error::NonFinite(_))
        ));
        assert!(rk45_integrate(|_, y| Ok(y.to_vec()), &[0.0], 1.0, 1.0, &SolverCfg::default()).is_err());
        let bad = SolverCfg { fixed_steps: 4, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |n: usize| {
            let s = rk4_fixed(|_, y| Ok(vec![-y[0]]), &[1.0], 0.0, 1.0, n).unwrap();
            (s[n][0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(16) / err(32);
        assert!((ratio - 16.0).abs() < 1.0, "{ratio}");
    }
}
