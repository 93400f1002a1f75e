//! Adaptive Dormand-Prince 5(4) integration for autonomous systems.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at tau = {tau:.6e} (h = {h:.3e})")]
    StepUnderflow { tau: f64, h: f64 },
    #[error("non-finite state at tau = {0:.6e}")]
    NonFinite(f64),
}

/// What the step callback wants next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Why an integration ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Finish {
    Stopped,
    StepCap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
    /// Only the first `error_dims` components enter the error norm
    /// (`usize::MAX` for all).
    pub error_dims: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rtol: 1e-10,
            atol: 1e-12,
            h_init: 1e-3,
            h_min: 1e-14,
            h_max: 0.25,
            max_steps: 200_000,
            error_dims: usize::MAX,
        }
    }
}

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates `y' = f(y)` from `y`, calling `on_step(y, tau)` after every
/// accepted step. The callback may rewrite the state (used for frame
/// re-orthonormalization).
pub fn integrate<F, S>(f: F, y: &mut Vec<f64>, tol: &Tolerances, mut on_step: S) -> Result<Finish, OdeError>
where
    F: Fn(&[f64], &mut [f64]),
    S: FnMut(&mut Vec<f64>, f64) -> Control,
{
    let n = y.len();
    let edims = tol.error_dims.min(n);
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y5 = vec![0.0; n];
    let mut tau = 0.0;
    let mut h = tol.h_init;
    f(y, &mut k[0]);
    for _ in 0..tol.max_steps {
        loop {
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = y[i];
                    for j in 0..s {
                        acc += h * A[s][j] * k[j][i];
                    }
                    tmp[i] = acc;
                }
                f(&tmp, &mut k[s]);
            }
            let mut err = 0.0f64;
            for i in 0..n {
                let mut s5 = 0.0;
                let mut s4 = 0.0;
                for j in 0..7 {
                    s5 += B5[j] * k[j][i];
                    s4 += B4[j] * k[j][i];
                }
                y5[i] = y[i] + h * s5;
                if i < edims {
                    let sc = tol.atol + tol.rtol * y[i].abs().max(y5[i].abs());
                    let e = h * (s5 - s4) / sc;
                    err = err.max(e.abs());
                }
            }
            if !err.is_finite() || y5.iter().any(|v| !v.is_finite()) {
                h *= 0.25;
                if h < tol.h_min {
                    return Err(OdeError::NonFinite(tau));
                }
                continue;
            }
            if err <= 1.0 {
                tau += h;
                std::mem::swap(y, &mut y5);
                let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                h = (h * factor).min(tol.h_max);
                break;
            }
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            if h < tol.h_min {
                return Err(OdeError::StepUnderflow { tau, h });
            }
        }
        if on_step(y, tau) == Control::Stop {
            return Ok(Finish::Stopped);
        }
        // The callback may have rewritten y, so the last stage is not reused.
        f(y, &mut k[0]);
    }
    Ok(Finish::StepCap)
}
