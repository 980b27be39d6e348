//! Input/output linearizing tracking controller: inverts the decoupling
//! matrix on the actuated output rows and applies a critically damped
//! correction so every tracking output obeys y-ddot + 2 eps y-dot +
//! eps^2 y = 0 along the closed loop. Design outputs carry no torque; they
//! are enforced kinematically by the constrained dynamics.

use crate::dynamics::{AugmentedState, Mech};
use crate::num::{solve_vec, Mat};
use crate::outputs::{lie_terms, OutputError, OutputSet};

#[derive(Debug, Clone, thiserror::Error)]
pub enum ControlError {
    #[error("controller configuration error: {0}")]
    Config(String),
    #[error("singular decoupling matrix: {0}")]
    SingularDecoupling(crate::num::SingularMatrix),
    #[error(transparent)]
    Output(#[from] OutputError),
}

/// Tracking-controller gain.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ControllerConfig {
    /// Error-dynamics gain (1/s); the closed-loop output error is
    /// critically damped with time constant 1/epsilon.
    pub epsilon: f64,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.epsilon > 0.0) {
            return Err(ControlError::Config(format!(
                "gain must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Torque command with tracking diagnostics.
#[derive(Debug, Clone)]
pub struct ControlEval {
    pub u: Vec<f64>,
    /// True when any torque was clipped to its actuator limit.
    pub saturated: bool,
    pub y: Vec<f64>,
    pub y_dot: Vec<f64>,
}

/// Computes u = -A^-1 (L_f^2 y + 2 eps L_f y + eps^2 y) over the actuated
/// output rows, then clips to the actuator limits.
pub fn io_linearizing_control(
    mech: &Mech,
    set: &OutputSet,
    cfg: &ControllerConfig,
    t: f64,
    x: &AugmentedState,
) -> Result<ControlEval, ControlError> {
    cfg.validate()?;
    let lt = lie_terms(mech, set, t, x)?;
    let m = set.actuated.len();
    let eps = cfg.epsilon;
    let mut a = Mat::zeros(m, m);
    let mut rhs = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] = lt.a[(i, j)];
        }
        rhs[i] = -(lt.lf2_y[i] + 2.0 * eps * lt.lf_y[i] + eps * eps * lt.y[i]);
    }
    let mut u = solve_vec(&a, &rhs).map_err(ControlError::SingularDecoupling)?;
    let mut saturated = false;
    for (k, v) in u.iter_mut().enumerate() {
        let lim = mech.torque_limits[k];
        if v.abs() > lim {
            *v = v.signum() * lim;
            saturated = true;
        }
    }
    Ok(ControlEval { u, saturated, y: lt.y, y_dot: lt.lf_y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::aug_mech;
    use crate::outputs::{outputs, BezierCurve, PhasingConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// State plus an output set whose desired curve passes through the
    /// current outputs with matching rate, so y = 0 and y-dot = 0.
    fn on_surface_setup(
        mech: &crate::dynamics::Mech,
        rng: &mut ChaCha8Rng,
    ) -> (OutputSet, AugmentedState) {
        let q: Vec<f64> = (0..mech.nv)
            .map(|i| {
                let lo = mech.pos_lo[i].max(-0.8);
                let hi = mech.pos_hi[i].min(0.8);
                rng.gen_range(lo..hi)
            })
            .collect();
        let qd_raw: Vec<f64> = (0..mech.nv).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qd = mech.project_velocity(&q, &qd_raw).unwrap();
        let x = AugmentedState::new(q, qd);
        let period = 0.8;
        let t0 = 0.32;
        let tau0 = t0 / period;
        // Linear-in-tau desired rows through (value, rate) at tau0; a line
        // with control points a + s k / b is the Bezier form of a + s tau.
        let b = 5usize;
        let coeffs: Vec<Vec<f64>> = mech
            .actuated_coords
            .iter()
            .map(|&c| {
                let slope = x.qd[c] * period;
                let a0 = x.q[c] - slope * tau0;
                (0..=b).map(|k| a0 + slope * k as f64 / b as f64).collect()
            })
            .collect();
        let beta: Vec<f64> = mech.design_coords.iter().map(|&c| x.q[c]).collect();
        let set = OutputSet::new(
            mech,
            BezierCurve::new(coeffs).unwrap(),
            beta,
            PhasingConfig::Time { period },
        )
        .unwrap();
        (set, x)
    }

    #[test]
    fn on_surface_feedforward_keeps_outputs_still() {
        let mech = aug_mech();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let (set, x) = on_surface_setup(&mech, &mut rng);
            let t = 0.32;
            let (y, dy) = outputs(&set, t, &x).unwrap();
            for v in y.iter().chain(dy.iter()) {
                assert!(v.abs() < 1e-12, "constructed on-surface state");
            }
            let cfg = ControllerConfig { epsilon: 10.0 };
            let ev = io_linearizing_control(&mech, &set, &cfg, t, &x).unwrap();
            assert!(!ev.saturated);
            // With zero error the command equals the feedforward and the
            // output acceleration vanishes.
            let lt = crate::outputs::lie_terms(&mech, &set, t, &x).unwrap();
            for i in 0..set.actuated.len() {
                let mut ydd = lt.lf2_y[i];
                for j in 0..ev.u.len() {
                    ydd += lt.a[(i, j)] * ev.u[j];
                }
                assert!(ydd.abs() < 1e-9, "output acceleration {ydd}");
            }
        }
    }

    #[test]
    fn gain_doubling_changes_command_algebraically() {
        let mech = aug_mech();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (mut set, mut x) = on_surface_setup(&mech, &mut rng);
        // Introduce output error by shifting the desired curve and rate.
        for row in set.desired.coeffs.iter_mut() {
            for (k, c) in row.iter_mut().enumerate() {
                *c += 0.03 + 0.01 * k as f64;
            }
        }
        x.qd[4] += 0.2;
        x.qd = mech.project_velocity(&x.q, &x.qd).unwrap();
        let t = 0.32;
        let eps = 3.0;
        let u1 = io_linearizing_control(&mech, &set, &ControllerConfig { epsilon: eps }, t, &x)
            .unwrap()
            .u;
        let u2 =
            io_linearizing_control(&mech, &set, &ControllerConfig { epsilon: 2.0 * eps }, t, &x)
                .unwrap()
                .u;
        // u(2e) - u(e) = -A^-1 (2 eps L_f y + 3 eps^2 y).
        let lt = crate::outputs::lie_terms(&mech, &set, t, &x).unwrap();
        let m = set.actuated.len();
        let mut a = Mat::zeros(m, m);
        let mut rhs = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                a[(i, j)] = lt.a[(i, j)];
            }
            rhs[i] = -(2.0 * eps * lt.lf_y[i] + 3.0 * eps * eps * lt.y[i]);
        }
        let expect = solve_vec(&a, &rhs).unwrap();
        for i in 0..m {
            assert!((u2[i] - u1[i] - expect[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn saturation_clips_and_flags() {
        let mech = aug_mech();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (mut set, x) = on_surface_setup(&mech, &mut rng);
        for row in set.desired.coeffs.iter_mut() {
            for c in row.iter_mut() {
                *c += 2.0;
            }
        }
        let ev = io_linearizing_control(
            &mech,
            &set,
            &ControllerConfig { epsilon: 200.0 },
            0.32,
            &x,
        )
        .unwrap();
        assert!(ev.saturated);
        for (k, v) in ev.u.iter().enumerate() {
            assert!(v.abs() <= mech.torque_limits[k] + 1e-12);
        }
        assert!(ev.u.iter().any(|v| v.abs() > 1.0), "commands actually hit the limits");
        let bad = ControllerConfig { epsilon: 0.0 };
        assert!(matches!(
            io_linearizing_control(&mech, &set, &bad, 0.0, &x),
            Err(ControlError::Config(_))
        ));
    }
}
