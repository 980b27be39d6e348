//! Event-driven closed-loop simulation of the single-domain hybrid system:
//! integrate the stance dynamics under the tracking controller with an
//! adaptive embedded Runge-Kutta pair, bracket the swing-foot touchdown,
//! bisect the step map onto the guard, apply the impact/relabel reset, and
//! repeat.

use crate::control::{io_linearizing_control, ControlError, ControllerConfig};
use crate::dynamics::{AugmentedState, DynError, Mech, GUARD_TOL};
use crate::outputs::OutputSet;
use std::io::Write;

#[derive(Debug, Clone, thiserror::Error)]
pub enum SimError {
    #[error("no impact within {max_time} s of flow")]
    NoImpact { max_time: f64 },
    #[error("fall detected at t = {time:.4} s: torso pitch {pitch:.3} rad, base height {height:.3} m")]
    Fall { time: f64, pitch: f64, height: f64 },
    #[error("initial state outside the admissible domain: swing foot height {height:e} m")]
    OutsideDomain { height: f64 },
    #[error("integrator step size collapsed at t = {time:.6} s")]
    StepSizeCollapse { time: f64 },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Dynamics(#[from] DynError),
}

/// Integrator and safety options.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_step: f64,
    pub min_step: f64,
    /// Fall threshold on the absolute torso pitch (rad).
    pub fall_pitch: f64,
    /// Fall threshold on base height as a fraction of leg length.
    pub fall_height_ratio: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            abs_tol: 1e-9,
            rel_tol: 1e-9,
            max_step: 0.02,
            min_step: 1e-13,
            fall_pitch: std::f64::consts::FRAC_PI_2,
            fall_height_ratio: 0.3,
        }
    }
}

/// One stance phase: samples from step start to the touchdown event.
#[derive(Debug, Clone)]
pub struct StepTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<AugmentedState>,
    /// Applied torques at each sample.
    pub inputs: Vec<Vec<f64>>,
    /// Stance contact force (tangential, normal) at each sample.
    pub contact_forces: Vec<[f64; 2]>,
    /// Swing-foot height at each sample.
    pub swing_heights: Vec<f64>,
    /// Time of the touchdown event (s since step start).
    pub event_time: f64,
}

/// Per-step gait metrics.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    /// Horizontal distance between the feet at touchdown (m).
    pub step_length: f64,
    /// Stance duration (s).
    pub duration: f64,
    /// step_length / duration (m/s).
    pub mean_speed: f64,
}

/// A multi-step run with periodicity diagnostics.
#[derive(Debug, Clone)]
pub struct GaitRun {
    pub steps: Vec<StepTrajectory>,
    pub metrics: Vec<StepMetrics>,
    /// Distance between consecutive step-start states after removing the
    /// forward base translation.
    pub poincare_distances: Vec<f64>,
}

struct Sample {
    u: Vec<f64>,
    lam: [f64; 2],
    xdot: Vec<f64>,
}

fn eval_rhs(
    mech: &Mech,
    set: &OutputSet,
    ctrl: &ControllerConfig,
    t: f64,
    x: &[f64],
) -> Result<Sample, SimError> {
    let nv = mech.nv;
    let state = AugmentedState::new(x[..nv].to_vec(), x[nv..].to_vec());
    let ev = io_linearizing_control(mech, set, ctrl, t, &state)?;
    let (qdd, lam) = mech.constrained_dynamics(&state.q, &state.qd, &ev.u)?;
    let mut xdot = Vec::with_capacity(2 * nv);
    xdot.extend_from_slice(&state.qd);
    xdot.extend_from_slice(&qdd);
    Ok(Sample { u: ev.u, lam, xdot })
}

/// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One embedded step from (t, x) with size h: returns the 5th-order state
/// and the scaled error estimate.
fn dp_step(
    mech: &Mech,
    set: &OutputSet,
    ctrl: &ControllerConfig,
    t: f64,
    x: &[f64],
    k1: &[f64],
    h: f64,
    opts: &SimOptions,
) -> Result<(Vec<f64>, f64), SimError> {
    let n = x.len();
    let mut k = vec![vec![0.0; n]; 7];
    k[0].copy_from_slice(k1);
    for stage in 0..6 {
        let mut xs = x.to_vec();
        for (j, kj) in k.iter().enumerate().take(stage + 1) {
            let a = DP_A[stage][j];
            if a != 0.0 {
                for i in 0..n {
                    xs[i] += h * a * kj[i];
                }
            }
        }
        k[stage + 1] = eval_rhs(mech, set, ctrl, t + DP_C[stage] * h, &xs)?.xdot;
    }
    let mut x5 = x.to_vec();
    let mut err = 0.0f64;
    for i in 0..n {
        let mut v5 = 0.0;
        let mut v4 = 0.0;
        for s in 0..7 {
            v5 += DP_B5[s] * k[s][i];
            v4 += DP_B4[s] * k[s][i];
        }
        x5[i] += h * v5;
        let scale = opts.abs_tol + opts.rel_tol * x[i].abs().max(x5[i].abs());
        let e = h * (v5 - v4) / scale;
        err += e * e;
    }
    Ok((x5, (err / n as f64).sqrt()))
}

fn swing_height_of(mech: &Mech, x: &[f64]) -> f64 {
    mech.swing_foot_height(&x[..mech.nv])
}

fn check_fall(mech: &Mech, opts: &SimOptions, t: f64, x: &[f64]) -> Result<(), SimError> {
    let q = &x[..mech.nv];
    let pitch = mech.torso_pitch(q);
    let height = q[1];
    if pitch.abs() > opts.fall_pitch || height < opts.fall_height_ratio * mech.leg_length {
        return Err(SimError::Fall { time: t, pitch, height });
    }
    Ok(())
}

/// Integrates one stance phase until swing-foot touchdown.
pub fn simulate_step(
    mech: &Mech,
    set: &OutputSet,
    ctrl: &ControllerConfig,
    x0: &AugmentedState,
    max_time: f64,
    opts: &SimOptions,
) -> Result<StepTrajectory, SimError> {
    let nv = mech.nv;
    assert_eq!(x0.dim(), nv);
    let mut x: Vec<f64> = x0.q.iter().chain(x0.qd.iter()).copied().collect();
    let z0 = swing_height_of(mech, &x);
    if z0 < -GUARD_TOL {
        return Err(SimError::OutsideDomain { height: z0 });
    }
    let mut traj = StepTrajectory {
        times: Vec::new(),
        states: Vec::new(),
        inputs: Vec::new(),
        contact_forces: Vec::new(),
        swing_heights: Vec::new(),
        event_time: 0.0,
    };
    let record =
        |t: f64, x: &[f64], s: &Sample, traj: &mut StepTrajectory| {
            traj.times.push(t);
            traj.states.push(AugmentedState::new(x[..nv].to_vec(), x[nv..].to_vec()));
            traj.inputs.push(s.u.clone());
            traj.contact_forces.push(s.lam);
            traj.swing_heights.push(swing_height_of(mech, x));
        };
    let mut t = 0.0;
    let mut k1 = eval_rhs(mech, set, ctrl, t, &x)?;
    check_fall(mech, opts, t, &x)?;
    record(t, &x, &k1, &mut traj);
    // Immediate event: already on the guard and descending.
    let zd0 = mech.swing_foot_velocity(&x[..nv], &x[nv..]);
    if z0.abs() <= GUARD_TOL && zd0 < 0.0 {
        traj.event_time = 0.0;
        return Ok(traj);
    }
    let mut h = opts.max_step.min(max_time / 4.0).max(opts.min_step);
    while t < max_time {
        h = h.min(max_time - t).min(opts.max_step);
        let (xn, err) = dp_step(mech, set, ctrl, t, &x, &k1.xdot, h, opts)?;
        if err > 1.0 {
            let shrink = (0.9 * err.powf(-0.2)).max(0.2);
            h *= shrink;
            if h < opts.min_step {
                return Err(SimError::StepSizeCollapse { time: t });
            }
            continue;
        }
        let zn = swing_height_of(mech, &xn);
        if zn < -GUARD_TOL {
            // Bisect the one-step map onto the guard.
            let (mut lo, mut hi) = (0.0f64, h);
            let mut xe = xn.clone();
            let mut te = t + h;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let (xm, _) = dp_step(mech, set, ctrl, t, &x, &k1.xdot, mid, opts)?;
                let zm = swing_height_of(mech, &xm);
                if zm.abs() <= GUARD_TOL {
                    xe = xm;
                    te = t + mid;
                    break;
                }
                if zm > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                    xe = xm;
                    te = t + mid;
                }
            }
            let zd = mech.swing_foot_velocity(&xe[..nv], &xe[nv..]);
            if zd < 0.0 {
                let s = eval_rhs(mech, set, ctrl, te, &xe)?;
                check_fall(mech, opts, te, &xe)?;
                record(te, &xe, &s, &mut traj);
                traj.event_time = te;
                return Ok(traj);
            }
            // Scuffing contact: grazing upward at the located point; step
            // onto it and keep integrating.
            t = te;
            x = xe;
            k1 = eval_rhs(mech, set, ctrl, t, &x)?;
            check_fall(mech, opts, t, &x)?;
            record(t, &x, &k1, &mut traj);
            continue;
        }
        t += h;
        x = xn;
        k1 = eval_rhs(mech, set, ctrl, t, &x)?;
        check_fall(mech, opts, t, &x)?;
        record(t, &x, &k1, &mut traj);
        let grow = if err > 0.0 { (0.9 * err.powf(-0.2)).min(5.0) } else { 5.0 };
        h = (h * grow).max(opts.min_step);
    }
    Err(SimError::NoImpact { max_time })
}

/// Removes the forward base translation so states one step apart are
/// comparable.
fn rebase(x: &AugmentedState) -> Vec<f64> {
    let mut v: Vec<f64> = x.q.iter().chain(x.qd.iter()).copied().collect();
    v[0] = 0.0;
    v
}

/// Chains stance phases and resets for `n_steps` steps.
pub fn simulate_gait(
    mech: &Mech,
    set: &OutputSet,
    ctrl: &ControllerConfig,
    x0: &AugmentedState,
    n_steps: usize,
    max_step_time: f64,
    opts: &SimOptions,
) -> Result<GaitRun, SimError> {
    let mut run =
        GaitRun { steps: Vec::new(), metrics: Vec::new(), poincare_distances: Vec::new() };
    let mut starts: Vec<AugmentedState> = Vec::new();
    let mut x = x0.clone();
    for _ in 0..n_steps {
        starts.push(x.clone());
        let traj = simulate_step(mech, set, ctrl, &x, max_step_time, opts)?;
        let end = traj.states.last().expect("trajectory has samples").clone();
        let f0 = mech.foot_position(&end.q, 0);
        let f1 = mech.foot_position(&end.q, 1);
        run.metrics.push(StepMetrics {
            step_length: f1[0] - f0[0],
            duration: traj.event_time,
            mean_speed: if traj.event_time > 0.0 {
                (f1[0] - f0[0]) / traj.event_time
            } else {
                0.0
            },
        });
        let (next, _impulse) = mech.impact_map(&end)?;
        run.steps.push(traj);
        x = next;
    }
    for w in starts.windows(2) {
        let (a, b) = (rebase(&w[0]), rebase(&w[1]));
        let d: f64 =
            a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        run.poincare_distances.push(d);
    }
    if let Some(last) = starts.last() {
        let (a, b) = (rebase(last), rebase(&x));
        let d: f64 =
            a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        run.poincare_distances.push(d);
    }
    Ok(run)
}

/// Writes one step trajectory as CSV: time, coordinates, velocities,
/// torques, contact force, swing-foot height.
pub fn write_trajectory_csv<W: Write>(
    w: &mut W,
    mech: &Mech,
    traj: &StepTrajectory,
) -> std::io::Result<()> {
    let names = &mech.coord_names;
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    header.extend(names.iter().map(|n| format!("{n}_dot")));
    for &c in &mech.actuated_coords {
        header.push(format!("u_{}", names[c]));
    }
    header.push("lam_t".into());
    header.push("lam_n".into());
    header.push("z_swing".into());
    writeln!(w, "{}", header.join(","))?;
    for i in 0..traj.times.len() {
        let mut row = vec![format!("{:.17e}", traj.times[i])];
        row.extend(traj.states[i].q.iter().map(|v| format!("{v:.17e}")));
        row.extend(traj.states[i].qd.iter().map(|v| format!("{v:.17e}")));
        row.extend(traj.inputs[i].iter().map(|v| format!("{v:.17e}")));
        row.push(format!("{:.17e}", traj.contact_forces[i][0]));
        row.push(format!("{:.17e}", traj.contact_forces[i][1]));
        row.push(format!("{:.17e}", traj.swing_heights[i]));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::aug_mech;
    use crate::outputs::{BezierCurve, PhasingConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Output set that holds the current joint angles (constant desired).
    fn holding_set(mech: &Mech, x: &AugmentedState) -> OutputSet {
        let coeffs: Vec<Vec<f64>> =
            mech.actuated_coords.iter().map(|&c| vec![x.q[c]; 6]).collect();
        let beta: Vec<f64> = mech.design_coords.iter().map(|&c| x.q[c]).collect();
        OutputSet::new(
            mech,
            BezierCurve::new(coeffs).unwrap(),
            beta,
            PhasingConfig::Time { period: 0.8 },
        )
        .unwrap()
    }

    /// A forward-toppling pose: stance leg near vertical, swing leg ahead
    /// and raised, forward angular momentum so touchdown is transversal.
    fn toppling_state(mech: &Mech) -> AugmentedState {
        let mut q = vec![0.0; mech.nv];
        let names = &mech.coord_names;
        let at = |n: &str| names.iter().position(|x| x == n).unwrap();
        q[at("hip_l")] = 0.05;
        q[at("knee_l")] = -0.08;
        q[at("hip_r")] = 0.45;
        q[at("knee_r")] = -0.6;
        q[2] = -0.02;
        // Put the stance foot exactly on the ground at x = 0.
        let f0 = mech.foot_position(&q, 0);
        q[0] -= f0[0];
        q[1] -= f0[1];
        let mut qd = vec![0.0; mech.nv];
        qd[0] = 0.6;
        let qd = mech.project_velocity(&q, &qd).unwrap();
        AugmentedState::new(q, qd)
    }

    #[test]
    fn immediate_event_when_starting_on_guard() {
        let mech = aug_mech();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = crate::fixtures::random_guard_state(&mech, &mut rng);
        let set = holding_set(&mech, &x);
        let ctrl = ControllerConfig { epsilon: 10.0 };
        let traj =
            simulate_step(&mech, &set, &ctrl, &x, 1.0, &SimOptions::default()).unwrap();
        assert_eq!(traj.event_time, 0.0);
        assert_eq!(traj.times.len(), 1);
    }

    #[test]
    fn outside_domain_rejected_and_no_impact_times_out() {
        let mech = aug_mech();
        let mut base = AugmentedState::new(vec![0.0; mech.nv], vec![0.0; mech.nv]);
        let names = &mech.coord_names;
        let at = |n: &str| names.iter().position(|x| x == n).unwrap();
        base.q[at("knee_r")] = -0.7;
        let f0 = mech.foot_position(&base.q, 0);
        base.q[1] -= f0[1];
        let set = holding_set(&mech, &base);
        let ctrl = ControllerConfig { epsilon: 10.0 };
        let mut below = base.clone();
        below.q[1] -= 0.2;
        assert!(matches!(
            simulate_step(&mech, &set, &ctrl, &below, 0.5, &SimOptions::default()),
            Err(SimError::OutsideDomain { .. })
        ));
        assert!(matches!(
            simulate_step(&mech, &set, &ctrl, &base, 0.01, &SimOptions::default()),
            Err(SimError::NoImpact { .. })
        ));
    }

    #[test]
    fn fall_detected_from_bad_posture() {
        let mech = aug_mech();
        let mut x = AugmentedState::new(vec![0.0; mech.nv], vec![0.0; mech.nv]);
        let names = &mech.coord_names;
        let at = |n: &str| names.iter().position(|x| x == n).unwrap();
        x.q[at("torso_pitch")] = 0.79;
        x.q[2] = 0.8;
        x.q[at("knee_r")] = -0.5;
        // Keep the swing foot above ground so the domain check passes and
        // the posture check is what fires.
        let f1 = mech.foot_position(&x.q, 1);
        x.q[1] -= f1[1] - 0.02;
        let set = holding_set(&mech, &x);
        let ctrl = ControllerConfig { epsilon: 10.0 };
        let err = simulate_step(&mech, &set, &ctrl, &x, 1.0, &SimOptions::default());
        assert!(matches!(err, Err(SimError::Fall { .. })), "{err:?}");
    }

    #[test]
    fn toppling_reaches_touchdown_with_admissible_samples() {
        let mech = aug_mech();
        let x = toppling_state(&mech);
        let set = holding_set(&mech, &x);
        let ctrl = ControllerConfig { epsilon: 30.0 };
        let traj =
            simulate_step(&mech, &set, &ctrl, &x, 2.0, &SimOptions::default()).unwrap();
        assert!(traj.event_time > 0.01, "transversal touchdown, got {}", traj.event_time);
        for (i, z) in traj.swing_heights.iter().enumerate() {
            assert!(*z >= -GUARD_TOL, "sample {i} height {z}");
        }
        let end = traj.states.last().unwrap();
        let z = mech.swing_foot_height(&end.q);
        let zd = mech.swing_foot_velocity(&end.q, &end.qd);
        assert!(z.abs() <= GUARD_TOL);
        assert!(zd < 0.0);
        // The reset accepts the located event state directly.
        mech.impact_map(end).unwrap();
    }

    #[test]
    fn event_time_converges_under_tolerance_sweep() {
        let mech = aug_mech();
        let x = toppling_state(&mech);
        let set = holding_set(&mech, &x);
        let ctrl = ControllerConfig { epsilon: 30.0 };
        let mut times = Vec::new();
        for tol in [1e-6, 1e-8, 1e-10] {
            let opts = SimOptions { abs_tol: tol, rel_tol: tol, ..SimOptions::default() };
            let traj = simulate_step(&mech, &set, &ctrl, &x, 2.0, &opts).unwrap();
            times.push(traj.event_time);
        }
        assert!((times[0] - times[2]).abs() < 1e-6, "event times {times:?}");
        assert!((times[1] - times[2]).abs() < 1e-7, "event times {times:?}");
    }

    #[test]
    fn energy_balance_along_flow() {
        let mech = aug_mech();
        let x = toppling_state(&mech);
        let set = holding_set(&mech, &x);
        let ctrl = ControllerConfig { epsilon: 30.0 };
        let opts = SimOptions { max_step: 0.002, ..SimOptions::default() };
        let traj = simulate_step(&mech, &set, &ctrl, &x, 2.0, &opts).unwrap();
        let energy = |s: &AugmentedState| {
            mech.kinetic_energy(&s.q, &s.qd) + mech.potential_energy(&s.q)
        };
        let e0 = energy(&traj.states[0]);
        let e1 = energy(traj.states.last().unwrap());
        // Trapezoidal actuator work along the samples.
        let mut work = 0.0;
        for i in 1..traj.times.len() {
            let dt = traj.times[i] - traj.times[i - 1];
            let p = |k: usize| -> f64 {
                traj.inputs[k]
                    .iter()
                    .zip(mech.actuated_coords.iter())
                    .map(|(u, &c)| u * traj.states[k].qd[c])
                    .sum()
            };
            work += 0.5 * dt * (p(i) + p(i - 1));
        }
        let drift = (e1 - e0 - work).abs();
        assert!(drift < 2e-4, "energy balance drift {drift}");
    }

    #[test]
    fn gait_run_chains_resets_and_zero_steps_is_empty() {
        let mech = aug_mech();
        let x = toppling_state(&mech);
        let set = holding_set(&mech, &x);
        let ctrl = ControllerConfig { epsilon: 30.0 };
        let empty =
            simulate_gait(&mech, &set, &ctrl, &x, 0, 2.0, &SimOptions::default()).unwrap();
        assert!(empty.steps.is_empty());
        assert!(empty.poincare_distances.is_empty());
        let one =
            simulate_gait(&mech, &set, &ctrl, &x, 1, 2.0, &SimOptions::default()).unwrap();
        assert_eq!(one.steps.len(), 1);
        assert_eq!(one.metrics.len(), 1);
        assert_eq!(one.poincare_distances.len(), 1);
        assert!(one.metrics[0].step_length > 0.0, "forward step");
        assert!(one.metrics[0].duration > 0.0);
    }

    #[test]
    fn csv_export_shape() {
        let mech = aug_mech();
        let x = toppling_state(&mech);
        let set = holding_set(&mech, &x);
        let ctrl = ControllerConfig { epsilon: 30.0 };
        let traj =
            simulate_step(&mech, &set, &ctrl, &x, 2.0, &SimOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &mech, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        let cols = header.split(',').count();
        assert_eq!(cols, 1 + 2 * mech.nv + mech.num_inputs() + 3);
        assert_eq!(lines.count(), traj.times.len());
        assert!(header.starts_with("t,base_x,base_z,base_pitch,"));
    }
}
