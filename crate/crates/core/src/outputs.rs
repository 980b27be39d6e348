//! Virtual-constraint outputs: Bezier desired trajectories over a phasing
//! variable, the augmented output vector y = (y_alpha; y_beta) pairing
//! tracking outputs with design targets, and the Lie-derivative terms
//! consumed by the tracking controller.
//!
//! Evaluation outside tau in [0,1] is permitted (line searches and event
//! bracketing may step past a domain boundary); the Bernstein basis
//! extrapolates smoothly.

use crate::dynamics::{AugmentedState, DynError, Mech};
use crate::num::{Mat, Real};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, thiserror::Error)]
pub enum OutputError {
    #[error("output configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected} {what}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Dynamics(#[from] DynError),
}

/// Bernstein basis values B_k(tau) for k = 0..=degree.
pub fn bernstein<T: Real>(degree: usize, tau: T) -> Vec<T> {
    let one = T::one();
    let s = tau;
    let c = one - tau;
    let mut out = vec![T::zero(); degree + 1];
    // Powers of tau and (1 - tau).
    let mut sp = vec![one; degree + 1];
    let mut cp = vec![one; degree + 1];
    for k in 1..=degree {
        sp[k] = sp[k - 1] * s;
        cp[k] = cp[k - 1] * c;
    }
    let mut binom = 1.0f64;
    for k in 0..=degree {
        if k > 0 {
            binom = binom * (degree - k + 1) as f64 / k as f64;
        }
        out[k] = T::from_f64(binom) * sp[k] * cp[degree - k];
    }
    out
}

/// First-derivative basis: weights w with d/dtau sum(a_k B_k) = sum(a_k w_k).
pub fn bernstein_d1<T: Real>(degree: usize, tau: T) -> Vec<T> {
    let mut out = vec![T::zero(); degree + 1];
    if degree == 0 {
        return out;
    }
    let lower = bernstein(degree - 1, tau);
    let b = T::from_f64(degree as f64);
    for k in 0..=degree {
        let mut w = T::zero();
        if k >= 1 {
            w += lower[k - 1];
        }
        if k < degree {
            w -= lower[k];
        }
        out[k] = b * w;
    }
    out
}

/// Second-derivative basis weights.
pub fn bernstein_d2<T: Real>(degree: usize, tau: T) -> Vec<T> {
    let mut out = vec![T::zero(); degree + 1];
    if degree < 2 {
        return out;
    }
    let lower = bernstein(degree - 2, tau);
    let scale = T::from_f64((degree * (degree - 1)) as f64);
    for k in 0..=degree {
        let mut w = T::zero();
        // Second difference pattern of the shifted lower-degree basis.
        if k >= 2 {
            w += lower[k - 2];
        }
        if k >= 1 && k - 1 <= degree - 2 {
            w -= T::from_f64(2.0) * lower[k - 1];
        }
        if k <= degree - 2 {
            w += lower[k];
        }
        out[k] = scale * w;
    }
    out
}

/// Scalar Bezier value from one coefficient row.
pub fn bezier_point<T: Real>(coeffs: &[T], tau: T) -> T {
    let basis = bernstein(coeffs.len() - 1, tau);
    let mut v = T::zero();
    for (a, b) in coeffs.iter().zip(basis.iter()) {
        v += *a * *b;
    }
    v
}

pub fn bezier_point_d1<T: Real>(coeffs: &[T], tau: T) -> T {
    let basis = bernstein_d1(coeffs.len() - 1, tau);
    let mut v = T::zero();
    for (a, b) in coeffs.iter().zip(basis.iter()) {
        v += *a * *b;
    }
    v
}

pub fn bezier_point_d2<T: Real>(coeffs: &[T], tau: T) -> T {
    let basis = bernstein_d2(coeffs.len() - 1, tau);
    let mut v = T::zero();
    for (a, b) in coeffs.iter().zip(basis.iter()) {
        v += *a * *b;
    }
    v
}

/// A vector-valued Bezier curve; one coefficient row per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BezierCurve {
    /// Coefficient rows, each of length degree + 1.
    pub coeffs: Vec<Vec<f64>>,
}

impl BezierCurve {
    pub fn new(coeffs: Vec<Vec<f64>>) -> Result<Self, OutputError> {
        if coeffs.is_empty() {
            return Err(OutputError::Config("curve needs at least one row".into()));
        }
        let w = coeffs[0].len();
        if w == 0 {
            return Err(OutputError::Config("coefficient rows must be non-empty".into()));
        }
        if coeffs.iter().any(|r| r.len() != w) {
            return Err(OutputError::Config("coefficient rows must share one length".into()));
        }
        Ok(BezierCurve { coeffs })
    }

    pub fn degree(&self) -> usize {
        self.coeffs[0].len() - 1
    }

    /// Number of output rows.
    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn eval(&self, tau: f64) -> Vec<f64> {
        self.coeffs.iter().map(|r| bezier_point(r, tau)).collect()
    }

    pub fn d1(&self, tau: f64) -> Vec<f64> {
        self.coeffs.iter().map(|r| bezier_point_d1(r, tau)).collect()
    }

    pub fn d2(&self, tau: f64) -> Vec<f64> {
        self.coeffs.iter().map(|r| bezier_point_d2(r, tau)).collect()
    }
}

/// How the phase variable tau advances through a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhasingConfig {
    /// tau = t / period.
    Time { period: f64 },
    /// tau = (q[coord] - start) / (end - start) on a monotone coordinate.
    State { coord: usize, start: f64, end: f64 },
}

impl PhasingConfig {
    pub fn validate(&self) -> Result<(), OutputError> {
        match self {
            PhasingConfig::Time { period } => {
                if !(*period > 0.0) {
                    return Err(OutputError::Config(format!(
                        "phase period must be positive, got {period}"
                    )));
                }
            }
            PhasingConfig::State { start, end, .. } => {
                if (end - start).abs() < 1e-12 {
                    return Err(OutputError::Config(
                        "state phasing range must be non-degenerate".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Phase value and its rate at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub tau: f64,
    pub tau_dot: f64,
}

/// Evaluates the phasing variable at time t and state (q, qd).
pub fn phase(
    cfg: &PhasingConfig,
    t: f64,
    q: &[f64],
    qd: &[f64],
) -> Result<Phase, OutputError> {
    cfg.validate()?;
    Ok(match cfg {
        PhasingConfig::Time { period } => Phase { tau: t / period, tau_dot: 1.0 / period },
        PhasingConfig::State { coord, start, end } => {
            let scale = 1.0 / (end - start);
            Phase { tau: (q[*coord] - start) * scale, tau_dot: qd[*coord] * scale }
        }
    })
}

/// The full augmented output definition: which coordinates are tracking
/// outputs, the desired Bezier curve over tau, and the design targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSet {
    /// Coordinate index of each tracking output (the actuated joints).
    pub actuated: Vec<usize>,
    /// Coordinate index of each design output (the virtual joints).
    pub design: Vec<usize>,
    /// Desired tracking outputs, one row per actuated output.
    pub desired: BezierCurve,
    /// Design targets beta, one per design coordinate.
    pub beta: Vec<f64>,
    pub phasing: PhasingConfig,
}

impl OutputSet {
    pub fn new(
        mech: &Mech,
        desired: BezierCurve,
        beta: Vec<f64>,
        phasing: PhasingConfig,
    ) -> Result<Self, OutputError> {
        if desired.dim() != mech.num_inputs() {
            return Err(OutputError::Dimension {
                what: "desired output rows",
                expected: mech.num_inputs(),
                got: desired.dim(),
            });
        }
        if beta.len() != mech.num_design() {
            return Err(OutputError::Dimension {
                what: "design targets",
                expected: mech.num_design(),
                got: beta.len(),
            });
        }
        phasing.validate()?;
        Ok(OutputSet {
            actuated: mech.actuated_coords.clone(),
            design: mech.design_coords.clone(),
            desired,
            beta,
            phasing,
        })
    }

    /// Total output dimension m + d.
    pub fn dim(&self) -> usize {
        self.actuated.len() + self.design.len()
    }
}

/// Outputs y = (y_alpha; y_beta) and their flow derivative.
pub fn outputs(
    set: &OutputSet,
    t: f64,
    x: &AugmentedState,
) -> Result<(Vec<f64>, Vec<f64>), OutputError> {
    let ph = phase(&set.phasing, t, &x.q, &x.qd)?;
    let yd = set.desired.eval(ph.tau);
    let yd1 = set.desired.d1(ph.tau);
    let (m, d) = (set.actuated.len(), set.design.len());
    let mut y = Vec::with_capacity(m + d);
    let mut dy = Vec::with_capacity(m + d);
    for (i, &c) in set.actuated.iter().enumerate() {
        y.push(x.q[c] - yd[i]);
        dy.push(x.qd[c] - yd1[i] * ph.tau_dot);
    }
    for (k, &c) in set.design.iter().enumerate() {
        y.push(x.q[c] - set.beta[k]);
        dy.push(x.qd[c]);
    }
    Ok((y, dy))
}

/// Lie-derivative data for input/output linearization at one state.
#[derive(Debug, Clone)]
pub struct LieTerms {
    pub y: Vec<f64>,
    /// L_f y: the flow derivative of y.
    pub lf_y: Vec<f64>,
    /// L_f^2 y: the drift (u = 0) second derivative of y.
    pub lf2_y: Vec<f64>,
    /// Decoupling matrix: sensitivity of y-double-dot to the inputs,
    /// (m+d) x m. Design rows are structurally zero.
    pub a: Mat<f64>,
}

/// Assembles y, L_f y, L_f^2 y, and the decoupling matrix under the
/// stance-constrained dynamics.
pub fn lie_terms(
    mech: &Mech,
    set: &OutputSet,
    t: f64,
    x: &AugmentedState,
) -> Result<LieTerms, OutputError> {
    let ph = phase(&set.phasing, t, &x.q, &x.qd)?;
    let (y, lf_y) = outputs(set, t, x)?;
    let (qdd0, _lam0, dqdd_du, _dlam_du) = mech.accel_with_input_map(&x.q, &x.qd)?;
    let yd1 = set.desired.d1(ph.tau);
    let yd2 = set.desired.d2(ph.tau);
    let (m, d) = (set.actuated.len(), set.design.len());
    let mut lf2 = Vec::with_capacity(m + d);
    let mut a = Mat::zeros(m + d, m);
    // Phase acceleration under the drift, and its input sensitivity.
    let (tau_dd0, dtau_dd_du): (f64, Vec<f64>) = match &set.phasing {
        PhasingConfig::Time { .. } => (0.0, vec![0.0; m]),
        PhasingConfig::State { coord, start, end } => {
            let scale = 1.0 / (end - start);
            let row: Vec<f64> = (0..m).map(|j| dqdd_du[(*coord, j)] * scale).collect();
            (qdd0[*coord] * scale, row)
        }
    };
    for (i, &c) in set.actuated.iter().enumerate() {
        lf2.push(qdd0[c] - yd2[i] * ph.tau_dot * ph.tau_dot - yd1[i] * tau_dd0);
        for j in 0..m {
            a[(i, j)] = dqdd_du[(c, j)] - yd1[i] * dtau_dd_du[j];
        }
    }
    for (k, &c) in set.design.iter().enumerate() {
        lf2.push(qdd0[c]);
        for j in 0..m {
            a[(m + k, j)] = dqdd_du[(c, j)];
        }
    }
    Ok(LieTerms { y, lf_y, lf2_y: lf2, a })
}
