//! Direct collocation of the periodic-gait co-design problem: decision
//! layout, cost, constraint families, and staged initial guesses.
//!
//! The transcription uses Hermite-Simpson collocation with explicit
//! acceleration variables. Midpoint accelerations come from the
//! contact-constrained dynamics with interpolated inputs, so the contact
//! condition holds at midpoints by construction. Virtual-constraint
//! outputs are zeroed at value, rate, and acceleration level at every
//! node; in exchange the actuated coordinates carry no integration
//! defects (their node values are already pinned to the Bezier curve),
//! which keeps the equation count balanced. Unactuated and design
//! coordinates keep their full defects.

use crate::dynamics::Mech;
use crate::model::{serialize_model, ModelError, RobotModel};
use crate::num::{Dual, Real};
use crate::outputs::{
    bezier_point, bezier_point_d1, bezier_point_d2, BezierCurve, OutputError, OutputSet,
    PhasingConfig,
};
use crate::solver::{self, Nlp, SolveOptions, SolveResult, SolveStatus};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::ops::Range;

/// Gait-optimization options mirroring the tunable constraint table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GaitOptions {
    /// Collocation node count N.
    pub nodes: usize,
    /// Bezier degree b of the desired outputs.
    pub degree: usize,
    /// Output-tracking gain used by the simulation controller.
    pub epsilon: f64,
    /// Contact friction coefficient.
    pub mu: f64,
    /// Minimum stance normal force (N).
    pub lambda_min: f64,
    /// Minimum swing-foot height at mid-step nodes (m).
    pub clearance_min: f64,
    /// Step length bounds (m).
    pub step_length_bounds: [f64; 2],
    /// Step duration bounds (s).
    pub duration_bounds: [f64; 2],
    /// Mean forward speed bounds (m/s).
    pub speed_bounds: [f64; 2],
    /// Optional per-actuator cost weights (default all 1).
    pub joint_weights: Option<Vec<f64>>,
}

impl Default for GaitOptions {
    fn default() -> Self {
        GaitOptions {
            nodes: 20,
            degree: 5,
            epsilon: 10.0,
            mu: 0.6,
            lambda_min: 1.0,
            clearance_min: 0.01,
            step_length_bounds: [0.15, 0.35],
            duration_bounds: [0.6, 0.9],
            speed_bounds: [0.1, 1.0],
            joint_weights: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TranscriptionError {
    #[error("invalid options: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Solver(#[from] solver::SolverError),
}

/// Flat index map for the decision vector: per-node blocks
/// (q, q_dot, q_ddot, u, lambda) followed by the global blocks
/// (alpha, beta, T).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionLayout {
    /// Node count N.
    pub nodes: usize,
    /// Coordinate count n + d.
    pub nq: usize,
    /// Actuator count m.
    pub m: usize,
    /// Design coordinate count d.
    pub d: usize,
    /// Bezier degree b.
    pub degree: usize,
}

impl DecisionLayout {
    fn per_node(&self) -> usize {
        3 * self.nq + self.m + 2
    }

    /// Total decision dimension N(3(n+d)+m+2) + m(b+1) + d + 1.
    pub fn dim(&self) -> usize {
        self.nodes * self.per_node() + self.m * (self.degree + 1) + self.d + 1
    }

    pub fn q(&self, k: usize) -> Range<usize> {
        let base = k * self.per_node();
        base..base + self.nq
    }

    pub fn qd(&self, k: usize) -> Range<usize> {
        let base = k * self.per_node() + self.nq;
        base..base + self.nq
    }

    pub fn qdd(&self, k: usize) -> Range<usize> {
        let base = k * self.per_node() + 2 * self.nq;
        base..base + self.nq
    }

    pub fn u(&self, k: usize) -> Range<usize> {
        let base = k * self.per_node() + 3 * self.nq;
        base..base + self.m
    }

    pub fn lam(&self, k: usize) -> Range<usize> {
        let base = k * self.per_node() + 3 * self.nq + self.m;
        base..base + 2
    }

    /// All Bezier coefficients, row-major by output.
    pub fn alpha(&self) -> Range<usize> {
        let base = self.nodes * self.per_node();
        base..base + self.m * (self.degree + 1)
    }

    /// Coefficients of one output row.
    pub fn alpha_row(&self, i: usize) -> Range<usize> {
        let base = self.nodes * self.per_node() + i * (self.degree + 1);
        base..base + self.degree + 1
    }

    pub fn beta(&self) -> Range<usize> {
        let base = self.nodes * self.per_node() + self.m * (self.degree + 1);
        base..base + self.d
    }

    pub fn t_index(&self) -> usize {
        self.dim() - 1
    }

    /// Collocation phase of node k on the uniform grid.
    pub fn tau(&self, k: usize) -> f64 {
        k as f64 / (self.nodes - 1) as f64
    }
}

#[derive(Debug, Clone)]
enum BlockKind {
    /// Stance dynamics and contact acceleration at one node.
    NodeDynamics(usize),
    /// Hermite-Simpson defects over one interval.
    IntervalDefect(usize),
    /// Acceleration-level output equation at one node.
    OutputAccel(usize),
    /// Output value and rate zeroing at one node.
    OutputValue(usize),
    /// Design coordinates tied to beta, plus symmetry.
    DesignTie,
    /// Post-impact relabeled boundary conditions.
    Periodicity,
    /// Swing-foot guard at the last node.
    Guard,
    /// Stance foot pinned at the origin, at rest.
    Anchor,
    /// Friction cone at one node.
    Friction(usize),
    /// Swing clearance at one node.
    Clearance(usize),
    /// Step length and speed window.
    StepGeometry,
}

#[derive(Debug, Clone)]
struct Block {
    name: String,
    kind: BlockKind,
    rows: Range<usize>,
    deps: Vec<usize>,
}

/// The gait NLP: implements the solver interface over the decision layout.
pub struct GaitNlp {
    mech: Mech,
    pub layout: DecisionLayout,
    opts: GaitOptions,
    cost_on: bool,
    frozen_design: Option<Vec<f64>>,
    blocks: Vec<Block>,
    row_lo: Vec<f64>,
    row_hi: Vec<f64>,
    var_lo: Vec<f64>,
    var_hi: Vec<f64>,
    /// Coordinates that are not virtual design joints.
    physical_coords: Vec<usize>,
    /// Coordinates with integration defects at velocity level
    /// (everything except actuated coordinates).
    defect_vel_coords: Vec<usize>,
    /// Coordinates with integration defects at acceleration level
    /// (unactuated physical coordinates).
    defect_acc_coords: Vec<usize>,
    /// Design-index pairs tied by symmetry.
    sym_pairs: Vec<(usize, usize)>,
    cost_deps: Vec<usize>,
}

/// Builds the gait NLP. `frozen_design` pins every design coordinate and
/// beta to the given displacement values (stage 1 and 2); `cost_on`
/// selects between pure feasibility and the transport-cost objective.
pub fn build_nlp(
    model: &RobotModel,
    opts: &GaitOptions,
    cost_on: bool,
    frozen_design: Option<Vec<f64>>,
) -> Result<GaitNlp, TranscriptionError> {
    if opts.nodes < 3 {
        return Err(TranscriptionError::Config(format!(
            "need at least 3 collocation nodes, got {}",
            opts.nodes
        )));
    }
    if opts.degree < 2 {
        return Err(TranscriptionError::Config(format!(
            "need Bezier degree at least 2, got {}",
            opts.degree
        )));
    }
    if !(opts.mu > 0.0) || !(opts.lambda_min >= 0.0) {
        return Err(TranscriptionError::Config("friction parameters".into()));
    }
    for [lo, hi] in
        [opts.step_length_bounds, opts.duration_bounds, opts.speed_bounds]
    {
        if !(lo > 0.0 && lo <= hi) {
            return Err(TranscriptionError::Config(format!("bad bounds [{lo}, {hi}]")));
        }
    }
    let mech = Mech::new(model)?;
    let layout = DecisionLayout {
        nodes: opts.nodes,
        nq: mech.nv,
        m: mech.num_inputs(),
        d: mech.num_design(),
        degree: opts.degree,
    };
    if let Some(fz) = &frozen_design {
        if fz.len() != layout.d {
            return Err(TranscriptionError::Config(format!(
                "frozen design has {} values, model has {}",
                fz.len(),
                layout.d
            )));
        }
    }
    let physical_coords: Vec<usize> =
        (0..mech.nv).filter(|i| !mech.design_coords.contains(i)).collect();
    let defect_vel_coords: Vec<usize> =
        (0..mech.nv).filter(|i| !mech.actuated_coords.contains(i)).collect();
    let defect_acc_coords: Vec<usize> = defect_vel_coords
        .iter()
        .copied()
        .filter(|i| !mech.design_coords.contains(i))
        .collect();
    // Map symmetry pairs of virtual joints to design indices.
    let mut sym_pairs = Vec::new();
    for [a, b] in &model.symmetry_pairs {
        let ia = model.design_joints.iter().position(|n| n == a);
        let ib = model.design_joints.iter().position(|n| n == b);
        if let (Some(ia), Some(ib)) = (ia, ib) {
            sym_pairs.push((ia.min(ib), ia.max(ib)));
        }
    }
    sym_pairs.sort();
    sym_pairs.dedup();

    let n = layout.nodes;
    let nq = layout.nq;
    let m = layout.m;
    let d = layout.d;
    let mut blocks = Vec::new();
    let mut row_lo = Vec::new();
    let mut row_hi = Vec::new();
    let mut row = 0usize;
    let push = |blocks: &mut Vec<Block>,
                    row: &mut usize,
                    row_lo: &mut Vec<f64>,
                    row_hi: &mut Vec<f64>,
                    name: String,
                    kind: BlockKind,
                    bounds: Vec<[f64; 2]>,
                    deps: Vec<usize>| {
        let start = *row;
        for [lo, hi] in &bounds {
            row_lo.push(*lo);
            row_hi.push(*hi);
        }
        *row += bounds.len();
        blocks.push(Block { name, kind, rows: start..*row, deps });
    };
    let eq = [0.0, 0.0];
    let node_deps = |k: usize| -> Vec<usize> {
        layout.q(k).chain(layout.qd(k)).chain(layout.qdd(k)).chain(layout.u(k)).chain(layout.lam(k)).collect()
    };

    for k in 0..n {
        push(
            &mut blocks,
            &mut row,
            &mut row_lo,
            &mut row_hi,
            format!("node_dynamics_{k}"),
            BlockKind::NodeDynamics(k),
            vec![eq; physical_coords.len() + 2],
            node_deps(k),
        );
    }
    for k in 0..n - 1 {
        let mut deps: Vec<usize> = layout
            .q(k)
            .chain(layout.qd(k))
            .chain(layout.qdd(k))
            .chain(layout.u(k))
            .chain(layout.q(k + 1))
            .chain(layout.qd(k + 1))
            .chain(layout.qdd(k + 1))
            .chain(layout.u(k + 1))
            .collect();
        deps.push(layout.t_index());
        push(
            &mut blocks,
            &mut row,
            &mut row_lo,
            &mut row_hi,
            format!("defect_{k}"),
            BlockKind::IntervalDefect(k),
            vec![eq; defect_vel_coords.len() + defect_acc_coords.len()],
            deps,
        );
    }
    for k in 0..n {
        let mut deps: Vec<usize> = layout.qdd(k).collect();
        deps.extend(layout.alpha());
        deps.push(layout.t_index());
        push(
            &mut blocks,
            &mut row,
            &mut row_lo,
            &mut row_hi,
            format!("output_accel_{k}"),
            BlockKind::OutputAccel(k),
            vec![eq; m],
            deps,
        );
    }
    for k in 0..n {
        let mut deps: Vec<usize> = Vec::with_capacity(2 * m + m * (opts.degree + 1) + 1);
        for &coord in &mech.actuated_coords {
            deps.push(layout.q(k).start + coord);
            deps.push(layout.qd(k).start + coord);
        }
        deps.extend(layout.alpha());
        deps.push(layout.t_index());
        deps.sort_unstable();
        push(
            &mut blocks,
            &mut row,
            &mut row_lo,
            &mut row_hi,
            format!("output_value_{k}"),
            BlockKind::OutputValue(k),
            vec![eq; 2 * m],
            deps,
        );
    }
    if d > 0 {
        let deps: Vec<usize> = layout.q(0).chain(layout.beta()).collect();
        push(
            &mut blocks,
            &mut row,
            &mut row_lo,
            &mut row_hi,
            "design_tie".into(),
            BlockKind::DesignTie,
            vec![eq; d + sym_pairs.len()],
            deps,
        );
    }
    {
        let last = n - 1;
        let deps: Vec<usize> = layout
            .q(0)
            .chain(layout.qd(0))
            .chain(layout.q(last))
            .chain(layout.qd(last))
            .collect();
        // Design rows are omitted: design positions are tied through the
        // defects and design velocities are pinned to zero.
        push(
            &mut blocks,
            &mut row,
            &mut row_lo,
            &mut row_hi,
            "periodicity".into(),
            BlockKind::Periodicity,
            vec![eq; (nq - 1 - d) + (nq - d)],
            deps,
        );
    }
    {
        // Touchdown height zero at the last node is implied exactly by
        // the anchor, periodicity, and design-chain rows, so only the
        // transversality condition (downward impact speed) appears here;
        // repeating the height would leave one dependent equality row.
        let last = n - 1;
        let deps: Vec<usize> = layout.q(last).chain(layout.qd(last)).collect();
        push(
            &mut blocks,
            &mut row,
            &mut row_lo,
            &mut row_hi,
            "guard".into(),
            BlockKind::Guard,
            vec![[f64::NEG_INFINITY, -1e-3]],
            deps,
        );
    }
    {
        let deps: Vec<usize> = layout.q(0).chain(layout.qd(0)).collect();
        push(
            &mut blocks,
            &mut row,
            &mut row_lo,
            &mut row_hi,
            "anchor".into(),
            BlockKind::Anchor,
            vec![eq; 4],
            deps,
        );
    }
    for k in 0..n {
        push(
            &mut blocks,
            &mut row,
            &mut row_lo,
            &mut row_hi,
            format!("friction_{k}"),
            BlockKind::Friction(k),
            vec![[f64::NEG_INFINITY, 0.0], [0.0, f64::INFINITY]],
            layout.lam(k).collect(),
        );
    }
    for k in n / 4..=3 * n / 4 {
        push(
            &mut blocks,
            &mut row,
            &mut row_lo,
            &mut row_hi,
            format!("clearance_{k}"),
            BlockKind::Clearance(k),
            vec![[opts.clearance_min, f64::INFINITY]],
            layout.q(k).collect(),
        );
    }
    {
        let last = n - 1;
        let mut deps: Vec<usize> = layout.q(last).collect();
        deps.push(layout.t_index());
        push(
            &mut blocks,
            &mut row,
            &mut row_lo,
            &mut row_hi,
            "step_geometry".into(),
            BlockKind::StepGeometry,
            vec![
                [opts.step_length_bounds[0], opts.step_length_bounds[1]],
                [0.0, f64::INFINITY],
                [f64::NEG_INFINITY, 0.0],
            ],
            deps,
        );
    }

    // Variable bounds.
    let dim = layout.dim();
    let mut var_lo = vec![f64::NEG_INFINITY; dim];
    let mut var_hi = vec![f64::INFINITY; dim];
    for k in 0..n {
        for (j, i) in layout.q(k).enumerate() {
            var_lo[i] = mech.pos_lo[j];
            var_hi[i] = mech.pos_hi[j];
        }
        for (j, i) in layout.qd(k).enumerate() {
            var_lo[i] = -mech.vel_lim[j];
            var_hi[i] = mech.vel_lim[j];
        }
        for (slot, &coord) in mech.design_coords.iter().enumerate() {
            let qd_i = layout.qd(k).start + coord;
            var_lo[qd_i] = 0.0;
            var_hi[qd_i] = 0.0;
            let qdd_i = layout.qdd(k).start + coord;
            var_lo[qdd_i] = 0.0;
            var_hi[qdd_i] = 0.0;
            if let Some(fz) = &frozen_design {
                let q_i = layout.q(k).start + coord;
                var_lo[q_i] = fz[slot];
                var_hi[q_i] = fz[slot];
            }
        }
        for (j, i) in layout.u(k).enumerate() {
            var_lo[i] = -mech.torque_limits[j];
            var_hi[i] = mech.torque_limits[j];
        }
        let lam = layout.lam(k);
        var_lo[lam.start + 1] = opts.lambda_min;
    }
    for (i, &coord) in mech.actuated_coords.iter().enumerate() {
        for j in layout.alpha_row(i) {
            var_lo[j] = mech.pos_lo[coord] - 1.0;
            var_hi[j] = mech.pos_hi[coord] + 1.0;
        }
    }
    for (slot, i) in layout.beta().enumerate() {
        let coord = mech.design_coords[slot];
        if let Some(fz) = &frozen_design {
            var_lo[i] = fz[slot];
            var_hi[i] = fz[slot];
        } else {
            var_lo[i] = mech.pos_lo[coord];
            var_hi[i] = mech.pos_hi[coord];
        }
    }
    var_lo[layout.t_index()] = opts.duration_bounds[0];
    var_hi[layout.t_index()] = opts.duration_bounds[1];

    let mut cost_deps: Vec<usize> = Vec::new();
    for k in 0..n {
        cost_deps.extend(layout.u(k));
        for &coord in &mech.actuated_coords {
            cost_deps.push(layout.qd(k).start + coord);
        }
    }
    cost_deps.extend(layout.q(n - 1));
    cost_deps.push(layout.t_index());
    cost_deps.sort_unstable();
    cost_deps.dedup();

    Ok(GaitNlp {
        mech,
        layout,
        opts: opts.clone(),
        cost_on,
        frozen_design,
        blocks,
        row_lo,
        row_hi,
        var_lo,
        var_hi,
        physical_coords,
        defect_vel_coords,
        defect_acc_coords,
        sym_pairs,
        cost_deps,
    })
}

/// Smooth absolute value with exact zero at the origin. The width is a
/// power scale (W) far below gait magnitudes; it caps the curvature at
/// the origin so quasi-Newton models of the cost stay sane.
fn smooth_abs<T: Real>(z: T) -> T {
    let delta = 1e-2;
    (z * z + T::from_f64(delta * delta)).sqrt() - T::from_f64(delta)
}

/// Smooth positive clamp used to guard the transport-cost denominator at
/// infeasible intermediate iterates; identity (to 1e-8) above the floor.
fn smooth_floor<T: Real>(s: T, floor: f64) -> T {
    let delta = 1e-4;
    let shifted = s - T::from_f64(floor);
    T::from_f64(floor)
        + (shifted + (shifted * shifted + T::from_f64(delta * delta)).sqrt())
            * T::from_f64(0.5)
}

impl GaitNlp {
    pub fn mech(&self) -> &Mech {
        &self.mech
    }

    pub fn options(&self) -> &GaitOptions {
        &self.opts
    }

    fn joint_weight(&self, i: usize) -> f64 {
        self.opts.joint_weights.as_ref().map_or(1.0, |w| w.get(i).copied().unwrap_or(1.0))
    }

    fn eval_block<T: Real>(&self, kind: &BlockKind, x: &[T]) -> Vec<T> {
        let l = &self.layout;
        let mech = &self.mech;
        let nq = l.nq;
        match kind {
            BlockKind::NodeDynamics(k) => {
                let q = &x[l.q(*k)];
                let qd = &x[l.qd(*k)];
                let qdd = &x[l.qdd(*k)];
                let u = &x[l.u(*k)];
                let lam = &x[l.lam(*k)];
                let terms = mech.el_terms(q, qd);
                let jc = mech.foot_jacobian(q, 0);
                let jdqd = mech.foot_accel_bias(q, qd, 0);
                let mut out = Vec::with_capacity(self.physical_coords.len() + 2);
                for &i in &self.physical_coords {
                    let mut r = terms.h[i];
                    for j in 0..nq {
                        r += terms.d[(i, j)] * qdd[j];
                    }
                    for (col, _) in mech.actuated_coords.iter().enumerate() {
                        r -= terms.b[(i, col)] * u[col];
                    }
                    for c in 0..2 {
                        r -= jc[(c, i)] * lam[c];
                    }
                    out.push(r);
                }
                for c in 0..2 {
                    let mut r = jdqd[c];
                    for j in 0..nq {
                        r += jc[(c, j)] * qdd[j];
                    }
                    out.push(r);
                }
                out
            }
            BlockKind::IntervalDefect(k) => {
                let t_total = x[l.t_index()];
                let h = t_total * T::from_f64(1.0 / (l.nodes - 1) as f64);
                let q0 = &x[l.q(*k)];
                let qd0 = &x[l.qd(*k)];
                let qdd0 = &x[l.qdd(*k)];
                let u0 = &x[l.u(*k)];
                let q1 = &x[l.q(*k + 1)];
                let qd1 = &x[l.qd(*k + 1)];
                let qdd1 = &x[l.qdd(*k + 1)];
                let u1 = &x[l.u(*k + 1)];
                let half = T::from_f64(0.5);
                let eighth = T::from_f64(0.125);
                let sixth = T::from_f64(1.0 / 6.0);
                let four = T::from_f64(4.0);
                let qc: Vec<T> = (0..nq)
                    .map(|i| (q0[i] + q1[i]) * half + h * eighth * (qd0[i] - qd1[i]))
                    .collect();
                let qdc: Vec<T> = (0..nq)
                    .map(|i| (qd0[i] + qd1[i]) * half + h * eighth * (qdd0[i] - qdd1[i]))
                    .collect();
                let uc: Vec<T> =
                    (0..l.m).map(|i| (u0[i] + u1[i]) * half).collect();
                let qddc = match mech.constrained_dynamics(&qc, &qdc, &uc) {
                    Ok((qdd, _)) => qdd,
                    Err(_) => vec![T::from_f64(f64::NAN); nq],
                };
                let mut out = Vec::with_capacity(
                    self.defect_vel_coords.len() + self.defect_acc_coords.len(),
                );
                for &i in &self.defect_vel_coords {
                    out.push(
                        q1[i]
                            - q0[i]
                            - h * sixth * (qd0[i] + four * qdc[i] + qd1[i]),
                    );
                }
                for &i in &self.defect_acc_coords {
                    out.push(
                        qd1[i]
                            - qd0[i]
                            - h * sixth * (qdd0[i] + four * qddc[i] + qdd1[i]),
                    );
                }
                out
            }
            BlockKind::OutputAccel(k) => {
                let t_total = x[l.t_index()];
                let qdd = &x[l.qdd(*k)];
                let tau = T::from_f64(l.tau(*k));
                let mut out = Vec::with_capacity(l.m);
                for (i, &coord) in mech.actuated_coords.iter().enumerate() {
                    let coeffs = &x[l.alpha_row(i)];
                    let acc = bezier_point_d2(coeffs, tau) / (t_total * t_total);
                    out.push(qdd[coord] - acc);
                }
                out
            }
            BlockKind::OutputValue(k) => {
                let t_total = x[l.t_index()];
                let q = &x[l.q(*k)];
                let qd = &x[l.qd(*k)];
                let tau = T::from_f64(l.tau(*k));
                let mut out = Vec::with_capacity(2 * l.m);
                for (i, &coord) in mech.actuated_coords.iter().enumerate() {
                    let coeffs = &x[l.alpha_row(i)];
                    out.push(q[coord] - bezier_point(coeffs, tau));
                }
                for (i, &coord) in mech.actuated_coords.iter().enumerate() {
                    let coeffs = &x[l.alpha_row(i)];
                    out.push(qd[coord] - bezier_point_d1(coeffs, tau) / t_total);
                }
                out
            }
            BlockKind::DesignTie => {
                let q = &x[l.q(0)];
                let beta = &x[l.beta()];
                let mut out = Vec::with_capacity(l.d + self.sym_pairs.len());
                for (slot, &coord) in mech.design_coords.iter().enumerate() {
                    out.push(q[coord] - beta[slot]);
                }
                for &(a, b) in &self.sym_pairs {
                    out.push(beta[a] - beta[b]);
                }
                out
            }
            BlockKind::Periodicity => {
                let last = l.nodes - 1;
                let q0 = &x[l.q(0)];
                let qd0 = &x[l.qd(0)];
                let qn = &x[l.q(last)];
                let qdn = &x[l.qd(last)];
                let nan = || vec![T::from_f64(f64::NAN); (nq - 1 - l.d) + (nq - l.d)];
                let Ok(q_rel) = mech.relabel(qn) else { return nan() };
                let Ok((qd_imp, _)) = mech.impact_velocity_map(qn, qdn) else {
                    return nan();
                };
                let Ok(qd_rel) = mech.relabel(&qd_imp) else { return nan() };
                let mut out = Vec::with_capacity((nq - 1 - l.d) + (nq - l.d));
                for i in 1..nq {
                    if mech.design_coords.contains(&i) {
                        continue;
                    }
                    out.push(q0[i] - q_rel[i]);
                }
                for i in 0..nq {
                    if mech.design_coords.contains(&i) {
                        continue;
                    }
                    out.push(qd0[i] - qd_rel[i]);
                }
                out
            }
            BlockKind::Guard => {
                let last = l.nodes - 1;
                let q = &x[l.q(last)];
                let qd = &x[l.qd(last)];
                vec![mech.swing_foot_velocity(q, qd)]
            }
            BlockKind::Anchor => {
                let q = &x[l.q(0)];
                let qd = &x[l.qd(0)];
                let p = mech.foot_position(q, 0);
                let v = mech.foot_velocity(q, qd, 0);
                vec![p[0], p[1], v[0], v[1]]
            }
            BlockKind::Friction(k) => {
                let lam = &x[l.lam(*k)];
                let mu = T::from_f64(self.opts.mu);
                vec![lam[0] - mu * lam[1], lam[0] + mu * lam[1]]
            }
            BlockKind::Clearance(k) => {
                let q = &x[l.q(*k)];
                vec![mech.swing_foot_height(q)]
            }
            BlockKind::StepGeometry => {
                let last = l.nodes - 1;
                let q = &x[l.q(last)];
                let t_total = x[l.t_index()];
                let s = mech.foot_position(q, 1)[0];
                vec![
                    s,
                    s - T::from_f64(self.opts.speed_bounds[0]) * t_total,
                    s - T::from_f64(self.opts.speed_bounds[1]) * t_total,
                ]
            }
        }
    }

    fn objective_generic<T: Real>(&self, x: &[T]) -> T {
        if !self.cost_on {
            return T::zero();
        }
        let l = &self.layout;
        let n = l.nodes;
        let t_total = x[l.t_index()];
        let h = t_total * T::from_f64(1.0 / (n - 1) as f64);
        let mut num = T::zero();
        for k in 0..n {
            let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            let u = &x[l.u(k)];
            let qd = &x[l.qd(k)];
            let mut node_power = T::zero();
            for (i, &coord) in self.mech.actuated_coords.iter().enumerate() {
                node_power += T::from_f64(self.joint_weight(i)) * smooth_abs(u[i] * qd[coord]);
            }
            num += h * T::from_f64(w) * node_power;
        }
        let q_last = &x[l.q(n - 1)];
        let s = self.mech.foot_position(q_last, 1)[0];
        let s_safe = smooth_floor(s, 0.05);
        num / (T::from_f64(self.mech.total_mass * self.mech.gravity) * s_safe)
    }

    /// Per-row sorted dependency columns, a verified superset of the
    /// Jacobian nonzeros.
    pub fn jacobian_sparsity(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.row_lo.len()];
        for b in &self.blocks {
            for r in b.rows.clone() {
                rows[r] = b.deps.clone();
            }
        }
        rows
    }
}

impl Nlp for GaitNlp {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn num_rows(&self) -> usize {
        self.row_lo.len()
    }

    fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.var_lo.clone(), self.var_hi.clone())
    }

    fn row_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.row_lo.clone(), self.row_hi.clone())
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.objective_generic(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        if !self.cost_on {
            return g;
        }
        let mut xd: Vec<Dual> = x.iter().map(|&v| Dual::con(v)).collect();
        for &j in &self.cost_deps {
            xd[j].d = 1.0;
            g[j] = self.objective_generic(&xd).d;
            xd[j].d = 0.0;
        }
        g
    }

    fn rows(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.row_lo.len());
        for b in &self.blocks {
            let vals = self.eval_block(&b.kind, x);
            debug_assert_eq!(vals.len(), b.rows.len(), "block {}", b.name);
            out.extend(vals);
        }
        out
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.row_lo.len(), x.len());
        let mut xd: Vec<Dual> = x.iter().map(|&v| Dual::con(v)).collect();
        for b in &self.blocks {
            for &j in &b.deps {
                xd[j].d = 1.0;
                let vals = self.eval_block(&b.kind, &xd);
                for (off, v) in vals.iter().enumerate() {
                    jac[(b.rows.start + off, j)] = v.d;
                }
                xd[j].d = 0.0;
            }
        }
        jac
    }

    fn row_blocks(&self) -> Vec<(String, Range<usize>)> {
        self.blocks.iter().map(|b| (b.name.clone(), b.rows.clone())).collect()
    }
}

/// Two-joint numeric inverse kinematics: drives the chain joints of one
/// foot to a world target by Newton iteration on the foot position.
fn leg_ik(mech: &Mech, q: &mut [f64], foot: usize, chain: &[usize], target: [f64; 2]) {
    for _ in 0..40 {
        let p = mech.foot_position(q, foot);
        let r = [p[0] - target[0], p[1] - target[1]];
        if r[0].abs().max(r[1].abs()) < 1e-10 {
            break;
        }
        let jac = mech.foot_jacobian(q, foot);
        let a = nalgebra::Matrix2::new(
            jac[(0, chain[0])],
            jac[(0, chain[1])],
            jac[(1, chain[0])],
            jac[(1, chain[1])],
        );
        let rhs = nalgebra::Vector2::new(-r[0], -r[1]);
        let Some(step) = a.lu().solve(&rhs) else { break };
        for (c, &coord) in chain.iter().enumerate() {
            let lim = 0.5;
            q[coord] += step[c].clamp(-lim, lim);
            q[coord] = q[coord].clamp(mech.pos_lo[coord] + 1e-3, mech.pos_hi[coord] - 1e-3);
        }
    }
}

/// Revolute non-virtual chain coordinates from a foot's link up to the
/// base, ordered distal to proximal.
fn foot_chain(mech: &Mech, foot: usize) -> Vec<usize> {
    let model = mech.model();
    let mut link = model.feet[foot].link.clone();
    let mut chain = Vec::new();
    for _ in 0..model.joints.len() {
        let Some(j) = model.joints.iter().find(|j| j.child == link) else { break };
        if matches!(j.kind, crate::model::JointKind::Revolute) && !j.virtual_ {
            if let Some(c) = model.coord_of(&j.name) {
                chain.push(c);
            }
        }
        link = j.parent.clone();
    }
    chain
}

/// Cold-start decision vector: a static posture interpolated in joint
/// space to a kinematically shifted copy, gravity-compensating torques,
/// and a linear Bezier seed, clipped into the variable bounds.
pub fn initial_guess(nlp: &GaitNlp) -> Vec<f64> {
    let l = &nlp.layout;
    let mech = &nlp.mech;
    let n = l.nodes;
    let nq = l.nq;
    let s = 0.5 * (nlp.opts.step_length_bounds[0] + nlp.opts.step_length_bounds[1]);
    let t_total = 0.5 * (nlp.opts.duration_bounds[0] + nlp.opts.duration_bounds[1]);
    let height = 0.92 * mech.leg_length;

    let stance_chain = foot_chain(mech, 0);
    let swing_chain = foot_chain(mech, 1);
    let make_pose = |base_x: f64, swing_x: f64| -> Vec<f64> {
        let mut q = vec![0.0; nq];
        q[0] = base_x;
        q[1] = height;
        // Slight initial bend so the Newton iteration leaves the straight
        // singular configuration.
        for &c in stance_chain.iter().chain(swing_chain.iter()) {
            q[c] = (-0.1f64).clamp(mech.pos_lo[c] + 1e-3, mech.pos_hi[c] - 1e-3);
        }
        if stance_chain.len() >= 2 {
            leg_ik(mech, &mut q, 0, &stance_chain, [0.0, 0.0]);
        }
        if swing_chain.len() >= 2 {
            leg_ik(mech, &mut q, 1, &swing_chain, [swing_x, 0.002]);
        }
        q
    };
    let pose_a = make_pose(-0.5 * s, -s);
    let pose_b = make_pose(0.5 * s, s);

    let mut x = vec![0.0; l.dim()];
    let b_mat = mech.input_matrix::<f64>();
    for k in 0..n {
        let xi = k as f64 / (n - 1) as f64;
        let q: Vec<f64> =
            (0..nq).map(|i| pose_a[i] + xi * (pose_b[i] - pose_a[i])).collect();
        let qd: Vec<f64> = (0..nq).map(|i| (pose_b[i] - pose_a[i]) / t_total).collect();
        x[l.q(k)].copy_from_slice(&q);
        x[l.qd(k)].copy_from_slice(&qd);
        // Gravity-compensating torque and contact force: least-squares
        // solution of B u + Jc' lam = H at rest.
        let h_vec = mech.bias_forces(&q, &vec![0.0; nq]);
        let jc = mech.foot_jacobian(&q, 0);
        let mut a = DMatrix::zeros(nq, l.m + 2);
        for r in 0..nq {
            for c in 0..l.m {
                a[(r, c)] = b_mat[(r, c)];
            }
            for c in 0..2 {
                a[(r, l.m + c)] = jc[(c, r)];
            }
        }
        let rhs = nalgebra::DVector::from_vec(h_vec);
        let sol = a
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .unwrap_or_else(|_| nalgebra::DVector::zeros(l.m + 2));
        for (c, i) in l.u(k).enumerate() {
            x[i] = sol[c];
        }
        let lam = l.lam(k);
        x[lam.start] = sol[l.m];
        x[lam.start + 1] = sol[l.m + 1].max(nlp.opts.lambda_min);
    }
    for (i, &coord) in mech.actuated_coords.iter().enumerate() {
        let a0 = pose_a[coord];
        let a1 = pose_b[coord];
        for (j, idx) in l.alpha_row(i).enumerate() {
            x[idx] = a0 + (a1 - a0) * j as f64 / l.degree as f64;
        }
    }
    for (slot, i) in l.beta().enumerate() {
        x[i] = nlp.frozen_design.as_ref().map_or(0.0, |fz| fz[slot]);
    }
    x[l.t_index()] = t_total;
    for i in 0..x.len() {
        x[i] = x[i].clamp(nlp.var_lo[i], nlp.var_hi[i]);
    }
    x
}

/// Nodal values of one collocation point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodePoint {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
    pub u: Vec<f64>,
    pub lam: [f64; 2],
}

/// Scalar gait quality measures.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaitMetrics {
    /// Swing-foot landing position ahead of the stance foot (m).
    pub step_length: f64,
    /// Step period (s).
    pub step_duration: f64,
    /// step_length / step_duration (m/s).
    pub mean_speed: f64,
    /// Mechanical cost of transport (dimensionless).
    pub cost_of_transport: f64,
}

/// A solved (or flagged) periodic gait with its defining parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaitSolution {
    /// Desired-output Bezier coefficients, one row per actuated joint.
    pub alpha: Vec<Vec<f64>>,
    /// Design displacement targets (m).
    pub beta: Vec<f64>,
    /// Step duration T (s).
    pub step_duration: f64,
    pub phasing: PhasingConfig,
    pub nodes: Vec<NodePoint>,
    pub objective: f64,
    pub max_violation: f64,
    pub converged: bool,
    pub metrics: GaitMetrics,
    /// SHA-256 of the model the gait was solved on.
    pub model_hash: String,
}

impl GaitSolution {
    /// Output set realizing this gait for simulation.
    pub fn output_set(&self, mech: &Mech) -> Result<OutputSet, OutputError> {
        OutputSet::new(
            mech,
            BezierCurve::new(self.alpha.clone())?,
            self.beta.clone(),
            self.phasing.clone(),
        )
    }

    /// Initial augmented state (node 0) as a flat [q; qd] vector.
    pub fn initial_state(&self) -> Vec<f64> {
        let mut x = self.nodes[0].q.clone();
        x.extend_from_slice(&self.nodes[0].qd);
        x
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("gait serialization")
    }

    pub fn from_json(text: &str) -> Result<GaitSolution, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// SHA-256 hex digest of a model's canonical serialization.
pub fn model_digest(model: &RobotModel) -> String {
    let mut h = Sha256::new();
    h.update(serialize_model(model).as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Unpacks a decision vector into a gait solution, re-verifying the
/// constraint rows; a violation above `tol_feas` marks the solution
/// non-converged but still returns it.
pub fn extract_solution(nlp: &GaitNlp, x: &[f64], solved: &SolveResult) -> GaitSolution {
    let l = &nlp.layout;
    let mech = &nlp.mech;
    let rows = nlp.rows(x);
    let (rl, rh) = nlp.row_bounds();
    let mut viol = 0.0f64;
    for (i, &v) in rows.iter().enumerate() {
        viol = viol.max((rl[i] - v).max(v - rh[i]).max(0.0));
    }
    let n = l.nodes;
    let nodes: Vec<NodePoint> = (0..n)
        .map(|k| NodePoint {
            q: x[l.q(k)].to_vec(),
            qd: x[l.qd(k)].to_vec(),
            qdd: x[l.qdd(k)].to_vec(),
            u: x[l.u(k)].to_vec(),
            lam: [x[l.lam(k).start], x[l.lam(k).start + 1]],
        })
        .collect();
    let t_total = x[l.t_index()];
    let q_last = &x[l.q(n - 1)];
    let step_length = mech.foot_position(q_last, 1)[0] - mech.foot_position(&x[l.q(0)], 0)[0];
    // Exact (non-smoothed) transport cost.
    let mut num = 0.0;
    let h = t_total / (n - 1) as f64;
    for k in 0..n {
        let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        for (i, &coord) in mech.actuated_coords.iter().enumerate() {
            num += h * w * nlp.joint_weight(i) * (x[l.u(k)][i] * x[l.qd(k)][coord]).abs();
        }
    }
    let cot = num / (mech.total_mass * mech.gravity * step_length.max(1e-9));
    let alpha: Vec<Vec<f64>> =
        (0..l.m).map(|i| x[l.alpha_row(i)].to_vec()).collect();
    GaitSolution {
        alpha,
        beta: x[l.beta()].to_vec(),
        step_duration: t_total,
        phasing: PhasingConfig::Time { period: t_total },
        nodes,
        objective: solved.objective,
        max_violation: viol,
        converged: solved.status == SolveStatus::Converged && viol <= 1e-5,
        metrics: GaitMetrics {
            step_length,
            step_duration: t_total,
            mean_speed: step_length / t_total,
            cost_of_transport: cot,
        },
        model_hash: model_digest(mech.model()),
    }
}

/// Rebuilds the flat decision vector from a gait solution.
pub fn pack_x(layout: &DecisionLayout, sol: &GaitSolution) -> Vec<f64> {
    let mut x = vec![0.0; layout.dim()];
    for (k, node) in sol.nodes.iter().enumerate() {
        x[layout.q(k)].copy_from_slice(&node.q);
        x[layout.qd(k)].copy_from_slice(&node.qd);
        x[layout.qdd(k)].copy_from_slice(&node.qdd);
        x[layout.u(k)].copy_from_slice(&node.u);
        let lam = layout.lam(k);
        x[lam.start] = node.lam[0];
        x[lam.start + 1] = node.lam[1];
    }
    for (i, row) in sol.alpha.iter().enumerate() {
        x[layout.alpha_row(i)].copy_from_slice(row);
    }
    x[layout.beta()].copy_from_slice(&sol.beta);
    x[layout.t_index()] = sol.step_duration;
    x
}

/// One stage of the staged solve.
#[derive(Debug, Clone, Serialize)]
pub struct StageLog {
    pub name: String,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub kkt_residual: f64,
}

/// Result of the staged gait solve.
pub struct StagedSolve {
    pub solution: GaitSolution,
    pub x: Vec<f64>,
    pub stages: Vec<StageLog>,
}

/// Three-stage gait solve: feasibility with the design frozen, transport
/// cost with the design frozen, then all variables free. With no design
/// joints the third stage is skipped.
pub fn solve_staged(
    model: &RobotModel,
    opts: &GaitOptions,
    sopts: &SolveOptions,
) -> Result<StagedSolve, TranscriptionError> {
    solve_staged_from(model, opts, sopts, None)
}

/// Staged solve warm-started from a previous decision vector (skips the
/// cold feasibility stage when a warm start is supplied).
pub fn solve_staged_from(
    model: &RobotModel,
    opts: &GaitOptions,
    sopts: &SolveOptions,
    warm: Option<&[f64]>,
) -> Result<StagedSolve, TranscriptionError> {
    let d = model.num_design();
    let frozen = vec![0.0; d];
    let mut stages = Vec::new();
    let mut log = |name: &str, r: &SolveResult| {
        stages.push(StageLog {
            name: name.into(),
            status: r.status,
            iterations: r.iterations,
            objective: r.objective,
            max_violation: r.max_violation,
            kkt_residual: r.kkt_residual,
        });
    };

    let x_warm = match warm {
        Some(x0) => x0.to_vec(),
        None => {
            let nlp1 = build_nlp(model, opts, false, Some(frozen.clone()))?;
            let x0 = initial_guess(&nlp1);
            let r1 = solver::solve(&nlp1, &x0, sopts)?;
            log("feasibility", &r1);
            let nlp2 = build_nlp(model, opts, true, Some(frozen.clone()))?;
            let r2 = solver::solve(&nlp2, &r1.x, sopts)?;
            log("frozen_design_cost", &r2);
            r2.x
        }
    };
    let nlp3 = if d > 0 {
        build_nlp(model, opts, true, None)?
    } else {
        build_nlp(model, opts, true, Some(frozen))?
    };
    let r3 = solver::solve(&nlp3, &x_warm, sopts)?;
    log("full", &r3);
    let solution = extract_solution(&nlp3, &r3.x, &r3);
    Ok(StagedSolve { solution, x: r3.x, stages })
}
