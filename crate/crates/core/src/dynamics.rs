//! Planar rigid-body dynamics over the kinematic tree: forward kinematics,
//! mass matrix and bias forces, stance-constrained dynamics, the plastic
//! impact map with left/right relabeling, energies, and velocity
//! projection.
//!
//! Every evaluation is generic over the scalar type, so seeding one input
//! with a dual number yields one exact Jacobian column of any quantity
//! computed here. Virtual design coordinates are treated as welded: the
//! constrained dynamics and the impact map carry explicit lock rows that
//! pin their acceleration (and post-impact velocity) to zero, with the lock
//! forces internal to the mechanism.

use crate::model::{
    validate_model, Anchor, Axis, JointKind, ModelError, RobotModel, BASE_COORDS, BASE_FRAME,
};
use crate::num::{solve_dense, Mat, Real, SingularMatrix};

/// Height tolerance for "on the switching surface" (m).
pub const GUARD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, thiserror::Error)]
pub enum DynError {
    #[error("kinematic singularity: {0}")]
    Singular(#[from] SingularMatrix),
    #[error(
        "state not on the switching surface: swing foot height {height:e} m, \
         vertical velocity {velocity:e} m/s"
    )]
    NotOnGuard { height: f64, velocity: f64 },
    #[error("model defines no contact feet")]
    MissingFeet,
    #[error("model lacks a left/right relabel correspondence")]
    NoRelabel,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Augmented configuration and velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl AugmentedState {
    pub fn new(q: Vec<f64>, qd: Vec<f64>) -> Self {
        assert_eq!(q.len(), qd.len(), "state dimensions must match");
        AugmentedState { q, qd }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }
}

/// Mass matrix, drift vector, and actuation selector at one state.
#[derive(Debug, Clone)]
pub struct DynTerms<T> {
    /// Inertia matrix, (n+d) x (n+d).
    pub d: Mat<T>,
    /// Coriolis/centrifugal plus gravity drift, length n+d.
    pub h: Vec<T>,
    /// Actuation selector, (n+d) x m.
    pub b: Mat<T>,
}

#[derive(Debug, Clone, Copy)]
enum Attach {
    Weld,
    Revolute { coord: usize, sign: f64 },
    Prismatic { coord: usize, dir: [f64; 2] },
}

#[derive(Debug, Clone)]
struct Body {
    name: String,
    /// Parent body index; None attaches to the floating base.
    parent: Option<usize>,
    attach: Attach,
    /// Anchor on the parent, in the parent frame (m).
    anchor: [f64; 2],
    mass: f64,
    com: [f64; 2],
    izz: f64,
}

#[derive(Debug, Clone, Copy)]
struct Foot {
    body: usize,
    offset: [f64; 2],
}

/// Compiled, immutable view of a robot model ready for evaluation.
#[derive(Debug, Clone)]
pub struct Mech {
    model: RobotModel,
    /// Total coordinate count n + d.
    pub nv: usize,
    bodies: Vec<Body>,
    feet: Vec<Foot>,
    /// Coordinate indices of the virtual design joints, in design order.
    pub design_coords: Vec<usize>,
    /// Coordinate index driven by each actuator column.
    pub actuated_coords: Vec<usize>,
    /// Torque limit per actuator column (N m).
    pub torque_limits: Vec<f64>,
    /// Per-coordinate position bounds; base coordinates are unbounded.
    pub pos_lo: Vec<f64>,
    pub pos_hi: Vec<f64>,
    /// Per-coordinate velocity limit magnitudes; base coordinates unbounded.
    pub vel_lim: Vec<f64>,
    relabel_perm: Option<Vec<usize>>,
    pub total_mass: f64,
    pub gravity: f64,
    /// Base-to-stance-foot reach at the zero configuration (m).
    pub leg_length: f64,
    pub coord_names: Vec<String>,
}

/// World pose, velocity, and zero-acceleration bias of every body, plus
/// center-of-mass kinematics.
struct BodyKin<T> {
    pos: [T; 2],
    theta: T,
    vel: [T; 2],
    omega: T,
    acc0: [T; 2],
    alpha0: T,
    com: [T; 2],
    com_vel: [T; 2],
    com_acc0: [T; 2],
}

struct BodyJac<T> {
    /// Frame-origin point Jacobian, 2 x nv.
    jp: Mat<T>,
    /// Orientation Jacobian row, length nv.
    jth: Vec<T>,
}

fn rot<T: Real>(theta: T, v: [f64; 2]) -> [T; 2] {
    let (s, c) = (theta.sin(), theta.cos());
    let (x, z) = (T::from_f64(v[0]), T::from_f64(v[1]));
    [c * x - s * z, s * x + c * z]
}

fn perp<T: Real>(r: [T; 2]) -> [T; 2] {
    [-r[1], r[0]]
}

impl Mech {
    pub fn new(model: &RobotModel) -> Result<Mech, ModelError> {
        validate_model(model)?;
        let link_index = |name: &str| model.links.iter().position(|l| l.name == name);
        let mut bodies: Vec<Option<Body>> = vec![None; model.links.len()];
        // Links without a parent joint weld to the base.
        for (i, l) in model.links.iter().enumerate() {
            if !model.joints.iter().any(|j| j.child == l.name) {
                let c = l.constants();
                bodies[i] = Some(Body {
                    name: l.name.clone(),
                    parent: None,
                    attach: Attach::Weld,
                    anchor: [0.0, 0.0],
                    mass: c.mass,
                    com: c.com,
                    izz: c.inertia,
                });
            }
        }
        for (ji, j) in model.joints.iter().enumerate() {
            let child = link_index(&j.child).expect("validated child link");
            let parent = if j.parent == BASE_FRAME { None } else { link_index(&j.parent) };
            let anchor = match &j.anchor {
                Anchor::At(p) => *p,
                Anchor::Named(_) => {
                    if j.parent == BASE_FRAME {
                        return Err(ModelError::Validation {
                            field: format!("joints[{ji}].anchor"),
                            message: "distal anchor is undefined on the base frame".into(),
                        });
                    }
                    let pl = model.link(&j.parent).expect("validated parent link");
                    [0.0, -pl.nominal_length]
                }
            };
            let attach = match (j.kind, j.resolved_axis()) {
                (JointKind::Revolute, Axis::Sign(s)) => {
                    Attach::Revolute { coord: BASE_COORDS + ji, sign: s }
                }
                (JointKind::Prismatic, Axis::Dir(d)) => {
                    Attach::Prismatic { coord: BASE_COORDS + ji, dir: d }
                }
                _ => unreachable!("axis kind validated"),
            };
            let c = model.links[child].constants();
            bodies[child] = Some(Body {
                name: j.child.clone(),
                parent,
                attach,
                anchor,
                mass: c.mass,
                com: c.com,
                izz: c.inertia,
            });
        }
        let mut by_link: Vec<Body> = bodies.into_iter().map(|b| b.expect("validated tree")).collect();
        // Topological order: parents before children.
        let mut order: Vec<usize> = Vec::with_capacity(by_link.len());
        let mut placed = vec![false; by_link.len()];
        while order.len() < by_link.len() {
            let before = order.len();
            for i in 0..by_link.len() {
                if placed[i] {
                    continue;
                }
                let ready = match by_link[i].parent {
                    None => true,
                    Some(p) => placed[p],
                };
                if ready {
                    placed[i] = true;
                    order.push(i);
                }
            }
            assert_ne!(order.len(), before, "validated tree cannot stall");
        }
        let new_index: Vec<usize> = {
            let mut idx = vec![0usize; by_link.len()];
            for (new, &old) in order.iter().enumerate() {
                idx[old] = new;
            }
            idx
        };
        let mut topo: Vec<Body> = Vec::with_capacity(by_link.len());
        for &old in &order {
            let mut b = by_link[old].clone();
            b.parent = b.parent.map(|p| new_index[p]);
            topo.push(b);
        }
        by_link.clear();
        let body_of_link = |name: &str| -> usize {
            topo.iter().position(|b| b.name == name).expect("validated link")
        };
        let feet: Vec<Foot> = model
            .feet
            .iter()
            .map(|f| {
                let link = model.link(&f.link).expect("validated foot link");
                Foot {
                    body: body_of_link(&f.link),
                    offset: f.offset.unwrap_or([0.0, -link.nominal_length]),
                }
            })
            .collect();
        let design_coords: Vec<usize> =
            model.design_joints.iter().map(|n| model.coord_of(n).expect("validated")).collect();
        let actuated: Vec<&crate::model::JointSpec> =
            model.joints.iter().filter(|j| j.actuated).collect();
        let actuated_coords: Vec<usize> =
            actuated.iter().map(|j| model.coord_of(&j.name).expect("validated")).collect();
        let torque_limits: Vec<f64> = actuated.iter().map(|j| j.torque_limit).collect();
        let nv = model.num_coords();
        let mut pos_lo = vec![f64::NEG_INFINITY; nv];
        let mut pos_hi = vec![f64::INFINITY; nv];
        let mut vel_lim = vec![f64::INFINITY; nv];
        for (ji, j) in model.joints.iter().enumerate() {
            pos_lo[BASE_COORDS + ji] = j.position_limits[0];
            pos_hi[BASE_COORDS + ji] = j.position_limits[1];
            vel_lim[BASE_COORDS + ji] = j.velocity_limit;
        }
        let relabel_perm = if model.relabel_pairs.is_empty() {
            None
        } else {
            let mut perm: Vec<usize> = (0..nv).collect();
            for [a, b] in &model.relabel_pairs {
                let (ia, ib) =
                    (model.coord_of(a).expect("validated"), model.coord_of(b).expect("validated"));
                perm.swap(ia, ib);
            }
            Some(perm)
        };
        let total_mass: f64 = topo.iter().map(|b| b.mass).sum();
        let mut mech = Mech {
            model: model.clone(),
            nv,
            bodies: topo,
            feet,
            design_coords,
            actuated_coords,
            torque_limits,
            pos_lo,
            pos_hi,
            vel_lim,
            relabel_perm,
            total_mass,
            gravity: model.gravity,
            leg_length: 0.0,
            coord_names: model.coord_names(),
        };
        if !mech.feet.is_empty() {
            let q0 = vec![0.0; nv];
            let kin = mech.body_kin(&q0, &q0);
            let p = mech.foot_point(&kin, 0);
            mech.leg_length = -p[1];
        }
        Ok(mech)
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    /// Number of actuators m.
    pub fn num_inputs(&self) -> usize {
        self.actuated_coords.len()
    }

    /// Number of design coordinates d.
    pub fn num_design(&self) -> usize {
        self.design_coords.len()
    }

    pub fn num_feet(&self) -> usize {
        self.feet.len()
    }

    fn body_kin<T: Real>(&self, q: &[T], qd: &[T]) -> Vec<BodyKin<T>> {
        assert_eq!(q.len(), self.nv);
        assert_eq!(qd.len(), self.nv);
        let mut out: Vec<BodyKin<T>> = Vec::with_capacity(self.bodies.len());
        let zero = T::zero();
        for body in &self.bodies {
            let (p_pos, p_theta, p_vel, p_omega, p_acc, p_alpha) = match body.parent {
                None => ([q[0], q[1]], q[2], [qd[0], qd[1]], qd[2], [zero, zero], zero),
                Some(pi) => {
                    let p = &out[pi];
                    (p.pos, p.theta, p.vel, p.omega, p.acc0, p.alpha0)
                }
            };
            let ra = rot(p_theta, body.anchor);
            let aw = [p_pos[0] + ra[0], p_pos[1] + ra[1]];
            let pr = perp(ra);
            let av = [p_vel[0] + p_omega * pr[0], p_vel[1] + p_omega * pr[1]];
            let w2 = p_omega * p_omega;
            let pa = perp(ra);
            let aa = [
                p_acc[0] + p_alpha * pa[0] - w2 * ra[0],
                p_acc[1] + p_alpha * pa[1] - w2 * ra[1],
            ];
            let (pos, theta, vel, omega, acc0, alpha0) = match body.attach {
                Attach::Weld => (aw, p_theta, av, p_omega, aa, p_alpha),
                Attach::Revolute { coord, sign } => {
                    let s = T::from_f64(sign);
                    (aw, p_theta + s * q[coord], av, p_omega + s * qd[coord], aa, p_alpha)
                }
                Attach::Prismatic { coord, dir } => {
                    let uw = rot(p_theta, dir);
                    let ru = [uw[0] * q[coord], uw[1] * q[coord]];
                    let pos = [aw[0] + ru[0], aw[1] + ru[1]];
                    let pru = perp(ru);
                    let vel = [
                        av[0] + p_omega * pru[0] + uw[0] * qd[coord],
                        av[1] + p_omega * pru[1] + uw[1] * qd[coord],
                    ];
                    let puw = perp(uw);
                    let two = T::from_f64(2.0);
                    let acc = [
                        aa[0] + p_alpha * pru[0] - w2 * ru[0] + two * p_omega * puw[0] * qd[coord],
                        aa[1] + p_alpha * pru[1] - w2 * ru[1] + two * p_omega * puw[1] * qd[coord],
                    ];
                    (pos, p_theta, vel, p_omega, acc, p_alpha)
                }
            };
            let rc = rot(theta, body.com);
            let prc = perp(rc);
            let o2 = omega * omega;
            out.push(BodyKin {
                pos,
                theta,
                vel,
                omega,
                acc0,
                alpha0,
                com: [pos[0] + rc[0], pos[1] + rc[1]],
                com_vel: [vel[0] + omega * prc[0], vel[1] + omega * prc[1]],
                com_acc0: [
                    acc0[0] + alpha0 * prc[0] - o2 * rc[0],
                    acc0[1] + alpha0 * prc[1] - o2 * rc[1],
                ],
            });
        }
        out
    }

    fn body_jac<T: Real>(&self, q: &[T], kin: &[BodyKin<T>]) -> Vec<BodyJac<T>> {
        let nv = self.nv;
        let mut out: Vec<BodyJac<T>> = Vec::with_capacity(self.bodies.len());
        for body in &self.bodies {
            let mut jp = Mat::zeros(2, nv);
            let mut jth = vec![T::zero(); nv];
            match body.parent {
                None => {
                    jp[(0, 0)] = T::one();
                    jp[(1, 1)] = T::one();
                    jth[2] = T::one();
                    // Base rotation swings the anchor about the base origin.
                    let p_theta = q[2];
                    let ra = rot(p_theta, body.anchor);
                    let pr = perp(ra);
                    jp[(0, 2)] += pr[0];
                    jp[(1, 2)] += pr[1];
                }
                Some(pi) => {
                    let parent = &out[pi];
                    let p_theta = kin[pi].theta;
                    let ra = rot(p_theta, body.anchor);
                    let pr = perp(ra);
                    for j in 0..nv {
                        jp[(0, j)] = parent.jp[(0, j)] + parent.jth[j] * pr[0];
                        jp[(1, j)] = parent.jp[(1, j)] + parent.jth[j] * pr[1];
                        jth[j] = parent.jth[j];
                    }
                }
            }
            match body.attach {
                Attach::Weld => {}
                Attach::Revolute { coord, sign } => {
                    jth[coord] += T::from_f64(sign);
                }
                Attach::Prismatic { coord, dir } => {
                    let p_theta = match body.parent {
                        None => q[2],
                        Some(pi) => kin[pi].theta,
                    };
                    let uw = rot(p_theta, dir);
                    let ru = [uw[0] * q[coord], uw[1] * q[coord]];
                    let pru = perp(ru);
                    // Carried by the parent rotation rate.
                    for j in 0..nv {
                        jp[(0, j)] += jth[j] * pru[0];
                        jp[(1, j)] += jth[j] * pru[1];
                    }
                    jp[(0, coord)] += uw[0];
                    jp[(1, coord)] += uw[1];
                }
            }
            out.push(BodyJac { jp, jth });
        }
        out
    }

    /// Point Jacobian of a world point riding body `bi`, given the world
    /// vector from the body origin to the point.
    fn point_jac<T: Real>(&self, jac: &BodyJac<T>, r: [T; 2]) -> Mat<T> {
        let nv = self.nv;
        let mut out = Mat::zeros(2, nv);
        let pr = perp(r);
        for j in 0..nv {
            out[(0, j)] = jac.jp[(0, j)] + jac.jth[j] * pr[0];
            out[(1, j)] = jac.jp[(1, j)] + jac.jth[j] * pr[1];
        }
        out
    }

    fn foot_point<T: Real>(&self, kin: &[BodyKin<T>], which: usize) -> [T; 2] {
        let f = self.feet[which];
        let b = &kin[f.body];
        let ro = rot(b.theta, f.offset);
        [b.pos[0] + ro[0], b.pos[1] + ro[1]]
    }

    /// World position and orientation of every link frame, plus foot
    /// positions.
    pub fn forward_kinematics<T: Real>(&self, q: &[T]) -> FrameSet<T> {
        let qd = vec![T::zero(); self.nv];
        let kin = self.body_kin(q, &qd);
        let frames = self
            .bodies
            .iter()
            .zip(&kin)
            .map(|(b, k)| LinkFrame {
                link: b.name.clone(),
                pos: k.pos,
                theta: k.theta,
                com: k.com,
            })
            .collect();
        let feet = (0..self.feet.len()).map(|i| self.foot_point(&kin, i)).collect();
        FrameSet { frames, feet }
    }

    /// Mass matrix D(q).
    pub fn mass_matrix<T: Real>(&self, q: &[T]) -> Mat<T> {
        let qd = vec![T::zero(); self.nv];
        let kin = self.body_kin(q, &qd);
        let jac = self.body_jac(q, &kin);
        let nv = self.nv;
        let mut d = Mat::zeros(nv, nv);
        for (bi, body) in self.bodies.iter().enumerate() {
            if body.mass == 0.0 && body.izz == 0.0 {
                continue;
            }
            let rc = rot(kin[bi].theta, body.com);
            let jc = self.point_jac(&jac[bi], rc);
            let m = T::from_f64(body.mass);
            let izz = T::from_f64(body.izz);
            for r in 0..nv {
                for c in r..nv {
                    let v = m * (jc[(0, r)] * jc[(0, c)] + jc[(1, r)] * jc[(1, c)])
                        + izz * jac[bi].jth[r] * jac[bi].jth[c];
                    d[(r, c)] += v;
                    if r != c {
                        d[(c, r)] += v;
                    }
                }
            }
        }
        d
    }

    /// Drift vector H(q, qd) = C(q, qd) qd + G(q).
    pub fn bias_forces<T: Real>(&self, q: &[T], qd: &[T]) -> Vec<T> {
        let kin = self.body_kin(q, qd);
        let jac = self.body_jac(q, &kin);
        let nv = self.nv;
        let g = T::from_f64(self.gravity);
        let mut h = vec![T::zero(); nv];
        for (bi, body) in self.bodies.iter().enumerate() {
            if body.mass == 0.0 && body.izz == 0.0 {
                continue;
            }
            let rc = rot(kin[bi].theta, body.com);
            let jc = self.point_jac(&jac[bi], rc);
            let m = T::from_f64(body.mass);
            let izz = T::from_f64(body.izz);
            let fx = m * kin[bi].com_acc0[0];
            let fz = m * (kin[bi].com_acc0[1] + g);
            let tq = izz * kin[bi].alpha0;
            for j in 0..nv {
                h[j] += jc[(0, j)] * fx + jc[(1, j)] * fz + jac[bi].jth[j] * tq;
            }
        }
        h
    }

    /// Actuation selector B as a matrix over any scalar.
    pub fn input_matrix<T: Real>(&self) -> Mat<T> {
        let mut b = Mat::zeros(self.nv, self.actuated_coords.len());
        for (col, &coord) in self.actuated_coords.iter().enumerate() {
            b[(coord, col)] = T::one();
        }
        b
    }

    /// Full set of continuous-dynamics terms at one state.
    pub fn el_terms<T: Real>(&self, q: &[T], qd: &[T]) -> DynTerms<T> {
        DynTerms { d: self.mass_matrix(q), h: self.bias_forces(q, qd), b: self.input_matrix() }
    }

    /// World position of one foot.
    pub fn foot_position<T: Real>(&self, q: &[T], which: usize) -> [T; 2] {
        let qd = vec![T::zero(); self.nv];
        let kin = self.body_kin(q, &qd);
        self.foot_point(&kin, which)
    }

    /// World velocity of one foot.
    pub fn foot_velocity<T: Real>(&self, q: &[T], qd: &[T], which: usize) -> [T; 2] {
        let kin = self.body_kin(q, qd);
        let f = self.feet[which];
        let b = &kin[f.body];
        let ro = rot(b.theta, f.offset);
        let pr = perp(ro);
        [b.vel[0] + b.omega * pr[0], b.vel[1] + b.omega * pr[1]]
    }

    /// Contact Jacobian of one foot, 2 x nv.
    pub fn foot_jacobian<T: Real>(&self, q: &[T], which: usize) -> Mat<T> {
        let qd = vec![T::zero(); self.nv];
        let kin = self.body_kin(q, &qd);
        let jac = self.body_jac(q, &kin);
        let f = self.feet[which];
        let ro = rot(kin[f.body].theta, f.offset);
        self.point_jac(&jac[f.body], ro)
    }

    /// Foot acceleration at zero generalized acceleration (the J-dot-qd
    /// bias term of the contact constraint).
    pub fn foot_accel_bias<T: Real>(&self, q: &[T], qd: &[T], which: usize) -> [T; 2] {
        let kin = self.body_kin(q, qd);
        let f = self.feet[which];
        let b = &kin[f.body];
        let ro = rot(b.theta, f.offset);
        let pr = perp(ro);
        let w2 = b.omega * b.omega;
        [
            b.acc0[0] + b.alpha0 * pr[0] - w2 * ro[0],
            b.acc0[1] + b.alpha0 * pr[1] - w2 * ro[1],
        ]
    }

    /// Swing-foot height above ground (m); foot index 1 is the swing foot.
    pub fn swing_foot_height<T: Real>(&self, q: &[T]) -> T {
        self.foot_position(q, 1)[1]
    }

    /// Vertical swing-foot velocity (m/s).
    pub fn swing_foot_velocity<T: Real>(&self, q: &[T], qd: &[T]) -> T {
        self.foot_velocity(q, qd, 1)[1]
    }

    /// Solves the stance-pinned dynamics with welded design coordinates:
    /// D qdd + H = B u + Jc' lam + Sd' mu, Jc qdd = -Jc-dot qd, qdd_D = 0.
    /// Returns the acceleration and the contact force (tangential, normal).
    pub fn constrained_dynamics<T: Real>(
        &self,
        q: &[T],
        qd: &[T],
        u: &[T],
    ) -> Result<(Vec<T>, [T; 2]), DynError> {
        if self.feet.is_empty() {
            return Err(DynError::MissingFeet);
        }
        let nv = self.nv;
        let nd = self.design_coords.len();
        let dim = nv + 2 + nd;
        let d = self.mass_matrix(q);
        let h = self.bias_forces(q, qd);
        let jc = self.foot_jacobian(q, 0);
        let jdqd = self.foot_accel_bias(q, qd, 0);
        let mut kkt = Mat::zeros(dim, dim);
        let mut rhs = Mat::zeros(dim, 1);
        for r in 0..nv {
            for c in 0..nv {
                kkt[(r, c)] = d[(r, c)];
            }
            for c in 0..2 {
                kkt[(r, nv + c)] = -jc[(c, r)];
                kkt[(nv + c, r)] = jc[(c, r)];
            }
            rhs[(r, 0)] = -h[r];
        }
        for (col, &coord) in self.actuated_coords.iter().enumerate() {
            rhs[(coord, 0)] += u[col];
        }
        for c in 0..2 {
            rhs[(nv + c, 0)] = -jdqd[c];
        }
        for (k, &coord) in self.design_coords.iter().enumerate() {
            kkt[(coord, nv + 2 + k)] = -T::one();
            kkt[(nv + 2 + k, coord)] = T::one();
        }
        let sol = solve_dense(&kkt, &rhs)?;
        let qdd = (0..nv).map(|i| sol[(i, 0)]).collect();
        Ok((qdd, [sol[(nv, 0)], sol[(nv + 1, 0)]]))
    }

    /// Drift acceleration (u = 0) plus the affine input-to-acceleration and
    /// input-to-contact-force maps of the stance dynamics.
    pub fn accel_with_input_map(
        &self,
        q: &[f64],
        qd: &[f64],
    ) -> Result<(Vec<f64>, [f64; 2], Mat<f64>, Mat<f64>), DynError> {
        if self.feet.is_empty() {
            return Err(DynError::MissingFeet);
        }
        let nv = self.nv;
        let nd = self.design_coords.len();
        let m = self.actuated_coords.len();
        let dim = nv + 2 + nd;
        let d = self.mass_matrix(q);
        let h = self.bias_forces(q, qd);
        let jc = self.foot_jacobian(q, 0);
        let jdqd = self.foot_accel_bias(q, qd, 0);
        let mut kkt = Mat::zeros(dim, dim);
        let mut rhs = Mat::zeros(dim, 1 + m);
        for r in 0..nv {
            for c in 0..nv {
                kkt[(r, c)] = d[(r, c)];
            }
            for c in 0..2 {
                kkt[(r, nv + c)] = -jc[(c, r)];
                kkt[(nv + c, r)] = jc[(c, r)];
            }
            rhs[(r, 0)] = -h[r];
        }
        for c in 0..2 {
            rhs[(nv + c, 0)] = -jdqd[c];
        }
        for (k, &coord) in self.design_coords.iter().enumerate() {
            kkt[(coord, nv + 2 + k)] = -1.0;
            kkt[(nv + 2 + k, coord)] = 1.0;
        }
        for (col, &coord) in self.actuated_coords.iter().enumerate() {
            rhs[(coord, 1 + col)] = 1.0;
        }
        let sol = solve_dense(&kkt, &rhs)?;
        let qdd0 = (0..nv).map(|i| sol[(i, 0)]).collect();
        let lam0 = [sol[(nv, 0)], sol[(nv + 1, 0)]];
        let mut dqdd_du = Mat::zeros(nv, m);
        let mut dlam_du = Mat::zeros(2, m);
        for col in 0..m {
            for r in 0..nv {
                dqdd_du[(r, col)] = sol[(r, 1 + col)];
            }
            dlam_du[(0, col)] = sol[(nv, 1 + col)];
            dlam_du[(1, col)] = sol[(nv + 1, 1 + col)];
        }
        Ok((qdd0, lam0, dqdd_du, dlam_du))
    }

    /// Plastic-impact velocity map at the swing foot (pre-relabel): solves
    /// the momentum-conserving block system with the new contact pinned and
    /// design coordinates locked. Returns the post-impact velocity and the
    /// contact impulse.
    pub fn impact_velocity_map<T: Real>(
        &self,
        q: &[T],
        qd_minus: &[T],
    ) -> Result<(Vec<T>, [T; 2]), DynError> {
        if self.feet.len() < 2 {
            return Err(DynError::MissingFeet);
        }
        let nv = self.nv;
        let nd = self.design_coords.len();
        let dim = nv + 2 + nd;
        let d = self.mass_matrix(q);
        let jn = self.foot_jacobian(q, 1);
        let mut kkt = Mat::zeros(dim, dim);
        let mut rhs = Mat::zeros(dim, 1);
        let dqd = d.mul_vec(qd_minus);
        for r in 0..nv {
            for c in 0..nv {
                kkt[(r, c)] = d[(r, c)];
            }
            for c in 0..2 {
                kkt[(r, nv + c)] = -jn[(c, r)];
                kkt[(nv + c, r)] = jn[(c, r)];
            }
            rhs[(r, 0)] = dqd[r];
        }
        for (k, &coord) in self.design_coords.iter().enumerate() {
            kkt[(coord, nv + 2 + k)] = -T::one();
            kkt[(nv + 2 + k, coord)] = T::one();
        }
        let sol = solve_dense(&kkt, &rhs)?;
        let qd_plus = (0..nv).map(|i| sol[(i, 0)]).collect();
        Ok((qd_plus, [sol[(nv, 0)], sol[(nv + 1, 0)]]))
    }

    /// Full reset map: checks the guard, applies the plastic impact, and
    /// relabels coordinates so the former swing leg becomes the stance leg.
    /// Returns the post-impact state and the contact impulse.
    pub fn impact_map(&self, x: &AugmentedState) -> Result<(AugmentedState, [f64; 2]), DynError> {
        let z = self.swing_foot_height(&x.q);
        let zd = self.swing_foot_velocity(&x.q, &x.qd);
        if z.abs() > GUARD_TOL || zd >= 0.0 {
            return Err(DynError::NotOnGuard { height: z, velocity: zd });
        }
        let (qd_plus, imp) = self.impact_velocity_map(&x.q, &x.qd)?;
        let q_new = self.relabel(&x.q)?;
        let qd_new = self.relabel(&qd_plus)?;
        Ok((AugmentedState::new(q_new, qd_new), imp))
    }

    /// Applies the left/right coordinate relabeling to a configuration or
    /// velocity vector. Design coordinates map by identity.
    pub fn relabel<T: Real>(&self, v: &[T]) -> Result<Vec<T>, DynError> {
        let perm = self.relabel_perm.as_ref().ok_or(DynError::NoRelabel)?;
        assert_eq!(v.len(), self.nv);
        Ok(perm.iter().map(|&i| v[i]).collect())
    }

    /// The relabeling matrix as an explicit permutation matrix.
    pub fn relabel_matrix(&self) -> Result<Mat<f64>, DynError> {
        let perm = self.relabel_perm.as_ref().ok_or(DynError::NoRelabel)?;
        let mut m = Mat::zeros(self.nv, self.nv);
        for (r, &c) in perm.iter().enumerate() {
            m[(r, c)] = 1.0;
        }
        Ok(m)
    }

    pub fn kinetic_energy<T: Real>(&self, q: &[T], qd: &[T]) -> T {
        let kin = self.body_kin(q, qd);
        let half = T::from_f64(0.5);
        let mut e = T::zero();
        for (bi, body) in self.bodies.iter().enumerate() {
            let m = T::from_f64(body.mass);
            let izz = T::from_f64(body.izz);
            let v = kin[bi].com_vel;
            e += half * (m * (v[0] * v[0] + v[1] * v[1]) + izz * kin[bi].omega * kin[bi].omega);
        }
        e
    }

    pub fn potential_energy<T: Real>(&self, q: &[T]) -> T {
        let qd = vec![T::zero(); self.nv];
        let kin = self.body_kin(q, &qd);
        let g = T::from_f64(self.gravity);
        let mut e = T::zero();
        for (bi, body) in self.bodies.iter().enumerate() {
            e += T::from_f64(body.mass) * g * kin[bi].com[1];
        }
        e
    }

    /// World center of mass.
    pub fn center_of_mass<T: Real>(&self, q: &[T]) -> [T; 2] {
        let qd = vec![T::zero(); self.nv];
        let kin = self.body_kin(q, &qd);
        let mut c = [T::zero(), T::zero()];
        for (bi, body) in self.bodies.iter().enumerate() {
            let m = T::from_f64(body.mass);
            c[0] += m * kin[bi].com[0];
            c[1] += m * kin[bi].com[1];
        }
        let inv = T::from_f64(1.0 / self.total_mass);
        [c[0] * inv, c[1] * inv]
    }

    /// Angular momentum about a world point (kg m^2/s, positive ccw).
    pub fn angular_momentum_about(&self, q: &[f64], qd: &[f64], point: [f64; 2]) -> f64 {
        let kin = self.body_kin(q, qd);
        let mut l = 0.0;
        for (bi, body) in self.bodies.iter().enumerate() {
            let r = [kin[bi].com[0] - point[0], kin[bi].com[1] - point[1]];
            let v = kin[bi].com_vel;
            l += body.mass * (r[0] * v[1] - r[1] * v[0]) + body.izz * kin[bi].omega;
        }
        l
    }

    /// Absolute torso pitch (orientation of the first body hanging off the
    /// unactuated posture joint; falls back to base pitch).
    pub fn torso_pitch(&self, q: &[f64]) -> f64 {
        let kin = self.body_kin(q, &vec![0.0; self.nv]);
        for (bi, body) in self.bodies.iter().enumerate() {
            if let Attach::Revolute { .. } = body.attach {
                let coord_joint = self
                    .model
                    .joints
                    .iter()
                    .find(|j| j.child == body.name)
                    .expect("validated body joint");
                if !coord_joint.actuated && !coord_joint.virtual_ {
                    return kin[bi].theta.value();
                }
            }
        }
        q[2]
    }

    /// Least-kinetic-energy projection of a velocity onto the constraint
    /// set {stance foot pinned, design coordinates stationary}.
    pub fn project_velocity(&self, q: &[f64], qd_raw: &[f64]) -> Result<Vec<f64>, DynError> {
        if self.feet.is_empty() {
            return Err(DynError::MissingFeet);
        }
        let nv = self.nv;
        let nd = self.design_coords.len();
        let dim = nv + 2 + nd;
        let d = self.mass_matrix(q);
        let jc = self.foot_jacobian(q, 0);
        let mut kkt = Mat::zeros(dim, dim);
        let mut rhs = Mat::zeros(dim, 1);
        let dqd = d.mul_vec(qd_raw);
        for r in 0..nv {
            for c in 0..nv {
                kkt[(r, c)] = d[(r, c)];
            }
            for c in 0..2 {
                kkt[(r, nv + c)] = -jc[(c, r)];
                kkt[(nv + c, r)] = jc[(c, r)];
            }
            rhs[(r, 0)] = dqd[r];
        }
        for (k, &coord) in self.design_coords.iter().enumerate() {
            kkt[(coord, nv + 2 + k)] = -1.0;
            kkt[(nv + 2 + k, coord)] = 1.0;
        }
        let sol = solve_dense(&kkt, &rhs)?;
        Ok((0..nv).map(|i| sol[(i, 0)]).collect())
    }
}

/// World-frame pose of one link.
#[derive(Debug, Clone)]
pub struct LinkFrame<T> {
    pub link: String,
    /// Frame origin (m).
    pub pos: [T; 2],
    /// Orientation (rad, ccw).
    pub theta: T,
    /// Center of mass (m).
    pub com: [T; 2],
}

/// Forward-kinematics result: all link frames plus foot positions.
#[derive(Debug, Clone)]
pub struct FrameSet<T> {
    pub frames: Vec<LinkFrame<T>>,
    pub feet: Vec<[T; 2]>,
}
