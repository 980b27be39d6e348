//! Parametric robot description: parsing, validation, length-dependent
//! inertial properties, and augmentation with virtual prismatic
//! length-extension joints.
//!
//! A model is a kinematic tree of planar links rooted at a floating base
//! (x, z, pitch). Links attach either through named joints or, when no
//! joint names them as a child, by a rigid weld to the base frame. Link
//! local frames place the long axis along local -z, so a leg joint angle
//! of zero points the leg straight down.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Number of floating-base coordinates (x, z, pitch).
pub const BASE_COORDS: usize = 3;

/// Name of the implicit floating-base frame usable as a joint parent.
pub const BASE_FRAME: &str = "base";

/// Suffix given to massless virtual links created by augmentation.
pub const VIRTUAL_LINK_SUFFIX: &str = "_ext";

/// Prefix given to virtual prismatic extension joints.
pub const VIRTUAL_JOINT_PREFIX: &str = "ext_";

#[derive(Debug, Clone, thiserror::Error)]
pub enum ModelError {
    #[error("model parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("model validation error in `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("link `{0}` is already augmented with a virtual extension joint")]
    DuplicateAugmentation(String),
    #[error("design value {value} for `{joint}` outside bounds [{lo}, {hi}]")]
    DesignOutOfBounds { joint: String, value: f64, lo: f64, hi: f64 },
    #[error("inertia fit needs at least 4 samples with distinct lengths, got {0}")]
    InsufficientSamples(usize),
    #[error("inertia fit samples are rank deficient (repeated lengths)")]
    DegenerateSamples,
}

fn validation(field: &str, message: impl Into<String>) -> ModelError {
    ModelError::Validation { field: field.to_string(), message: message.into() }
}

/// Cubic polynomials in link length for the planar inertial properties.
///
/// Coefficient order is ascending: value(l) = c0 + c1 l + c2 l^2 + c3 l^3.
/// `com` is the center-of-mass distance along the link long axis (local -z)
/// and `com_perp` its offset perpendicular to that axis (local +x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InertiaPoly {
    /// Mass cubic (kg).
    pub mass: [f64; 4],
    /// Center-of-mass distance along the long axis (m).
    pub com: [f64; 4],
    /// Center-of-mass offset perpendicular to the long axis (m).
    #[serde(default = "zero_coeffs", skip_serializing_if = "is_zero_coeffs")]
    pub com_perp: [f64; 4],
    /// Rotational inertia about the center of mass (kg m^2).
    pub inertia: [f64; 4],
}

fn zero_coeffs() -> [f64; 4] {
    [0.0; 4]
}

fn is_zero_coeffs(c: &[f64; 4]) -> bool {
    c.iter().all(|&v| v == 0.0)
}

fn poly_eval(c: &[f64; 4], l: f64) -> f64 {
    ((c[3] * l + c[2]) * l + c[1]) * l + c[0]
}

impl InertiaPoly {
    /// Evaluates the polynomials at length `l` into fixed constants. The
    /// along-axis com distance maps to local -z.
    pub fn eval(&self, l: f64) -> InertiaConstants {
        InertiaConstants {
            mass: poly_eval(&self.mass, l),
            com: [poly_eval(&self.com_perp, l), -poly_eval(&self.com, l)],
            inertia: poly_eval(&self.inertia, l),
        }
    }
}

/// Fixed planar inertial properties of one link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InertiaConstants {
    /// Mass (kg).
    pub mass: f64,
    /// Center of mass in the link frame (m), long axis along -z.
    pub com: [f64; 2],
    /// Rotational inertia about the center of mass (kg m^2).
    pub inertia: f64,
}

/// Inertial description of a link: fixed constants, or polynomials in the
/// link length for links whose length is a design parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkInertia {
    Constants(InertiaConstants),
    Poly(InertiaPoly),
}

/// One rigid link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    /// Unique identifier.
    pub name: String,
    /// Length along the local -z axis (m); kinematic distance to a distal
    /// child anchor or foot.
    pub nominal_length: f64,
    /// Admissible length range (m) for design links; absent for links of
    /// fixed length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_bounds: Option<[f64; 2]>,
    pub inertia: LinkInertia,
}

impl LinkSpec {
    /// Inertial constants at the link's nominal length.
    pub fn constants(&self) -> InertiaConstants {
        match &self.inertia {
            LinkInertia::Constants(c) => c.clone(),
            LinkInertia::Poly(p) => p.eval(self.nominal_length),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// Attachment point of a joint on its parent link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Anchor {
    /// Named anchor; only `"distal"` (the parent's length endpoint,
    /// local (0, -length)) is recognized.
    Named(String),
    /// Explicit planar coordinates in the parent frame (m).
    At([f64; 2]),
}

/// Planar joint axis: a rotation sign for revolute joints (+1 is
/// counterclockwise) or a translation direction for prismatic joints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Axis {
    Sign(f64),
    Dir([f64; 2]),
}

/// One joint of the kinematic tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    /// Unique identifier.
    pub name: String,
    pub kind: JointKind,
    /// Parent link name, or `"base"` for the floating-base frame.
    pub parent: String,
    /// Child link name.
    pub child: String,
    /// Anchor on the parent (defaults to the parent frame origin).
    #[serde(default = "default_anchor")]
    pub anchor: Anchor,
    /// Axis (defaults: revolute +1, prismatic (0, -1)).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<Axis>,
    /// Position limits (rad or m).
    pub position_limits: [f64; 2],
    /// Velocity limit magnitude (rad/s or m/s).
    pub velocity_limit: f64,
    /// Torque/force limit magnitude (N m or N); meaningful for actuated
    /// joints.
    pub torque_limit: f64,
    pub actuated: bool,
    /// True only for design prismatic extension joints.
    #[serde(rename = "virtual", default)]
    pub virtual_: bool,
}

fn default_anchor() -> Anchor {
    Anchor::At([0.0, 0.0])
}

impl JointSpec {
    /// Resolved axis with per-kind defaults applied.
    pub fn resolved_axis(&self) -> Axis {
        match (&self.axis, self.kind) {
            (Some(a), _) => a.clone(),
            (None, JointKind::Revolute) => Axis::Sign(1.0),
            (None, JointKind::Prismatic) => Axis::Dir([0.0, -1.0]),
        }
    }
}

/// Ground-contact point riding on a link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootSpec {
    /// Link carrying the foot point.
    pub link: String,
    /// Offset in the link frame (m); defaults to the distal endpoint
    /// (0, -nominal_length), tracking the link's current length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<[f64; 2]>,
}

/// Complete parametric robot description.
///
/// Configuration ordering is the 3 base coordinates followed by one
/// coordinate per joint in `joints` order. `n` counts base plus non-virtual
/// joints; `d` counts virtual (design) joints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub links: Vec<LinkSpec>,
    pub joints: Vec<JointSpec>,
    /// Contact points; index 0 is the stance foot by convention.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feet: Vec<FootSpec>,
    /// Names of virtual design joints, in design-coordinate order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub design_joints: Vec<String>,
    /// Pairs of design joints constrained equal (left/right symmetry).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub symmetry_pairs: Vec<[String; 2]>,
    /// Pairs of non-virtual joints whose coordinates swap when the legs
    /// exchange stance/swing roles.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relabel_pairs: Vec<[String; 2]>,
    /// Gravitational acceleration magnitude (m/s^2), acting along -z.
    pub gravity: f64,
}

impl RobotModel {
    /// Total configuration dimension n + d.
    pub fn num_coords(&self) -> usize {
        BASE_COORDS + self.joints.len()
    }

    /// Number of virtual design coordinates d.
    pub fn num_design(&self) -> usize {
        self.design_joints.len()
    }

    /// Number of non-virtual coordinates n.
    pub fn num_physical(&self) -> usize {
        self.num_coords() - self.num_design()
    }

    pub fn link(&self, name: &str) -> Option<&LinkSpec> {
        self.links.iter().find(|l| l.name == name)
    }

    pub fn joint(&self, name: &str) -> Option<&JointSpec> {
        self.joints.iter().find(|j| j.name == name)
    }

    /// Configuration index of a joint's coordinate.
    pub fn coord_of(&self, joint: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == joint).map(|i| i + BASE_COORDS)
    }

    /// Coordinate names: base coordinates then joint names.
    pub fn coord_names(&self) -> Vec<String> {
        let mut names = vec!["base_x".to_string(), "base_z".to_string(), "base_pitch".to_string()];
        names.extend(self.joints.iter().map(|j| j.name.clone()));
        names
    }
}

/// Parses and validates a model file.
pub fn parse_model(text: &[u8]) -> Result<RobotModel, ModelError> {
    let model: RobotModel = serde_json::from_slice(text).map_err(|e| ModelError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    validate_model(&model)?;
    Ok(model)
}

/// Serializes a model; the output parses back to an equal model.
pub fn serialize_model(model: &RobotModel) -> String {
    serde_json::to_string_pretty(model).expect("model serialization cannot fail")
}

/// Checks every structural and numeric invariant of a model.
pub fn validate_model(m: &RobotModel) -> Result<(), ModelError> {
    if !(m.gravity > 0.0) {
        return Err(validation("gravity", "must be positive"));
    }
    let mut link_names = BTreeSet::new();
    for (i, l) in m.links.iter().enumerate() {
        let field = format!("links[{i}]");
        if l.name.is_empty() || l.name == BASE_FRAME {
            return Err(validation(&field, "link name empty or reserved"));
        }
        if !link_names.insert(l.name.clone()) {
            return Err(validation(&field, format!("duplicate link name `{}`", l.name)));
        }
        if !(l.nominal_length >= 0.0) {
            return Err(validation(&format!("{field}.nominal_length"), "must be non-negative"));
        }
        if let Some([lo, hi]) = l.length_bounds {
            if !(lo > 0.0 && lo <= l.nominal_length && l.nominal_length <= hi) {
                return Err(validation(
                    &format!("{field}.length_bounds"),
                    format!(
                        "require 0 < min <= nominal <= max, got [{lo}, {hi}] with nominal {}",
                        l.nominal_length
                    ),
                ));
            }
        }
        match &l.inertia {
            LinkInertia::Constants(c) => {
                if c.mass < 0.0 || c.inertia < 0.0 {
                    return Err(validation(
                        &format!("{field}.inertia"),
                        "mass and inertia must be non-negative",
                    ));
                }
            }
            LinkInertia::Poly(p) => {
                let [lo, hi] = l.length_bounds.unwrap_or([l.nominal_length, l.nominal_length]);
                for k in 0..100 {
                    let t = lo + (hi - lo) * (k as f64) / 99.0;
                    let c = p.eval(t);
                    if !(c.mass > 0.0 && c.inertia > 0.0) {
                        return Err(validation(
                            &format!("{field}.inertia"),
                            format!("polynomial gives non-positive mass or inertia at length {t}"),
                        ));
                    }
                }
            }
        }
    }
    let mut joint_names = BTreeSet::new();
    let mut parent_of: BTreeMap<&str, &str> = BTreeMap::new();
    for (i, j) in m.joints.iter().enumerate() {
        let field = format!("joints[{i}]");
        if j.name.is_empty() {
            return Err(validation(&field, "joint name empty"));
        }
        if !joint_names.insert(j.name.clone()) {
            return Err(validation(&field, format!("duplicate joint name `{}`", j.name)));
        }
        if j.parent != BASE_FRAME && !link_names.contains(j.parent.as_str()) {
            return Err(validation(&format!("{field}.parent"), format!("unknown link `{}`", j.parent)));
        }
        if !link_names.contains(j.child.as_str()) {
            return Err(validation(&format!("{field}.child"), format!("unknown link `{}`", j.child)));
        }
        if j.parent == j.child {
            return Err(validation(&field, "parent equals child"));
        }
        if parent_of.insert(j.child.as_str(), j.parent.as_str()).is_some() {
            return Err(validation(
                &format!("{field}.child"),
                format!("link `{}` has more than one parent joint", j.child),
            ));
        }
        if j.position_limits[0] > j.position_limits[1] {
            return Err(validation(&format!("{field}.position_limits"), "lower bound above upper"));
        }
        if !(j.velocity_limit > 0.0) {
            return Err(validation(&format!("{field}.velocity_limit"), "must be positive"));
        }
        if j.actuated && !(j.torque_limit > 0.0) {
            return Err(validation(
                &format!("{field}.torque_limit"),
                "must be positive for actuated joints",
            ));
        }
        if j.virtual_ && j.kind != JointKind::Prismatic {
            return Err(validation(&format!("{field}.kind"), "virtual joints must be prismatic"));
        }
        if j.virtual_ && j.actuated {
            return Err(validation(&format!("{field}.actuated"), "virtual joints are unactuated"));
        }
        match j.resolved_axis() {
            Axis::Sign(s) => {
                if j.kind != JointKind::Revolute {
                    return Err(validation(&format!("{field}.axis"), "scalar axis is for revolute joints"));
                }
                if s.abs() != 1.0 {
                    return Err(validation(&format!("{field}.axis"), "revolute axis sign must be +1 or -1"));
                }
            }
            Axis::Dir(d) => {
                if j.kind != JointKind::Prismatic {
                    return Err(validation(&format!("{field}.axis"), "vector axis is for prismatic joints"));
                }
                let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(validation(&format!("{field}.axis"), "prismatic axis must be a unit vector"));
                }
            }
        }
        if let Anchor::Named(s) = &j.anchor {
            if s != "distal" {
                return Err(validation(
                    &format!("{field}.anchor"),
                    format!("unknown named anchor `{s}` (only \"distal\" is defined)"),
                ));
            }
        }
    }
    // Tree reachability: links without a parent joint weld to the base.
    let mut reach: BTreeSet<&str> = m
        .links
        .iter()
        .filter(|l| !parent_of.contains_key(l.name.as_str()))
        .map(|l| l.name.as_str())
        .collect();
    loop {
        let before = reach.len();
        for j in &m.joints {
            if j.parent == BASE_FRAME || reach.contains(j.parent.as_str()) {
                reach.insert(j.child.as_str());
            }
        }
        if reach.len() == before {
            break;
        }
    }
    if reach.len() != m.links.len() {
        let missing: Vec<_> =
            m.links.iter().filter(|l| !reach.contains(l.name.as_str())).map(|l| l.name.as_str()).collect();
        return Err(validation("joints", format!("links not connected to the base: {missing:?}")));
    }
    for (i, name) in m.design_joints.iter().enumerate() {
        let field = format!("design_joints[{i}]");
        let j = m.joint(name).ok_or_else(|| validation(&field, format!("unknown joint `{name}`")))?;
        if !j.virtual_ {
            return Err(validation(&field, format!("joint `{name}` is not virtual")));
        }
        if m.design_joints.iter().filter(|n| *n == name).count() > 1 {
            return Err(validation(&field, format!("joint `{name}` listed twice")));
        }
    }
    let mut seen_in_pair = BTreeSet::new();
    for (i, [a, b]) in m.symmetry_pairs.iter().enumerate() {
        let field = format!("symmetry_pairs[{i}]");
        if a == b {
            return Err(validation(&field, "pair members must differ"));
        }
        for name in [a, b] {
            if !m.design_joints.contains(name) {
                return Err(validation(&field, format!("`{name}` is not a design joint")));
            }
            if !seen_in_pair.insert(name.clone()) {
                return Err(validation(&field, format!("design joint `{name}` in more than one pair")));
            }
        }
    }
    let mut seen_relabel = BTreeSet::new();
    for (i, [a, b]) in m.relabel_pairs.iter().enumerate() {
        let field = format!("relabel_pairs[{i}]");
        if a == b {
            return Err(validation(&field, "pair members must differ"));
        }
        let (ja, jb) = match (m.joint(a), m.joint(b)) {
            (Some(ja), Some(jb)) => (ja, jb),
            _ => return Err(validation(&field, format!("unknown joint in pair [{a}, {b}]"))),
        };
        for j in [ja, jb] {
            if j.virtual_ {
                return Err(validation(&field, "virtual joints relabel by identity, not by pairing"));
            }
            if !seen_relabel.insert(j.name.clone()) {
                return Err(validation(&field, format!("joint `{}` in more than one pair", j.name)));
            }
        }
        if ja.kind != jb.kind || ja.anchor != jb.anchor || ja.resolved_axis() != jb.resolved_axis() {
            return Err(validation(&field, "paired joints must share kind, anchor, and axis"));
        }
        let (la, lb) = (m.link(&ja.child).unwrap(), m.link(&jb.child).unwrap());
        if (la.nominal_length - lb.nominal_length).abs() > 1e-7 {
            return Err(validation(&field, "paired child links must have equal lengths"));
        }
        let (ca, cb) = (la.constants(), lb.constants());
        let close = (ca.mass - cb.mass).abs() <= 1e-7
            && (ca.com[0] - cb.com[0]).abs() <= 1e-7
            && (ca.com[1] - cb.com[1]).abs() <= 1e-7
            && (ca.inertia - cb.inertia).abs() <= 1e-7;
        if !close {
            return Err(validation(&field, "paired child links must have matching inertia"));
        }
    }
    for (i, f) in m.feet.iter().enumerate() {
        if !link_names.contains(f.link.as_str()) {
            return Err(validation(&format!("feet[{i}].link"), format!("unknown link `{}`", f.link)));
        }
    }
    if m.feet.len() > 2 {
        return Err(validation("feet", "at most two contact points are supported"));
    }
    Ok(())
}

/// Inserts a virtual prismatic extension joint and a massless virtual link
/// for each named design link, so the link's total length becomes a
/// configuration coordinate spanning the given bounds.
///
/// Links with children are extended distally: the prismatic joint rides the
/// link's distal end and the virtual link carries the former child joints.
/// Leaf links are extended proximally (the virtual link is interposed above
/// them), which keeps the massive link downstream of the new coordinate and
/// the mass matrix positive definite.
pub fn augment_model(
    model: &RobotModel,
    design: &[(String, [f64; 2])],
) -> Result<RobotModel, ModelError> {
    let mut m = model.clone();
    for (link_name, [lo, hi]) in design {
        let link = m
            .link(link_name)
            .cloned()
            .ok_or_else(|| ModelError::UnknownLink(link_name.clone()))?;
        let vjoint_name = format!("{VIRTUAL_JOINT_PREFIX}{link_name}");
        let vlink_name = format!("{link_name}{VIRTUAL_LINK_SUFFIX}");
        if m.joint(&vjoint_name).is_some() || m.link(&vlink_name).is_some() {
            return Err(ModelError::DuplicateAugmentation(link_name.clone()));
        }
        if !(*lo > 0.0 && lo <= hi) {
            return Err(validation("design bounds", format!("invalid bounds [{lo}, {hi}]")));
        }
        if link.nominal_length < *lo || link.nominal_length > *hi {
            return Err(validation(
                "design bounds",
                format!(
                    "nominal length {} of `{link_name}` outside [{lo}, {hi}]",
                    link.nominal_length
                ),
            ));
        }
        let travel = [lo - link.nominal_length, hi - link.nominal_length];
        let vlink = LinkSpec {
            name: vlink_name.clone(),
            nominal_length: 0.0,
            length_bounds: None,
            inertia: LinkInertia::Constants(InertiaConstants {
                mass: 0.0,
                com: [0.0, 0.0],
                inertia: 0.0,
            }),
        };
        let mut vjoint = JointSpec {
            name: vjoint_name.clone(),
            kind: JointKind::Prismatic,
            parent: String::new(),
            child: String::new(),
            anchor: Anchor::At([0.0, 0.0]),
            axis: Some(Axis::Dir([0.0, -1.0])),
            position_limits: travel,
            velocity_limit: 1.0,
            torque_limit: 0.0,
            actuated: false,
            virtual_: true,
        };
        let has_children = m.joints.iter().any(|j| j.parent == *link_name);
        if has_children {
            // Distal extension: link -> prismatic -> virtual link -> former children.
            for j in m.joints.iter_mut().filter(|j| j.parent == *link_name) {
                let at_distal = match &j.anchor {
                    Anchor::Named(s) => s == "distal",
                    Anchor::At(p) => p[0] == 0.0 && (p[1] + link.nominal_length).abs() <= 1e-12,
                };
                if !at_distal {
                    return Err(validation(
                        "design",
                        format!(
                            "child joint `{}` of `{link_name}` is not distally anchored; \
                             only distal children can ride a length extension",
                            j.name
                        ),
                    ));
                }
                j.parent = vlink_name.clone();
                j.anchor = Anchor::At([0.0, 0.0]);
            }
            vjoint.parent = link_name.clone();
            vjoint.child = vlink_name.clone();
            vjoint.anchor = Anchor::Named("distal".to_string());
        } else {
            // Proximal extension: former parent joint -> virtual link ->
            // prismatic -> link.
            let parent_joint = m
                .joints
                .iter_mut()
                .find(|j| j.child == *link_name)
                .ok_or_else(|| {
                    validation("design", format!("cannot augment `{link_name}`: welded to the base"))
                })?;
            parent_joint.child = vlink_name.clone();
            vjoint.parent = vlink_name.clone();
            vjoint.child = link_name.clone();
        }
        for l in m.links.iter_mut() {
            if l.name == *link_name {
                l.length_bounds = Some([*lo, *hi]);
            }
        }
        m.links.push(vlink);
        m.joints.push(vjoint);
        m.design_joints.push(vjoint_name);
    }
    auto_symmetry_pairs(&mut m);
    validate_model(&m)?;
    Ok(m)
}

/// Pairs design joints whose extended links differ only by an `_l`/`_r`
/// suffix, adding any pair not already present.
fn auto_symmetry_pairs(m: &mut RobotModel) {
    let mut by_stem: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for name in &m.design_joints {
        let link = name.trim_start_matches(VIRTUAL_JOINT_PREFIX).to_string();
        let (stem, side) = if let Some(s) = link.strip_suffix("_l") {
            (s.to_string(), "l")
        } else if let Some(s) = link.strip_suffix("_r") {
            (s.to_string(), "r")
        } else {
            continue;
        };
        by_stem.entry(stem).or_default().push((side.to_string(), name.clone()));
    }
    for (_, mut members) in by_stem {
        if members.len() != 2 {
            continue;
        }
        members.sort();
        let pair = [members[0].1.clone(), members[1].1.clone()];
        let present = m.symmetry_pairs.iter().any(|[a, b]| {
            (*a == pair[0] && *b == pair[1]) || (*a == pair[1] && *b == pair[0])
        });
        let member_used = m
            .symmetry_pairs
            .iter()
            .any(|[a, b]| [a, b].into_iter().any(|x| *x == pair[0] || *x == pair[1]));
        if !present && !member_used {
            m.symmetry_pairs.push(pair);
        }
    }
}

/// The link whose length a virtual joint extends: the non-virtual endpoint
/// of the prismatic joint.
pub fn extended_link_of(m: &RobotModel, vjoint: &JointSpec) -> Result<String, ModelError> {
    let parent_is_vlink = vjoint.parent == format!("{}{VIRTUAL_LINK_SUFFIX}", vjoint.child);
    let child_is_vlink = vjoint.child == format!("{}{VIRTUAL_LINK_SUFFIX}", vjoint.parent);
    let name = match (parent_is_vlink, child_is_vlink) {
        (true, false) => vjoint.child.clone(),
        (false, true) => vjoint.parent.clone(),
        _ => {
            return Err(validation(
                "design_joints",
                format!("cannot identify the link extended by `{}`", vjoint.name),
            ))
        }
    };
    if m.link(&name).is_none() {
        return Err(ModelError::UnknownLink(name));
    }
    Ok(name)
}

/// Bakes design values into a concrete model: each extended link's nominal
/// length absorbs its virtual joint displacement, inertial polynomials are
/// evaluated at the new length into fixed constants, and the virtual joint
/// bounds are re-centered so the new nominal corresponds to zero
/// displacement.
pub fn generate_model(model: &RobotModel, q_d: &[f64]) -> Result<RobotModel, ModelError> {
    if q_d.len() != model.design_joints.len() {
        return Err(validation(
            "design values",
            format!("expected {} values, got {}", model.design_joints.len(), q_d.len()),
        ));
    }
    let mut m = model.clone();
    for (i, name) in model.design_joints.iter().enumerate() {
        let vjoint = model.joint(name).expect("validated design joint").clone();
        let [lo, hi] = vjoint.position_limits;
        let v = q_d[i];
        if v < lo - 1e-12 || v > hi + 1e-12 {
            return Err(ModelError::DesignOutOfBounds { joint: name.clone(), value: v, lo, hi });
        }
        let target = extended_link_of(model, &vjoint)?;
        let link = m.links.iter_mut().find(|l| l.name == target).expect("validated link");
        link.nominal_length += v;
        if let LinkInertia::Poly(p) = &link.inertia {
            link.inertia = LinkInertia::Constants(p.eval(link.nominal_length));
        }
        let vj = m.joints.iter_mut().find(|j| j.name == *name).expect("validated joint");
        vj.position_limits = [lo - v, hi - v];
    }
    validate_model(&m)?;
    Ok(m)
}

/// Current total length of each design joint's extended link (m), in
/// design-coordinate order.
pub fn design_lengths(m: &RobotModel) -> Result<Vec<f64>, ModelError> {
    m.design_joints
        .iter()
        .map(|name| {
            let vjoint = m.joint(name).ok_or_else(|| ModelError::UnknownLink(name.clone()))?;
            let target = extended_link_of(m, vjoint)?;
            Ok(m.link(&target).expect("validated link").nominal_length)
        })
        .collect()
}

/// One measured inertial sample of a link prototype.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InertiaSample {
    /// Link length (m).
    pub length: f64,
    /// Mass (kg).
    pub mass: f64,
    /// Center-of-mass distance along the long axis (m).
    pub com: f64,
    /// Rotational inertia about the center of mass (kg m^2).
    pub inertia: f64,
}

/// Worst relative residual of the least-squares fit, per property.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub mass: f64,
    pub com: f64,
    pub inertia: f64,
}

/// Least-squares cubic fit of inertial properties against link length.
pub fn fit_inertia_polynomials(
    samples: &[InertiaSample],
) -> Result<(InertiaPoly, FitReport), ModelError> {
    let distinct: BTreeSet<u64> = samples.iter().map(|s| s.length.to_bits()).collect();
    if samples.len() < 4 {
        return Err(ModelError::InsufficientSamples(samples.len()));
    }
    if distinct.len() < 4 {
        return Err(ModelError::DegenerateSamples);
    }
    let n = samples.len();
    let mut vander = nalgebra::DMatrix::zeros(n, 4);
    for (r, s) in samples.iter().enumerate() {
        let l = s.length;
        vander[(r, 0)] = 1.0;
        vander[(r, 1)] = l;
        vander[(r, 2)] = l * l;
        vander[(r, 3)] = l * l * l;
    }
    let mut scale = [0.0f64; 4];
    for c in 0..4 {
        scale[c] = vander.column(c).amax().max(1e-300);
        for r in 0..n {
            vander[(r, c)] /= scale[c];
        }
    }
    let svd = vander.clone().svd(true, true);
    let fit_one = |values: Vec<f64>| -> ([f64; 4], f64) {
        let b = nalgebra::DVector::from_vec(values.clone());
        let sol = svd.solve(&b, 1e-13).expect("full-rank Vandermonde after distinct-length check");
        let mut coeffs = [0.0f64; 4];
        for c in 0..4 {
            coeffs[c] = sol[c] / scale[c];
        }
        let mut worst = 0.0f64;
        for (r, v) in values.iter().enumerate() {
            let pred = poly_eval(&coeffs, samples[r].length);
            let denom = v.abs().max(1e-12);
            worst = worst.max((pred - v).abs() / denom);
        }
        (coeffs, worst)
    };
    let (mass, r_mass) = fit_one(samples.iter().map(|s| s.mass).collect());
    let (com, r_com) = fit_one(samples.iter().map(|s| s.com).collect());
    let (inertia, r_inertia) = fit_one(samples.iter().map(|s| s.inertia).collect());
    Ok((
        InertiaPoly { mass, com, com_perp: [0.0; 4], inertia },
        FitReport { mass: r_mass, com: r_com, inertia: r_inertia },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn reference_model_text() -> Vec<u8> {
        std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/../../assets/biped5.json"))
            .expect("reference model asset")
    }

    fn one_link_model() -> RobotModel {
        parse_model(
            br#"{
                "links": [
                    {"name": "body", "nominal_length": 0.5,
                     "inertia": {"constants": {"mass": 1.0, "com": [0.0, -0.25], "inertia": 0.02}}}
                ],
                "joints": [],
                "gravity": 9.81
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn minimal_one_link_model_parses() {
        let m = one_link_model();
        assert_eq!(m.links.len(), 1);
        assert_eq!(m.joints.len(), 0);
        assert_eq!(m.num_coords(), BASE_COORDS);
    }

    #[test]
    fn reference_model_counts() {
        let m = parse_model(&reference_model_text()).unwrap();
        assert_eq!(m.num_coords(), 8, "3 base + 5 revolute");
        assert_eq!(m.num_design(), 0);
        assert_eq!(m.feet.len(), 2);
        assert_eq!(m.joints.iter().filter(|j| j.actuated).count(), 4);
    }

    #[test]
    fn negative_length_bounds_rejected() {
        let err = parse_model(
            br#"{
                "links": [
                    {"name": "body", "nominal_length": 0.2, "length_bounds": [-0.1, 0.3],
                     "inertia": {"constants": {"mass": 1.0, "com": [0.0, -0.1], "inertia": 0.01}}}
                ],
                "joints": [],
                "gravity": 9.81
            }"#,
        )
        .unwrap_err();
        match err {
            ModelError::Validation { field, .. } => assert!(field.contains("length_bounds")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = parse_model(b"{\n  \"links\": [,]\n}").unwrap_err();
        match err {
            ModelError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn augmentation_reaches_twelve_coordinates() {
        let m = parse_model(&reference_model_text()).unwrap();
        let a = augment_model(
            &m,
            &[
                ("thigh_l".into(), [0.15, 0.35]),
                ("shin_l".into(), [0.15, 0.35]),
                ("thigh_r".into(), [0.15, 0.35]),
                ("shin_r".into(), [0.15, 0.35]),
            ],
        )
        .unwrap();
        assert_eq!(a.num_coords(), 12);
        assert_eq!(a.num_design(), 4);
        assert_eq!(a.num_physical(), 8);
        assert_eq!(a.symmetry_pairs.len(), 2);
        for pair in &a.symmetry_pairs {
            let stem = |s: &str| s.trim_end_matches("_l").trim_end_matches("_r").to_string();
            assert_eq!(stem(&pair[0]), stem(&pair[1]));
        }
    }

    #[test]
    fn empty_augmentation_is_identity() {
        let m = parse_model(&reference_model_text()).unwrap();
        let a = augment_model(&m, &[]).unwrap();
        assert_eq!(a, m);
    }

    #[test]
    fn duplicate_augmentation_rejected() {
        let m = parse_model(&reference_model_text()).unwrap();
        let a = augment_model(
            &m,
            &[("thigh_l".into(), [0.15, 0.35]), ("thigh_r".into(), [0.15, 0.35])],
        )
        .unwrap();
        let err = augment_model(&a, &[("thigh_l".into(), [0.15, 0.35])]).unwrap_err();
        assert!(matches!(err, ModelError::DuplicateAugmentation(_)));
    }

    #[test]
    fn unknown_link_augmentation_rejected() {
        let m = parse_model(&reference_model_text()).unwrap();
        let err = augment_model(&m, &[("femur".into(), [0.15, 0.35])]).unwrap_err();
        assert!(matches!(err, ModelError::UnknownLink(_)));
    }

    fn rod_poly(rho: f64) -> InertiaPoly {
        InertiaPoly {
            mass: [0.0, rho, 0.0, 0.0],
            com: [0.0, 0.5, 0.0, 0.0],
            com_perp: [0.0; 4],
            inertia: [0.0, 0.0, 0.0, rho / 12.0],
        }
    }

    #[test]
    fn rod_constants_from_polynomials() {
        let c = rod_poly(2.0).eval(0.3);
        assert!((c.mass - 0.6).abs() < 1e-15);
        assert!((c.com[1] + 0.15).abs() < 1e-15, "com 0.15 m along -z");
        assert!((c.inertia - 0.0045).abs() < 1e-15);
    }

    fn rod_model(rho: f64) -> RobotModel {
        RobotModel {
            links: vec![LinkSpec {
                name: "rod".into(),
                nominal_length: 0.25,
                length_bounds: Some([0.15, 0.35]),
                inertia: LinkInertia::Poly(rod_poly(rho)),
            }],
            joints: vec![JointSpec {
                name: "pivot".into(),
                kind: JointKind::Revolute,
                parent: BASE_FRAME.into(),
                child: "rod".into(),
                anchor: Anchor::At([0.0, 0.0]),
                axis: None,
                position_limits: [-3.0, 3.0],
                velocity_limit: 30.0,
                torque_limit: 5.0,
                actuated: true,
                virtual_: false,
            }],
            feet: vec![],
            design_joints: vec![],
            symmetry_pairs: vec![],
            relabel_pairs: vec![],
            gravity: 9.81,
        }
    }

    #[test]
    fn generate_bakes_polynomials_at_new_length() {
        let m = augment_model(&rod_model(2.0), &[("rod".into(), [0.15, 0.35])]).unwrap();
        assert_eq!(m.design_joints, vec!["ext_rod".to_string()]);
        let g = generate_model(&m, &[0.05]).unwrap();
        let rod = g.link("rod").unwrap();
        assert!((rod.nominal_length - 0.3).abs() < 1e-15);
        match &rod.inertia {
            LinkInertia::Constants(c) => {
                assert!((c.mass - 0.6).abs() < 1e-12);
                assert!((c.com[1] + 0.15).abs() < 1e-12);
                assert!((c.inertia - 0.0045).abs() < 1e-12);
            }
            other => panic!("expected baked constants, got {other:?}"),
        }
        let vj = g.joint("ext_rod").unwrap();
        assert!((vj.position_limits[0] + 0.15).abs() < 1e-12);
        assert!((vj.position_limits[1] - 0.05).abs() < 1e-12);
        assert_eq!(design_lengths(&g).unwrap(), vec![0.3]);
    }

    #[test]
    fn generate_at_zero_matches_nominal_evaluation() {
        let m = augment_model(&rod_model(2.0), &[("rod".into(), [0.15, 0.35])]).unwrap();
        let g = generate_model(&m, &[0.0]).unwrap();
        let expect = rod_poly(2.0).eval(0.25);
        match &g.link("rod").unwrap().inertia {
            LinkInertia::Constants(c) => assert_eq!(*c, expect),
            other => panic!("expected constants, got {other:?}"),
        }
    }

    #[test]
    fn generate_out_of_bounds_rejected() {
        let m = augment_model(&rod_model(2.0), &[("rod".into(), [0.15, 0.35])]).unwrap();
        let err = generate_model(&m, &[0.2]).unwrap_err();
        assert!(matches!(err, ModelError::DesignOutOfBounds { .. }));
    }

    #[test]
    fn fit_recovers_exact_cubic() {
        let truth = InertiaPoly {
            mass: [0.1, 0.7, -0.3, 0.9],
            com: [0.02, 0.45, 0.1, -0.2],
            com_perp: [0.0; 4],
            inertia: [0.001, 0.01, 0.05, 0.08],
        };
        let samples: Vec<InertiaSample> = (0..10)
            .map(|k| {
                let l = 0.15 + 0.02 * k as f64;
                InertiaSample {
                    length: l,
                    mass: poly_eval(&truth.mass, l),
                    com: poly_eval(&truth.com, l),
                    inertia: poly_eval(&truth.inertia, l),
                }
            })
            .collect();
        let (fit, report) = fit_inertia_polynomials(&samples).unwrap();
        for (a, b) in fit.mass.iter().zip(truth.mass.iter()) {
            assert!((a - b).abs() < 1e-10, "mass coeff {a} vs {b}");
        }
        for (a, b) in fit.com.iter().zip(truth.com.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in fit.inertia.iter().zip(truth.inertia.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(report.mass < 1e-10 && report.com < 1e-10 && report.inertia < 1e-10);
    }

    #[test]
    fn fit_recovers_rod_closed_form() {
        let rho = 2.0;
        let samples: Vec<InertiaSample> = (0..10)
            .map(|k| {
                let l = 0.15 + 0.2 * (k as f64) / 9.0;
                InertiaSample {
                    length: l,
                    mass: rho * l,
                    com: l / 2.0,
                    inertia: rho * l * l * l / 12.0,
                }
            })
            .collect();
        let (fit, _) = fit_inertia_polynomials(&samples).unwrap();
        let expect_mass = [0.0, rho, 0.0, 0.0];
        let expect_inertia = [0.0, 0.0, 0.0, rho / 12.0];
        for (a, b) in fit.mass.iter().zip(expect_mass.iter()) {
            assert!((a - b).abs() < 1e-10, "mass coeffs {:?}", fit.mass);
        }
        for (a, b) in fit.inertia.iter().zip(expect_inertia.iter()) {
            assert!((a - b).abs() < 1e-10, "inertia coeffs {:?}", fit.inertia);
        }
    }

    #[test]
    fn fit_rejects_insufficient_or_degenerate_samples() {
        let s = InertiaSample { length: 0.2, mass: 0.4, com: 0.1, inertia: 0.001 };
        assert!(matches!(
            fit_inertia_polynomials(&[s; 3]).unwrap_err(),
            ModelError::InsufficientSamples(3)
        ));
        assert!(matches!(
            fit_inertia_polynomials(&[s; 5]).unwrap_err(),
            ModelError::DegenerateSamples
        ));
    }

    #[test]
    fn serialization_round_trips() {
        let m = parse_model(&reference_model_text()).unwrap();
        let a = augment_model(
            &m,
            &[("thigh_l".into(), [0.15, 0.35]), ("thigh_r".into(), [0.15, 0.35])],
        )
        .unwrap();
        for model in [m, a] {
            let text = serialize_model(&model);
            let back = parse_model(text.as_bytes()).unwrap();
            assert_eq!(back, model);
        }
    }

    #[test]
    fn positivity_over_length_grid() {
        let m = parse_model(&reference_model_text()).unwrap();
        for link in &m.links {
            if let LinkInertia::Poly(p) = &link.inertia {
                let [lo, hi] = link.length_bounds.unwrap();
                for k in 0..100 {
                    let l = lo + (hi - lo) * (k as f64) / 99.0;
                    let c = p.eval(l);
                    assert!(c.mass > 0.0 && c.inertia > 0.0);
                }
            }
        }
    }
}
