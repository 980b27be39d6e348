//! Shared test fixtures: the five-link reference biped in plain and
//! length-augmented form, plus random admissible states.

use crate::dynamics::{AugmentedState, Mech, GUARD_TOL};
use crate::model::{augment_model, parse_model, RobotModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn reference_model() -> RobotModel {
    let text = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/../../assets/biped5.json"))
        .expect("reference model asset");
    parse_model(&text).unwrap()
}

pub(crate) fn augmented_reference() -> RobotModel {
    augment_model(
        &reference_model(),
        &[
            ("thigh_l".into(), [0.15, 0.35]),
            ("shin_l".into(), [0.15, 0.35]),
            ("thigh_r".into(), [0.15, 0.35]),
            ("shin_r".into(), [0.15, 0.35]),
        ],
    )
    .unwrap()
}

pub(crate) fn aug_mech() -> Mech {
    Mech::new(&augmented_reference()).unwrap()
}

/// Random configuration within (clamped) position limits.
pub(crate) fn random_config(mech: &Mech, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..mech.nv)
        .map(|i| {
            let lo = mech.pos_lo[i].max(-1.0);
            let hi = mech.pos_hi[i].min(1.0);
            rng.gen_range(lo..hi)
        })
        .collect()
}

/// Random state on the touchdown surface: swing foot at zero height and
/// descending, mirrored design values, stationary design coordinates.
pub(crate) fn random_guard_state(mech: &Mech, rng: &mut ChaCha8Rng) -> AugmentedState {
    loop {
        let mut q = random_config(mech, rng);
        for pair in &mech.model().symmetry_pairs {
            let names = &mech.coord_names;
            let a = names.iter().position(|n| n == &pair[0]).unwrap();
            let b = names.iter().position(|n| n == &pair[1]).unwrap();
            q[b] = q[a];
        }
        let z = mech.swing_foot_height(&q);
        q[1] -= z;
        if mech.swing_foot_height(&q).abs() > GUARD_TOL {
            continue;
        }
        let mut qd: Vec<f64> = (0..mech.nv).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for &c in &mech.design_coords {
            qd[c] = 0.0;
        }
        let zd = mech.swing_foot_velocity(&q, &qd);
        if zd.abs() < 1e-6 {
            continue;
        }
        if zd > 0.0 {
            for v in qd.iter_mut() {
                *v = -*v;
            }
        }
        return AugmentedState::new(q, qd);
    }
}
