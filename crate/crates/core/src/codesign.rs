//! Outer loops around the gait NLP: the link-length update iteration
//! that closes the inertia-vs-length gap, and the multi-start
//! convergence study over initial leg proportions.

use crate::model::{
    design_lengths, extended_link_of, generate_model, ModelError, RobotModel,
};
use crate::solver::{SolveOptions, SolveStatus};
use crate::transcription::{
    solve_staged_from, DecisionLayout, GaitOptions, GaitSolution, StageLog,
    TranscriptionError,
};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CodesignError {
    #[error("invalid input: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transcription(#[from] TranscriptionError),
}

/// One outer iteration of the link-length loop.
#[derive(Debug, Clone, Serialize)]
pub struct OuterIterate {
    /// Cumulative design displacement from the pristine nominal (m).
    pub q_d: Vec<f64>,
    /// Infinity norm of the displacement increment this solve chose (m).
    pub delta: f64,
    /// Transport-cost objective of the inner solve.
    pub objective: f64,
    /// Status of the final inner solve stage.
    pub status: SolveStatus,
    pub max_violation: f64,
}

/// Full record of one link-length iteration run.
#[derive(Debug, Clone, Serialize)]
pub struct CodesignRun {
    /// Starting displacement from nominal (m), one per design joint.
    pub initial_q_d: Vec<f64>,
    pub iterates: Vec<OuterIterate>,
    /// Displacement at termination (m).
    pub final_q_d: Vec<f64>,
    /// Link lengths at termination (m), in design-joint order.
    pub final_lengths: Vec<f64>,
    pub outer_iterations: usize,
    /// True when the increment dropped below the threshold with a
    /// feasible inner solve before the iteration cap.
    pub converged: bool,
    /// Gait from the last inner solve (present even for failed runs).
    pub gait: Option<GaitSolution>,
}

fn feasible(stage: &StageLog) -> bool {
    stage.max_violation <= 1e-5 && stage.status != SolveStatus::Infeasible
}

/// Shifts a solved decision vector onto a regenerated model whose nominal
/// lengths absorbed the solved displacement: design positions and their
/// targets re-center to zero, everything else carries over.
fn recenter_warm(
    x: &[f64],
    layout: &DecisionLayout,
    design_coords: &[usize],
    beta: &[f64],
) -> Vec<f64> {
    let mut out = x.to_vec();
    for k in 0..layout.nodes {
        for (slot, &coord) in design_coords.iter().enumerate() {
            out[layout.q(k).start + coord] -= beta[slot];
        }
    }
    for (slot, i) in layout.beta().enumerate() {
        out[i] -= beta[slot];
    }
    out
}

/// Iterates gait solves with the link inertias refreshed at the current
/// lengths after each solve, until the optimizer stops moving the design
/// (increment below `delta`) or `max_outer` is reached.
///
/// `model` must carry length-dependent inertia fits for the update to
/// change anything; with constant inertias the second solve is already a
/// fixed point. Each inner solve after the first warm-starts from the
/// previous solution re-centered onto the regenerated model.
pub fn inertia_loop(
    model: &RobotModel,
    options: &GaitOptions,
    solver_options: &SolveOptions,
    q_d_initial: &[f64],
    delta: f64,
    max_outer: usize,
) -> Result<CodesignRun, CodesignError> {
    let d = model.num_design();
    if q_d_initial.len() != d {
        return Err(CodesignError::Config(format!(
            "initial displacement has {} entries, model has {d} design joints",
            q_d_initial.len()
        )));
    }
    for (i, name) in model.design_joints.iter().enumerate() {
        let joint = model
            .joint(name)
            .ok_or_else(|| CodesignError::Config(format!("unknown design joint `{name}`")))?;
        let [lo, hi] = joint.position_limits;
        if q_d_initial[i] < lo || q_d_initial[i] > hi {
            return Err(CodesignError::Config(format!(
                "initial displacement {} for `{name}` outside [{lo}, {hi}]",
                q_d_initial[i]
            )));
        }
    }
    if !(delta > 0.0) || max_outer == 0 {
        return Err(CodesignError::Config("need delta > 0 and max_outer >= 1".into()));
    }

    let design_coords: Vec<usize> = model
        .design_joints
        .iter()
        .map(|n| model.coord_of(n).expect("validated design joint"))
        .collect();
    let mut q_total = q_d_initial.to_vec();
    let mut warm: Option<Vec<f64>> = None;
    let mut iterates = Vec::new();
    let mut last_gait: Option<GaitSolution> = None;
    let mut converged = false;

    for _ in 0..max_outer {
        let current = generate_model(model, &q_total)?;
        let run = solve_staged_from(&current, options, solver_options, warm.as_deref())?;
        let last_stage = run.stages.last().expect("at least one stage");
        let ok = feasible(last_stage);
        let beta = run.solution.beta.clone();
        let step: f64 = beta.iter().fold(0.0, |a, &b| a.max(b.abs()));
        for (t, b) in q_total.iter_mut().zip(beta.iter()) {
            *t += b;
        }
        iterates.push(OuterIterate {
            q_d: q_total.clone(),
            delta: step,
            objective: run.solution.objective,
            status: last_stage.status,
            max_violation: run.solution.max_violation,
        });
        let layout = DecisionLayout {
            nodes: options.nodes,
            nq: current.num_coords(),
            m: current.joints.iter().filter(|j| j.actuated).count(),
            d,
            degree: options.degree,
        };
        warm = Some(recenter_warm(&run.x, &layout, &design_coords, &beta));
        last_gait = Some(run.solution);
        if !ok {
            break;
        }
        if step <= delta {
            converged = true;
            break;
        }
    }

    let final_model = generate_model(model, &q_total)?;
    let final_lengths = design_lengths(&final_model)?;
    Ok(CodesignRun {
        initial_q_d: q_d_initial.to_vec(),
        outer_iterations: iterates.len(),
        iterates,
        final_q_d: q_total,
        final_lengths,
        converged,
        gait: last_gait,
    })
}

/// Mean and population standard deviation of the converged designs and
/// gait metrics across accepted runs.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LengthStats {
    pub count: usize,
    pub mean_thigh: f64,
    pub std_thigh: f64,
    pub mean_shin: f64,
    pub std_shin: f64,
    pub mean_step_length: f64,
    pub std_step_length: f64,
    pub mean_step_duration: f64,
    pub std_step_duration: f64,
    pub mean_speed: f64,
    pub std_speed: f64,
}

/// Multi-start study over a grid of initial leg proportions.
#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    /// Initial (thigh, shin) lengths per run (m).
    pub grid: Vec<(f64, f64)>,
    pub runs: Vec<CodesignRun>,
    /// Statistics over converged runs, outliers excluded.
    pub headline: Option<LengthStats>,
    /// Statistics over all converged runs, nothing excluded.
    pub all_converged: Option<LengthStats>,
    /// Run indices whose objective exceeded the converged median by more
    /// than 25% (treated as worse local minima, kept out of the headline).
    pub excluded: Vec<usize>,
}

/// Classification of one design joint as thigh-like or shin-like via the
/// link it extends.
fn link_class(model: &RobotModel, joint_name: &str) -> Result<&'static str, CodesignError> {
    let joint = model
        .joint(joint_name)
        .ok_or_else(|| CodesignError::Config(format!("unknown design joint `{joint_name}`")))?;
    let link = extended_link_of(model, joint)?;
    if link.contains("thigh") {
        Ok("thigh")
    } else if link.contains("shin") {
        Ok("shin")
    } else {
        Err(CodesignError::Config(format!(
            "design link `{link}` is neither thigh nor shin"
        )))
    }
}

/// Displacements that set every thigh-class design joint to `thigh` and
/// every shin-class one to `shin` (absolute lengths in meters).
pub fn grid_displacements(
    model: &RobotModel,
    thigh: f64,
    shin: f64,
) -> Result<Vec<f64>, CodesignError> {
    let lengths = design_lengths(model)?;
    model
        .design_joints
        .iter()
        .zip(lengths.iter())
        .map(|(name, &current)| {
            let target = match link_class(model, name)? {
                "thigh" => thigh,
                _ => shin,
            };
            Ok(target - current)
        })
        .collect()
}

/// Converged (thigh, shin) lengths of a run, averaging left/right.
fn run_lengths(model: &RobotModel, run: &CodesignRun) -> Result<(f64, f64), CodesignError> {
    let mut thigh = (0.0, 0usize);
    let mut shin = (0.0, 0usize);
    for (name, &len) in model.design_joints.iter().zip(run.final_lengths.iter()) {
        match link_class(model, name)? {
            "thigh" => thigh = (thigh.0 + len, thigh.1 + 1),
            _ => shin = (shin.0 + len, shin.1 + 1),
        }
    }
    if thigh.1 == 0 || shin.1 == 0 {
        return Err(CodesignError::Config("model lacks thigh or shin design joints".into()));
    }
    Ok((thigh.0 / thigh.1 as f64, shin.0 / shin.1 as f64))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn stats_over(
    model: &RobotModel,
    runs: &[&CodesignRun],
) -> Result<Option<LengthStats>, CodesignError> {
    if runs.is_empty() {
        return Ok(None);
    }
    let mut thigh = Vec::new();
    let mut shin = Vec::new();
    let mut step = Vec::new();
    let mut dur = Vec::new();
    let mut speed = Vec::new();
    for run in runs {
        let (t, s) = run_lengths(model, run)?;
        thigh.push(t);
        shin.push(s);
        let gait = run.gait.as_ref().expect("converged run has a gait");
        step.push(gait.metrics.step_length);
        dur.push(gait.metrics.step_duration);
        speed.push(gait.metrics.mean_speed);
    }
    let (mean_thigh, std_thigh) = mean_std(&thigh);
    let (mean_shin, std_shin) = mean_std(&shin);
    let (mean_step_length, std_step_length) = mean_std(&step);
    let (mean_step_duration, std_step_duration) = mean_std(&dur);
    let (mean_speed, std_speed) = mean_std(&speed);
    Ok(Some(LengthStats {
        count: runs.len(),
        mean_thigh,
        std_thigh,
        mean_shin,
        std_shin,
        mean_step_length,
        std_step_length,
        mean_step_duration,
        std_step_duration,
        mean_speed,
        std_speed,
    }))
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Aggregates finished runs into a study report: statistics over
/// converged runs, with runs whose objective exceeds the converged
/// median by more than 25% excluded from the headline numbers.
pub fn aggregate(
    model: &RobotModel,
    grid: Vec<(f64, f64)>,
    runs: Vec<CodesignRun>,
) -> Result<StudyReport, CodesignError> {
    let converged: Vec<usize> =
        (0..runs.len()).filter(|&i| runs[i].converged && runs[i].gait.is_some()).collect();
    let all_refs: Vec<&CodesignRun> = converged.iter().map(|&i| &runs[i]).collect();
    let all_converged = stats_over(model, &all_refs)?;
    let mut excluded = Vec::new();
    let headline = if converged.is_empty() {
        None
    } else {
        let mut objectives: Vec<f64> = converged
            .iter()
            .map(|&i| runs[i].gait.as_ref().expect("converged").objective)
            .collect();
        objectives.sort_by(|a, b| a.total_cmp(b));
        let med = median(&objectives);
        let keep: Vec<&CodesignRun> = converged
            .iter()
            .filter(|&&i| {
                let obj = runs[i].gait.as_ref().expect("converged").objective;
                let keep = obj <= 1.25 * med;
                if !keep {
                    excluded.push(i);
                }
                keep
            })
            .map(|&i| &runs[i])
            .collect();
        stats_over(model, &keep)?
    };
    Ok(StudyReport { grid, runs, headline, all_converged, excluded })
}

/// Runs the link-length iteration from every grid point in parallel and
/// aggregates the study statistics. A run that fails stays in the report
/// flagged non-converged; hard evaluation errors also mark the run failed.
pub fn multi_start(
    model: &RobotModel,
    options: &GaitOptions,
    solver_options: &SolveOptions,
    grid: &[(f64, f64)],
    delta: f64,
    max_outer: usize,
) -> Result<StudyReport, CodesignError> {
    if grid.is_empty() {
        return Err(CodesignError::Config("empty study grid".into()));
    }
    // Validate every start before spending solve time on any.
    let mut starts = Vec::with_capacity(grid.len());
    for &(thigh, shin) in grid {
        starts.push(grid_displacements(model, thigh, shin)?);
    }
    for (q0, &(thigh, shin)) in starts.iter().zip(grid.iter()) {
        for (i, name) in model.design_joints.iter().enumerate() {
            let [lo, hi] = model.joint(name).expect("validated").position_limits;
            if q0[i] < lo - 1e-12 || q0[i] > hi + 1e-12 {
                return Err(CodesignError::Config(format!(
                    "grid point ({thigh}, {shin}) puts `{name}` outside its length bounds"
                )));
            }
        }
    }
    let runs: Vec<CodesignRun> = starts
        .par_iter()
        .map(|q0| {
            inertia_loop(model, options, solver_options, q0, delta, max_outer).unwrap_or_else(
                |_| CodesignRun {
                    initial_q_d: q0.clone(),
                    iterates: Vec::new(),
                    final_q_d: q0.clone(),
                    final_lengths: Vec::new(),
                    outer_iterations: 0,
                    converged: false,
                    gait: None,
                },
            )
        })
        .collect();
    aggregate(model, grid.to_vec(), runs)
}

impl StudyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("study serialization")
    }

    /// Convergence segments for plotting: one line per run, initial to
    /// converged lengths.
    pub fn segments_csv(&self, model: &RobotModel) -> Result<String, CodesignError> {
        let mut out = String::from("thigh0,shin0,thigh1,shin1,converged\n");
        for (run, &(t0, s0)) in self.runs.iter().zip(self.grid.iter()) {
            let (t1, s1) = if run.final_lengths.is_empty() {
                (t0, s0)
            } else {
                run_lengths(model, run)?
            };
            out.push_str(&format!("{t0:.17e},{s0:.17e},{t1:.17e},{s1:.17e},{}\n", run.converged));
        }
        Ok(out)
    }

    /// One row per run with start, outcome, and gait metrics.
    pub fn runs_csv(&self, model: &RobotModel) -> Result<String, CodesignError> {
        let mut out = String::from(
            "thigh0,shin0,converged,excluded,outer_iterations,thigh,shin,\
             step_length,step_duration,mean_speed,objective\n",
        );
        for (i, (run, &(t0, s0))) in self.runs.iter().zip(self.grid.iter()).enumerate() {
            let (t1, s1) = if run.final_lengths.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                run_lengths(model, run)?
            };
            let (sl, sd, sp, obj) = match &run.gait {
                Some(g) => (
                    g.metrics.step_length,
                    g.metrics.step_duration,
                    g.metrics.mean_speed,
                    g.objective,
                ),
                None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
            };
            out.push_str(&format!(
                "{t0:.17e},{s0:.17e},{},{},{},{t1:.17e},{s1:.17e},{sl:.17e},{sd:.17e},{sp:.17e},{obj:.17e}\n",
                run.converged,
                self.excluded.contains(&i),
                run.outer_iterations,
            ));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::outputs::PhasingConfig;
    use crate::transcription::{build_nlp, initial_guess, GaitMetrics, NodePoint};

    fn fake_run(
        model: &RobotModel,
        q_d: &[f64],
        objective: f64,
        converged: bool,
    ) -> CodesignRun {
        let final_model = generate_model(model, q_d).unwrap();
        let lengths = design_lengths(&final_model).unwrap();
        let gait = GaitSolution {
            alpha: vec![vec![0.0; 6]; 4],
            beta: vec![0.0; q_d.len()],
            step_duration: 0.75,
            phasing: PhasingConfig::Time { period: 0.75 },
            nodes: vec![NodePoint {
                q: vec![0.0; 12],
                qd: vec![0.0; 12],
                qdd: vec![0.0; 12],
                u: vec![0.0; 4],
                lam: [0.0, 10.0],
            }],
            objective,
            max_violation: 0.0,
            converged,
            metrics: GaitMetrics {
                step_length: 0.25,
                step_duration: 0.75,
                mean_speed: 1.0 / 3.0,
                cost_of_transport: objective,
            },
            model_hash: String::new(),
        };
        CodesignRun {
            initial_q_d: q_d.to_vec(),
            iterates: Vec::new(),
            final_q_d: q_d.to_vec(),
            final_lengths: lengths,
            outer_iterations: 1,
            converged,
            gait: Some(gait),
        }
    }

    #[test]
    fn out_of_bounds_start_is_rejected_before_solving() {
        let model = fixtures::augmented_reference();
        let opts = GaitOptions::default();
        let sopts = SolveOptions::default();
        let err = inertia_loop(&model, &opts, &sopts, &[1.0, 0.0, 0.0, 0.0], 1e-4, 20);
        assert!(matches!(err, Err(CodesignError::Config(_))));
        let err = inertia_loop(&model, &opts, &sopts, &[0.0; 3], 1e-4, 20);
        assert!(matches!(err, Err(CodesignError::Config(_))));
        let err = inertia_loop(&model, &opts, &sopts, &[0.0; 4], 0.0, 20);
        assert!(matches!(err, Err(CodesignError::Config(_))));
    }

    #[test]
    fn grid_displacements_map_lengths_onto_design_joints() {
        let model = fixtures::augmented_reference();
        let q0 = grid_displacements(&model, 0.30, 0.20).unwrap();
        // Design joints are thigh_l, shin_l, thigh_r, shin_r with nominal
        // length 0.25 each.
        let expect = [0.05, -0.05, 0.05, -0.05];
        for (a, b) in q0.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = design_lengths(&generate_model(&model, &q0).unwrap()).unwrap();
        assert!((back[0] - 0.30).abs() < 1e-12);
        assert!((back[1] - 0.20).abs() < 1e-12);
    }

    #[test]
    fn recentering_preserves_everything_but_design_entries() {
        let model = fixtures::augmented_reference();
        let nlp = build_nlp(&model, &GaitOptions::default(), true, None).unwrap();
        let x = initial_guess(&nlp);
        let mech = nlp.mech();
        let beta = [0.01, -0.02, 0.01, -0.02];
        let warm = recenter_warm(&x, &nlp.layout, &mech.design_coords, &beta);
        assert_eq!(warm.len(), x.len());
        let l = &nlp.layout;
        let mut changed = 0;
        for i in 0..x.len() {
            if warm[i] != x[i] {
                changed += 1;
            }
        }
        assert_eq!(changed, l.nodes * beta.len() + beta.len());
        for k in 0..l.nodes {
            for (slot, &coord) in mech.design_coords.iter().enumerate() {
                let i = l.q(k).start + coord;
                assert_eq!(warm[i], x[i] - beta[slot]);
            }
        }
        for (slot, i) in l.beta().enumerate() {
            assert_eq!(warm[i], x[i] - beta[slot]);
        }
    }

    #[test]
    fn aggregation_matches_hand_computed_statistics() {
        let model = fixtures::augmented_reference();
        let grid = vec![(0.25, 0.25), (0.30, 0.20), (0.20, 0.30), (0.25, 0.20)];
        let runs = vec![
            fake_run(&model, &[0.01, 0.01, 0.01, 0.01], 0.10, true),
            fake_run(&model, &[0.03, 0.01, 0.03, 0.01], 0.12, true),
            // Worse local minimum: objective 60% above the median 0.11.
            fake_run(&model, &[-0.04, 0.02, -0.04, 0.02], 0.40, true),
            // Failed run: never counted.
            fake_run(&model, &[0.0, 0.0, 0.0, 0.0], 0.05, false),
        ];
        let report = aggregate(&model, grid, runs).unwrap();
        assert_eq!(report.excluded, vec![2]);
        let all = report.all_converged.as_ref().unwrap();
        assert_eq!(all.count, 3);
        let head = report.headline.as_ref().unwrap();
        assert_eq!(head.count, 2);
        // Thigh lengths of the kept runs: 0.26 and 0.28.
        assert!((head.mean_thigh - 0.27).abs() < 1e-12);
        assert!((head.std_thigh - 0.01).abs() < 1e-12);
        // Shin lengths are both 0.26: zero dispersion.
        assert!((head.mean_shin - 0.26).abs() < 1e-12);
        assert!(head.std_shin.abs() < 1e-12);
        assert!((head.mean_step_duration - 0.75).abs() < 1e-12);
        assert_eq!(report.runs.len(), 4);
    }

    #[test]
    fn singleton_study_has_zero_dispersion() {
        let model = fixtures::augmented_reference();
        let grid = vec![(0.26, 0.24)];
        let runs = vec![fake_run(&model, &[0.01, -0.01, 0.01, -0.01], 0.2, true)];
        let report = aggregate(&model, grid, runs).unwrap();
        let head = report.headline.as_ref().unwrap();
        assert_eq!(head.count, 1);
        assert_eq!(head.std_thigh, 0.0);
        assert_eq!(head.std_shin, 0.0);
        assert_eq!(head.std_speed, 0.0);
        assert!(report.excluded.is_empty());
        assert_eq!(
            report.headline.as_ref().unwrap(),
            report.all_converged.as_ref().unwrap()
        );
    }

    #[test]
    fn reports_without_converged_runs_have_no_statistics() {
        let model = fixtures::augmented_reference();
        let grid = vec![(0.25, 0.25)];
        let runs = vec![fake_run(&model, &[0.0; 4], 0.1, false)];
        let report = aggregate(&model, grid, runs).unwrap();
        assert!(report.headline.is_none());
        assert!(report.all_converged.is_none());
        assert!(report.excluded.is_empty());
    }

    #[test]
    fn csv_emissions_are_deterministic_and_well_formed() {
        let model = fixtures::augmented_reference();
        let grid = vec![(0.25, 0.25), (0.30, 0.20)];
        let runs = vec![
            fake_run(&model, &[0.01; 4], 0.1, true),
            fake_run(&model, &[0.02; 4], 0.11, true),
        ];
        let report = aggregate(&model, grid.clone(), runs.clone()).unwrap();
        let report2 = aggregate(&model, grid, runs).unwrap();
        assert_eq!(report.to_json(), report2.to_json());
        let seg = report.segments_csv(&model).unwrap();
        assert_eq!(seg.lines().count(), 3);
        assert!(seg.starts_with("thigh0,shin0,thigh1,shin1,converged\n"));
        for line in seg.lines().skip(1) {
            assert_eq!(line.split(',').count(), 5);
        }
        let rows = report.runs_csv(&model).unwrap();
        assert_eq!(rows.lines().count(), 3);
        for line in rows.lines().skip(1) {
            assert_eq!(line.split(',').count(), 11);
        }
    }

    #[test]
    fn empty_grid_is_rejected() {
        let model = fixtures::augmented_reference();
        let err = multi_start(
            &model,
            &GaitOptions::default(),
            &SolveOptions::default(),
            &[],
            1e-4,
            20,
        );
        assert!(matches!(err, Err(CodesignError::Config(_))));
        let err = multi_start(
            &model,
            &GaitOptions::default(),
            &SolveOptions::default(),
            &[(0.50, 0.25)],
            1e-4,
            20,
        );
        assert!(matches!(err, Err(CodesignError::Config(_))));
    }
}
