use hzd_codesign::model::{augment_model, parse_model};
use hzd_codesign::solver::{self, SolveOptions};
use hzd_codesign::transcription::{build_nlp, initial_guess, GaitOptions};

fn main() {
    let text = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/../../assets/biped5.json"))
        .expect("model");
    let model = parse_model(&text).unwrap();
    let model = augment_model(
        &model,
        &[
            ("thigh_l".into(), [0.15, 0.35]),
            ("shin_l".into(), [0.15, 0.35]),
            ("thigh_r".into(), [0.15, 0.35]),
            ("shin_r".into(), [0.15, 0.35]),
        ],
    )
    .unwrap();
    let opts = GaitOptions::default();
    let sopts = SolveOptions { max_iter: 500, ..Default::default() };
    let t0 = std::time::Instant::now();

    let frozen = vec![0.0; 4];
    let nlp1 = build_nlp(&model, &opts, false, Some(frozen.clone())).unwrap();
    let x0 = initial_guess(&nlp1);
    let r1 = solver::solve(&nlp1, &x0, &sopts).unwrap();
    println!(
        "stage1 {:?} iters {} viol {:.3e} kkt {:.3e}",
        r1.status, r1.iterations, r1.max_violation, r1.kkt_residual
    );

    let nlp2 = build_nlp(&model, &opts, true, Some(frozen)).unwrap();
    let r2 = solver::solve(&nlp2, &r1.x, &sopts).unwrap();
    println!(
        "stage2 {:?} iters {} obj {:.6e} viol {:.3e} kkt {:.3e}",
        r2.status, r2.iterations, r2.objective, r2.max_violation, r2.kkt_residual
    );
    let tail = r2.log.len().saturating_sub(25);
    for (i, f, v, p, rho) in &r2.log[tail..] {
        println!("  it {i:>3} f {f:.9e} viol {v:.3e} step {p:.3e} rho {rho:.3e}");
    }
    let sol = hzd_codesign::transcription::extract_solution(&nlp2, &r2.x, &r2);
    println!(
        "metrics: step_length {:.4} duration {:.4} speed {:.4} cot {:.4}",
        sol.metrics.step_length,
        sol.metrics.step_duration,
        sol.metrics.mean_speed,
        sol.metrics.cost_of_transport
    );
    let mut u_max = 0.0f64;
    let mut p_max = 0.0f64;
    for node in &sol.nodes {
        for (i, &ui) in node.u.iter().enumerate() {
            u_max = u_max.max(ui.abs());
            p_max = p_max.max((ui * node.qd[4 + i]).abs());
        }
    }
    println!("u_max {:.3} power_max {:.3}", u_max, p_max);
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}
