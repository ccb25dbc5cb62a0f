use merge_core::sim::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = match args.get(1).map(|s| s.as_str()) {
        Some("rmpc") => PlannerKind::Rmpc,
        Some("dmpc") => PlannerKind::Dmpc,
        _ => PlannerKind::Proposed,
    };
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = ScenarioConfig::standard();
    let t0 = std::time::Instant::now();
    let (log, metrics) = run_episode(&cfg, kind, seed).unwrap();
    let wall = t0.elapsed().as_secs_f64();
    println!("kind={:?} seed={seed} steps={} wall={:.1}s", kind, log.records.len(), wall);
    println!("outcome={:?} success={} class={:?}", log.outcome, metrics.success, metrics.merge_class);
    println!("min_d_sv0={:?} min_d_sv1={:?} max|a|={:.3}", metrics.min_d_sv0, metrics.min_d_sv1, metrics.max_abs_accel);
    let mean_plan: f64 = log.records.iter().map(|r| r.planning_time_s).sum::<f64>() / log.records.len() as f64;
    println!("mean planning time: {:.1} ms", 1e3 * mean_plan);
    for (i, r) in log.records.iter().enumerate() {
        if i % 8 == 0 || i + 3 > log.records.len() {
            println!("t={:5.2} ev=({:7.2},{:5.2}) v={:5.2} a={:5.2} man={} vref={:5.2} st={} d0={:6.2} d1={:6.2} sv0=({:7.2},{:5.2}) b0=[{:5.2},{:5.2}]",
                r.time, r.ev.p_x, r.ev.p_y, r.ev.v, r.ev.a, r.maneuver.as_str(), r.v_ref,
                r.solver_status.as_str(), r.d_sv[0], r.d_sv[1],
                r.sv[0].state.p_x, r.sv[0].state.v_x, r.sv[0].bounds.a_min, r.sv[0].bounds.a_max);
        }
    }
}
