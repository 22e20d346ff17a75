fn main() {
    let t0 = std::time::Instant::now();
    let report = crossalign_core::gradcheck::run_gradcheck(2024).unwrap();
    for c in &report.checks {
        println!("{}: max_rel_err={:.3e} worst={} retries={} pass={}", c.component, c.max_rel_err, c.worst_param, c.kink_retries, c.pass);
    }
    for e in &report.exemptions {
        println!("exemption {}: ad={} fd={}", e.name, e.implemented_grad, e.finite_difference);
    }
    println!("pass={} elapsed={:?}", report.pass, t0.elapsed());
}
