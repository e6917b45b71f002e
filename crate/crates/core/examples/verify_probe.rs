fn main() {
    let t0 = std::time::Instant::now();
    let results = mscale_core::verify::run_verify("all").unwrap();
    let mut failed = 0;
    for r in &results {
        println!("{} {}  measured={:.3e} tol={:.3e}", if r.passed {"PASS"} else {"FAIL"}, r.name, r.measured, r.tolerance);
        if !r.passed { failed += 1; }
    }
    println!("{} checks, {} failed, {:.1}s", results.len(), failed, t0.elapsed().as_secs_f64());
}
