use landau_core::verify::*;
use std::time::Instant;

fn main() {
    let cfg = VerifyConfig::default();
    let t0 = Instant::now();
    let reports = suite_cent(&cfg, 100_000, 1_000_000);
    for r in &reports {
        println!(
            "{}: violations={} max_violation={:.3e} c_fit={:.4} ({} samples)",
            r.name,
            r.violations,
            r.max_violation,
            r.constants.get("c_fit").unwrap(),
            r.samples
        );
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}
