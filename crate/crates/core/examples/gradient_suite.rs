//! Finite-difference check of every differentiable kernel and of a micro
//! model end to end, over several seeds.
//!
//! ```text
//! cargo run --release --example gradient_suite [seeds]
//! ```

use std::time::Instant;

use vitlm::checks::{gradient_suite, worst, TOLERANCE};

fn main() -> vitlm::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let start = Instant::now();
    for seed in 0..seeds {
        let entries = gradient_suite(seed)?;
        if seed == 0 {
            for e in &entries {
                println!("{:<24} {:>6} elements  max rel error {:.2e}", e.name, e.result.elements, e.result.max_rel_error);
            }
            println!();
        }
        let w = worst(&entries).expect("nonempty suite");
        let verdict = if w.result.passes(TOLERANCE) { "ok" } else { "FAIL" };
        println!("seed {seed}: worst {:<22} {:.2e}  {verdict}", w.name, w.result.max_rel_error);
    }
    println!("{:.1?} total", start.elapsed());
    Ok(())
}
