//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance -- 1 2 9` runs a subset.

mod criteria;
mod fixtures;
mod trends;

use std::time::Instant;

use criteria::criteria;

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria() {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (verdict, detail) = match outcome {
            Ok((true, d)) => ("PASS", d),
            Ok((false, d)) => ("FAIL", d),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("{verdict} criterion {id} ({name}, {secs:.1}s): {detail}");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
    }
}
