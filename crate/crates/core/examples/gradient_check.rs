//! Autodiff against 64-bit central differences: every primitive, then a
//! whole small network in both batch-norm modes.
//!
//!     cargo run --release --example gradient_check

use contnet::model::ModelConfig;
use contnet::verify::{gradient_suite, GRAD_TOLERANCE};

fn main() -> contnet::Result<()> {
    let cfg = ModelConfig::micro(3);
    let results = gradient_suite(&cfg, 0)?;
    for r in &results {
        println!(
            "{:<40} {:9.2e}  {}",
            r.name,
            r.max_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let worst = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    println!("worst {worst:.2e} (tolerance {GRAD_TOLERANCE:e})");
    Ok(())
}
