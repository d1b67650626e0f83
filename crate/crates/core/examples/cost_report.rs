//! Parameter and FLOP accounting for the four named variants, with the
//! closed-form encoder audit.
//!
//!     cargo run --release --example cost_report [ti|s|m|b]

use contnet::analysis::{
    deviation, formula_audit, formula_audit_config, golden, summarize, Include,
};
use contnet::model::{build_network, ModelConfig, Variant};

fn main() -> contnet::Result<()> {
    let only: Option<Variant> = std::env::args().nth(1).map(|s| s.parse()).transpose()?;
    for v in [Variant::Ti, Variant::S, Variant::M, Variant::B] {
        if only.is_some_and(|o| o != v) {
            continue;
        }
        let cfg = ModelConfig::preset(v)?;
        let m = build_network::<f32>(&cfg, 0)?;
        let report = summarize(&m, [1, 3, 224, 224], Include::ALL)?;
        if only.is_some() {
            print!("{}", report.to_text());
        }
        let params = report.total_params() as f64 / 1e6;
        let flops = report.total_flops();
        let (gflops, mparams) = golden(v).expect("named variants have published costs");
        println!(
            "{v:>2}: {params:6.2}M params ({:+5.1}% vs {mparams}M)  {:.2}G flops ({:+5.1}% vs {gflops}G), {:.2}G counting attention",
            100.0 * deviation(params, mparams),
            flops.layers as f64 / 1e9,
            100.0 * deviation(flops.layers as f64 / 1e9, gflops),
            flops.total() as f64 / 1e9
        );

        // the closed form counts projections, FFN and positions only
        let strict = build_network::<f32>(&formula_audit_config(&cfg), 0)?;
        let audit = formula_audit(&strict)?;
        let exact = audit.iter().filter(|r| r.measured == r.formula).count();
        println!(
            "    encoder formula audit: {exact}/{} layers exact",
            audit.len()
        );
    }
    Ok(())
}
