//! Every row of the positional-encoding, patch-size and grouping studies as
//! a cost table, plus the learning-rate pairs run briefly on the tiny
//! network.
//!
//!     cargo run --release --example ablation_study

use contnet::analysis::{summarize, Include};
use contnet::model::{
    ablation_choices, build_network, make_ablation_config, AblationAxis, ModelConfig, Variant,
};
use contnet::train::{evaluate, synth_dataset, train, SynthSpec, TrainConfig, LR_PAIRS};

fn main() -> contnet::Result<()> {
    let base = ModelConfig::preset(Variant::M)?;
    for axis in [
        AblationAxis::Pe,
        AblationAxis::PatchSize,
        AblationAxis::Groups,
    ] {
        println!("{axis:?}");
        for choice in ablation_choices(axis) {
            let cfg = make_ablation_config(&base, axis, choice)?;
            let m = build_network::<f32>(&cfg, 0)?;
            let r = summarize(&m, [1, 3, 224, 224], Include::ALL)?;
            let f = r.total_flops();
            println!(
                "  {choice:<12} {:7.2}M params  {:5.2}G flops  {:5.2}G attention",
                r.total_params() as f64 / 1e6,
                f.layers as f64 / 1e9,
                f.attention as f64 / 1e9
            );
        }
    }

    println!("learning rates (tiny network, 100 SGD steps)");
    let data = synth_dataset(&SynthSpec::new(2, 96, [32, 32], 4))?;
    for pair in LR_PAIRS {
        let mut recipe = TrainConfig::sgd().with_rates(pair);
        recipe.batch_size = 16;
        recipe.steps = Some(100);
        let mut m = build_network::<f32>(&ModelConfig::tiny(2), 0)?;
        let h = train(&mut m, &data, &recipe)?;
        println!(
            "  conv {:<4} encoder {:<6} final loss {:.3}  accuracy {:.3}",
            pair.0,
            pair.1,
            h.losses.last().unwrap(),
            evaluate(&m, &data, 64)?
        );
    }
    Ok(())
}
