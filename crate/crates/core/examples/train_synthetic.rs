//! Desk-scale training of the tiny network on a seeded two-class set with
//! both recipes, followed by a checkpoint round trip.
//!
//!     cargo run --release --example train_synthetic

use contnet::model::{build_network, ModelConfig};
use contnet::train::{
    evaluate, load_checkpoint, load_dataset, save_checkpoint, save_dataset, synth_dataset,
    train_with, SynthSpec, TrainConfig,
};

fn main() -> contnet::Result<()> {
    let dir = std::env::temp_dir().join("contnet-train-example");
    std::fs::create_dir_all(&dir)?;
    let data_path = dir.join("synth.bin");
    save_dataset(
        &synth_dataset(&SynthSpec::new(2, 128, [32, 32], 1))?,
        &data_path,
    )?;
    let data = load_dataset(&data_path, Some(2))?;

    for (name, mut recipe) in [("sgd", TrainConfig::sgd()), ("adamw", TrainConfig::adamw())] {
        recipe.batch_size = 16;
        recipe.steps = Some(200);
        let mut model = build_network::<f32>(&ModelConfig::tiny(2), recipe.seed)?;
        let history = train_with(&mut model, &data, &recipe, |s| {
            if s.step % 50 == 0 {
                println!("{name:>5} step {:>3}  loss {:.4}", s.step, s.loss);
            }
        })?;
        let acc = evaluate(&model, &data, 64)?;
        println!(
            "{name:>5}: first loss {:.3} (ln 2 = {:.3}), last {:.3}, accuracy {acc:.3}",
            history.losses[0],
            std::f64::consts::LN_2,
            history.losses.last().unwrap()
        );

        let ckpt = dir.join(format!("{name}.ctck"));
        save_checkpoint(&model, &ckpt)?;
        let restored = load_checkpoint::<f32>(&ckpt)?;
        println!(
            "{name:>5}: reloaded accuracy {:.3}",
            evaluate(&restored, &data, 64)?
        );
    }
    Ok(())
}
