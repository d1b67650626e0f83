//! Feature-map extents through each stage.
//!
//!     cargo run --example shape_trace [variant] [HxW]

use contnet::model::{shape_trace, ModelConfig, Variant};

fn main() -> contnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("m").parse()?;
    let mut cfg = ModelConfig::preset(variant)?;
    if let Some(size) = args.next() {
        let (h, w) = size.split_once('x').expect("size as HxW");
        cfg.input_size = [h.parse().expect("height"), w.parse().expect("width")];
    }
    println!("{variant} at {}x{}", cfg.input_size[0], cfg.input_size[1]);
    for (name, shape) in shape_trace(&cfg)? {
        println!("  {name:<9} {shape:?}");
    }
    // 200 is not a multiple of the patch grid, so this is reported, not panicked on
    cfg.input_size = [200, 200];
    if let Err(e) = shape_trace(&cfg) {
        println!("at 200x200: {e}");
    }
    Ok(())
}
