//! One shared encoder applied to every tile of a feature map, the way a
//! conv kernel slides. Shows the symmetries that come with it and the
//! relative-offset attention variant.
//!
//!     cargo run --example patchwise_encoder

use contnet::patching::{
    apply_ste_patchwise, merge_patches, split_patches, PeKind, PePlacement, PositionalEncoding,
};
use contnet::transformer::{ste_forward_traced, STEParams};
use contnet::Tensor;

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Swaps the top-left and bottom-right `p x p` tiles of `[N, C, H, W]`.
fn swap_corner_tiles(x: &Tensor<f64>, p: usize) -> Tensor<f64> {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut v = x.to_vec();
    for n in 0..s[0] {
        for ch in 0..c {
            for i in 0..p {
                for j in 0..p {
                    let a = ((n * c + ch) * h + i) * w + j;
                    let b = ((n * c + ch) * h + h - p + i) * w + w - p + j;
                    v.swap(a, b);
                }
            }
        }
    }
    Tensor::from_vec(v, s).unwrap()
}

fn main() -> contnet::Result<()> {
    let (c, p) = (8, 4);
    let x = Tensor::<f64>::from_vec(
        (0..2 * c * 8 * 8)
            .map(|i| (i as f64 * 0.173).sin())
            .collect(),
        &[2, c, 8, 8],
    )?;

    let grid = split_patches(&x, p)?;
    println!("8x8 map in {p}x{p} tiles: grid {:?}", grid.grid.shape());
    println!(
        "split then merge is exact: {}",
        merge_patches(&grid)?.same_values(&x)
    );

    let pe = PositionalEncoding::seeded(
        PeKind::Learnable2d,
        PePlacement::PatchWise,
        [p, p],
        c,
        2,
        0.5,
        1,
    );
    let ste = STEParams::<f64>::seeded(c, c, 2 * c, 2, 0).with_pe(pe);
    let y = apply_ste_patchwise(&x, &ste, p)?;
    let y_swapped = apply_ste_patchwise(&swap_corner_tiles(&x, p), &ste, p)?;
    println!(
        "moving a tile moves its output: max deviation {:.1e}",
        max_diff(&swap_corner_tiles(&y, p), &y_swapped)
    );

    let rel = PositionalEncoding::seeded(
        PeKind::Relative,
        PePlacement::PatchWise,
        [p, p],
        c,
        2,
        0.5,
        2,
    );
    let ste = STEParams::<f64>::seeded(c, c, 2 * c, 2, 0).with_pe(rel);
    let seqs = split_patches(&x, p)?.sequences()?;
    let (out, trace) = ste_forward_traced(&seqs, &ste)?;
    println!(
        "relative attention over {} sequences of length {}: weights {:?}, worst row-sum error {:.1e}",
        out.shape()[0],
        out.shape()[1],
        trace.weights.shape(),
        trace.max_row_sum_error()
    );
    Ok(())
}
