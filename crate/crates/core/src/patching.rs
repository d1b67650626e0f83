//! Feature map to patch-sequence conversion and positional encodings.
//!
//! A map `[N, C, H, W]` is cut into non-overlapping `P x P` tiles. Each tile
//! becomes a sequence of `P²` pixels in row-major order, so the grid holds
//! `[N, H/P, W/P, P², C]`. One weight-shared encoder then runs over every
//! sequence, which makes it behave like a filter whose kernel and stride both
//! equal the patch size.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::transformer::{ste_body, STEParams};

/// Patch size actually used on an `h x w` map: the requested size, clamped to
/// the whole map.
pub fn effective_patch(patch: usize, h: usize, w: usize) -> usize {
    patch.min(h).min(w)
}

/// A feature map viewed as a grid of pixel sequences.
#[derive(Clone, Debug)]
pub struct PatchGrid<T: Element> {
    /// `[N, H_p, W_p, P², C]`
    pub grid: Tensor<T>,
    pub patch: usize,
    pub origin: (usize, usize),
}

impl<T: Element> PatchGrid<T> {
    pub fn batch(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[4]
    }

    /// Sequence length `P²`.
    pub fn seq_len(&self) -> usize {
        self.patch * self.patch
    }

    /// All sequences stacked: `[N·H_p·W_p, P², C]`.
    pub fn sequences(&self) -> Result<Tensor<T>> {
        self.grid.reshape(&[
            self.batch() * self.rows() * self.cols(),
            self.seq_len(),
            self.channels(),
        ])
    }

    /// Same geometry, new contents; `seqs` may be `[.., P², C]` in any batching.
    pub fn with_sequences(&self, seqs: &Tensor<T>) -> Result<Self> {
        Ok(PatchGrid {
            grid: seqs.reshape(self.grid.shape())?,
            patch: self.patch,
            origin: self.origin,
        })
    }
}

/// Splits `x` into `P_eff x P_eff` tiles with `P_eff = min(P, H, W)`.
pub fn split_patches<T: Element>(x: &Tensor<T>, patch: usize) -> Result<PatchGrid<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid(
            "split_patches",
            format!("input must be NCHW, got {s:?}"),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if patch == 0 {
        return Err(Error::invalid(
            "split_patches",
            "patch size must be positive",
        ));
    }
    let p = effective_patch(patch, h, w);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::PatchDivisibility {
            stage: None,
            height: h,
            width: w,
            patch,
        });
    }
    let (hp, wp) = (h / p, w / p);
    let grid = x
        .reshape(&[n, c, hp, p, wp, p])?
        .permute(&[0, 2, 4, 3, 5, 1])?
        .reshape(&[n, hp, wp, p * p, c])?;
    Ok(PatchGrid {
        grid,
        patch: p,
        origin: (h, w),
    })
}

/// Exact inverse of [`split_patches`].
pub fn merge_patches<T: Element>(g: &PatchGrid<T>) -> Result<Tensor<T>> {
    let (n, hp, wp, c, p) = (g.batch(), g.rows(), g.cols(), g.channels(), g.patch);
    g.grid
        .reshape(&[n, hp, wp, p, p, c])?
        .permute(&[0, 5, 1, 3, 2, 4])?
        .reshape(&[n, c, hp * p, wp * p])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PeKind {
    None,
    Learnable1d,
    Learnable2d,
    Relative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PePlacement {
    PatchWise,
    ImageWise,
}

impl fmt::Display for PeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeKind::None => "none",
            PeKind::Learnable1d => "1d",
            PeKind::Learnable2d => "2d",
            PeKind::Relative => "relative",
        })
    }
}

impl FromStr for PeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PeKind::None),
            "1d" => Ok(PeKind::Learnable1d),
            "2d" => Ok(PeKind::Learnable2d),
            "relative" => Ok(PeKind::Relative),
            _ => Err(Error::Config(format!(
                "unknown positional encoding {s:?} (expected none, 1d, 2d or relative)"
            ))),
        }
    }
}

impl fmt::Display for PePlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PePlacement::PatchWise => "patch",
            PePlacement::ImageWise => "image",
        })
    }
}

impl FromStr for PePlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(PePlacement::PatchWise),
            "image" => Ok(PePlacement::ImageWise),
            _ => Err(Error::Config(format!(
                "unknown placement {s:?} (expected patch or image)"
            ))),
        }
    }
}

/// Learnable tables of one encoder's positional encoding.
#[derive(Clone, Debug)]
pub enum PeTable<T: Element> {
    None,
    /// `[L, C]`, one row per sequence position.
    Flat(Tensor<T>),
    /// Row table `[R, C]` plus column table `[Q, C]`; position `(i, j)`
    /// receives `rows[i] + cols[j]`.
    Factored {
        rows: Tensor<T>,
        cols: Tensor<T>,
    },
    /// Per-head key-offset embeddings `[H, 2L - 1, D_h]`; offset `j - i` lives
    /// at index `j - i + L - 1`.
    Relative(Tensor<T>),
}

#[derive(Clone, Debug)]
pub struct PositionalEncoding<T: Element> {
    pub table: PeTable<T>,
    pub placement: PePlacement,
}

impl<T: Element> PositionalEncoding<T> {
    pub fn none() -> Self {
        PositionalEncoding {
            table: PeTable::None,
            placement: PePlacement::PatchWise,
        }
    }

    pub fn kind(&self) -> PeKind {
        match self.table {
            PeTable::None => PeKind::None,
            PeTable::Flat(_) => PeKind::Learnable1d,
            PeTable::Factored { .. } => PeKind::Learnable2d,
            PeTable::Relative(_) => PeKind::Relative,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        match &self.table {
            PeTable::None => vec![],
            PeTable::Flat(t) | PeTable::Relative(t) => vec![t],
            PeTable::Factored { rows, cols } => vec![rows, cols],
        }
    }

    /// The additive `[rows·cols, C]` offsets, or `None` for kinds that add
    /// nothing to the input.
    pub fn offsets(&self) -> Result<Option<Tensor<T>>> {
        match &self.table {
            PeTable::None | PeTable::Relative(_) => Ok(None),
            PeTable::Flat(t) => Ok(Some(t.clone())),
            PeTable::Factored { rows, cols } => {
                let t = outer_add(rows, cols)?;
                let s = t.shape().to_vec();
                Ok(Some(t.reshape(&[s[0] * s[1], s[2]])?))
            }
        }
    }
}

/// `out[i, j, c] = rows[i, c] + cols[j, c]`.
fn outer_add<T: Element>(rows: &Tensor<T>, cols: &Tensor<T>) -> Result<Tensor<T>> {
    let (rs, cs) = (rows.shape(), cols.shape());
    if rs.len() != 2 || cs.len() != 2 || rs[1] != cs[1] {
        return Err(Error::shape("outer_add", rs, cs));
    }
    let (r, q, c) = (rs[0], cs[0], rs[1]);
    let (a, b) = (rows.data(), cols.data());
    let mut out = Vec::with_capacity(r * q * c);
    for i in 0..r {
        for j in 0..q {
            out.extend((0..c).map(|k| a[i * c + k] + b[j * c + k]));
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![r, q, c],
        "outer_add",
        vec![rows.clone(), cols.clone()],
        Box::new(move |g, _, _| {
            let mut gr = vec![T::zero(); r * c];
            let mut gc = vec![T::zero(); q * c];
            for i in 0..r {
                for j in 0..q {
                    for k in 0..c {
                        let v = g[(i * q + j) * c + k];
                        gr[i * c + k] += v;
                        gc[j * c + k] += v;
                    }
                }
            }
            vec![Some(gr), Some(gc)]
        }),
    ))
}

/// Adds the encoding to every sequence of the grid (patch-wise) or to the
/// whole map before it is cut (image-wise).
pub fn add_positional_encoding<T: Element>(
    g: &PatchGrid<T>,
    pe: &PositionalEncoding<T>,
) -> Result<PatchGrid<T>> {
    if pe.kind() == PeKind::Relative {
        return Err(Error::Contract(
            "relative encodings act inside attention and cannot be added to a grid".into(),
        ));
    }
    let Some(table) = pe.offsets()? else {
        return Ok(g.clone());
    };
    match pe.placement {
        PePlacement::PatchWise => {
            if table.shape() != [g.seq_len(), g.channels()] {
                return Err(Error::shape(
                    "add_positional_encoding",
                    g.grid.shape(),
                    table.shape(),
                ));
            }
            Ok(PatchGrid {
                grid: g.grid.add(&table)?,
                patch: g.patch,
                origin: g.origin,
            })
        }
        PePlacement::ImageWise => {
            let map = add_image_encoding(&merge_patches(g)?, &table)?;
            split_patches(&map, g.patch)
        }
    }
}

/// Adds a full-map `[H·W, C]` table to `[N, C, H, W]`.
fn add_image_encoding<T: Element>(x: &Tensor<T>, table: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    if table.shape() != [h * w, c] {
        return Err(Error::shape(
            "image-wise positional encoding",
            s,
            table.shape(),
        ));
    }
    let chw = table.reshape(&[h, w, c])?.permute(&[2, 0, 1])?;
    x.add(&chw)
}

/// Split, encode every patch sequence with the shared encoder, merge.
pub fn apply_ste_patchwise<T: Element>(
    x: &Tensor<T>,
    ste: &STEParams<T>,
    patch: usize,
) -> Result<Tensor<T>> {
    let image_wise = ste.pe.placement == PePlacement::ImageWise;
    let input = match (image_wise, ste.pe.offsets()?) {
        (true, Some(table)) => add_image_encoding(x, &table)?,
        _ => x.clone(),
    };
    let grid = split_patches(&input, patch)?;
    let seqs = grid.sequences()?;
    let out = ste_body(&seqs, ste, !image_wise, None)?;
    merge_patches(&grid.with_sequences(&out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_inputs;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec((0..n).map(|i| (i as f64 * 0.37).sin()).collect(), shape).unwrap()
    }

    #[test]
    fn fifty_six_by_seven() {
        let g = split_patches(&Tensor::<f32>::zeros(&[1, 64, 56, 56]), 7).unwrap();
        assert_eq!(g.grid.shape(), &[1, 8, 8, 49, 64]);
        assert_eq!(merge_patches(&g).unwrap().shape(), &[1, 64, 56, 56]);
    }

    #[test]
    fn whole_image_patch() {
        let g = split_patches(&ramp(&[2, 3, 5, 5]), 5).unwrap();
        assert_eq!(g.grid.shape(), &[2, 1, 1, 25, 3]);
    }

    #[test]
    fn clamped_to_map() {
        let g = split_patches(&ramp(&[1, 2, 7, 7]), 14).unwrap();
        assert_eq!(g.patch, 7);
        assert_eq!(g.seq_len(), 49);
    }

    #[test]
    fn indivisible_is_reported() {
        let err = split_patches(&ramp(&[1, 1, 12, 12]), 7).unwrap_err();
        assert!(matches!(
            err,
            Error::PatchDivisibility {
                height: 12,
                width: 12,
                patch: 7,
                ..
            }
        ));
        assert!(err.to_string().contains("12"));
    }

    #[test]
    fn row_major_within_patch() {
        // x[0, c, y, x] = 100c + 10y + x
        let mut v = Vec::new();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    v.push((100 * c + 10 * y + x) as f64);
                }
            }
        }
        let g = split_patches(&Tensor::from_vec(v, &[1, 2, 4, 4]).unwrap(), 2).unwrap();
        // grid (1, 0) covers rows 2..4, cols 0..2; pixel 3 of it is (3, 1)
        let s = g.grid.shape().to_vec();
        let at = |m: usize, n: usize, l: usize, c: usize| {
            g.grid.data()[(((m * s[2] + n) * s[3]) + l) * s[4] + c]
        };
        assert_eq!(at(1, 0, 3, 0), 31.0);
        assert_eq!(at(1, 0, 3, 1), 131.0);
        assert_eq!(at(0, 1, 1, 0), 3.0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let x = ramp(&[2, 3, 6, 6]);
        for p in [1, 2, 3, 6, 9] {
            let back = merge_patches(&split_patches(&x, p).unwrap()).unwrap();
            assert!(back.same_values(&x), "P={p}");
        }
    }

    #[test]
    fn constant_grid_merges_to_constant() {
        let g = PatchGrid {
            grid: Tensor::<f64>::full(&[1, 2, 2, 4, 3], 0.5),
            patch: 2,
            origin: (4, 4),
        };
        let m = merge_patches(&g).unwrap();
        assert_eq!(m.shape(), &[1, 3, 4, 4]);
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn none_and_zero_tables_are_identity() {
        let g = split_patches(&ramp(&[1, 3, 4, 4]), 2).unwrap();
        let out = add_positional_encoding(&g, &PositionalEncoding::none()).unwrap();
        assert!(out.grid.same_values(&g.grid));
        for table in [
            PeTable::Flat(Tensor::zeros(&[4, 3])),
            PeTable::Factored {
                rows: Tensor::zeros(&[2, 3]),
                cols: Tensor::zeros(&[2, 3]),
            },
        ] {
            let pe = PositionalEncoding {
                table,
                placement: PePlacement::PatchWise,
            };
            assert!(add_positional_encoding(&g, &pe)
                .unwrap()
                .grid
                .same_values(&g.grid));
        }
    }

    #[test]
    fn patch_wise_offsets_are_shared() {
        let g = split_patches(&Tensor::<f64>::zeros(&[1, 3, 6, 6]), 3).unwrap();
        let pe = PositionalEncoding {
            table: PeTable::Factored {
                rows: ramp(&[3, 3]),
                cols: ramp(&[3, 3]).scale(2.0),
            },
            placement: PePlacement::PatchWise,
        };
        let out = add_positional_encoding(&g, &pe).unwrap();
        let d = out.grid.data();
        let per = 9 * 3;
        for cell in 1..4 {
            assert_eq!(&d[..per], &d[cell * per..(cell + 1) * per]);
        }
        // factorized table: position (i, j) = rows[i] + cols[j]
        let (r, c) = (ramp(&[3, 3]), ramp(&[3, 3]));
        assert_eq!(
            d[(3 + 2) * 3 + 1],
            r.data()[3 + 1] + 2.0 * c.data()[2 * 3 + 1]
        );
    }

    #[test]
    fn image_wise_spans_the_map() {
        let g = split_patches(&Tensor::<f64>::zeros(&[1, 2, 4, 4]), 2).unwrap();
        let table = ramp(&[16, 2]);
        let pe = PositionalEncoding {
            table: PeTable::Flat(table.clone()),
            placement: PePlacement::ImageWise,
        };
        let map = merge_patches(&add_positional_encoding(&g, &pe).unwrap()).unwrap();
        // map[0, c, y, x] = table[y*4 + x, c]
        for c in 0..2 {
            for p in 0..16 {
                assert_eq!(map.data()[c * 16 + p], table.data()[p * 2 + c]);
            }
        }
        let bad = PositionalEncoding {
            table: PeTable::Flat(ramp(&[4, 2])),
            placement: PePlacement::ImageWise,
        };
        assert!(add_positional_encoding(&g, &bad).is_err());
    }

    #[test]
    fn relative_cannot_be_added() {
        let g = split_patches(&Tensor::<f64>::zeros(&[1, 2, 2, 2]), 2).unwrap();
        let pe = PositionalEncoding {
            table: PeTable::Relative(Tensor::zeros(&[1, 7, 2])),
            placement: PePlacement::PatchWise,
        };
        assert!(matches!(
            add_positional_encoding(&g, &pe),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn outer_add_gradient() {
        let w = ramp(&[3, 4, 2]).scale(3.0);
        let err = grad_check_inputs(
            |xs| Ok(outer_add(&xs[0], &xs[1])?.mul(&w)?.sum()),
            &[ramp(&[3, 2]), ramp(&[4, 2])],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [
            PeKind::None,
            PeKind::Learnable1d,
            PeKind::Learnable2d,
            PeKind::Relative,
        ] {
            assert_eq!(k.to_string().parse::<PeKind>().unwrap(), k);
        }
        assert!("sinusoid".parse::<PeKind>().is_err());
        assert_eq!(
            "image".parse::<PePlacement>().unwrap(),
            PePlacement::ImageWise
        );
    }
}
