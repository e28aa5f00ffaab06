//! Per-pixel 3D coordinates `(row / H, col / W, depth)` and their re-origin
//! at the sender.
//!
//! Convention: the first image axis (rows, height) is `x` and the second
//! (columns, width) is `y`, so pixel `(x, y)` has normalized coordinate
//! `(x / H, y / W)`. Channel order is always `(x-norm, y-norm, depth)`.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateMaps {
    /// `H x W x 2` normalized image coordinates.
    pub image_coords: Array3<f64>,
    /// `H x W` normalized depth.
    pub depth: Array2<f64>,
    /// `H x W x 3` concatenation of image coordinates and depth.
    pub points: Array3<f64>,
    /// Mean coordinate of the sender's pixels.
    pub sender: [f64; 3],
    /// `H x W x 3` coordinates relative to the sender.
    pub embodied: Array3<f64>,
}

impl CoordinateMaps {
    pub fn build(depth: ArrayView2<'_, f32>, sender_mask: ArrayView2<'_, u8>) -> Result<Self> {
        let (h, w) = depth.dim();
        let depth64 = depth.mapv(f64::from);
        let (image_coords, points) = build_coordinate_map(depth64.view(), h, w)?;
        let sender = sender_position(points.view(), sender_mask)?;
        let embodied = embody(points.view(), sender)?;
        Ok(CoordinateMaps {
            image_coords,
            depth: depth64,
            points,
            sender,
            embodied,
        })
    }
}

/// Returns `(P_I, P)`: the normalized image-coordinate map and its
/// concatenation with depth.
pub fn build_coordinate_map(
    depth: ArrayView2<'_, f64>,
    height: usize,
    width: usize,
) -> Result<(Array3<f64>, Array3<f64>)> {
    if depth.dim() != (height, width) {
        return Err(Error::shape(
            "build_coordinate_map",
            format!("{height}x{width}"),
            format!("{:?}", depth.dim()),
        ));
    }
    if let Some(bad) = depth.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::Range {
            op: "build_coordinate_map",
            detail: format!("depth value {bad} outside [0, 1]"),
        });
    }
    let (hf, wf) = (height as f64, width as f64);
    let image_coords = Array3::from_shape_fn((height, width, 2), |(x, y, c)| {
        if c == 0 {
            x as f64 / hf
        } else {
            y as f64 / wf
        }
    });
    let mut points = Array3::zeros((height, width, 3));
    points
        .slice_mut(s![.., .., 0..2])
        .assign(&image_coords);
    points.index_axis_mut(Axis(2), 2).assign(&depth);
    Ok((image_coords, points))
}

/// Mean of `P` over the sender's mask pixels.
pub fn sender_position(points: ArrayView3<'_, f64>, mask: ArrayView2<'_, u8>) -> Result<[f64; 3]> {
    let (h, w, c) = points.dim();
    if mask.dim() != (h, w) || c != 3 {
        return Err(Error::shape(
            "sender_position",
            format!("mask {h}x{w}, points {h}x{w}x3"),
            format!("mask {:?}, points {:?}", mask.dim(), points.dim()),
        ));
    }
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    Zip::from(points.rows())
        .and(mask)
        .for_each(|p, &m| {
            if m != 0 {
                for k in 0..3 {
                    sum[k] += p[k];
                }
                n += 1;
            }
        });
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum.map(|v| v / n as f64))
}

/// `P_r = P - tile(p)`.
pub fn embody(points: ArrayView3<'_, f64>, sender: [f64; 3]) -> Result<Array3<f64>> {
    if points.dim().2 != 3 {
        return Err(Error::shape("embody", "HxWx3", format!("{:?}", points.dim())));
    }
    let mut out = points.to_owned();
    for mut p in out.rows_mut() {
        for k in 0..3 {
            p[k] -= sender[k];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn center_and_corner_pixels() {
        let depth = Array2::from_elem((512, 512), 0.25);
        let (pi, p) = build_coordinate_map(depth.view(), 512, 512).unwrap();
        assert_eq!((pi[[256, 256, 0]], pi[[256, 256, 1]]), (0.5, 0.5));
        assert_eq!(
            (p[[0, 0, 0]], p[[0, 0, 1]], p[[0, 0, 2]]),
            (0.0, 0.0, 0.25)
        );
    }

    #[test]
    fn channel_order_is_row_col_depth() {
        // distinct per-axis sizes and a distinct depth constant pin the layout
        let depth = Array2::from_elem((4, 8), 0.75);
        let (_, p) = build_coordinate_map(depth.view(), 4, 8).unwrap();
        assert_eq!(p[[2, 3, 0]], 2.0 / 4.0);
        assert_eq!(p[[2, 3, 1]], 3.0 / 8.0);
        assert_eq!(p[[2, 3, 2]], 0.75);
    }

    #[test]
    fn rejects_bad_depth() {
        let depth = Array2::from_elem((4, 4), 1.5);
        assert!(matches!(
            build_coordinate_map(depth.view(), 4, 4),
            Err(Error::Range { .. })
        ));
        let depth = Array2::from_elem((4, 5), 0.5);
        assert!(matches!(
            build_coordinate_map(depth.view(), 4, 4),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn singleton_and_pair_means() {
        let depth = Array2::from_shape_fn((6, 6), |(r, c)| (r * 6 + c) as f64 / 40.0);
        let (_, p) = build_coordinate_map(depth.view(), 6, 6).unwrap();
        let mut mask = Array2::<u8>::zeros((6, 6));
        mask[[2, 3]] = 1;
        let q = sender_position(p.view(), mask.view()).unwrap();
        assert_eq!(q, [p[[2, 3, 0]], p[[2, 3, 1]], p[[2, 3, 2]]]);
        mask[[4, 1]] = 1;
        let q = sender_position(p.view(), mask.view()).unwrap();
        for k in 0..3 {
            assert!((q[k] - (p[[2, 3, k]] + p[[4, 1, k]]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let p = Array3::zeros((3, 3, 3));
        let mask = Array2::<u8>::zeros((3, 3));
        assert!(matches!(
            sender_position(p.view(), mask.view()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn zero_origin_is_identity() {
        let p = Array3::from_shape_fn((3, 4, 3), |(a, b, c)| (a + 2 * b + 3 * c) as f64);
        assert_eq!(embody(p.view(), [0.0; 3]).unwrap(), p);
    }

    proptest! {
        #[test]
        fn reorigin_and_translation_invariance(
            depth in proptest::collection::vec(0.0..=1.0f64, 64),
            mask_bits in proptest::collection::vec(any::<bool>(), 64),
            t in (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64),
        ) {
            let depth = Array2::from_shape_vec((8, 8), depth).unwrap();
            let mut mask = Array2::from_shape_vec((8, 8), mask_bits.iter().map(|&b| b as u8).collect()).unwrap();
            mask[[0, 0]] = 1;
            let (_, p) = build_coordinate_map(depth.view(), 8, 8).unwrap();
            let c = sender_position(p.view(), mask.view()).unwrap();
            let pr = embody(p.view(), c).unwrap();
            let m = sender_position(pr.view(), mask.view()).unwrap();
            for v in m {
                prop_assert!(v.abs() < 1e-6);
            }
            let mut shifted = p.clone();
            for mut row in shifted.rows_mut() {
                row[0] += t.0;
                row[1] += t.1;
                row[2] += t.2;
            }
            let c2 = sender_position(shifted.view(), mask.view()).unwrap();
            let pr2 = embody(shifted.view(), c2).unwrap();
            for (a, b) in pr.iter().zip(pr2.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
