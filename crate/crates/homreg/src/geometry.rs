//! Four-point homography parameterization: DLT, point mapping, warping, MACE.
//!
//! Conventions used throughout the crate:
//! - Corner order is fixed as top-left, top-right, bottom-right, bottom-left.
//! - A [`HomographyMatrix`] maps source coordinates to destination
//!   coordinates (`dst ~ H * src` in homogeneous form, `h22 = 1`).
//! - [`warp_image`] inverse-samples: output pixel `q` reads the input at
//!   `H^-1 * q` with bilinear interpolation and zero fill outside.
//!
//! Offsets serialize as a JSON array of four `[dx, dy]` pairs in corner
//! order; homographies as a row-major 9-element array.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::raster::Image;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate corner configuration (DLT condition number {cond:.3e})")]
    DegenerateCorners { cond: f64 },
    #[error("point maps to infinity (|denominator| = {denom:.3e})")]
    PointAtInfinity { denom: f64 },
}

/// Four ordered corner positions (TL, TR, BR, BL) in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CornerSet(pub [[f64; 2]; 4]);

impl CornerSet {
    /// Corners of an axis-aligned square with top-left corner at `(x0, y0)`
    /// and side spanning `side - 1` pixels (inclusive pixel-center corners).
    pub fn square(x0: f64, y0: f64, side: f64) -> Self {
        let s = side - 1.0;
        CornerSet([
            [x0, y0],
            [x0 + s, y0],
            [x0 + s, y0 + s],
            [x0, y0 + s],
        ])
    }

    pub fn displace(&self, offsets: &FourPointOffsets) -> CornerSet {
        let mut out = self.0;
        for i in 0..4 {
            out[i][0] += offsets.0[i][0];
            out[i][1] += offsets.0[i][1];
        }
        CornerSet(out)
    }
}

/// Per-corner displacements (dx, dy) in pixels, TL, TR, BR, BL order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FourPointOffsets(pub [[f64; 2]; 4]);

impl FourPointOffsets {
    pub const ZERO: FourPointOffsets = FourPointOffsets([[0.0; 2]; 4]);

    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len(), 8);
        FourPointOffsets([[v[0], v[1]], [v[2], v[3]], [v[4], v[5]], [v[6], v[7]]])
    }

    pub fn to_flat(&self) -> [f64; 8] {
        [
            self.0[0][0], self.0[0][1], self.0[1][0], self.0[1][1],
            self.0[2][0], self.0[2][1], self.0[3][0], self.0[3][1],
        ]
    }

    pub fn add(&self, other: &FourPointOffsets) -> FourPointOffsets {
        let mut out = self.0;
        for i in 0..4 {
            out[i][0] += other.0[i][0];
            out[i][1] += other.0[i][1];
        }
        FourPointOffsets(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0, |m, v| v.abs().max(m))
    }
}

/// Row-major 3x3 projective transform with `h[8] = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HomographyMatrix(pub [f64; 9]);

impl HomographyMatrix {
    pub const IDENTITY: HomographyMatrix =
        HomographyMatrix([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        HomographyMatrix([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.0)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let mut h = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                h[r * 3 + c] = m[(r, c)] / m[(2, 2)];
            }
        }
        HomographyMatrix(h)
    }

    pub fn inverse(&self) -> Result<HomographyMatrix, GeometryError> {
        let m = self.to_matrix();
        let det = m.determinant();
        if det.abs() <= 1e-12 {
            return Err(GeometryError::DegenerateCorners { cond: f64::INFINITY });
        }
        let inv = m.try_inverse().ok_or(GeometryError::DegenerateCorners {
            cond: f64::INFINITY,
        })?;
        Ok(HomographyMatrix::from_matrix(&inv))
    }
}

/// Assemble the 8x8 DLT system mapping `src[i] -> dst[i]` with `h22 = 1`.
pub(crate) fn dlt_system(
    src: &CornerSet,
    dst: &CornerSet,
) -> (SMatrix<f64, 8, 8>, SVector<f64, 8>) {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for q in 0..4 {
        let [xs, ys] = src.0[q];
        let [xd, yd] = dst.0[q];
        let r = 2 * q;
        a[(r, 0)] = xs;
        a[(r, 1)] = ys;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -xs * xd;
        a[(r, 7)] = -ys * xd;
        b[r] = xd;
        a[(r + 1, 3)] = xs;
        a[(r + 1, 4)] = ys;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -xs * yd;
        a[(r + 1, 7)] = -ys * yd;
        b[r + 1] = yd;
    }
    (a, b)
}

/// Homography between two corner quads via the direct linear transform.
pub fn corners_to_homography(
    src: &CornerSet,
    dst: &CornerSet,
) -> Result<HomographyMatrix, GeometryError> {
    let (a, b) = dlt_system(src, dst);
    let svd = a.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > 1e10 {
        return Err(GeometryError::DegenerateCorners { cond });
    }
    let lu = a.lu();
    let h = lu
        .solve(&b)
        .ok_or(GeometryError::DegenerateCorners { cond })?;
    Ok(HomographyMatrix([
        h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0,
    ]))
}

/// Homography induced by displacing `base` corners by `offsets`.
pub fn offsets_to_homography(
    base: &CornerSet,
    offsets: &FourPointOffsets,
) -> Result<HomographyMatrix, GeometryError> {
    corners_to_homography(base, &base.displace(offsets))
}

/// Perspective-project a list of points through `h`.
pub fn apply_homography(
    h: &HomographyMatrix,
    points: &[[f64; 2]],
) -> Result<Vec<[f64; 2]>, GeometryError> {
    let m = h.to_matrix();
    points
        .iter()
        .map(|&[x, y]| {
            let p = m * Vector3::new(x, y, 1.0);
            if p[2].abs() < 1e-12 {
                return Err(GeometryError::PointAtInfinity { denom: p[2] });
            }
            Ok([p[0] / p[2], p[1] / p[2]])
        })
        .collect()
}

/// Recover the four-point offsets that `h` induces on `base`.
pub fn homography_to_offsets(
    h: &HomographyMatrix,
    base: &CornerSet,
) -> Result<FourPointOffsets, GeometryError> {
    let mapped = apply_homography(h, &base.0)?;
    let mut out = [[0.0; 2]; 4];
    for i in 0..4 {
        out[i][0] = mapped[i][0] - base.0[i][0];
        out[i][1] = mapped[i][1] - base.0[i][1];
    }
    Ok(FourPointOffsets(out))
}

/// Inverse-warp `image` by `h`: output pixel (x, y) samples the input at
/// `h^-1 * (x, y)` with bilinear interpolation and zero fill.
pub fn warp_image(
    image: &Image,
    h: &HomographyMatrix,
    out_size: (usize, usize),
) -> Result<Image, GeometryError> {
    let inv = h.inverse()?.to_matrix();
    let (oh, ow) = out_size;
    let mut out = Image::zeros(image.channels, oh, ow);
    for y in 0..oh {
        for x in 0..ow {
            let p = inv * Vector3::new(x as f64, y as f64, 1.0);
            if p[2].abs() < 1e-12 {
                return Err(GeometryError::PointAtInfinity { denom: p[2] });
            }
            let u = p[0] / p[2];
            let v = p[1] / p[2];
            for c in 0..image.channels {
                out.set(c, x, y, image.sample_bilinear(c, u, v));
            }
        }
    }
    Ok(out)
}

/// Multiply every displacement by `factor` (> 0).
pub fn scale_offsets(offsets: &FourPointOffsets, factor: f64) -> FourPointOffsets {
    assert!(factor > 0.0, "scale factor must be positive");
    let mut out = offsets.0;
    for d in &mut out {
        d[0] *= factor;
        d[1] *= factor;
    }
    FourPointOffsets(out)
}

/// Mean average corner error in pixels.
pub fn mace(pred: &FourPointOffsets, gt: &FourPointOffsets) -> f64 {
    let mut acc = 0.0;
    for i in 0..4 {
        let dx = pred.0[i][0] - gt.0[i][0];
        let dy = pred.0[i][1] - gt.0[i][1];
        acc += (dx * dx + dy * dy).sqrt();
    }
    acc / 4.0
}
