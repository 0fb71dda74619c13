//! Planar homographies from a virtual PTZ camera.
//!
//! The camera model is a pinhole projection `P = K·R·[I | -C]` with
//! `R = Q·S`: `S` is the fixed base orientation that tips an overhead
//! camera to a horizontal, north-facing view, and `Q` applies tilt (about
//! the camera lateral axis) and pan (about the world up axis). Restricting
//! the projection to the ground plane `z = 0` and chaining the bird's-eye
//! raster-to-world transform yields a 3x3 homography from bird's-eye pixel
//! coordinates to virtual-camera pixel coordinates.
//!
//! World frame: x east, y north, z up; the ground plane is `z = 0`.
//! Bird's-eye rasters are north-up: pixel row index grows towards south.
//! Camera frame: standard computer-vision axes (x right, y down, z forward).

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Determinant magnitude (after scale normalization) below which a
/// homography is treated as degenerate.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// Pan/tilt/focal/position sample of the virtual PTZ camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub pan_deg: f64,
    pub tilt_deg: f64,
    pub focal_px: f64,
    pub x_world: f64,
    pub y_world: f64,
    pub z_world: f64,
}

impl CameraParams {
    pub fn new(pan_deg: f64, tilt_deg: f64, focal_px: f64, x: f64, y: f64, z: f64) -> Self {
        CameraParams {
            pan_deg,
            tilt_deg,
            focal_px,
            x_world: x,
            y_world: y,
            z_world: z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "focal length must be positive, got {}",
                self.focal_px
            )));
        }
        if !(self.z_world > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "camera height must be positive, got {}",
                self.z_world
            )));
        }
        if !(-180.0..=180.0).contains(&self.pan_deg) {
            return Err(Error::InvalidParameter(format!(
                "pan must lie in [-180, 180], got {}",
                self.pan_deg
            )));
        }
        if !(-90.0..=0.0).contains(&self.tilt_deg) {
            return Err(Error::InvalidParameter(format!(
                "tilt must lie in [-90, 0], got {}",
                self.tilt_deg
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.x_world, self.y_world, self.z_world)
    }
}

/// Upper-triangular pinhole intrinsic matrix (square pixels, zero skew).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntrinsicMatrix(Matrix3<f64>);

impl IntrinsicMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// Builds the pinhole intrinsic matrix for a given focal length (pixels)
/// and principal point.
pub fn intrinsics(focal_px: f64, principal_point: (f64, f64)) -> Result<IntrinsicMatrix> {
    if !(focal_px > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "focal length must be positive, got {focal_px}"
        )));
    }
    let (cx, cy) = principal_point;
    Ok(IntrinsicMatrix(Matrix3::new(
        focal_px, 0.0, cx, //
        0.0, focal_px, cy, //
        0.0, 0.0, 1.0,
    )))
}

/// Pan/tilt rotation `q` and fixed base orientation `s`; the full
/// world-to-camera rotation is `R = q·s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationDecomposition {
    pub q: Matrix3<f64>,
    pub s: Matrix3<f64>,
}

impl RotationDecomposition {
    pub fn rotation(&self) -> Matrix3<f64> {
        self.q * self.s
    }
}

fn rot_x(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

#[cfg(test)]
fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Decomposed camera rotation for a pan/tilt pair (degrees).
///
/// Pan rotates the viewing direction about the world up axis; tilt then
/// pitches it about the camera lateral (x) axis, with tilt = 0 horizontal
/// and tilt = -90 looking straight down. In the base frame the world up
/// axis maps to the camera -y axis, so `q = R_x(-tilt)·R_y(-pan)` and the
/// base orientation is the fixed quarter turn `s = R_x(90)`. The product
/// satisfies `q·s = R_x(90 - tilt)·R_z(pan)`.
pub fn rotation_from_pan_tilt(pan_deg: f64, tilt_deg: f64) -> Result<RotationDecomposition> {
    if !pan_deg.is_finite() || !tilt_deg.is_finite() {
        return Err(Error::InvalidParameter(
            "pan and tilt must be finite".into(),
        ));
    }
    Ok(RotationDecomposition {
        q: rot_x(-tilt_deg) * rot_y(-pan_deg),
        s: rot_x(90.0),
    })
}

/// Full 3x4 projection `P = K·Q·S·[I | -C]`: a world point `X` maps to
/// `K·R·(X - C)`.
pub fn projection(
    k: &IntrinsicMatrix,
    rot: &RotationDecomposition,
    c: Vector3<f64>,
) -> Matrix3x4<f64> {
    let kr = k.matrix() * rot.rotation();
    let t = -kr * c;
    let mut p = Matrix3x4::zeros();
    p.fixed_view_mut::<3, 3>(0, 0).copy_from(&kr);
    p.set_column(3, &t);
    p
}

/// Placement of a bird's-eye raster on the world ground plane.
///
/// A raster pixel `(u, v)` maps to world
/// `(center.0 + (u - w/2)·upp, center.1 - (v - h/2)·upp, 0)`:
/// `units_per_pixel` is the world scale and `center` is the world
/// coordinate of the raster center. The sign flip on `v` makes the raster
/// north-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BirdseyeFrame {
    pub units_per_pixel: f64,
    pub center: (f64, f64),
    pub map_width: u32,
    pub map_height: u32,
}

impl BirdseyeFrame {
    /// Affine transform from bird's-eye pixel coordinates to ground-plane
    /// homogeneous coordinates `(X, Y, 1)`.
    pub fn pixel_to_world(&self) -> Matrix3<f64> {
        let upp = self.units_per_pixel;
        let (cx, cy) = self.center;
        Matrix3::new(
            upp,
            0.0,
            cx - upp * self.map_width as f64 / 2.0,
            0.0,
            -upp,
            cy + upp * self.map_height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// 3x3 planar homography, row-major, with a normalization flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
    normalized: bool,
}

#[derive(Serialize, Deserialize)]
struct HomographyRepr {
    h: [f64; 9],
    normalized: bool,
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        HomographyRepr {
            h: self.to_row_major(),
            normalized: self.normalized,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let repr = HomographyRepr::deserialize(de)?;
        Homography::from_row_major(repr.h).map_err(serde::de::Error::custom)
    }
}

impl Homography {
    /// Wraps a matrix, rejecting (scale-normalized) singular ones.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Homography> {
        let scale = m.abs().max();
        if !(scale > 0.0) || !m.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateHomography(
                "matrix has no finite nonzero entry".into(),
            ));
        }
        let det = (m / scale).determinant();
        if det.abs() < DEGENERACY_EPS {
            return Err(Error::DegenerateHomography(format!(
                "normalized determinant {det:e} below threshold"
            )));
        }
        let normalized = (m[(2, 2)] - 1.0).abs() == 0.0;
        Ok(Homography { m, normalized })
    }

    pub fn from_row_major(h: [f64; 9]) -> Result<Homography> {
        Homography::from_matrix(Matrix3::from_row_slice(&h))
    }

    pub fn identity() -> Homography {
        Homography {
            m: Matrix3::identity(),
            normalized: true,
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    /// Rescales so the bottom-right entry equals 1.
    pub fn normalize(&self) -> Result<Homography> {
        let w = self.m[(2, 2)];
        if w.abs() < DEGENERACY_EPS * self.m.abs().max() {
            return Err(Error::DegenerateHomography(
                "bottom-right entry vanishes; cannot normalize".into(),
            ));
        }
        Ok(Homography {
            m: self.m / w,
            normalized: true,
        })
    }

    /// Normalized matrix product `self·other`. Falls back to the raw
    /// product when the bottom-right entry of the product vanishes.
    pub fn compose(&self, other: &Homography) -> Homography {
        let m = self.m * other.m;
        let h = Homography {
            m,
            normalized: false,
        };
        h.normalize().unwrap_or(h)
    }

    pub fn invert(&self) -> Result<Homography> {
        let scale = self.m.abs().max();
        let scaled = self.m / scale;
        let inv = scaled.try_inverse().ok_or_else(|| {
            Error::DegenerateHomography("matrix is not invertible".into())
        })?;
        if (scaled.determinant()).abs() < DEGENERACY_EPS {
            return Err(Error::DegenerateHomography(
                "determinant below degeneracy threshold".into(),
            ));
        }
        let h = Homography {
            m: inv,
            normalized: false,
        };
        Ok(h.normalize().unwrap_or(h))
    }

    /// First 8 entries of the normalized matrix (`h33` fixed at 1).
    pub fn to_param8(&self) -> Result<[f64; 8]> {
        let n = self.normalize()?;
        let rm = n.to_row_major();
        let mut out = [0.0; 8];
        out.copy_from_slice(&rm[..8]);
        Ok(out)
    }

    pub fn from_param8(v: [f64; 8]) -> Result<Homography> {
        let mut h = [0.0; 9];
        h[..8].copy_from_slice(&v);
        h[8] = 1.0;
        Homography::from_row_major(h)
    }

    /// Maps a point through the homography.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let u = self.m * Vector3::new(x, y, 1.0);
        (u.x / u.z, u.y / u.z)
    }
}

/// Columns (1, 2, 4) of a projection: its restriction to the plane `z = 0`.
fn ground_restriction(p: &Matrix3x4<f64>) -> Matrix3<f64> {
    Matrix3::new(
        p[(0, 0)], p[(0, 1)], p[(0, 3)],
        p[(1, 0)], p[(1, 1)], p[(1, 3)],
        p[(2, 0)], p[(2, 1)], p[(2, 3)],
    )
}

/// Ground-plane homography of the virtual camera described by `p`,
/// mapping bird's-eye pixel coordinates to camera pixel coordinates.
///
/// Takes columns (1, 2, 4) of the projection (the planar restriction to
/// `z = 0`) and composes with the raster-to-world transform of `frame`.
pub fn homography_from_params(
    p: &CameraParams,
    frame: &BirdseyeFrame,
    principal_point: (f64, f64),
) -> Result<Homography> {
    p.validate()?;
    let k = intrinsics(p.focal_px, principal_point)?;
    let rot = rotation_from_pan_tilt(p.pan_deg, p.tilt_deg)?;
    let proj = projection(&k, &rot, p.center());
    let ground = ground_restriction(&proj);
    let h = ground * frame.pixel_to_world();
    let hom = Homography::from_matrix(h)?;
    Ok(hom.normalize().unwrap_or(hom))
}
