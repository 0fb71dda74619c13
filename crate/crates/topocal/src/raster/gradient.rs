//! Analytic gradient of a warp loss with respect to the homography.
//!
//! The objective is `L(h) = loss(warp_onehot(src, h, target_size), target)`
//! with `loss` one of the (topological) losses. The chain rule runs through
//! the bilinear sampler and the projective division: for output pixel `p`
//! with homogeneous source point `u = H^{-1}·p`,
//!
//! `dL/dH_ab = -sum_p (H^{-T}·dL/du)_a · u_b`,
//!
//! using `d(H^{-1})/dH_ab = -H^{-1} E_ab H^{-1}`. Subgradient 0 applies at
//! bilinear cell boundaries and at the hinge kink of the neighbor penalty.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::loss::{topo_loss_backward, TopoLossConfig};
use crate::parallel::map_indexed;
use crate::raster::{bilinear_cell, warp_onehot, OneHotMap};

/// Loss value and its gradient with respect to the 8-parameter vector of
/// the (normalized) homography.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpGradient {
    pub loss: f64,
    pub grad: [f64; 8],
}

impl WarpGradient {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// Gradient with respect to all nine entries of `h` exactly as stored
/// (possibly unnormalized). Refinement chains this through a composition.
pub fn loss_gradient_full(
    src: &OneHotMap,
    target: &OneHotMap,
    h: &Homography,
    cfg: &TopoLossConfig,
) -> Result<(f64, Matrix3<f64>)> {
    if src.class_count() != target.class_count() {
        return Err(Error::InvalidInput(format!(
            "class count mismatch: {} vs {}",
            src.class_count(),
            target.class_count()
        )));
    }
    let out_size = (target.width(), target.height());
    let warped = warp_onehot(src, h, out_size)?;
    let (loss, upstream) = topo_loss_backward(&warped, target, cfg)?;

    let hinv = *h.invert()?.matrix();
    let hinv_t = hinv.transpose();
    let c = src.class_count() as usize;
    let (sw, sh) = (src.width() as i64, src.height() as i64);
    let background: Vec<f64> = {
        let mut e0 = vec![0.0; c];
        e0[0] = 1.0;
        e0
    };

    let (ow, oh) = out_size;
    // Per-row partial accumulators, folded in row order for determinism.
    let row_sums = map_indexed(oh as usize, |y| {
        let mut m = Matrix3::<f64>::zeros();
        for x in 0..ow {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let u = hinv * Vector3::new(px, py, 1.0);
            if u.z.abs() < 1e-300 {
                continue;
            }
            let sx = u.x / u.z;
            let sy = u.y / u.z;
            let (x0, y0, ax, ay) = bilinear_cell(sx, sy);
            let tap = |tx: i64, ty: i64| -> &[f64] {
                if tx >= 0 && ty >= 0 && tx < sw && ty < sh {
                    src.pixel(tx as u32, ty as u32)
                } else {
                    &background
                }
            };
            let v00 = tap(x0, y0);
            let v10 = tap(x0 + 1, y0);
            let v01 = tap(x0, y0 + 1);
            let v11 = tap(x0 + 1, y0 + 1);

            let g = &upstream[((y * ow as usize) + x as usize) * c..][..c];
            let mut gx = 0.0;
            let mut gy = 0.0;
            for k in 0..c {
                gx += g[k] * ((1.0 - ay) * (v10[k] - v00[k]) + ay * (v11[k] - v01[k]));
                gy += g[k] * ((1.0 - ax) * (v01[k] - v00[k]) + ax * (v11[k] - v10[k]));
            }
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            let dl_du = Vector3::new(gx / u.z, gy / u.z, -(gx * sx + gy * sy) / u.z);
            let w = hinv_t * dl_du;
            // m += w ⊗ u
            for a in 0..3 {
                for b in 0..3 {
                    m[(a, b)] += w[a] * u[b];
                }
            }
        }
        m
    });
    let mut total = Matrix3::<f64>::zeros();
    for m in row_sums {
        total += m;
    }
    Ok((loss, -total))
}

/// Gradient of the configured loss with respect to the 8 parameters of the
/// normalized homography (`h33` fixed at 1).
pub fn loss_gradient(
    src: &OneHotMap,
    target: &OneHotMap,
    h: &Homography,
    cfg: &TopoLossConfig,
) -> Result<WarpGradient> {
    let hn = h.normalize()?;
    let (loss, full) = loss_gradient_full(src, target, &hn, cfg)?;
    let mut grad = [0.0; 8];
    for (i, g) in grad.iter_mut().enumerate() {
        *g = full[(i / 3, i % 3)];
    }
    Ok(WarpGradient { loss, grad })
}
