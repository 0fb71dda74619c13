//! Pixel-based losses (MSE, Dice) and their patch-decomposed topological
//! variants.
//!
//! The topological loss splits both maps into a `sqrt(N) x sqrt(N)` grid of
//! patches. Each patch contributes its own pixel loss plus, weighted by
//! `alpha`, the thresholded losses of its 3x3 patch neighborhood:
//!
//! `L_patch(i,j) = base(i,j) + alpha * sum_{k,l in {-1,0,1}} max(0, base(i+k, j+l) - beta)`
//!
//! and the total is the mean of `L_patch` over all N patches. The neighbor
//! sum includes the center term `(k,l) = (0,0)` by default; out-of-grid
//! neighbors are skipped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::raster::OneHotMap;

pub const DICE_EPSILON: f64 = 1e-6;

/// Pixel-based loss applied inside each patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLoss {
    Mse,
    Dice,
}

/// Parameters of the topological loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopoLossConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Number of patches; must be a perfect square.
    #[serde(default = "default_patch_count")]
    pub patch_count: u32,
    #[serde(default = "default_base")]
    pub base: BaseLoss,
    /// Whether the neighbor sum includes the `(0,0)` term, as the formula
    /// is printed. Exposed because the intended behavior is ambiguous.
    #[serde(default = "default_include_center")]
    pub include_center: bool,
}

fn default_alpha() -> f64 {
    0.3
}
fn default_beta() -> f64 {
    0.3
}
fn default_patch_count() -> u32 {
    16
}
fn default_base() -> BaseLoss {
    BaseLoss::Mse
}
fn default_include_center() -> bool {
    true
}

impl Default for TopoLossConfig {
    fn default() -> Self {
        TopoLossConfig {
            alpha: default_alpha(),
            beta: default_beta(),
            patch_count: default_patch_count(),
            base: default_base(),
            include_center: default_include_center(),
        }
    }
}

impl TopoLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidInput(
                "alpha and beta must be non-negative".into(),
            ));
        }
        grid_side(self.patch_count)?;
        Ok(())
    }
}

/// Named loss selector used by matching, refinement and the harness.
/// The plain variants are the degenerate single-patch configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    TopMse,
    Dice,
    TopDice,
}

impl LossKind {
    /// Topological-loss configuration realizing this selector; `cfg`
    /// supplies alpha/beta/N for the topological variants.
    pub fn to_config(self, cfg: &TopoLossConfig) -> TopoLossConfig {
        match self {
            LossKind::Mse => TopoLossConfig {
                alpha: 0.0,
                patch_count: 1,
                base: BaseLoss::Mse,
                ..*cfg
            },
            LossKind::Dice => TopoLossConfig {
                alpha: 0.0,
                patch_count: 1,
                base: BaseLoss::Dice,
                ..*cfg
            },
            LossKind::TopMse => TopoLossConfig {
                base: BaseLoss::Mse,
                ..*cfg
            },
            LossKind::TopDice => TopoLossConfig {
                base: BaseLoss::Dice,
                ..*cfg
            },
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "topmse" => Ok(LossKind::TopMse),
            "dice" => Ok(LossKind::Dice),
            "topdice" => Ok(LossKind::TopDice),
            other => Err(Error::InvalidInput(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// Rectangular pixel region of one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

/// Exact `sqrt(N) x sqrt(N)` partition of an image. Remainder pixels go to
/// the last patch of each axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    side: u32,
    rects: Vec<PatchRect>,
}

impl PatchGrid {
    pub fn side(&self) -> u32 {
        self.side
    }

    pub fn patch_count(&self) -> u32 {
        self.side * self.side
    }

    /// Patch at grid position (i, j) = (column, row).
    pub fn rect(&self, i: u32, j: u32) -> Result<PatchRect> {
        if i >= self.side || j >= self.side {
            return Err(Error::InvalidInput(format!(
                "patch index ({i},{j}) out of range for a {0}x{0} grid",
                self.side
            )));
        }
        Ok(self.rects[(j * self.side + i) as usize])
    }

    pub fn rects(&self) -> &[PatchRect] {
        &self.rects
    }

    /// Number of in-grid patches in the 3x3 neighborhood of (i, j).
    fn neighbor_count(&self, i: u32, j: u32, include_center: bool) -> u32 {
        let mut n = 0;
        for dj in -1i64..=1 {
            for di in -1i64..=1 {
                if !include_center && di == 0 && dj == 0 {
                    continue;
                }
                let ni = i as i64 + di;
                let nj = j as i64 + dj;
                if ni >= 0 && nj >= 0 && (ni as u32) < self.side && (nj as u32) < self.side {
                    n += 1;
                }
            }
        }
        n
    }
}

fn grid_side(patch_count: u32) -> Result<u32> {
    if patch_count == 0 {
        return Err(Error::InvalidInput("patch count must be at least 1".into()));
    }
    let side = (patch_count as f64).sqrt().round() as u32;
    if side * side != patch_count {
        return Err(Error::InvalidInput(format!(
            "patch count {patch_count} is not a perfect square"
        )));
    }
    Ok(side)
}

/// Partition a `width x height` image into `patch_count` patches.
pub fn grid_for(width: u32, height: u32, patch_count: u32) -> Result<PatchGrid> {
    let side = grid_side(patch_count)?;
    if side > width.min(height) {
        return Err(Error::InvalidInput(format!(
            "image {width}x{height} too small for a {side}x{side} patch grid"
        )));
    }
    let axis = |dim: u32| -> Vec<(u32, u32)> {
        let base = dim / side;
        (0..side)
            .map(|k| {
                let start = k * base;
                let len = if k == side - 1 { dim - start } else { base };
                (start, len)
            })
            .collect()
    };
    let cols = axis(width);
    let rows = axis(height);
    let mut rects = Vec::with_capacity((side * side) as usize);
    for &(y0, h) in &rows {
        for &(x0, w) in &cols {
            rects.push(PatchRect {
                x0,
                y0,
                width: w,
                height: h,
            });
        }
    }
    Ok(PatchGrid { side, rects })
}

/// Patch grid for a one-hot map.
pub fn split_patches(m: &OneHotMap, patch_count: u32) -> Result<PatchGrid> {
    grid_for(m.width(), m.height(), patch_count)
}

fn check_shapes(a: &OneHotMap, b: &OneHotMap) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.class_count(),
            b.width(),
            b.height(),
            b.class_count()
        )));
    }
    Ok(())
}

/// Compensated (Kahan) accumulator; keeps patch-mean identities tight.
#[derive(Default, Clone, Copy)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    #[inline]
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

fn base_loss_rect(a: &OneHotMap, b: &OneHotMap, r: &PatchRect, base: BaseLoss) -> f64 {
    let c = a.class_count() as usize;
    match base {
        BaseLoss::Mse => {
            let mut acc = Kahan::default();
            for y in r.y0..r.y0 + r.height {
                for x in r.x0..r.x0 + r.width {
                    let pa = a.pixel(x, y);
                    let pb = b.pixel(x, y);
                    for k in 0..c {
                        let d = pa[k] - pb[k];
                        acc.add(d * d);
                    }
                }
            }
            acc.sum / ((r.width as usize * r.height as usize * c) as f64)
        }
        BaseLoss::Dice => {
            let mut total = Kahan::default();
            for k in 0..c {
                let mut ab = Kahan::default();
                let mut aa = Kahan::default();
                let mut bb = Kahan::default();
                for y in r.y0..r.y0 + r.height {
                    for x in r.x0..r.x0 + r.width {
                        let va = a.pixel(x, y)[k];
                        let vb = b.pixel(x, y)[k];
                        ab.add(va * vb);
                        aa.add(va * va);
                        bb.add(vb * vb);
                    }
                }
                total.add(1.0 - (2.0 * ab.sum + DICE_EPSILON) / (aa.sum + bb.sum + DICE_EPSILON));
            }
            total.sum / c as f64
        }
    }
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &OneHotMap, b: &OneHotMap) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(base_loss_rect(
        a,
        b,
        &PatchRect {
            x0: 0,
            y0: 0,
            width: a.width(),
            height: a.height(),
        },
        BaseLoss::Mse,
    ))
}

/// Smoothed Dice loss, averaged over channels.
pub fn dice(a: &OneHotMap, b: &OneHotMap) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(base_loss_rect(
        a,
        b,
        &PatchRect {
            x0: 0,
            y0: 0,
            width: a.width(),
            height: a.height(),
        },
        BaseLoss::Dice,
    ))
}

/// Base losses of every patch, row-major over the grid.
fn patch_base_losses(
    pred: &OneHotMap,
    gt: &OneHotMap,
    grid: &PatchGrid,
    base: BaseLoss,
) -> Vec<f64> {
    map_indexed(grid.rects.len(), |p| {
        base_loss_rect(pred, gt, &grid.rects[p], base)
    })
}

fn patch_loss_from_bases(bases: &[f64], grid: &PatchGrid, i: u32, j: u32, cfg: &TopoLossConfig) -> f64 {
    let side = grid.side;
    let own = bases[(j * side + i) as usize];
    let mut hinge = 0.0;
    for dj in -1i64..=1 {
        for di in -1i64..=1 {
            if !cfg.include_center && di == 0 && dj == 0 {
                continue;
            }
            let ni = i as i64 + di;
            let nj = j as i64 + dj;
            if ni >= 0 && nj >= 0 && (ni as u32) < side && (nj as u32) < side {
                let b = bases[(nj as u32 * side + ni as u32) as usize];
                hinge += (b - cfg.beta).max(0.0);
            }
        }
    }
    own + cfg.alpha * hinge
}

/// Loss of patch (i, j): its base loss plus the thresholded neighbor sum.
pub fn patch_loss(
    pred: &OneHotMap,
    gt: &OneHotMap,
    grid: &PatchGrid,
    i: u32,
    j: u32,
    cfg: &TopoLossConfig,
) -> Result<f64> {
    check_shapes(pred, gt)?;
    cfg.validate()?;
    grid.rect(i, j)?;
    let bases = patch_base_losses(pred, gt, grid, cfg.base);
    Ok(patch_loss_from_bases(&bases, grid, i, j, cfg))
}

/// Topological loss: mean of the patch losses over all N patches.
pub fn topo_loss(pred: &OneHotMap, gt: &OneHotMap, cfg: &TopoLossConfig) -> Result<f64> {
    check_shapes(pred, gt)?;
    cfg.validate()?;
    let grid = split_patches(pred, cfg.patch_count)?;
    let bases = patch_base_losses(pred, gt, &grid, cfg.base);
    let mut acc = Kahan::default();
    for j in 0..grid.side {
        for i in 0..grid.side {
            acc.add(patch_loss_from_bases(&bases, &grid, i, j, cfg));
        }
    }
    Ok(acc.sum / cfg.patch_count as f64)
}

/// Loss value together with its gradient with respect to every entry of
/// `pred` (same pixel-major layout). Used by the warp gradient chain rule.
pub(crate) fn topo_loss_backward(
    pred: &OneHotMap,
    gt: &OneHotMap,
    cfg: &TopoLossConfig,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(pred, gt)?;
    cfg.validate()?;
    let grid = split_patches(pred, cfg.patch_count)?;
    let bases = patch_base_losses(pred, gt, &grid, cfg.base);
    let side = grid.side;
    let n = cfg.patch_count as f64;

    let mut acc = Kahan::default();
    for j in 0..side {
        for i in 0..side {
            acc.add(patch_loss_from_bases(&bases, &grid, i, j, cfg));
        }
    }
    let loss = acc.sum / n;

    // dL/dbase_P = (1/N) * (1 + alpha * m_P * [base_P > beta]) where m_P is
    // the number of in-grid patches whose neighborhood contains P (the
    // neighbor relation is symmetric).
    let c = pred.class_count() as usize;
    let w = pred.width() as usize;
    let mut grad = vec![0.0; pred.data().len()];
    for j in 0..side {
        for i in 0..side {
            let idx = (j * side + i) as usize;
            let m_p = grid.neighbor_count(i, j, cfg.include_center) as f64;
            let mut coef = 1.0 / n;
            if bases[idx] > cfg.beta {
                coef += cfg.alpha * m_p / n;
            }
            let r = grid.rects[idx];
            match cfg.base {
                BaseLoss::Mse => {
                    let scale = coef * 2.0 / ((r.width as usize * r.height as usize * c) as f64);
                    for y in r.y0..r.y0 + r.height {
                        for x in r.x0..r.x0 + r.width {
                            let pa = pred.pixel(x, y);
                            let pb = gt.pixel(x, y);
                            let base_off = (y as usize * w + x as usize) * c;
                            for k in 0..c {
                                grad[base_off + k] += scale * (pa[k] - pb[k]);
                            }
                        }
                    }
                }
                BaseLoss::Dice => {
                    // Per-channel sums first, then the quotient-rule pass.
                    let mut ab = vec![0.0; c];
                    let mut aa = vec![0.0; c];
                    let mut bb = vec![0.0; c];
                    for y in r.y0..r.y0 + r.height {
                        for x in r.x0..r.x0 + r.width {
                            let pa = pred.pixel(x, y);
                            let pb = gt.pixel(x, y);
                            for k in 0..c {
                                ab[k] += pa[k] * pb[k];
                                aa[k] += pa[k] * pa[k];
                                bb[k] += pb[k] * pb[k];
                            }
                        }
                    }
                    let num: Vec<f64> = (0..c).map(|k| 2.0 * ab[k] + DICE_EPSILON).collect();
                    let den: Vec<f64> = (0..c).map(|k| aa[k] + bb[k] + DICE_EPSILON).collect();
                    for y in r.y0..r.y0 + r.height {
                        for x in r.x0..r.x0 + r.width {
                            let pa = pred.pixel(x, y);
                            let pb = gt.pixel(x, y);
                            let base_off = (y as usize * w + x as usize) * c;
                            for k in 0..c {
                                let d = (2.0 * pa[k] * num[k] - 2.0 * pb[k] * den[k])
                                    / (den[k] * den[k]);
                                grad[base_off + k] += coef * d / c as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((loss, grad))
}
