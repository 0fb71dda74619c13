//! Semantic-map rasters, homography warping and IoU evaluation.
//!
//! Label maps warp with nearest-neighbor sampling; their continuous
//! one-hot relaxation warps with bilinear sampling so losses stay
//! differentiable with respect to the homography. Both warps iterate over
//! destination pixels (inverse mapping) and sample at pixel centers
//! `(x + 0.5, y + 0.5)`. Source coordinates outside bounds read as
//! background (class 0).

mod gradient;
mod io;

pub use gradient::{loss_gradient, loss_gradient_full, WarpGradient};
pub use io::{load_map, load_sidecar, save_map, MapSidecar, DEFAULT_CLASS_NAMES, PALETTE_RGB};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::parallel::map_indexed;

/// W x H raster of class labels. Class 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    width: u32,
    height: u32,
    class_count: u8,
    labels: Vec<u8>,
}

impl SemanticMap {
    pub fn new(width: u32, height: u32, class_count: u8, labels: Vec<u8>) -> Result<SemanticMap> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("map dimensions must be positive".into()));
        }
        if class_count == 0 {
            return Err(Error::InvalidInput("class count must be positive".into()));
        }
        if labels.len() != (width as usize) * (height as usize) {
            return Err(Error::InvalidInput(format!(
                "label buffer has {} entries, expected {}",
                labels.len(),
                (width as usize) * (height as usize)
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(SemanticMap {
            width,
            height,
            class_count,
            labels,
        })
    }

    /// Constant-label map.
    pub fn filled(width: u32, height: u32, class_count: u8, label: u8) -> Result<SemanticMap> {
        SemanticMap::new(
            width,
            height,
            class_count,
            vec![label; (width as usize) * (height as usize)],
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn class_count(&self) -> u8 {
        self.class_count
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[(y as usize) * (self.width as usize) + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, label: u8) {
        debug_assert!(label < self.class_count);
        self.labels[(y as usize) * (self.width as usize) + x as usize] = label;
    }

    pub fn same_shape(&self, other: &SemanticMap) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.class_count == other.class_count
    }
}

/// Continuous per-pixel class weights in `[0, 1]`, pixel-major layout
/// (`data[(y*w + x)*C + c]`). Weights of every pixel sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMap {
    width: u32,
    height: u32,
    class_count: u8,
    data: Vec<f64>,
}

impl OneHotMap {
    pub fn new(width: u32, height: u32, class_count: u8, data: Vec<f64>) -> Result<OneHotMap> {
        let expected = (width as usize) * (height as usize) * class_count as usize;
        if data.len() != expected {
            return Err(Error::InvalidInput(format!(
                "one-hot buffer has {} entries, expected {expected}",
                data.len()
            )));
        }
        Ok(OneHotMap {
            width,
            height,
            class_count,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn class_count(&self) -> u8 {
        self.class_count
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Class-weight slice of one pixel.
    pub fn pixel(&self, x: u32, y: u32) -> &[f64] {
        let c = self.class_count as usize;
        let base = ((y as usize) * (self.width as usize) + x as usize) * c;
        &self.data[base..base + c]
    }

    pub fn same_shape(&self, other: &OneHotMap) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.class_count == other.class_count
    }
}

/// Exact one-hot form of a label map.
pub fn to_onehot(m: &SemanticMap) -> OneHotMap {
    let c = m.class_count as usize;
    let mut data = vec![0.0; m.labels.len() * c];
    for (i, &label) in m.labels.iter().enumerate() {
        data[i * c + label as usize] = 1.0;
    }
    OneHotMap {
        width: m.width,
        height: m.height,
        class_count: m.class_count,
        data,
    }
}

/// Per-pixel argmax; ties resolve to the lowest class id.
pub fn from_onehot(o: &OneHotMap) -> SemanticMap {
    let c = o.class_count as usize;
    let n = (o.width as usize) * (o.height as usize);
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let px = &o.data[i * c..(i + 1) * c];
        let mut best = 0usize;
        for k in 1..c {
            if px[k] > px[best] {
                best = k;
            }
        }
        labels[i] = best as u8;
    }
    SemanticMap {
        width: o.width,
        height: o.height,
        class_count: o.class_count,
        labels,
    }
}

/// Inverse-mapped source coordinates of an output pixel center, or `None`
/// when the point maps to infinity.
#[inline]
pub(crate) fn source_point(hinv: &nalgebra::Matrix3<f64>, x: u32, y: u32) -> Option<(f64, f64)> {
    let px = x as f64 + 0.5;
    let py = y as f64 + 0.5;
    let u = hinv * nalgebra::Vector3::new(px, py, 1.0);
    if u.z.abs() < 1e-300 {
        return None;
    }
    Some((u.x / u.z, u.y / u.z))
}

/// Warps a label map: inverse mapping with nearest-neighbor sampling.
pub fn warp_labels(src: &SemanticMap, h: &Homography, out_size: (u32, u32)) -> Result<SemanticMap> {
    let (ow, oh) = out_size;
    if ow == 0 || oh == 0 {
        return Err(Error::InvalidInput("output size must be positive".into()));
    }
    let hinv = *h.invert()?.matrix();
    let (sw, sh) = (src.width as i64, src.height as i64);
    let rows = map_indexed(oh as usize, |y| {
        let mut row = vec![0u8; ow as usize];
        for x in 0..ow {
            let label = match source_point(&hinv, x, y as u32) {
                Some((sx, sy)) => {
                    let ix = sx.floor();
                    let iy = sy.floor();
                    if ix >= 0.0 && iy >= 0.0 && (ix as i64) < sw && (iy as i64) < sh {
                        src.get(ix as u32, iy as u32)
                    } else {
                        0
                    }
                }
                None => 0,
            };
            row[x as usize] = label;
        }
        row
    });
    SemanticMap::new(ow, oh, src.class_count, rows.concat())
}

/// The four bilinear taps of a source point: integer cell corner, fractional
/// offsets. Sampling happens at pixel centers, hence the half-pixel shift.
#[inline]
pub(crate) fn bilinear_cell(sx: f64, sy: f64) -> (i64, i64, f64, f64) {
    let fx = sx - 0.5;
    let fy = sy - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    (x0 as i64, y0 as i64, fx - x0, fy - y0)
}

/// Warps a one-hot map with bilinear sampling per class channel.
/// Out-of-bounds taps contribute their weight to the background class.
pub fn warp_onehot(src: &OneHotMap, h: &Homography, out_size: (u32, u32)) -> Result<OneHotMap> {
    let (ow, oh) = out_size;
    if ow == 0 || oh == 0 {
        return Err(Error::InvalidInput("output size must be positive".into()));
    }
    let hinv = *h.invert()?.matrix();
    let c = src.class_count as usize;
    let (sw, sh) = (src.width as i64, src.height as i64);
    let rows = map_indexed(oh as usize, |y| {
        let mut row = vec![0.0f64; ow as usize * c];
        for x in 0..ow {
            let out_px = &mut row[(x as usize) * c..(x as usize + 1) * c];
            match source_point(&hinv, x, y as u32) {
                Some((sx, sy)) => {
                    let (x0, y0, ax, ay) = bilinear_cell(sx, sy);
                    let taps = [
                        (x0, y0, (1.0 - ax) * (1.0 - ay)),
                        (x0 + 1, y0, ax * (1.0 - ay)),
                        (x0, y0 + 1, (1.0 - ax) * ay),
                        (x0 + 1, y0 + 1, ax * ay),
                    ];
                    for (tx, ty, w) in taps {
                        if tx >= 0 && ty >= 0 && tx < sw && ty < sh {
                            let sp = src.pixel(tx as u32, ty as u32);
                            for k in 0..c {
                                out_px[k] += w * sp[k];
                            }
                        } else {
                            out_px[0] += w;
                        }
                    }
                }
                None => out_px[0] = 1.0,
            }
        }
        row
    });
    OneHotMap::new(ow, oh, src.class_count, rows.concat())
}

/// Per-class and mean intersection-over-union.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present classes excluding background.
    pub mean_foreground: f64,
    /// Mean over all present classes including background.
    pub mean_all: f64,
}

impl IouReport {
    pub fn mean(&self, include_background: bool) -> f64 {
        if include_background {
            self.mean_all
        } else {
            self.mean_foreground
        }
    }
}

/// IoU between two label maps. Classes absent from both maps are excluded
/// from the means; an empty mean reads as 1.0 (nothing to disagree on).
pub fn iou(pred: &SemanticMap, gt: &SemanticMap) -> Result<IouReport> {
    if !pred.same_shape(gt) {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            pred.width, pred.height, pred.class_count, gt.width, gt.height, gt.class_count
        )));
    }
    let c = pred.class_count as usize;
    let mut inter = vec![0u64; c];
    let mut union = vec![0u64; c];
    for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
        if a == b {
            inter[a as usize] += 1;
            union[a as usize] += 1;
        } else {
            union[a as usize] += 1;
            union[b as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            if union[k] == 0 {
                None
            } else {
                Some(inter[k] as f64 / union[k] as f64)
            }
        })
        .collect();
    let mean_of = |skip_bg: bool| {
        let vals: Vec<f64> = per_class
            .iter()
            .enumerate()
            .filter(|(k, v)| v.is_some() && !(skip_bg && *k == 0))
            .map(|(_, v)| v.unwrap())
            .collect();
        if vals.is_empty() {
            1.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    Ok(IouReport {
        mean_foreground: mean_of(true),
        mean_all: mean_of(false),
        per_class,
    })
}
