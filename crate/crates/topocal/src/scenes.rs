//! Procedural bird's-eye maps: five intersection layouts and a sports field.
//!
//! Classes follow the raster palette: 0 background, 1 road, 2 terrain,
//! 3 bicycle path. Everything is pure and deterministic so datasets built
//! from these maps are reproducible.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BirdseyeFrame;
use crate::raster::SemanticMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    /// Four-way crossing.
    Cross,
    /// T-junction.
    Tee,
    /// Diagonal X crossing.
    Diagonal,
    /// Roundabout with four arms.
    Roundabout,
    /// Two parallel roads joined by a staggered connector.
    Offset,
    /// Sports field with markings.
    Field,
}

pub const INTERSECTION_KINDS: [SceneKind; 5] = [
    SceneKind::Cross,
    SceneKind::Tee,
    SceneKind::Diagonal,
    SceneKind::Roundabout,
    SceneKind::Offset,
];

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<SceneKind> {
        match s {
            "cross" => Ok(SceneKind::Cross),
            "tee" => Ok(SceneKind::Tee),
            "diagonal" => Ok(SceneKind::Diagonal),
            "roundabout" => Ok(SceneKind::Roundabout),
            "offset" => Ok(SceneKind::Offset),
            "field" => Ok(SceneKind::Field),
            other => Err(Error::InvalidParameter(format!(
                "unknown scene kind {other:?} (expected cross|tee|diagonal|roundabout|offset|field)"
            ))),
        }
    }
}

/// World frame used for these maps: 1 unit per pixel, centered at the
/// origin, north up.
pub fn scene_frame(size: u32) -> BirdseyeFrame {
    BirdseyeFrame {
        units_per_pixel: 1.0,
        center: (0.0, 0.0),
        map_width: size,
        map_height: size,
    }
}

/// Renders a scene at `size`×`size`. Layouts scale with the size.
pub fn scene(kind: SceneKind, size: u32) -> Result<SemanticMap> {
    if size < 16 {
        return Err(Error::InvalidParameter(format!(
            "scene size {size} too small (minimum 16)"
        )));
    }
    let s = size as f64;
    let mut m = SemanticMap::filled(size, size, 4, 0)?;
    // Per-pixel classifier over normalized coordinates in [-1, 1].
    let label_at = |nx: f64, ny: f64| -> u8 {
        match kind {
            SceneKind::Cross => cross(nx, ny),
            SceneKind::Tee => tee(nx, ny),
            SceneKind::Diagonal => diagonal(nx, ny),
            SceneKind::Roundabout => roundabout(nx, ny),
            SceneKind::Offset => offset(nx, ny),
            SceneKind::Field => field(nx, ny),
        }
    };
    for y in 0..size {
        for x in 0..size {
            let nx = (x as f64 + 0.5) / s * 2.0 - 1.0;
            let ny = (y as f64 + 0.5) / s * 2.0 - 1.0;
            m.set(x, y, label_at(nx, ny));
        }
    }
    Ok(m)
}

const ROAD_HALF: f64 = 0.14;
const BIKE_HALF: f64 = 0.22;
const GREEN: f64 = 0.85;

fn in_band(v: f64, half: f64) -> bool {
    v.abs() <= half
}

fn terrain_or_bg(nx: f64, ny: f64) -> u8 {
    if nx.abs() <= GREEN && ny.abs() <= GREEN {
        2
    } else {
        0
    }
}

fn cross(nx: f64, ny: f64) -> u8 {
    if in_band(nx, ROAD_HALF) || in_band(ny, ROAD_HALF) {
        1
    } else if in_band(nx, BIKE_HALF) || in_band(ny, BIKE_HALF) {
        3
    } else {
        terrain_or_bg(nx, ny)
    }
}

fn tee(nx: f64, ny: f64) -> u8 {
    let stem = in_band(nx, ROAD_HALF) && ny >= -ROAD_HALF;
    let bar = in_band(ny + 0.3, ROAD_HALF);
    if stem || bar {
        1
    } else if (in_band(nx, BIKE_HALF) && ny >= -BIKE_HALF - 0.3)
        || in_band(ny + 0.3, BIKE_HALF)
    {
        3
    } else {
        terrain_or_bg(nx, ny)
    }
}

fn diagonal(nx: f64, ny: f64) -> u8 {
    let d1 = (nx - ny).abs() / std::f64::consts::SQRT_2;
    let d2 = (nx + ny).abs() / std::f64::consts::SQRT_2;
    if d1 <= ROAD_HALF || d2 <= ROAD_HALF {
        1
    } else if d1 <= BIKE_HALF || d2 <= BIKE_HALF {
        3
    } else {
        terrain_or_bg(nx, ny)
    }
}

fn roundabout(nx: f64, ny: f64) -> u8 {
    let r = (nx * nx + ny * ny).sqrt();
    let ring = (r - 0.42).abs() <= ROAD_HALF;
    let arm = (in_band(nx, ROAD_HALF) || in_band(ny, ROAD_HALF)) && r >= 0.42;
    if ring || arm {
        1
    } else if r < 0.42 - ROAD_HALF {
        2
    } else if (r - 0.42).abs() <= BIKE_HALF
        || ((in_band(nx, BIKE_HALF) || in_band(ny, BIKE_HALF)) && r >= 0.42)
    {
        3
    } else {
        terrain_or_bg(nx, ny)
    }
}

fn offset(nx: f64, ny: f64) -> u8 {
    let upper = in_band(ny + 0.45, ROAD_HALF);
    let lower = in_band(ny - 0.45, ROAD_HALF);
    let link = in_band(nx - 0.25, ROAD_HALF) && (-0.45..=0.45).contains(&ny);
    if upper || lower || link {
        1
    } else if in_band(ny + 0.45, BIKE_HALF)
        || in_band(ny - 0.45, BIKE_HALF)
        || (in_band(nx - 0.25, BIKE_HALF) && (-0.55..=0.55).contains(&ny))
    {
        3
    } else {
        terrain_or_bg(nx, ny)
    }
}

fn field(nx: f64, ny: f64) -> u8 {
    let inside = nx.abs() <= 0.9 && ny.abs() <= 0.6;
    if !inside {
        return 0;
    }
    let line = 0.025;
    // Touch lines, halfway line, center circle, and two penalty boxes.
    let border = (nx.abs() - 0.9).abs() <= line || (ny.abs() - 0.6).abs() <= line;
    let halfway = nx.abs() <= line;
    let circle = ((nx * nx + ny * ny).sqrt() - 0.2).abs() <= line;
    let box_x = 0.9 - 0.25;
    let in_box_band = ny.abs() <= 0.3;
    let boxes = ((nx.abs() - box_x).abs() <= line && in_box_band)
        || ((ny.abs() - 0.3).abs() <= line && nx.abs() >= box_x);
    if border || halfway || circle || boxes {
        1
    } else {
        2
    }
}
