//! Indexed-palette PNG persistence for semantic maps.
//!
//! Maps are stored as 8-bit indexed PNGs whose palette index is the class
//! id, with a fixed palette (background black, road gray, terrain green,
//! bicycle-path red). An optional JSON sidecar next to the PNG records
//! class names and the world placement of the raster.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::SemanticMap;

pub const PALETTE_RGB: [[u8; 3]; 4] = [[0, 0, 0], [128, 128, 128], [0, 160, 0], [200, 0, 0]];

pub const DEFAULT_CLASS_NAMES: [&str; 4] = ["background", "road", "terrain", "bicycle-path"];

/// JSON sidecar recording class names and the world scale of a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub class_names: Vec<String>,
    pub units_per_pixel: f64,
    /// World coordinate of the raster center.
    pub center: (f64, f64),
}

impl Default for MapSidecar {
    fn default() -> Self {
        MapSidecar {
            class_names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            units_per_pixel: 1.0,
            center: (0.0, 0.0),
        }
    }
}

fn sidecar_path(png_path: &Path) -> PathBuf {
    png_path.with_extension("json")
}

fn palette_bytes(class_count: u8) -> Vec<u8> {
    (0..class_count as usize)
        .flat_map(|c| PALETTE_RGB[c % PALETTE_RGB.len()])
        .collect()
}

/// Writes an indexed-palette PNG, plus a JSON sidecar when given.
pub fn save_map(m: &SemanticMap, path: &Path, sidecar: Option<&MapSidecar>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), m.width(), m.height());
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(palette_bytes(m.class_count()));
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Png {
            path: path.into(),
            message: e.to_string(),
        })?;
    writer.write_image_data(m.labels()).map_err(|e| Error::Png {
        path: path.into(),
        message: e.to_string(),
    })?;
    writer.finish().map_err(|e| Error::Png {
        path: path.into(),
        message: e.to_string(),
    })?;

    if let Some(sc) = sidecar {
        let sp = sidecar_path(path);
        let json = serde_json::to_vec_pretty(sc)?;
        std::fs::write(&sp, json).map_err(|e| Error::io(sp, e))?;
    }
    Ok(())
}

/// Loads an indexed-palette PNG as a semantic map. The palette index is the
/// class id; the class count is the palette length.
pub fn load_map(path: &Path) -> Result<SemanticMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Png {
        path: path.into(),
        message: e.to_string(),
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png {
        path: path.into(),
        message: e.to_string(),
    })?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png {
            path: path.into(),
            message: format!(
                "expected 8-bit indexed PNG, got {:?}/{:?}",
                info.color_type, info.bit_depth
            ),
        });
    }
    let palette = reader
        .info()
        .palette
        .as_ref()
        .ok_or_else(|| Error::Png {
            path: path.into(),
            message: "indexed PNG without palette".into(),
        })?;
    let class_count = (palette.len() / 3).min(255) as u8;
    buf.truncate(info.buffer_size());
    SemanticMap::new(info.width, info.height, class_count, buf)
}

/// Loads the JSON sidecar of a map, if one exists next to it.
pub fn load_sidecar(png_path: &Path) -> Result<Option<MapSidecar>> {
    let sp = sidecar_path(png_path);
    if !sp.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
    Ok(Some(serde_json::from_slice(&bytes)?))
}
