//! Synthetic dataset generation.
//!
//! Samples camera-parameter grids (inclusive-endpoint cartesian products),
//! builds the ground-plane homography for each sample, warps the bird's-eye
//! map into the virtual camera, and persists the result as indexed PNGs plus
//! a JSON manifest with train/test/dictionary split tags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{homography_from_params, BirdseyeFrame, CameraParams, Homography};
use crate::parallel::map_indexed;
use crate::raster::{save_map, warp_labels, SemanticMap};

pub const GENERATOR_VERSION: &str = "1";

/// Inclusive sampling range for one camera parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl AxisSpec {
    pub fn new(min: f64, max: f64, step: f64) -> AxisSpec {
        AxisSpec { min, max, step }
    }

    /// A degenerate range holding a single value.
    pub fn point(v: f64) -> AxisSpec {
        AxisSpec {
            min: v,
            max: v,
            step: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "axis step must be positive, got {}",
                self.step
            )));
        }
        if !(self.min <= self.max) {
            return Err(Error::InvalidSpec(format!(
                "axis range [{}, {}] is empty",
                self.min, self.max
            )));
        }
        Ok(())
    }

    /// Number of grid values; both endpoints are included when the span is a
    /// multiple of the step (a small relative tolerance absorbs float error).
    pub fn count(&self) -> u64 {
        let span = (self.max - self.min) / self.step;
        (span + 1e-9).floor() as u64 + 1
    }

    pub fn value(&self, i: u64) -> f64 {
        self.min + self.step * i as f64
    }
}

fn default_x() -> AxisSpec {
    AxisSpec::point(0.0)
}

fn default_y() -> AxisSpec {
    AxisSpec::point(0.0)
}

fn default_z() -> AxisSpec {
    AxisSpec::point(50.0)
}

/// How many tuples to draw from the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleCount {
    Count(u64),
    #[serde(with = "all_marker")]
    All,
}

mod all_marker {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str("all")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<(), D::Error> {
        let s = String::deserialize(de)?;
        if s == "all" {
            Ok(())
        } else {
            Err(de::Error::custom(format!(
                "expected \"all\" or an integer sample count, got {s:?}"
            )))
        }
    }
}

/// Cartesian sampling grid over the virtual camera parameters.
///
/// The position axes default to single points so purely pan/tilt/focal grids
/// stay terse in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub pan: AxisSpec,
    pub tilt: AxisSpec,
    pub focal: AxisSpec,
    #[serde(default = "default_x")]
    pub x: AxisSpec,
    #[serde(default = "default_y")]
    pub y: AxisSpec,
    #[serde(default = "default_z")]
    pub z: AxisSpec,
    pub sample_count: SampleCount,
    pub rng_seed: u64,
}

impl GridSpec {
    fn axes(&self) -> [&AxisSpec; 6] {
        // Lexicographic axis order: pan varies slowest, z fastest.
        [&self.pan, &self.tilt, &self.focal, &self.x, &self.y, &self.z]
    }

    pub fn validate(&self) -> Result<()> {
        for axis in self.axes() {
            axis.validate()?;
        }
        let card = self.cardinality()?;
        if let SampleCount::Count(n) = self.sample_count {
            if n > card {
                return Err(Error::InvalidSpec(format!(
                    "sample_count {n} exceeds grid cardinality {card}"
                )));
            }
        }
        Ok(())
    }

    pub fn cardinality(&self) -> Result<u64> {
        let mut card: u64 = 1;
        for axis in self.axes() {
            card = card.checked_mul(axis.count()).ok_or_else(|| {
                Error::InvalidSpec("grid cardinality overflows u64".into())
            })?;
        }
        Ok(card)
    }

    /// Tuple at a lexicographic grid index (pan slowest, z fastest).
    pub fn params_at(&self, mut idx: u64) -> CameraParams {
        let axes = self.axes();
        let counts: Vec<u64> = axes.iter().map(|a| a.count()).collect();
        let mut vals = [0.0; 6];
        for i in (0..6).rev() {
            vals[i] = axes[i].value(idx % counts[i]);
            idx /= counts[i];
        }
        CameraParams::new(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5])
    }
}

/// Full cartesian product in lexicographic axis order.
pub fn enumerate_grid(spec: &GridSpec) -> Result<Vec<CameraParams>> {
    spec.validate()?;
    let card = spec.cardinality()?;
    if card > u32::MAX as u64 {
        return Err(Error::InvalidSpec(format!(
            "grid cardinality {card} too large to enumerate in memory"
        )));
    }
    Ok((0..card).map(|i| spec.params_at(i)).collect())
}

/// Uniform sample without replacement, in grid order, seeded by
/// `spec.rng_seed`. `SampleCount::All` preserves the full enumeration.
pub fn sample_grid(spec: &GridSpec) -> Result<Vec<CameraParams>> {
    spec.validate()?;
    let card = spec.cardinality()?;
    let n = match spec.sample_count {
        SampleCount::All => return enumerate_grid(spec),
        SampleCount::Count(n) => n,
    };
    if card > usize::MAX as u64 {
        return Err(Error::InvalidSpec("grid cardinality exceeds usize".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.rng_seed);
    let mut idx = rand::seq::index::sample(&mut rng, card as usize, n as usize).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| spec.params_at(i as u64)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Dictionary,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Dictionary => "dictionary",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub dictionary: usize,
}

impl SplitCounts {
    pub fn new(train: usize, test: usize, dictionary: usize) -> SplitCounts {
        SplitCounts {
            train,
            test,
            dictionary,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.test + self.dictionary
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u32,
    pub split: Split,
    pub params: CameraParams,
    pub homography: Homography,
    /// Relative to the manifest's directory unless absolute.
    pub map_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_map: String,
    pub generator_version: String,
    pub seed: u64,
    pub frame: BirdseyeFrame,
    pub out_width: u32,
    pub out_height: u32,
    pub class_count: u8,
    #[serde(default)]
    pub mixed_dictionary: bool,
    /// Samples whose homography was degenerate and got skipped.
    #[serde(default)]
    pub skipped: Vec<CameraParams>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_slice(&bytes)?;
        m.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        for e in &m.entries {
            e.homography.invert()?;
        }
        Ok(m)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Absolute (or base-relative) path of an entry's stored map.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.map_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Path of the bird's-eye source map, resolved like entry paths.
    pub fn source_map_path(&self) -> PathBuf {
        let p = Path::new(&self.source_map);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split_entries(split).count()
    }
}

/// Samples the grid, warps the bird's-eye map under each sampled camera, and
/// writes maps plus the manifest under `out_dir`. Degenerate samples are
/// skipped (logged and recorded) with replacements drawn from the remaining
/// pool. Byte-deterministic for a fixed seed.
pub fn generate_dataset(
    birdseye: &SemanticMap,
    frame: &BirdseyeFrame,
    spec: &GridSpec,
    splits: SplitCounts,
    out_size: (u32, u32),
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if frame.map_width != birdseye.width() || frame.map_height != birdseye.height() {
        return Err(Error::InvalidInput(format!(
            "frame dimensions {}x{} do not match map {}x{}",
            frame.map_width,
            frame.map_height,
            birdseye.width(),
            birdseye.height()
        )));
    }
    if out_size.0 == 0 || out_size.1 == 0 {
        return Err(Error::InvalidSpec("output size must be nonzero".into()));
    }
    let mut pool = sample_grid(spec)?;
    if splits.total() > pool.len() {
        return Err(Error::InvalidSpec(format!(
            "split total {} exceeds sampled pool {}",
            splits.total(),
            pool.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    let pp = (out_size.0 as f64 / 2.0, out_size.1 as f64 / 2.0);
    let mut chosen: Vec<(CameraParams, Homography)> = Vec::with_capacity(splits.total());
    let mut skipped = Vec::new();
    for params in pool {
        if chosen.len() == splits.total() {
            break;
        }
        match params
            .validate()
            .and_then(|_| homography_from_params(&params, frame, pp))
        {
            Ok(h) => chosen.push((params, h)),
            Err(e) => {
                log::warn!("skipping degenerate sample {params:?}: {e}");
                skipped.push(params);
            }
        }
    }
    if chosen.len() < splits.total() {
        return Err(Error::InvalidSpec(format!(
            "only {} of {} requested samples are non-degenerate",
            chosen.len(),
            splits.total()
        )));
    }

    let maps_dir = out_dir.join("maps");
    fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;

    let warped = map_indexed(chosen.len(), |i| {
        warp_labels(birdseye, &chosen[i].1, out_size)
    });

    let mut entries = Vec::with_capacity(chosen.len());
    for (i, ((params, homography), warp)) in chosen.into_iter().zip(warped).enumerate() {
        let id = i as u32;
        let split = if i < splits.train {
            Split::Train
        } else if i < splits.train + splits.test {
            Split::Test
        } else {
            Split::Dictionary
        };
        let map_path = format!("maps/entry_{id:05}.png");
        save_map(&warp?, &out_dir.join(&map_path), None)?;
        entries.push(ManifestEntry {
            id,
            split,
            params,
            homography,
            map_path,
        });
    }

    let source_path = out_dir.join("birdseye.png");
    save_map(birdseye, &source_path, None)?;

    let manifest = DatasetManifest {
        source_map: "birdseye.png".into(),
        generator_version: GENERATOR_VERSION.into(),
        seed,
        frame: *frame,
        out_width: out_size.0,
        out_height: out_size.1,
        class_count: birdseye.class_count(),
        mixed_dictionary: false,
        skipped,
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Replaces `base`'s dictionary with a seeded uniform draw (without
/// replacement) from the donors' dictionary entries. Train/test splits are
/// kept; donor map paths are rewritten to absolute so the mixed manifest can
/// be saved anywhere.
pub fn mix_dictionaries(
    base: &DatasetManifest,
    donors: &[&DatasetManifest],
    count: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if donors.is_empty() {
        return Err(Error::InvalidSpec("no donor manifests given".into()));
    }
    let donor_entries: Vec<(usize, &ManifestEntry)> = donors
        .iter()
        .enumerate()
        .flat_map(|(di, d)| d.split_entries(Split::Dictionary).map(move |e| (di, e)))
        .collect();
    if count > donor_entries.len() {
        return Err(Error::InvalidSpec(format!(
            "requested {count} dictionary entries but donors provide only {}",
            donor_entries.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut picks =
        rand::seq::index::sample(&mut rng, donor_entries.len(), count).into_vec();
    picks.sort_unstable();

    let mut out = base.clone();
    out.mixed_dictionary = true;
    out.entries.retain(|e| e.split != Split::Dictionary);
    let mut next_id = out.entries.iter().map(|e| e.id + 1).max().unwrap_or(0);
    for pick in picks {
        let (di, entry) = donor_entries[pick];
        let abs = donors[di].resolve(entry);
        out.entries.push(ManifestEntry {
            id: next_id,
            split: Split::Dictionary,
            params: entry.params,
            homography: entry.homography,
            map_path: abs.to_string_lossy().into_owned(),
        });
        next_id += 1;
    }
    Ok(out)
}

/// Table-style grid used by the soccer configuration in the tests and docs.
pub fn soccer_grid(sample_count: SampleCount, rng_seed: u64) -> GridSpec {
    GridSpec {
        pan: AxisSpec::new(-25.0, 25.0, 1.0),
        tilt: AxisSpec::new(-15.0, 0.0, 1.0),
        focal: AxisSpec::new(500.0, 800.0, 50.0),
        x: AxisSpec::point(0.0),
        y: AxisSpec::point(0.0),
        z: AxisSpec::point(50.0),
        sample_count,
        rng_seed,
    }
}

/// Table-style grid used by the intersection configuration.
pub fn intersection_grid(sample_count: SampleCount, rng_seed: u64) -> GridSpec {
    GridSpec {
        pan: AxisSpec::new(-180.0, 180.0, 15.0),
        tilt: AxisSpec::new(-20.0, 0.0, 5.0),
        focal: AxisSpec::new(50.0, 500.0, 50.0),
        x: AxisSpec::new(600.0, 700.0, 10.0),
        y: AxisSpec::new(900.0, 1000.0, 10.0),
        z: AxisSpec::new(50.0, 100.0, 10.0),
        sample_count,
        rng_seed,
    }
}
