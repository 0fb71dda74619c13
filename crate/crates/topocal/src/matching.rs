//! Exhaustive template matching against a dictionary of warped maps.
//!
//! Scores every template with the configured metric and returns the
//! minimizer; ties break toward the lowest entry id. Scoring parallelizes
//! over entries with an index-ordered reduction so results are identical
//! across thread counts.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::loss::{topo_loss, LossKind, TopoLossConfig};
use crate::parallel::map_indexed;
use crate::raster::{load_map, to_onehot, OneHotMap, SemanticMap};

/// Pixel-based matching distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    TopMse,
}

impl Metric {
    pub fn to_kind(self) -> LossKind {
        match self {
            Metric::Mse => LossKind::Mse,
            Metric::TopMse => LossKind::TopMse,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Metric> {
        match s {
            "mse" => Ok(Metric::Mse),
            "topmse" => Ok(Metric::TopMse),
            other => Err(Error::InvalidParameter(format!(
                "unknown metric {other:?} (expected mse|topmse)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DictEntry {
    pub id: u32,
    pub template: SemanticMap,
    pub homography: Homography,
    onehot: OneHotMap,
}

impl DictEntry {
    pub fn onehot(&self) -> &OneHotMap {
        &self.onehot
    }
}

/// Ordered set of (template, homography) pairs sharing one shape.
#[derive(Debug, Clone)]
pub struct Dictionary {
    entries: Vec<DictEntry>,
    width: u32,
    height: u32,
    class_count: u8,
}

impl Dictionary {
    pub fn new(items: Vec<(u32, SemanticMap, Homography)>) -> Result<Dictionary> {
        let mut entries: Vec<DictEntry> = items
            .into_iter()
            .map(|(id, template, homography)| DictEntry {
                onehot: to_onehot(&template),
                id,
                template,
                homography,
            })
            .collect();
        entries.sort_by_key(|e| e.id);
        let (mut width, mut height, mut class_count) = (0, 0, 0);
        for (i, e) in entries.iter().enumerate() {
            if i == 0 {
                width = e.template.width();
                height = e.template.height();
                class_count = e.template.class_count();
            } else if e.template.width() != width
                || e.template.height() != height
                || e.template.class_count() != class_count
            {
                return Err(Error::InvalidInput(format!(
                    "template {} has shape {}x{}x{}, expected {}x{}x{}",
                    e.id,
                    e.template.width(),
                    e.template.height(),
                    e.template.class_count(),
                    width,
                    height,
                    class_count
                )));
            }
            if i > 0 && entries[i - 1].id == e.id {
                return Err(Error::InvalidInput(format!("duplicate entry id {}", e.id)));
            }
        }
        Ok(Dictionary {
            entries,
            width,
            height,
            class_count,
        })
    }

    /// Loads the dictionary split of a manifest.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Dictionary> {
        let items = manifest
            .split_entries(Split::Dictionary)
            .map(|e| {
                let map = load_map(&manifest.resolve(e))?;
                Ok((e.id, map, e.homography))
            })
            .collect::<Result<Vec<_>>>()?;
        Dictionary::new(items)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DictEntry] {
        &self.entries
    }

    pub fn by_id(&self, id: u32) -> Option<&DictEntry> {
        self.entries
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.entries[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub id: u32,
    pub score: f64,
    pub metric: Metric,
}

fn scores(
    query: &OneHotMap,
    dict: &Dictionary,
    metric: Metric,
    cfg: &TopoLossConfig,
) -> Result<Vec<f64>> {
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    if query.width() != dict.width
        || query.height() != dict.height
        || query.class_count() != dict.class_count
    {
        return Err(Error::InvalidInput(format!(
            "query shape {}x{}x{} does not match dictionary {}x{}x{}",
            query.width(),
            query.height(),
            query.class_count(),
            dict.width,
            dict.height,
            dict.class_count
        )));
    }
    let cfg = metric.to_kind().to_config(cfg);
    cfg.validate()?;
    map_indexed(dict.len(), |i| {
        topo_loss(query, &dict.entries[i].onehot, &cfg)
    })
    .into_iter()
    .collect()
}

/// Exhaustive nearest template under `metric`; ties go to the lowest id.
pub fn match_map(
    query: &SemanticMap,
    dict: &Dictionary,
    metric: Metric,
    cfg: &TopoLossConfig,
) -> Result<MatchResult> {
    let q = to_onehot(query);
    let s = scores(&q, dict, metric, cfg)?;
    let mut best = 0;
    for (i, &v) in s.iter().enumerate() {
        if v < s[best] {
            best = i;
        }
    }
    Ok(MatchResult {
        id: dict.entries[best].id,
        score: s[best],
        metric,
    })
}

/// The `k` lowest-scoring entries, ascending, stable in id on ties.
/// `k` larger than the dictionary truncates to the full ranking.
pub fn match_topk(
    query: &SemanticMap,
    dict: &Dictionary,
    metric: Metric,
    cfg: &TopoLossConfig,
    k: usize,
) -> Result<Vec<MatchResult>> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let q = to_onehot(query);
    let s = scores(&q, dict, metric, cfg)?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| MatchResult {
            id: dict.entries[i].id,
            score: s[i],
            metric,
        })
        .collect())
}
