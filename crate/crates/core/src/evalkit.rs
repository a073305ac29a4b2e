//! Cross-camera retrieval evaluation (CMC and mAP).
//!
//! Gallery entries sharing both identity and camera with the query are
//! dropped before scoring. AP averages precision at each hit over the
//! filtered ranking.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{write_json_pretty, Sample};
use crate::error::{Error, Result};
use crate::model::EmbeddingNet;
use crate::numerics::{squared_distance, DenseMat};

/// Identity and camera of one query or gallery item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemLabel {
    pub pid: u32,
    pub cam: u32,
}

impl ItemLabel {
    pub fn of(sample: &Sample) -> Result<Self> {
        let pid = sample.person_id.ok_or_else(|| {
            Error::InvalidArgument(format!("sample {} has no person id", sample.index))
        })?;
        Ok(ItemLabel {
            pid,
            cam: sample.camera_id,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `cmc[r]` is the hit rate within the top `r + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub n_queries: usize,
    /// Queries without any valid cross-camera match.
    pub skipped: usize,
    pub per_query_ap: Vec<f64>,
}

impl EvalResult {
    /// CMC at 1-based `rank`, saturating at the last computed rank.
    pub fn cmc_at(&self, rank: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[rank.clamp(1, n) - 1],
        }
    }
}

/// One normalized embedding row per sample, evaluation mode.
pub fn extract_features(net: &EmbeddingNet, samples: &[Sample]) -> Result<DenseMat> {
    let rows = samples
        .iter()
        .map(|s| net.embed(&s.vec))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(DenseMat::zeros(0, net.embed_dim()));
    }
    DenseMat::from_rows(&rows)
}

/// Gallery indices by ascending Euclidean distance to `query`, ties by index.
pub fn rank_gallery(query: &[f64], gallery: &DenseMat) -> Result<Vec<usize>> {
    if gallery.rows() == 0 {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    if gallery.cols() != query.len() {
        return Err(Error::DimensionMismatch {
            what: "gallery feature",
            expected: query.len(),
            found: gallery.cols(),
        });
    }
    let dist: Vec<f64> = gallery
        .iter_rows()
        .map(|g| squared_distance(query, g))
        .collect();
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    Ok(order)
}

/// CMC over the first `ranks` positions and mAP.
pub fn cmc_map(
    query_feats: &DenseMat,
    query_labels: &[ItemLabel],
    gallery_feats: &DenseMat,
    gallery_labels: &[ItemLabel],
    ranks: usize,
) -> Result<EvalResult> {
    if query_feats.rows() != query_labels.len() {
        return Err(Error::DimensionMismatch {
            what: "query labels",
            expected: query_feats.rows(),
            found: query_labels.len(),
        });
    }
    if gallery_feats.rows() != gallery_labels.len() {
        return Err(Error::DimensionMismatch {
            what: "gallery labels",
            expected: gallery_feats.rows(),
            found: gallery_labels.len(),
        });
    }
    let mut hits = vec![0usize; ranks];
    let mut per_query_ap = Vec::with_capacity(query_labels.len());
    let mut skipped = 0;

    for (qf, q) in query_feats.iter_rows().zip(query_labels) {
        let order = rank_gallery(qf, gallery_feats)?;
        let filtered = order.into_iter().filter(|&g| {
            let l = gallery_labels[g];
            !(l.pid == q.pid && l.cam == q.cam)
        });
        let matches: Vec<bool> = filtered.map(|g| gallery_labels[g].pid == q.pid).collect();
        let relevant = matches.iter().filter(|m| **m).count();
        if relevant == 0 {
            skipped += 1;
            continue;
        }
        let first = matches.iter().position(|m| *m).expect("relevant > 0");
        if first < ranks {
            hits[first] += 1;
        }
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (pos, _) in matches.iter().enumerate().filter(|(_, m)| **m) {
            found += 1;
            precision_sum += found as f64 / (pos + 1) as f64;
        }
        per_query_ap.push(precision_sum / relevant as f64);
    }

    let n = per_query_ap.len();
    let mut cmc = Vec::with_capacity(ranks);
    let mut running = 0usize;
    for h in hits {
        running += h;
        cmc.push(if n == 0 {
            0.0
        } else {
            running as f64 / n as f64
        });
    }
    let map = if n == 0 {
        0.0
    } else {
        per_query_ap.iter().sum::<f64>() / n as f64
    };
    Ok(EvalResult {
        cmc,
        map,
        n_queries: n,
        skipped,
        per_query_ap,
    })
}

/// Embed a query/gallery split with `net` and score it over the full
/// gallery length.
pub fn evaluate(net: &EmbeddingNet, query: &[Sample], gallery: &[Sample]) -> Result<EvalResult> {
    let qf = extract_features(net, query)?;
    let gf = extract_features(net, gallery)?;
    let ql = query
        .iter()
        .map(ItemLabel::of)
        .collect::<Result<Vec<_>>>()?;
    let gl = gallery
        .iter()
        .map(ItemLabel::of)
        .collect::<Result<Vec<_>>>()?;
    cmc_map(&qf, &ql, &gf, &gl, gallery.len())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    map: f64,
    cmc: &'a [f64],
    n_queries: usize,
    skipped: usize,
}

/// `eval.json` with `{map, cmc, n_queries, skipped}` and `eval.csv` with
/// `rank,value` rows.
pub fn write_eval(result: &EvalResult, dir: &Path) -> Result<()> {
    write_json_pretty(
        &dir.join("eval.json"),
        &EvalSummary {
            map: result.map,
            cmc: &result.cmc,
            n_queries: result.n_queries,
            skipped: result.skipped,
        },
    )?;
    let mut csv = String::from("rank,value\n");
    for (r, v) in result.cmc.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", r + 1, v));
    }
    let path = dir.join("eval.csv");
    fs::write(&path, csv).map_err(|e| Error::io(path, e))
}
