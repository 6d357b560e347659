//! Cosine ranking and Recall@K.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cosine_sim, FeatureMatrix};
use crate::synthdata::{Granularity, Triplet};

pub const DEFAULT_KS: [usize; 3] = [1, 10, 50];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    All,
    #[serde(rename = "coarse")]
    CoarseOnly,
    #[serde(rename = "fine")]
    FineOnly,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::All, Stratum::CoarseOnly, Stratum::FineOnly];

    pub fn admits(self, g: Granularity) -> bool {
        match self {
            Stratum::All => true,
            Stratum::CoarseOnly => g == Granularity::Coarse,
            Stratum::FineOnly => g == Granularity::Fine,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::CoarseOnly => "coarse",
            Stratum::FineOnly => "fine",
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stratum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Stratum::All),
            "coarse" => Ok(Stratum::CoarseOnly),
            "fine" => Ok(Stratum::FineOnly),
            other => Err(Error::invalid(
                "stratum",
                format!("unknown stratum `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub stratum: Stratum,
    pub n_queries: usize,
    /// Fraction of queries whose labeled target is in the top K.
    pub per_k: BTreeMap<usize, f64>,
    /// Supplementary for coarse queries: fraction with *any* valid target in
    /// the top K. Not a standard protocol metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub any_valid_per_k: Option<BTreeMap<usize, f64>>,
}

impl RecallReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.per_k.get(&k).copied()
    }
}

/// Gallery ids by descending cosine similarity to `query`; ties go to the
/// lower id.
pub fn rank(query: &[f64], gallery: &FeatureMatrix) -> Result<Vec<usize>> {
    let sims = gallery
        .iter_rows()
        .map(|g| cosine_sim(query, g))
        .collect::<Result<Vec<f64>>>()?;
    let mut ids: Vec<usize> = (0..sims.len()).collect();
    ids.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(ids)
}

fn position(ranked: &[usize], target: usize) -> Result<usize> {
    ranked
        .iter()
        .position(|&id| id == target)
        .ok_or(Error::MissingTarget { id: target })
}

/// Recall@K over pre-ranked lists.
pub fn recall_at_k(
    ranked: &[Vec<usize>],
    targets: &[usize],
    ks: &[usize],
    stratum: Stratum,
) -> Result<RecallReport> {
    if ranked.len() != targets.len() {
        return Err(Error::mismatch(
            "recall",
            format!("{} targets", ranked.len()),
            format!("{}", targets.len()),
        ));
    }
    let positions = ranked
        .iter()
        .zip(targets)
        .map(|(r, &t)| position(r, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecallReport {
        stratum,
        n_queries: targets.len(),
        per_k: hit_rates(&positions, ks),
        any_valid_per_k: None,
    })
}

fn hit_rates(positions: &[usize], ks: &[usize]) -> BTreeMap<usize, f64> {
    if positions.is_empty() {
        return BTreeMap::new();
    }
    ks.iter()
        .map(|&k| {
            let hits = positions.iter().filter(|&&p| p < k).count();
            (k, hits as f64 / positions.len() as f64)
        })
        .collect()
}

/// Brute-force recall at a single K: full pairwise similarity table, and
/// each target's rank counted directly as the number of gallery items that
/// beat it.
pub fn recall_oracle(
    queries: &FeatureMatrix,
    gallery: &FeatureMatrix,
    targets: &[usize],
    k: usize,
) -> Result<f64> {
    let mut table = vec![vec![0.0; gallery.rows()]; queries.rows()];
    for (i, row) in table.iter_mut().enumerate() {
        for (j, s) in row.iter_mut().enumerate() {
            *s = cosine_sim(queries.row(i), gallery.row(j))?;
        }
    }
    let mut hits = 0usize;
    for (sims, &t) in table.iter().zip(targets) {
        let ahead = (0..sims.len())
            .filter(|&j| sims[j] > sims[t] || (sims[j] == sims[t] && j < t))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(if targets.is_empty() {
        0.0
    } else {
        hits as f64 / targets.len() as f64
    })
}

/// Ranks every query of `stratum` against the gallery and reports recall.
///
/// `query_features` has one row per entry of `queries`.
pub fn evaluate(
    query_features: &FeatureMatrix,
    gallery_features: &FeatureMatrix,
    queries: &[Triplet],
    stratum: Stratum,
    ks: &[usize],
) -> Result<RecallReport> {
    if query_features.rows() != queries.len() {
        return Err(Error::mismatch(
            "evaluation",
            format!("{} query rows", queries.len()),
            format!("{}", query_features.rows()),
        ));
    }
    let mut positions = Vec::new();
    let mut any_positions = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        if !stratum.admits(q.granularity) {
            continue;
        }
        let ranked = rank(query_features.row(i), gallery_features)?;
        positions.push(position(&ranked, q.target_id)?);
        if q.granularity == Granularity::Coarse {
            let best = q
                .valid_targets
                .iter()
                .map(|&v| position(&ranked, v))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .min()
                .unwrap_or(usize::MAX);
            any_positions.push(best);
        }
    }
    let any_valid_per_k = (stratum == Stratum::CoarseOnly).then(|| hit_rates(&any_positions, ks));
    Ok(RecallReport {
        stratum,
        n_queries: positions.len(),
        per_k: hit_rates(&positions, ks),
        any_valid_per_k,
    })
}
