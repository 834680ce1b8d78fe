//! Redundancy diagnostics over captured attention.
//!
//! * [`distance_profile`]: how a visual query's attention to other visual
//!   tokens falls off with grid distance.
//! * [`cross_modal_profile`]: how much each text query attends to the image,
//!   per layer.
//! * [`head_activity`]: per-head ratio of mean visual to mean text response.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{DistanceMetric, TokenLayout};
use crate::model::AttentionRecord;
use crate::pruning::HeadActivity;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileBin {
    pub bin_center: f64,
    pub mean_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryProfile {
    pub layer: usize,
    pub query_token: usize,
    /// Non-empty bins, ascending by distance.
    pub bins: Vec<ProfileBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceProfile {
    pub n_bins: usize,
    pub bin_width: f64,
    pub entries: Vec<QueryProfile>,
}

/// Which per-token quantity stands in for a head's response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityMode {
    /// Mean attention weight each token receives from the head's computed query rows.
    WeightMass,
    /// L2 norm of the head's output vector at each token.
    OutputNorm,
}

impl ActivityMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivityMode::WeightMass => "weight_mass",
            ActivityMode::OutputNorm => "output_norm",
        }
    }
}

fn check_records(records: &[AttentionRecord], layout: &TokenLayout) -> Result<()> {
    let n = layout.n_tokens();
    for r in records {
        for h in &r.heads {
            if h.weights.shape() != (n, n) || h.outputs.rows() != n || h.active_rows.len() != n {
                return Err(Error::DimensionMismatch {
                    op: "attention record",
                    left: h.weights.shape(),
                    right: (n, n),
                });
            }
        }
    }
    Ok(())
}

/// Seeded choice of `count` distinct visual tokens, ascending.
pub fn select_query_tokens(layout: &TokenLayout, count: usize, seed: u64) -> Result<Vec<usize>> {
    let nv = layout.n_visual();
    if count > nv {
        return Err(Error::InvalidArgument(format!("cannot select {count} of {nv} visual tokens")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, nv, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Head-averaged visual-to-visual attention per query token, bucketed by
/// Euclidean grid distance into `n_bins` equal bins over `[0, diagonal]`.
///
/// Heads that did not compute a query row (dropped, or text-only layer) are
/// left out of that row's average; a layer where no head computed the row
/// contributes no entry.
pub fn distance_profile(
    records: &[AttentionRecord],
    layout: &TokenLayout,
    query_tokens: &[usize],
    n_bins: usize,
) -> Result<DistanceProfile> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be >= 1".into()));
    }
    check_records(records, layout)?;
    let nv = layout.n_visual();
    if let Some(&q) = query_tokens.iter().find(|&&q| q >= nv) {
        return Err(Error::VisualIndexOutOfRange { index: q, n_visual: nv });
    }
    let metric = DistanceMetric::Euclidean2d;
    let diag = layout.max_distance(metric);
    let bin_width = diag / n_bins as f64;
    let bin_of = |dist: f64| {
        if bin_width > 0.0 {
            ((dist / bin_width).floor() as usize).min(n_bins - 1)
        } else {
            0
        }
    };

    let mut entries = Vec::new();
    for rec in records {
        for &q in query_tokens {
            let active: Vec<_> = rec.heads.iter().filter(|h| h.active_rows[q]).collect();
            if active.is_empty() {
                continue;
            }
            let mut sums = vec![0.0; n_bins];
            let mut counts = vec![0usize; n_bins];
            for key in 0..nv {
                let mean = active.iter().map(|h| h.weights.get(q, key)).sum::<f64>() / active.len() as f64;
                let b = bin_of(layout.distance_unchecked(metric, q, key));
                sums[b] += mean;
                counts[b] += 1;
            }
            let bins = (0..n_bins)
                .filter(|&b| counts[b] > 0)
                .map(|b| ProfileBin {
                    bin_center: (b as f64 + 0.5) * bin_width,
                    mean_weight: sums[b] / counts[b] as f64,
                })
                .collect();
            entries.push(QueryProfile {
                layer: rec.layer,
                query_token: q,
                bins,
            });
        }
    }
    Ok(DistanceProfile {
        n_bins,
        bin_width,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossModalProfile {
    /// `values[layer][text_token]`.
    pub values: Vec<Vec<f64>>,
    pub layers: Vec<usize>,
}

/// Per layer and text query, the mean over visual keys of the head-averaged
/// attention weight. Zero when there are no visual tokens.
pub fn cross_modal_profile(records: &[AttentionRecord], layout: &TokenLayout) -> Result<CrossModalProfile> {
    check_records(records, layout)?;
    let nv = layout.n_visual();
    let n = layout.n_tokens();
    let mut values = Vec::with_capacity(records.len());
    for rec in records {
        let n_heads = rec.heads.len().max(1) as f64;
        let row: Vec<f64> = (nv..n)
            .map(|t| {
                if nv == 0 {
                    return 0.0;
                }
                let mass: f64 = (0..nv)
                    .map(|k| rec.heads.iter().map(|h| h.weights.get(t, k)).sum::<f64>() / n_heads)
                    .sum();
                mass / nv as f64
            })
            .collect();
        values.push(row);
    }
    Ok(CrossModalProfile {
        values,
        layers: records.iter().map(|r| r.layer).collect(),
    })
}

/// Ratio of a head's mean per-token statistic over visual tokens to the
/// same mean over text tokens, for every layer and head.
pub fn head_activity(records: &[AttentionRecord], layout: &TokenLayout, mode: ActivityMode) -> Result<HeadActivity> {
    check_records(records, layout)?;
    let nv = layout.n_visual();
    let n = layout.n_tokens();
    let mut rho = Vec::with_capacity(records.len());
    for rec in records {
        let mut layer_rho = Vec::with_capacity(rec.heads.len());
        for (head, h) in rec.heads.iter().enumerate() {
            let stat: Vec<f64> = match mode {
                ActivityMode::WeightMass => {
                    let rows: Vec<usize> = (0..n).filter(|&i| h.active_rows[i]).collect();
                    (0..n)
                        .map(|j| {
                            if rows.is_empty() {
                                0.0
                            } else {
                                rows.iter().map(|&i| h.weights.get(i, j)).sum::<f64>() / rows.len() as f64
                            }
                        })
                        .collect()
                }
                ActivityMode::OutputNorm => (0..n)
                    .map(|t| h.outputs.row(t).iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect(),
            };
            let visual = if nv == 0 { 0.0 } else { stat[..nv].iter().sum::<f64>() / nv as f64 };
            let text = stat[nv..].iter().sum::<f64>() / (n - nv) as f64;
            if text.is_nan() || text <= 0.0 {
                return Err(Error::ZeroDenominator { layer: rec.layer, head });
            }
            layer_rho.push(visual / text);
        }
        rho.push(layer_rho);
    }
    HeadActivity::new(rho)
}
