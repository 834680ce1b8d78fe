//! Static ("prune once") configuration of the four visual-computation knobs:
//! neighbor window, kept attention heads, FFN neuron subset, and layers that
//! skip visual computation entirely.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{flops_pruned, FlopCount};
use crate::layout::DistanceMetric;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub metric: DistanceMetric,
    /// Visual queries only see visual keys within this distance.
    pub radius: f64,
    /// Per layer, the heads that still run for visual query rows.
    pub kept_heads: Vec<Vec<usize>>,
    /// Fraction of FFN hidden neurons kept for visual rows.
    pub ffn_keep_ratio: f64,
    pub ffn_neuron_seed: u64,
    /// Layers with index `>= last_visual_layer` are text-only.
    pub last_visual_layer: usize,
    /// Extra text-only layers `[start, end)`, unioned with the suffix above.
    pub dropped_block: Option<(usize, usize)>,
}

/// Layer-skipping fragment produced by [`suffix_drop`] and [`block_drop`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipSchedule {
    pub last_visual_layer: usize,
    pub dropped_block: Option<(usize, usize)>,
}

impl SkipSchedule {
    pub fn is_skipped(&self, layer: usize) -> bool {
        layer >= self.last_visual_layer
            || self
                .dropped_block
                .is_some_and(|(s, e)| (s..e).contains(&layer))
    }

    pub fn skipped_layers(&self, n_layers: usize) -> Vec<usize> {
        (0..n_layers).filter(|&l| self.is_skipped(l)).collect()
    }
}

/// The configuration under which every knob is disabled.
pub fn no_prune(config: &ModelConfig) -> PruneConfig {
    let metric = DistanceMetric::default();
    PruneConfig {
        metric,
        radius: config.layout.max_distance(metric),
        kept_heads: vec![(0..config.n_heads).collect(); config.n_layers],
        ffn_keep_ratio: 1.0,
        ffn_neuron_seed: 0,
        last_visual_layer: config.n_layers,
        dropped_block: None,
    }
}

impl PruneConfig {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPrune(msg));
        if self.radius.is_nan() || self.radius < 0.0 {
            return bad(format!("radius must be >= 0, got {}", self.radius));
        }
        if self.kept_heads.len() != config.n_layers {
            return bad(format!(
                "kept_heads has {} layers, model has {}",
                self.kept_heads.len(),
                config.n_layers
            ));
        }
        for (layer, heads) in self.kept_heads.iter().enumerate() {
            if heads.is_empty() {
                return bad(format!("layer {layer} keeps no heads"));
            }
            if let Some(&h) = heads.iter().find(|&&h| h >= config.n_heads) {
                return bad(format!("layer {layer}: head {h} >= n_heads {}", config.n_heads));
            }
            let mut sorted = heads.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != heads.len() {
                return bad(format!("layer {layer}: duplicate head index"));
            }
        }
        if !(self.ffn_keep_ratio > 0.0 && self.ffn_keep_ratio <= 1.0) {
            return bad(format!("ffn_keep_ratio must be in (0, 1], got {}", self.ffn_keep_ratio));
        }
        if self.last_visual_layer > config.n_layers {
            return bad(format!(
                "last_visual_layer {} exceeds n_layers {}",
                self.last_visual_layer, config.n_layers
            ));
        }
        if let Some((s, e)) = self.dropped_block {
            if !(s < e && e <= config.n_layers) {
                return bad(format!("dropped_block ({s}, {e}) must satisfy start < end <= {}", config.n_layers));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> SkipSchedule {
        SkipSchedule {
            last_visual_layer: self.last_visual_layer,
            dropped_block: self.dropped_block,
        }
    }

    /// Whether `layer` still performs visual computation.
    pub fn visual_active(&self, layer: usize) -> bool {
        !self.schedule().is_skipped(layer)
    }

    pub fn is_head_kept(&self, layer: usize, head: usize) -> bool {
        self.kept_heads[layer].contains(&head)
    }

    pub fn kept_neuron_count(&self, d_ffn: usize) -> usize {
        kept_count(d_ffn, self.ffn_keep_ratio)
    }

    /// Neuron subset used for visual rows at `layer`.
    pub fn kept_neurons(&self, layer: usize, d_ffn: usize) -> Vec<usize> {
        neuron_subset(d_ffn, self.ffn_keep_ratio, layer_seed(self.ffn_neuron_seed, layer))
    }

    /// True when the configuration changes nothing relative to the dense model.
    pub fn is_identity(&self, config: &ModelConfig) -> bool {
        config.layout.window_is_full(self.metric, self.radius)
            && self.kept_heads.iter().all(|h| h.len() == config.n_heads)
            && self.kept_neuron_count(config.d_ffn) == config.d_ffn
            && self.last_visual_layer == config.n_layers
            && self.dropped_block.is_none()
    }

    pub fn with_window(mut self, metric: DistanceMetric, radius: f64) -> Self {
        self.metric = metric;
        self.radius = radius;
        self
    }

    pub fn with_kept_heads(mut self, kept: Vec<Vec<usize>>) -> Self {
        self.kept_heads = kept;
        self
    }

    pub fn with_ffn_keep(mut self, ratio: f64, seed: u64) -> Self {
        self.ffn_keep_ratio = ratio;
        self.ffn_neuron_seed = seed;
        self
    }

    /// Union this configuration's skipped layers with `schedule`'s.
    pub fn with_schedule(mut self, schedule: SkipSchedule) -> Self {
        self.last_visual_layer = self.last_visual_layer.min(schedule.last_visual_layer);
        if schedule.dropped_block.is_some() {
            self.dropped_block = schedule.dropped_block;
        }
        self
    }
}

fn kept_count(d_ffn: usize, ratio: f64) -> usize {
    ((ratio * d_ffn as f64).round() as usize).clamp(1, d_ffn.max(1))
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn neuron_subset(d_ffn: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let k = kept_count(d_ffn, ratio);
    if k >= d_ffn {
        return (0..d_ffn).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, d_ffn, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Seeded random subset of `round(keep_ratio * d_ffn)` (at least one)
/// hidden neurons, ascending.
pub fn ffn_neuron_subset(d_ffn: usize, keep_ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep_ratio must be in (0, 1], got {keep_ratio}")));
    }
    Ok(neuron_subset(d_ffn, keep_ratio, seed))
}

/// Per-layer, per-head relative activity of a head on visual vs text tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadActivity {
    pub rho: Vec<Vec<f64>>,
}

impl HeadActivity {
    pub fn new(rho: Vec<Vec<f64>>) -> Result<Self> {
        for (l, row) in rho.iter().enumerate() {
            if let Some((h, v)) = row.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::InvalidArgument(format!("rho[{l}][{h}] = {v} is not a finite non-negative value")));
            }
        }
        Ok(Self { rho })
    }

    pub fn n_layers(&self) -> usize {
        self.rho.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSelection {
    pub kept: Vec<Vec<usize>>,
    /// Layers where every head fell below the threshold and the single
    /// strongest head was kept instead.
    pub flagged_layers: Vec<usize>,
}

/// Keep heads with `rho >= alpha`; a layer that would lose every head keeps
/// its highest-rho head and is flagged.
pub fn heads_by_threshold(activity: &HeadActivity, alpha: f64) -> Result<HeadSelection> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    let mut kept = Vec::with_capacity(activity.n_layers());
    let mut flagged_layers = Vec::new();
    for (layer, rho) in activity.rho.iter().enumerate() {
        let heads: Vec<usize> = (0..rho.len()).filter(|&h| rho[h] >= alpha).collect();
        if heads.is_empty() && !rho.is_empty() {
            kept.push(vec![ranked(rho)[0]]);
            flagged_layers.push(layer);
        } else {
            kept.push(heads);
        }
    }
    Ok(HeadSelection { kept, flagged_layers })
}

/// Keep the `k` highest-rho heads per layer; ties go to the lower index.
pub fn heads_by_count(activity: &HeadActivity, k: usize) -> Result<Vec<Vec<usize>>> {
    activity
        .rho
        .iter()
        .enumerate()
        .map(|(layer, rho)| {
            if k == 0 || k > rho.len() {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer}: k = {k} outside [1, {}]",
                    rho.len()
                )));
            }
            let mut top = ranked(rho)[..k].to_vec();
            top.sort_unstable();
            Ok(top)
        })
        .collect()
}

fn ranked(rho: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    order
}

/// Skip visual computation in the last `n_last` layers.
pub fn suffix_drop(config: &ModelConfig, n_last: usize) -> Result<SkipSchedule> {
    if n_last > config.n_layers {
        return Err(Error::InvalidPrune(format!(
            "cannot drop {n_last} of {} layers",
            config.n_layers
        )));
    }
    Ok(SkipSchedule {
        last_visual_layer: config.n_layers - n_last,
        dropped_block: None,
    })
}

/// Skip visual computation in layers `[start, end)`.
pub fn block_drop(config: &ModelConfig, start: usize, end: usize) -> Result<SkipSchedule> {
    if !(start < end && end <= config.n_layers) {
        return Err(Error::InvalidPrune(format!(
            "block ({start}, {end}) must satisfy start < end <= {}",
            config.n_layers
        )));
    }
    Ok(SkipSchedule {
        last_visual_layer: config.n_layers,
        dropped_block: Some((start, end)),
    })
}

/// Discretized grid over the four knobs for [`solve_budget`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub metric: DistanceMetric,
    pub radii: Vec<f64>,
    /// Heads kept per layer.
    pub head_counts: Vec<usize>,
    /// Number of trailing text-only layers.
    pub suffix_drops: Vec<usize>,
    pub keep_ratios: Vec<f64>,
    pub ffn_neuron_seed: u64,
    /// Ranks heads when fewer than all are kept; without it the lowest
    /// indices are kept, which yields the same FLOPs.
    pub activity: Option<HeadActivity>,
}

impl SearchSpace {
    pub fn len(&self) -> usize {
        self.radii.len() * self.head_counts.len() * self.suffix_drops.len() * self.keep_ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Knob values of one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Knobs {
    pub radius: f64,
    pub heads: usize,
    pub suffix_drop: usize,
    pub keep_ratio: f64,
}

impl Knobs {
    fn cmp(&self, other: &Self) -> Ordering {
        self.radius
            .total_cmp(&other.radius)
            .then(self.heads.cmp(&other.heads))
            .then(self.suffix_drop.cmp(&other.suffix_drop))
            .then(self.keep_ratio.total_cmp(&other.keep_ratio))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetCandidate {
    pub knobs: Knobs,
    pub prune: PruneConfig,
    pub flops: FlopCount,
}

/// Every grid point whose modeled FLOPs (at the config's own token layout)
/// stay within `target_flops`, cheapest first.
pub fn solve_budget(config: &ModelConfig, target_flops: f64, space: &SearchSpace) -> Result<Vec<BudgetCandidate>> {
    config.validate()?;
    if space.is_empty() {
        return Err(Error::InvalidArgument("search space is empty".into()));
    }
    let head_sets: Vec<(usize, Vec<Vec<usize>>)> = space
        .head_counts
        .iter()
        .map(|&k| {
            let kept = match &space.activity {
                Some(activity) => heads_by_count(activity, k)?,
                None => {
                    if k == 0 || k > config.n_heads {
                        return Err(Error::InvalidArgument(format!("head count {k} outside [1, {}]", config.n_heads)));
                    }
                    vec![(0..k).collect(); config.n_layers]
                }
            };
            Ok((k, kept))
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(space.len());
    for &radius in &space.radii {
        for (k, kept) in &head_sets {
            for &suffix in &space.suffix_drops {
                for &keep in &space.keep_ratios {
                    points.push((radius, *k, kept, suffix, keep));
                }
            }
        }
    }

    let n_visual = config.layout.n_visual();
    let n_text = config.layout.n_text;
    let evaluated: Vec<Option<BudgetCandidate>> = points
        .into_par_iter()
        .map(|(radius, heads, kept, suffix, keep)| {
            let prune = no_prune(config)
                .with_window(space.metric, radius)
                .with_kept_heads(kept.clone())
                .with_ffn_keep(keep, space.ffn_neuron_seed)
                .with_schedule(suffix_drop(config, suffix)?);
            prune.validate(config)?;
            let flops = flops_pruned(config, &prune, n_visual, n_text)?.grand_total;
            Ok(((flops as f64) <= target_flops).then_some(BudgetCandidate {
                knobs: Knobs {
                    radius,
                    heads,
                    suffix_drop: suffix,
                    keep_ratio: keep,
                },
                prune,
                flops,
            }))
        })
        .collect::<Result<_>>()?;

    let mut feasible: Vec<BudgetCandidate> = evaluated.into_iter().flatten().collect();
    feasible.sort_by(|a, b| a.flops.cmp(&b.flops).then_with(|| a.knobs.cmp(&b.knobs)));
    Ok(feasible)
}
