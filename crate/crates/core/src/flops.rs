//! Analytical FLOPs model for dense and pruned forward passes.
//!
//! Convention: a `(m x k) · (k x n)` product costs `2·m·n·k`. Softmax,
//! normalization, activations and residual adds are not counted. Only the
//! language model is modeled; a vision encoder or projector is not.
//!
//! Counts are exact integers. Head-dropping terms are charged per kept head
//! (`head_dim · kept`), which stays integral because `d_model` is a multiple
//! of `n_heads`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layout::TokenLayout;
use crate::model::ModelConfig;
use crate::pruning::PruneConfig;

pub type FlopCount = u64;

/// Text-token count used when a total is requested without one.
///
/// Chosen as the value in `1..=256` that best fits the published dense totals
/// of the LLaVA-1.5-7B and 13B backbones (7.63 and 14.89 TFLOPs at 576 visual
/// tokens); see [`calibrate_text_tokens`].
pub const CALIBRATION_TEXT_TOKENS: usize = 1;

/// How head dropping is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Accounting {
    /// Dropped heads save their share of projection and attention cost on visual rows.
    #[default]
    Modeled,
    /// Dropped heads save nothing (a kernel that still computes then discards them).
    DenseFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TermFlops {
    pub qkv_proj: FlopCount,
    pub attn_scores: FlopCount,
    pub attn_values: FlopCount,
    pub out_proj: FlopCount,
    pub ffn: FlopCount,
}

impl TermFlops {
    pub const NAMES: [&'static str; 5] = ["qkv_proj", "attn_scores", "attn_values", "out_proj", "ffn"];

    pub fn total(&self) -> FlopCount {
        self.qkv_proj + self.attn_scores + self.attn_values + self.out_proj + self.ffn
    }

    pub fn attention(&self) -> FlopCount {
        self.attn_scores + self.attn_values
    }

    pub fn values(&self) -> [FlopCount; 5] {
        [self.qkv_proj, self.attn_scores, self.attn_values, self.out_proj, self.ffn]
    }

    fn accumulate(&mut self, other: &Self) {
        self.qkv_proj += other.qkv_proj;
        self.attn_scores += other.attn_scores;
        self.attn_values += other.attn_values;
        self.out_proj += other.out_proj;
        self.ffn += other.ffn;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub visual_active: bool,
    pub terms: TermFlops,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub totals: TermFlops,
    pub grand_total: FlopCount,
    pub model: ModelConfig,
    pub prune: Option<PruneConfig>,
    pub layout: TokenLayout,
    pub accounting: Accounting,
    pub calibration_text_tokens: usize,
}

impl FlopsReport {
    fn new(
        model: &ModelConfig,
        prune: Option<&PruneConfig>,
        layout: TokenLayout,
        accounting: Accounting,
        layers: Vec<LayerFlops>,
    ) -> Self {
        let mut totals = TermFlops::default();
        for l in &layers {
            totals.accumulate(&l.terms);
        }
        Self {
            grand_total: totals.total(),
            totals,
            layers,
            model: model.clone(),
            prune: prune.cloned(),
            layout,
            accounting,
            calibration_text_tokens: CALIBRATION_TEXT_TOKENS,
        }
    }

    pub fn n_visual(&self) -> usize {
        self.layout.n_visual()
    }

    pub fn n_text(&self) -> usize {
        self.layout.n_text
    }

    /// Plain-text table with a header echoing the configuration.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(
            s,
            "# model: L={} d={} H={} d_ffn={} ffn={:?} causal_text={}",
            m.n_layers, m.d_model, m.n_heads, m.d_ffn, m.ffn_kind, m.causal_text
        );
        let _ = writeln!(
            s,
            "# tokens: n_visual={} ({}x{}) n_text={}",
            self.n_visual(),
            self.layout.grid_width,
            self.layout.grid_height,
            self.n_text()
        );
        match &self.prune {
            Some(p) => {
                let heads: Vec<usize> = p.kept_heads.iter().map(Vec::len).collect();
                let _ = writeln!(
                    s,
                    "# prune: metric={:?} radius={} kept_heads/layer(min..max)={}..{} ffn_keep={} last_visual_layer={} dropped_block={:?} accounting={:?}",
                    p.metric,
                    p.radius,
                    heads.iter().min().copied().unwrap_or(0),
                    heads.iter().max().copied().unwrap_or(0),
                    p.ffn_keep_ratio,
                    p.last_visual_layer,
                    p.dropped_block,
                    self.accounting
                );
            }
            None => {
                let _ = writeln!(s, "# prune: none (dense)");
            }
        }
        let _ = writeln!(
            s,
            "# convention: 2 FLOPs per multiply-accumulate; softmax/norm/activation excluded; language model only; calibration n_text={}",
            self.calibration_text_tokens
        );
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>16} {:>16} {:>16} {:>16} {:>16} {:>18}",
            "layer", "visual", "qkv_proj", "attn_scores", "attn_values", "out_proj", "ffn", "total"
        );
        for l in &self.layers {
            let t = &l.terms;
            let _ = writeln!(
                s,
                "{:>6} {:>6} {:>16} {:>16} {:>16} {:>16} {:>16} {:>18}",
                l.layer,
                if l.visual_active { "yes" } else { "no" },
                t.qkv_proj,
                t.attn_scores,
                t.attn_values,
                t.out_proj,
                t.ffn,
                t.total()
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>16} {:>16} {:>16} {:>16} {:>16} {:>18}",
            "total", "", t.qkv_proj, t.attn_scores, t.attn_values, t.out_proj, t.ffn, self.grand_total
        );
        let _ = writeln!(s, "grand total: {} FLOPs ({:.3} TFLOPs)", self.grand_total, self.grand_total as f64 / 1e12);
        s
    }
}

/// Layout used to cost `n_visual` visual tokens under `config`: the config's
/// own grid when the count matches, otherwise a grid that keeps the config's
/// row count where possible.
pub fn layout_for(config: &ModelConfig, n_visual: usize, n_text: usize) -> Result<TokenLayout> {
    if n_visual == config.layout.n_visual() {
        TokenLayout::new(config.layout.grid_width, config.layout.grid_height, n_text)
    } else {
        TokenLayout::with_visual_count(n_visual, n_text, config.layout.grid_height)
    }
}

fn text_pairs(nt: u64, causal: bool) -> u64 {
    if causal {
        nt * (nt + 1) / 2
    } else {
        nt * nt
    }
}

/// Cost of the unpruned model: every layer computes full `N x N` attention.
pub fn flops_dense(config: &ModelConfig, n_visual: usize, n_text: usize) -> Result<FlopsReport> {
    config.validate()?;
    let layout = layout_for(config, n_visual, n_text)?;
    let n = layout.n_tokens() as u64;
    let d = config.d_model as u64;
    let f = config.d_ffn as u64;
    let terms = TermFlops {
        qkv_proj: 2 * 3 * n * d * d,
        attn_scores: 2 * n * n * d,
        attn_values: 2 * n * n * d,
        out_proj: 2 * n * d * d,
        ffn: 2 * config.ffn_kind.n_projections() * n * d * f,
    };
    let layers = (0..config.n_layers)
        .map(|layer| LayerFlops {
            layer,
            visual_active: true,
            terms,
        })
        .collect();
    Ok(FlopsReport::new(config, None, layout, Accounting::Modeled, layers))
}

pub fn flops_pruned(config: &ModelConfig, prune: &PruneConfig, n_visual: usize, n_text: usize) -> Result<FlopsReport> {
    flops_pruned_with(config, prune, n_visual, n_text, Accounting::Modeled)
}

/// Cost of the pruned model.
///
/// In a layer with visual computation:
/// * visual queries score against their window keys only, or against all
///   `N` keys through the dense kernel when the window covers the whole grid;
/// * text queries score against `N_v` visual keys plus text keys (halved
///   causally through the windowed kernel when `causal_text` is set);
/// * projections and attention on visual rows are charged per kept head;
/// * the FFN on visual rows is charged per kept neuron.
///
/// A text-only layer charges text rows only, with text-to-text attention.
pub fn flops_pruned_with(
    config: &ModelConfig,
    prune: &PruneConfig,
    n_visual: usize,
    n_text: usize,
    accounting: Accounting,
) -> Result<FlopsReport> {
    config.validate()?;
    prune.validate(config)?;
    let layout = layout_for(config, n_visual, n_text)?;
    if prune.is_identity(config) {
        let mut report = flops_dense(config, n_visual, n_text)?;
        report.prune = Some(prune.clone());
        report.accounting = accounting;
        return Ok(report);
    }

    let nv = layout.n_visual() as u64;
    let nt = layout.n_text as u64;
    let n = nv + nt;
    let d = config.d_model as u64;
    let dh = config.head_dim() as u64;
    let h = config.n_heads as u64;
    let f = config.d_ffn as u64;
    let ffn_mats = config.ffn_kind.n_projections();
    let kept_neurons = prune.kept_neuron_count(config.d_ffn) as u64;

    let full_window = layout.window_is_full(prune.metric, prune.radius);
    let (visual_keys, text_keys) = if full_window {
        (nv * n, nt * n)
    } else {
        let mut pairs = layout.window_pair_count(prune.metric, prune.radius);
        if config.causal_visual {
            pairs = (pairs + nv) / 2;
        }
        (pairs, nt * nv + text_pairs(nt, config.causal_text))
    };

    let layers = (0..config.n_layers)
        .map(|layer| {
            let visual_active = prune.visual_active(layer);
            let terms = if visual_active {
                let kept = match accounting {
                    Accounting::Modeled => prune.kept_heads[layer].len() as u64,
                    Accounting::DenseFallback => h,
                };
                let kd = dh * kept;
                let attn = 2 * dh * kept * visual_keys + 2 * d * text_keys;
                TermFlops {
                    qkv_proj: 2 * 3 * nv * d * kd + 2 * 3 * nt * d * d,
                    attn_scores: attn,
                    attn_values: attn,
                    out_proj: 2 * nv * kd * d + 2 * nt * d * d,
                    ffn: 2 * ffn_mats * (nv * d * kept_neurons + nt * d * f),
                }
            } else {
                let attn = 2 * d * text_pairs(nt, config.causal_text);
                TermFlops {
                    qkv_proj: 2 * 3 * nt * d * d,
                    attn_scores: attn,
                    attn_values: attn,
                    out_proj: 2 * nt * d * d,
                    ffn: 2 * ffn_mats * nt * d * f,
                }
            };
            LayerFlops {
                layer,
                visual_active,
                terms,
            }
        })
        .collect();
    Ok(FlopsReport::new(config, Some(prune), layout, accounting, layers))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SweepRow {
    pub n_visual: usize,
    pub dense: FlopCount,
    pub pruned: FlopCount,
}

/// Dense and pruned totals for each visual-token count, in input order.
pub fn scaling_sweep(
    config: &ModelConfig,
    prune: &PruneConfig,
    n_visual_values: &[usize],
    n_text: usize,
) -> Result<Vec<SweepRow>> {
    if n_visual_values.is_empty() {
        return Err(crate::error::Error::InvalidArgument("n_visual list is empty".into()));
    }
    n_visual_values
        .par_iter()
        .map(|&nv| {
            Ok(SweepRow {
                n_visual: nv,
                dense: flops_dense(config, nv, n_text)?.grand_total,
                pruned: flops_pruned(config, prune, nv, n_text)?.grand_total,
            })
        })
        .collect()
}

/// The `n_text` in `range` minimizing the worst relative error of
/// `flops_dense` against each `(config, n_visual, published_total)`.
/// Ties go to the smaller count.
pub fn calibrate_text_tokens(
    targets: &[(ModelConfig, usize, f64)],
    range: std::ops::RangeInclusive<usize>,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for nt in range {
        let mut worst = 0.0f64;
        for (cfg, nv, published) in targets {
            let total = flops_dense(cfg, *nv, nt)?.grand_total as f64;
            worst = worst.max((total - published).abs() / published);
        }
        if best.is_none_or(|(_, e)| worst < e) {
            best = Some((nt, worst));
        }
    }
    best.ok_or_else(|| crate::error::Error::InvalidArgument("empty calibration range".into()))
}
