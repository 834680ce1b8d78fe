//! Run configuration: a TOML file with `[model]`, `[prune]`, `[analysis]`,
//! `[flops]`, `[sweep]` and `[solve]` sections plus a few top-level keys.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use visprune_core::analysis::ActivityMode;
use visprune_core::flops::Accounting;
use visprune_core::{DistanceMetric, FfnKind, ModelConfig, Precision, TokenLayout};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads for sweeps and the solver; all cores when absent.
    pub workers: Option<usize>,
    pub model: ModelSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub flops: FlopsSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub solve: SolveSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum Preset {
    #[serde(rename = "llava-7b")]
    Llava7b,
    #[serde(rename = "llava-13b")]
    Llava13b,
}

/// Architecture keys. With a preset, any key given here overrides it.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<Preset>,
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ffn: Option<usize>,
    pub grid_width: Option<usize>,
    pub grid_height: Option<usize>,
    pub n_text: Option<usize>,
    pub causal_text: Option<bool>,
    pub causal_visual: Option<bool>,
    pub ffn_kind: Option<FfnKind>,
    pub outer_activation: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    #[serde(default)]
    pub metric: DistanceMetric,
    /// Window radius in grid units; the whole grid when absent.
    pub radius: Option<f64>,
    /// Explicit kept heads, one list per layer.
    pub kept_heads: Option<Vec<Vec<usize>>>,
    /// Keep this many heads in every layer.
    pub heads_per_layer: Option<usize>,
    /// Keep heads whose activity ratio is at least this value.
    pub head_threshold: Option<f64>,
    /// Rank heads by measured activity for `heads_per_layer` / `head_threshold`.
    pub rank_heads_by: Option<ActivityMode>,
    pub ffn_keep_ratio: Option<f64>,
    #[serde(default)]
    pub ffn_neuron_seed: u64,
    #[serde(default)]
    pub drop_last_layers: usize,
    pub drop_block: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_query_tokens")]
    pub query_tokens: usize,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<ActivityMode>,
    /// `forward` also writes attention records and a distance profile.
    #[serde(default)]
    pub capture: bool,
}

fn default_query_tokens() -> usize {
    10
}

fn default_bins() -> usize {
    16
}

fn default_modes() -> Vec<ActivityMode> {
    vec![ActivityMode::WeightMass, ActivityMode::OutputNorm]
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            query_tokens: default_query_tokens(),
            n_bins: default_bins(),
            modes: default_modes(),
            capture: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsSection {
    #[serde(default)]
    pub accounting: Accounting,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Visual-token counts; the model's own count when empty.
    #[serde(default)]
    pub n_visual: Vec<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub target_flops: Option<f64>,
    pub radii: Option<Vec<f64>>,
    pub head_counts: Option<Vec<usize>>,
    pub suffix_drops: Option<Vec<usize>>,
    pub keep_ratios: Option<Vec<f64>>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub precision: Option<Precision>,
    pub seed: Option<u64>,
    pub n_visual: Option<Vec<usize>>,
    pub target_flops: Option<f64>,
    pub workers: Option<usize>,
}

/// A parsed file together with its source, for error locations.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub model: ModelConfig,
    source: String,
    path: PathBuf,
}

impl LoadedConfig {
    /// `path:line` of a section header, for validation messages.
    pub fn locate(&self, section: &str) -> String {
        locate(&self.source, &self.path, section)
    }
}

fn locate(source: &str, path: &Path, section: &str) -> String {
    let header = format!("[{section}]");
    match source.lines().position(|l| l.trim() == header) {
        Some(i) => format!("{}:{} [{section}]", path.display(), i + 1),
        None => format!("{} [{section}]", path.display()),
    }
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<LoadedConfig> {
    let source = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut run: RunConfig = toml::from_str(&source).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    if let Some(dir) = &overrides.output_dir {
        run.output_dir = dir.clone();
    }
    if let Some(p) = overrides.precision {
        run.precision = p;
    }
    if let Some(s) = overrides.seed {
        run.seed = s;
    }
    if let Some(nv) = &overrides.n_visual {
        run.sweep.n_visual = nv.clone();
    }
    if let Some(t) = overrides.target_flops {
        run.solve.target_flops = Some(t);
    }
    if overrides.workers.is_some() {
        run.workers = overrides.workers;
    }

    let model = build_model(&run.model).with_context(|| locate(&source, path, "model"))?;
    let loaded = LoadedConfig {
        run,
        model,
        source,
        path: path.to_path_buf(),
    };
    check_sections(&loaded)?;
    Ok(loaded)
}

fn build_model(m: &ModelSection) -> Result<ModelConfig> {
    let base = match m.preset {
        Some(Preset::Llava7b) => Some(ModelConfig::llava_7b()),
        Some(Preset::Llava13b) => Some(ModelConfig::llava_13b()),
        None => None,
    };
    let need = |v: Option<usize>, from: Option<usize>, key: &str| {
        v.or(from).ok_or_else(|| anyhow!("missing key `{key}` (or set `preset`)"))
    };
    let b = base.as_ref();
    let layout = TokenLayout::new(
        need(m.grid_width, b.map(|c| c.layout.grid_width), "grid_width")?,
        need(m.grid_height, b.map(|c| c.layout.grid_height), "grid_height")?,
        need(m.n_text, b.map(|c| c.layout.n_text), "n_text")?,
    )?;
    let mut cfg = ModelConfig::new(
        need(m.n_layers, b.map(|c| c.n_layers), "n_layers")?,
        need(m.d_model, b.map(|c| c.d_model), "d_model")?,
        need(m.n_heads, b.map(|c| c.n_heads), "n_heads")?,
        need(m.d_ffn, b.map(|c| c.d_ffn), "d_ffn")?,
        layout,
    );
    if let Some(b) = b {
        cfg.causal_text = b.causal_text;
        cfg.causal_visual = b.causal_visual;
        cfg.ffn_kind = b.ffn_kind;
        cfg.outer_activation = b.outer_activation;
    }
    cfg.causal_text = m.causal_text.unwrap_or(cfg.causal_text);
    cfg.causal_visual = m.causal_visual.unwrap_or(cfg.causal_visual);
    cfg.ffn_kind = m.ffn_kind.unwrap_or(cfg.ffn_kind);
    cfg.outer_activation = m.outer_activation.unwrap_or(cfg.outer_activation);
    cfg.validate()?;
    Ok(cfg)
}

/// Checks that do not need a model run, so every command fails before
/// writing anything.
fn check_sections(c: &LoadedConfig) -> Result<()> {
    let p = &c.run.prune;
    let cfg = &c.model;
    let head_choices = [p.kept_heads.is_some(), p.heads_per_layer.is_some(), p.head_threshold.is_some()];
    if head_choices.iter().filter(|x| **x).count() > 1 {
        bail!(
            "{}: set at most one of `kept_heads`, `heads_per_layer`, `head_threshold`",
            c.locate("prune")
        );
    }
    if let Some(r) = p.radius {
        if r.is_nan() || r < 0.0 {
            bail!("{}: `radius` must be >= 0, got {r}", c.locate("prune"));
        }
    }
    if let Some(k) = p.heads_per_layer {
        if k == 0 || k > cfg.n_heads {
            bail!("{}: `heads_per_layer` must be in [1, {}], got {k}", c.locate("prune"), cfg.n_heads);
        }
    }
    if let Some(a) = p.head_threshold {
        if a.is_nan() || a < 0.0 {
            bail!("{}: `head_threshold` must be >= 0, got {a}", c.locate("prune"));
        }
    }
    if p.drop_last_layers > cfg.n_layers {
        bail!(
            "{}: `drop_last_layers` = {} exceeds n_layers = {}",
            c.locate("prune"),
            p.drop_last_layers,
            cfg.n_layers
        );
    }
    let a = &c.run.analysis;
    if a.n_bins == 0 {
        bail!("{}: `n_bins` must be >= 1", c.locate("analysis"));
    }
    if a.modes.is_empty() {
        bail!("{}: `modes` is empty", c.locate("analysis"));
    }
    if let Some(t) = c.run.solve.target_flops {
        if !t.is_finite() || t < 0.0 {
            bail!("{}: `target_flops` must be a finite value >= 0, got {t}", c.locate("solve"));
        }
    }
    if c.run.workers == Some(0) {
        bail!("`workers` must be >= 1");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(text: &str) -> Result<LoadedConfig> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        load(&path, &Overrides::default())
    }

    #[test]
    fn preset_keys_can_be_overridden() {
        let c = load_str("[model]\npreset = \"llava-13b\"\nn_layers = 4\ncausal_text = false\n").unwrap();
        assert_eq!(c.model.n_layers, 4);
        assert_eq!(c.model.d_model, 5120);
        assert_eq!(c.model.ffn_kind, FfnKind::Gated);
        assert!(!c.model.causal_text);
        assert_eq!(c.run.output_dir, PathBuf::from("out"));
        assert_eq!(c.run.precision, Precision::Double);
    }

    #[test]
    fn missing_architecture_key_is_named() {
        let e = load_str("[model]\nn_layers = 1\n").unwrap_err();
        assert!(format!("{e:#}").contains("missing key `grid_width`"), "{e:#}");
    }

    #[test]
    fn head_choices_are_exclusive() {
        let base = "[model]\npreset = \"llava-7b\"\n\n[prune]\n";
        let e = load_str(&format!("{base}heads_per_layer = 4\nhead_threshold = 0.5\n")).unwrap_err();
        assert!(e.to_string().contains(":4 [prune]"), "{e}");
        assert!(load_str(&format!("{base}heads_per_layer = 33\n")).is_err());
        assert!(load_str(&format!("{base}drop_last_layers = 33\n")).is_err());
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\n[model]\npreset = \"llava-7b\"\n[sweep]\nn_visual = [1]\n").unwrap();
        let o = Overrides {
            seed: Some(9),
            n_visual: Some(vec![4, 16]),
            precision: Some(Precision::Single),
            ..Default::default()
        };
        let c = load(&path, &o).unwrap();
        assert_eq!(c.run.seed, 9);
        assert_eq!(c.run.sweep.n_visual, vec![4, 16]);
        assert_eq!(c.run.precision, Precision::Single);
    }
}
