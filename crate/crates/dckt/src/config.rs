//! Experiment configuration: a flat `key = value` text format, ablation /
//! baseline mode selection, and resolved-config serialization so every run
//! records the exact settings it used.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::{BandwidthBase, LossWeights, MmdConfig};

/// Training variants: the full method plus its ablations and baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Both MMD levels, pairwise and semantic losses, consistency curriculum.
    Full,
    /// Per-domain pretraining only; no cross-domain coupling at all.
    PretrainOnly,
    /// Media-level MMD only (correlation-level weight zeroed).
    MediaOnly,
    /// Correlation-level MMD only (media-level weights zeroed).
    CorrOnly,
    /// Full losses, but every target pair trains every iteration.
    AllData,
    /// Full losses, but pairs are admitted uniformly at random.
    RandomSelect,
    /// Full method after removing the overlapping classes from the source.
    NoOverlap,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Full,
        Mode::PretrainOnly,
        Mode::MediaOnly,
        Mode::CorrOnly,
        Mode::AllData,
        Mode::RandomSelect,
        Mode::NoOverlap,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::PretrainOnly => "pretrain-only",
            Mode::MediaOnly => "media-only",
            Mode::CorrOnly => "corr-only",
            Mode::AllData => "all-data",
            Mode::RandomSelect => "random-select",
            Mode::NoOverlap => "no-overlap",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode `{s}`; expected one of {}",
                    Mode::ALL.map(|m| m.name()).join(", ")
                ))
            })
    }
}

/// Where the experiment's data comes from: a pair of TSV files or the
/// built-in synthetic generator. Exactly one source is allowed.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Files {
        source: PathBuf,
        target: PathBuf,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub data: DataSource,
    /// Train / test / validation fractions, summing to 1.
    pub split: (f64, f64, f64),
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub pretrain_epochs: usize,
    pub alpha: f64,
    pub iterations: usize,
    pub source_epochs: usize,
    pub weights: LossWeights,
    pub mmd: MmdConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Full,
            seed: 0,
            data: DataSource::Synthetic(SyntheticSpec::default()),
            split: (0.7, 0.2, 0.1),
            hidden: 128,
            batch_size: 32,
            learning_rate: 0.01,
            weight_decay: 0.0005,
            pretrain_epochs: 10,
            alpha: 0.2,
            iterations: 10,
            source_epochs: 1,
            weights: LossWeights::default(),
            mmd: MmdConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        let (a, b, c) = self.split;
        if a <= 0.0 || b <= 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1 with positive train/test parts, got ({a}, {b}, {c})"
            )));
        }
        if self.hidden == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "hidden must be >= 1 and batch_size >= 2".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("bad optimizer settings".into()));
        }
        if self.pretrain_epochs == 0 || self.iterations == 0 || self.source_epochs == 0 {
            return Err(Error::Config(
                "pretrain_epochs, iterations and source_epochs must be >= 1".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.mmd.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Parses the flat `key = value` format. Blank lines and `#` comments
    /// are ignored; unknown keys are errors. Data-source keys are
    /// exclusive: either both `source_data` and `target_data` paths, or
    /// `synthetic.*` keys (or none of them, which selects the default
    /// synthetic spec).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut source_path: Option<PathBuf> = None;
        let mut target_path: Option<PathBuf> = None;
        let mut synth = SyntheticSpec::default();
        let mut saw_synth = false;
        let mut saw_files = false;

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected `key = value`, got `{raw}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Parse {
                line: line_no,
                msg: format!("bad {what} `{value}` for key `{key}`"),
            };
            macro_rules! num {
                ($t:ty) => {
                    value.parse::<$t>().map_err(|_| bad("number"))?
                };
            }
            match key {
                "mode" => cfg.mode = Mode::parse(value).map_err(|e| Error::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })?,
                "seed" => cfg.seed = num!(u64),
                "source_data" => {
                    saw_files = true;
                    source_path = Some(PathBuf::from(value));
                }
                "target_data" => {
                    saw_files = true;
                    target_path = Some(PathBuf::from(value));
                }
                "split_train" => cfg.split.0 = num!(f64),
                "split_test" => cfg.split.1 = num!(f64),
                "split_val" => cfg.split.2 = num!(f64),
                "hidden" => cfg.hidden = num!(usize),
                "batch_size" => cfg.batch_size = num!(usize),
                "learning_rate" => cfg.learning_rate = num!(f64),
                "weight_decay" => cfg.weight_decay = num!(f64),
                "pretrain_epochs" => cfg.pretrain_epochs = num!(usize),
                "alpha" => cfg.alpha = num!(f64),
                "iterations" => cfg.iterations = num!(usize),
                "source_epochs" => cfg.source_epochs = num!(usize),
                "w_mmd_image" => cfg.weights.w_mmd_image = num!(f64),
                "w_mmd_text" => cfg.weights.w_mmd_text = num!(f64),
                "w_mmd_corr" => cfg.weights.w_mmd_corr = num!(f64),
                "w_pair_src" => cfg.weights.w_pair_src = num!(f64),
                "w_pair_tgt" => cfg.weights.w_pair_tgt = num!(f64),
                "w_sem_src" => cfg.weights.w_sem_src = num!(f64),
                "w_sem_tgt" => cfg.weights.w_sem_tgt = num!(f64),
                "mmd_num_kernels" => cfg.mmd.num_kernels = num!(usize),
                "mmd_bandwidth_step" => cfg.mmd.bandwidth_step = num!(f64),
                "mmd_bandwidth" => {
                    cfg.mmd.bandwidth_base = if value == "median" {
                        BandwidthBase::MedianHeuristic
                    } else {
                        BandwidthBase::Fixed(num!(f64))
                    }
                }
                _ if key.starts_with("synthetic.") => {
                    saw_synth = true;
                    match &key["synthetic.".len()..] {
                        "num_src_classes" => synth.num_src_classes = num!(usize),
                        "num_tgt_classes" => synth.num_tgt_classes = num!(usize),
                        "overlap_classes" => synth.overlap_classes = num!(usize),
                        "pairs_per_class" => synth.pairs_per_class = num!(usize),
                        "d_img" => synth.d_img = num!(usize),
                        "d_txt" => synth.d_txt = num!(usize),
                        "cluster_separation" => synth.cluster_separation = num!(f64),
                        "domain_shift" => synth.domain_shift = num!(f64),
                        "noise_sigma" => synth.noise_sigma = num!(f64),
                        "seed" => synth.seed = num!(u64),
                        other => {
                            return Err(Error::Parse {
                                line: line_no,
                                msg: format!("unknown synthetic key `{other}`"),
                            })
                        }
                    }
                }
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unknown config key `{other}`"),
                    })
                }
            }
        }

        if saw_files && saw_synth {
            return Err(Error::Config(
                "config mixes file paths and synthetic.* keys; pick one data source".into(),
            ));
        }
        cfg.data = if saw_files {
            match (source_path, target_path) {
                (Some(source), Some(target)) => DataSource::Files { source, target },
                _ => {
                    return Err(Error::Config(
                        "file data source needs both source_data and target_data".into(),
                    ))
                }
            }
        } else {
            DataSource::Synthetic(synth)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }

    /// Serializes every effective setting back into the same `key = value`
    /// format, suitable for re-running the experiment verbatim.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "mode = {}", self.mode.name()).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        match &self.data {
            DataSource::Files { source, target } => {
                writeln!(out, "source_data = {}", source.display()).unwrap();
                writeln!(out, "target_data = {}", target.display()).unwrap();
            }
            DataSource::Synthetic(s) => {
                writeln!(out, "synthetic.num_src_classes = {}", s.num_src_classes).unwrap();
                writeln!(out, "synthetic.num_tgt_classes = {}", s.num_tgt_classes).unwrap();
                writeln!(out, "synthetic.overlap_classes = {}", s.overlap_classes).unwrap();
                writeln!(out, "synthetic.pairs_per_class = {}", s.pairs_per_class).unwrap();
                writeln!(out, "synthetic.d_img = {}", s.d_img).unwrap();
                writeln!(out, "synthetic.d_txt = {}", s.d_txt).unwrap();
                writeln!(out, "synthetic.cluster_separation = {}", s.cluster_separation).unwrap();
                writeln!(out, "synthetic.domain_shift = {}", s.domain_shift).unwrap();
                writeln!(out, "synthetic.noise_sigma = {}", s.noise_sigma).unwrap();
                writeln!(out, "synthetic.seed = {}", s.seed).unwrap();
            }
        }
        writeln!(out, "split_train = {}", self.split.0).unwrap();
        writeln!(out, "split_test = {}", self.split.1).unwrap();
        writeln!(out, "split_val = {}", self.split.2).unwrap();
        writeln!(out, "hidden = {}", self.hidden).unwrap();
        writeln!(out, "batch_size = {}", self.batch_size).unwrap();
        writeln!(out, "learning_rate = {}", self.learning_rate).unwrap();
        writeln!(out, "weight_decay = {}", self.weight_decay).unwrap();
        writeln!(out, "pretrain_epochs = {}", self.pretrain_epochs).unwrap();
        writeln!(out, "alpha = {}", self.alpha).unwrap();
        writeln!(out, "iterations = {}", self.iterations).unwrap();
        writeln!(out, "source_epochs = {}", self.source_epochs).unwrap();
        for (name, v) in self.weights.named() {
            writeln!(out, "{name} = {v}").unwrap();
        }
        writeln!(out, "mmd_num_kernels = {}", self.mmd.num_kernels).unwrap();
        writeln!(out, "mmd_bandwidth_step = {}", self.mmd.bandwidth_step).unwrap();
        match self.mmd.bandwidth_base {
            BandwidthBase::MedianHeuristic => writeln!(out, "mmd_bandwidth = median").unwrap(),
            BandwidthBase::Fixed(v) => writeln!(out, "mmd_bandwidth = {v}").unwrap(),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for mode in Mode::ALL {
            assert_eq!(Mode::parse(mode.name()).unwrap(), mode);
        }
        assert!(Mode::parse("bogus").is_err());
    }

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = ExperimentConfig::from_text("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = ExperimentConfig::from_text(
            "# experiment\n\nseed = 7\n  alpha = 0.5  \n# done\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.alpha, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let err = ExperimentConfig::from_text("seed = 1\nbogus_key = 2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("bogus_key"), "{msg}");
    }

    #[test]
    fn mixed_data_sources_are_rejected() {
        let err = ExperimentConfig::from_text(
            "source_data = a.tsv\ntarget_data = b.tsv\nsynthetic.seed = 1\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("data source"), "{err}");
    }

    #[test]
    fn file_source_needs_both_paths() {
        assert!(ExperimentConfig::from_text("source_data = a.tsv\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = "mode = media-only\nseed = 3\nsynthetic.pairs_per_class = 12\nalpha = 0.4\nmmd_bandwidth = 1.5\n";
        let cfg = ExperimentConfig::from_text(text).unwrap();
        let resolved = cfg.to_text();
        let back = ExperimentConfig::from_text(&resolved).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(ExperimentConfig::from_text("alpha = 0\n").is_err());
        assert!(ExperimentConfig::from_text("batch_size = 1\n").is_err());
        assert!(ExperimentConfig::from_text("split_train = 0.5\n").is_err());
        assert!(ExperimentConfig::from_text("w_mmd_image = -1\n").is_err());
    }
}
