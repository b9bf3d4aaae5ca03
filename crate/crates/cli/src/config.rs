//! Run configuration: line-oriented `key = value` text with `#` comments.
//!
//! Every key has a default; unknown keys are rejected. The canonical
//! rendering (all keys, fixed order) is what gets hashed and copied into
//! output directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};
use shapepu_core::{Ablation, PhantomSpec, Reduction, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub run_dir: PathBuf,
    /// Drives phantom generation, model initialization and training order.
    pub seed: u64,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub phantom: PhantomSpec,
    pub train: TrainConfig,
    /// Seeds used by the gradient check command.
    pub gradcheck_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
            seed: 0,
            train_images: 40,
            val_images: 10,
            test_images: 15,
            phantom: PhantomSpec::default(),
            train: TrainConfig::default(),
            gradcheck_seeds: 20,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("{key}: expected true or false, got {value:?}"),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    match parse_list(key, value)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => bail!("{key}: expected two comma-separated numbers, got {value:?}"),
    }
}

fn list(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn pair((a, b): (f64, f64)) -> String {
    format!("{a:?},{b:?}")
}

impl RunConfig {
    /// Keys in canonical order with their current values.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.phantom;
        let t = &self.train;
        vec![
            ("data_root", self.data_root.display().to_string()),
            ("run_dir", self.run_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("train_images", self.train_images.to_string()),
            ("val_images", self.val_images.to_string()),
            ("test_images", self.test_images.to_string()),
            ("size", p.size.to_string()),
            ("classes", p.classes.to_string()),
            ("means", list(&p.means)),
            ("sigmas", list(&p.sigmas)),
            ("bias_amplitude", format!("{:?}", p.bias_amplitude)),
            ("lv_radius", pair(p.lv_radius)),
            ("myo_thickness", pair(p.myo_thickness)),
            ("rv_thickness", pair(p.rv_thickness)),
            ("rv_offset", pair(p.rv_offset)),
            ("rv_angle", pair(p.rv_angle)),
            ("max_distractors", p.max_distractors.to_string()),
            ("distractor_radius", pair(p.distractor_radius)),
            (
                "distractor_intensity",
                format!("{:?}", p.distractor_intensity),
            ),
            ("margin", format!("{:?}", p.margin)),
            ("border_band", p.border_band.to_string()),
            ("degenerate", p.degenerate.to_string()),
            ("epochs", t.epochs.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", format!("{:?}", t.learning_rate)),
            ("beta1", format!("{:?}", t.beta1)),
            ("beta2", format!("{:?}", t.beta2)),
            ("adam_eps", format!("{:?}", t.adam_eps)),
            ("lambda1", format!("{:?}", t.weights.lambda1)),
            ("lambda2", format!("{:?}", t.weights.lambda2)),
            ("square_size", t.square_size.to_string()),
            ("ablation", t.ablation.name()),
            (
                "reduction",
                match t.negative.reduction {
                    Reduction::Mean => "mean".into(),
                    Reduction::Sum => "sum".into(),
                },
            ),
            (
                "background_in_marginal",
                t.negative.include_background.to_string(),
            ),
            (
                "literal_unmasked_consistency",
                (!t.consistency.mask_both).to_string(),
            ),
            ("stop_gradient", t.consistency.stop_gradient.to_string()),
            ("em_tol", format!("{:?}", t.em_tol)),
            ("em_max_iters", t.em_max_iters.to_string()),
            ("gradcheck_seeds", self.gradcheck_seeds.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.phantom;
        let t = &mut self.train;
        match key {
            "data_root" => self.data_root = PathBuf::from(value),
            "run_dir" => self.run_dir = PathBuf::from(value),
            "seed" => self.seed = parse_num(key, value)?,
            "train_images" => self.train_images = parse_num(key, value)?,
            "val_images" => self.val_images = parse_num(key, value)?,
            "test_images" => self.test_images = parse_num(key, value)?,
            "size" => p.size = parse_num(key, value)?,
            "classes" => p.classes = parse_num(key, value)?,
            "means" => p.means = parse_list(key, value)?,
            "sigmas" => p.sigmas = parse_list(key, value)?,
            "bias_amplitude" => p.bias_amplitude = parse_num(key, value)?,
            "lv_radius" => p.lv_radius = parse_pair(key, value)?,
            "myo_thickness" => p.myo_thickness = parse_pair(key, value)?,
            "rv_thickness" => p.rv_thickness = parse_pair(key, value)?,
            "rv_offset" => p.rv_offset = parse_pair(key, value)?,
            "rv_angle" => p.rv_angle = parse_pair(key, value)?,
            "max_distractors" => p.max_distractors = parse_num(key, value)?,
            "distractor_radius" => p.distractor_radius = parse_pair(key, value)?,
            "distractor_intensity" => p.distractor_intensity = parse_num(key, value)?,
            "margin" => p.margin = parse_num(key, value)?,
            "border_band" => p.border_band = parse_num(key, value)?,
            "degenerate" => p.degenerate = parse_bool(key, value)?,
            "epochs" => t.epochs = parse_num(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "learning_rate" => t.learning_rate = parse_num(key, value)?,
            "beta1" => t.beta1 = parse_num(key, value)?,
            "beta2" => t.beta2 = parse_num(key, value)?,
            "adam_eps" => t.adam_eps = parse_num(key, value)?,
            "lambda1" => t.weights.lambda1 = parse_num(key, value)?,
            "lambda2" => t.weights.lambda2 = parse_num(key, value)?,
            "square_size" => t.square_size = parse_num(key, value)?,
            "ablation" => {
                t.ablation = Ablation::parse(value).ok_or_else(|| {
                    anyhow!(
                        "ablation: unknown arm {value:?} (expected one of {})",
                        Ablation::names().collect::<Vec<_>>().join(", ")
                    )
                })?
            }
            "reduction" => {
                t.negative.reduction = match value {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => bail!("reduction: expected mean or sum, got {value:?}"),
                }
            }
            "background_in_marginal" => t.negative.include_background = parse_bool(key, value)?,
            "literal_unmasked_consistency" => t.consistency.mask_both = !parse_bool(key, value)?,
            "stop_gradient" => t.consistency.stop_gradient = parse_bool(key, value)?,
            "em_tol" => t.em_tol = parse_num(key, value)?,
            "em_max_iters" => t.em_max_iters = parse_num(key, value)?,
            "gradcheck_seeds" => self.gradcheck_seeds = parse_num(key, value)?,
            _ => bail!("unknown configuration key {key:?}"),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", n + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Canonical text: every key in fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Canonical text prefixed with its hash, as copied next to outputs.
    pub fn to_file_text(&self) -> String {
        format!("# config_hash = {}\n{}", self.hash(), self.to_text())
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            seed: self.seed,
            ..self.phantom.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom_spec().validate()?;
        self.train_config().validate()?;
        if self.train_images == 0 {
            bail!("train_images must be positive");
        }
        Ok(())
    }
}
