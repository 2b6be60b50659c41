//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::Scaling;
use crate::dlnet::{NetworkConfig, DECODER_BLOCKS, STAGES};
use crate::error::{Error, Result};
use crate::losses::LossConfig;

/// Element type used for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Self::F32),
            "f64" | "64" => Ok(Self::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// The learning rate is divided by this every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Frames per training sequence; only 3 is supported.
    pub seq_len: usize,
    /// Stops after this many optimizer steps when nonzero.
    pub max_steps: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Flip and colour-jitter the network inputs.
    pub augment: bool,
    pub data: Option<PathBuf>,
    /// Held-out sequences evaluated before and after training.
    pub eval_data: Option<PathBuf>,
    pub eval_scaling: Scaling,
    pub out: PathBuf,
    /// Defaults to `checkpoint.dlck` inside `out`.
    pub checkpoint: Option<PathBuf>,
    /// Continue from the checkpoint when it exists.
    pub resume: bool,
    pub network: NetworkConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            decay_factor: 10.0,
            decay_every: 15,
            epochs: 5,
            batch_size: 4,
            seq_len: 3,
            max_steps: 0,
            seed: 0,
            precision: Precision::F32,
            augment: true,
            data: None,
            eval_data: None,
            eval_scaling: Scaling::Median,
            out: PathBuf::from("run"),
            checkpoint: None,
            resume: false,
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{v}` for `{key}`"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_array<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let list = parse_list(key, v)?;
    list.try_into()
        .map_err(|l: Vec<usize>| Error::Config(format!("`{key}` needs {N} values, got {}", l.len())))
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Serialized name of a unit enum variant.
fn tag<S: Serialize>(v: &S) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl TrainConfig {
    /// Every accepted key, in the order written by [`TrainConfig::to_text`].
    pub const KEYS: &'static [&'static str] = &[
        "lr",
        "decay_factor",
        "decay_every",
        "epochs",
        "batch_size",
        "seq_len",
        "max_steps",
        "seed",
        "precision",
        "augment",
        "data",
        "eval_data",
        "eval_scaling",
        "out",
        "checkpoint",
        "resume",
        "alpha",
        "alpha_on_ssim",
        "beta",
        "scales",
        "smoothness",
        "masked_fill",
        "min_depth",
        "max_depth",
        "width",
        "height",
        "stem_width",
        "widths",
        "strides",
        "decoder_widths",
        "blocks_per_stage",
        "linformer_depth",
        "hidden_divisor",
        "heads",
        "k_proj",
        "one_kv_heads",
        "share_kv",
        "activation",
        "pose_width",
    ];

    /// Full-scale schedule and resolution.
    pub fn full_scale() -> Self {
        Self {
            epochs: 25,
            batch_size: 12,
            network: NetworkConfig::full_scale(),
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let path = || (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "lr" => self.lr = parse(key, v)?,
            "decay_factor" => self.decay_factor = parse(key, v)?,
            "decay_every" => self.decay_every = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seq_len" => self.seq_len = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = v.parse()?,
            "augment" => self.augment = parse_bool(key, v)?,
            "data" => self.data = path(),
            "eval_data" => self.eval_data = path(),
            "eval_scaling" => self.eval_scaling = v.parse()?,
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = path(),
            "resume" => self.resume = parse_bool(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "alpha_on_ssim" => self.loss.alpha_on_ssim = parse_bool(key, v)?,
            "beta" => self.loss.beta = parse(key, v)?,
            "scales" => {
                let s = parse_list(key, v)?;
                self.loss.scales = s.clone();
                self.network.scales = s;
            }
            "smoothness" => self.loss.smoothness = v.parse()?,
            "masked_fill" => self.loss.masked_fill = v.parse()?,
            "min_depth" => self.loss.min_depth = parse(key, v)?,
            "max_depth" => self.loss.max_depth = parse(key, v)?,
            "width" => self.network.width = parse(key, v)?,
            "height" => self.network.height = parse(key, v)?,
            "stem_width" => self.network.stem_width = parse(key, v)?,
            "widths" => self.network.widths = parse_array::<STAGES>(key, v)?,
            "strides" => self.network.strides = parse_array::<STAGES>(key, v)?,
            "decoder_widths" => self.network.decoder_widths = parse_array::<DECODER_BLOCKS>(key, v)?,
            "blocks_per_stage" => self.network.blocks_per_stage = parse(key, v)?,
            "linformer_depth" => self.network.linformer_depth = parse(key, v)?,
            "hidden_divisor" => self.network.hidden_divisor = parse(key, v)?,
            "heads" => self.network.heads = parse(key, v)?,
            "k_proj" => self.network.k_proj = parse(key, v)?,
            "one_kv_heads" => self.network.one_kv_heads = parse_bool(key, v)?,
            "share_kv" => self.network.share_kv = parse_bool(key, v)?,
            "activation" => self.network.activation = v.parse()?,
            "pose_width" => self.network.pose_width = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let (n, l) = (&self.network, &self.loss);
        match key {
            "lr" => self.lr.to_string(),
            "decay_factor" => self.decay_factor.to_string(),
            "decay_every" => self.decay_every.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "seed" => self.seed.to_string(),
            "precision" => tag(&self.precision),
            "augment" => self.augment.to_string(),
            "data" => path(&self.data),
            "eval_data" => path(&self.eval_data),
            "eval_scaling" => tag(&self.eval_scaling),
            "out" => self.out.display().to_string(),
            "checkpoint" => path(&self.checkpoint),
            "resume" => self.resume.to_string(),
            "alpha" => l.alpha.to_string(),
            "alpha_on_ssim" => l.alpha_on_ssim.to_string(),
            "beta" => l.beta.to_string(),
            "scales" => list(&l.scales),
            "smoothness" => tag(&l.smoothness),
            "masked_fill" => tag(&l.masked_fill),
            "min_depth" => l.min_depth.to_string(),
            "max_depth" => l.max_depth.to_string(),
            "width" => n.width.to_string(),
            "height" => n.height.to_string(),
            "stem_width" => n.stem_width.to_string(),
            "widths" => list(&n.widths),
            "strides" => list(&n.strides),
            "decoder_widths" => list(&n.decoder_widths),
            "blocks_per_stage" => n.blocks_per_stage.to_string(),
            "linformer_depth" => n.linformer_depth.to_string(),
            "hidden_divisor" => n.hidden_divisor.to_string(),
            "heads" => n.heads.to_string(),
            "k_proj" => n.k_proj.to_string(),
            "one_kv_heads" => n.one_kv_heads.to_string(),
            "share_kv" => n.share_kv.to_string(),
            "activation" => tag(&n.activation),
            "pose_width" => n.pose_width.to_string(),
            _ => String::new(),
        }
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len != 3 {
            return Err(Error::Config(format!("seq_len {} unsupported; sequences have 3 frames", self.seq_len)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch_size, epochs and decay_every must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.decay_factor > 0.0) {
            return Err(Error::Config(format!("bad learning rate {} / decay {}", self.lr, self.decay_factor)));
        }
        if self.network.scales != self.loss.scales {
            return Err(Error::Config("network and loss scales differ".into()));
        }
        self.network.validate()?;
        self.loss.validate()
    }

    /// `lr / decay_factor^floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr / self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.dlck"))
    }
}
