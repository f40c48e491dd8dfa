use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::losses::{AlignmentMetric, Bandwidth, BlockSet, MmdOptions};
use crate::scenegen::{AppearanceProtocol, DUSK_ID};
use crate::segmodel::{ModelConfig, NUM_BLOCKS};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Dg,
    Uda,
}

impl FromStr for Mode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dg" => Ok(Mode::Dg),
            "uda" => Ok(Mode::Uda),
            other => Err(TrainError::Config(format!("unknown mode `{other}` (expected dg or uda)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dg => "dg",
            Mode::Uda => "uda",
        })
    }
}

/// What, if anything, ties the two appearance views together.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Alignment {
    None,
    /// Symmetric KL between the two views' logits.
    Consistency,
    Features(AlignmentMetric),
}

impl Alignment {
    pub fn is_none(&self) -> bool {
        matches!(self, Alignment::None)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Alignment::None => "none",
            Alignment::Consistency => "consistency",
            Alignment::Features(m) => m.name(),
        }
    }

    /// Parses `none | consistency | l2 | mmd | cs`; MMD starts with default options.
    pub fn parse(name: &str) -> Result<Self, TrainError> {
        Ok(match name.trim().to_ascii_lowercase().as_str() {
            "none" => Alignment::None,
            "consistency" => Alignment::Consistency,
            "l2" => Alignment::Features(AlignmentMetric::L2),
            "cs" => Alignment::Features(AlignmentMetric::Cs),
            "mmd" => Alignment::Features(AlignmentMetric::Mmd(MmdOptions::default())),
            other => {
                return Err(TrainError::Config(format!(
                    "unknown align.metric `{other}` (expected none, consistency, l2, mmd or cs)"
                )))
            }
        })
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub lr_power: f64,
    pub protocol: AppearanceProtocol,
    pub align: Alignment,
    pub blocks: BlockSet,
    pub mixup: bool,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    /// Teacher EMA momentum.
    pub ema: f64,
    /// Target appearance for UDA.
    pub target_appearance: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Evaluate every this many iterations (0: only after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dg,
            iterations: 2000,
            batch: 2,
            lr: 6e-4,
            lr_power: 0.9,
            protocol: AppearanceProtocol::Random,
            align: Alignment::None,
            blocks: BlockSet::all(),
            mixup: false,
            tau: 0.968,
            ema: 0.99,
            target_appearance: DUSK_ID,
            seed: 0,
            model: ModelConfig::default(),
            eval_every: 0,
        }
    }
}

fn bad(key: &str, value: &str) -> TrainError {
    TrainError::Config(format!("invalid value `{value}` for `{key}`"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value.parse().map_err(|_| bad(key, value))
}

fn flag(key: &str, value: &str) -> Result<bool, TrainError> {
    match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

impl TrainConfig {
    /// `λ = 1 / |blocks|` for feature alignment, 1 for consistency, 0 otherwise.
    pub fn lambda(&self) -> f64 {
        match self.align {
            Alignment::None => 0.0,
            Alignment::Consistency => 1.0,
            Alignment::Features(_) => self.blocks.lambda(),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let value = value.trim().trim_matches('"');
        match key.trim() {
            "mode" => self.mode = value.parse()?,
            "iterations" => self.iterations = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr.power" => self.lr_power = num(key, value)?,
            "protocol" => self.protocol = value.parse().map_err(TrainError::Config)?,
            "align.metric" => {
                let keep = match self.align {
                    Alignment::Features(AlignmentMetric::Mmd(o)) => Some(o),
                    _ => None,
                };
                self.align = Alignment::parse(value)?;
                if let (Alignment::Features(AlignmentMetric::Mmd(o)), Some(k)) = (&mut self.align, keep) {
                    *o = k;
                }
            }
            "align.blocks" => self.blocks = value.parse().map_err(|e| TrainError::Config(format!("{e}")))?,
            "align.mmd_sigma" => {
                let bw = if value.eq_ignore_ascii_case("median") { Bandwidth::Median } else { Bandwidth::Fixed(num(key, value)?) };
                self.mmd_options_mut(key)?.bandwidth = bw;
            }
            "align.mmd_max_samples" => {
                let n = num(key, value)?;
                self.mmd_options_mut(key)?.max_samples = n;
            }
            "uda.mixup" => self.mixup = flag(key, value)?,
            "uda.tau" => self.tau = num(key, value)?,
            "uda.ema" => self.ema = num(key, value)?,
            "uda.target" => {
                self.target_appearance = match value.parse::<crate::scenegen::Appearance>() {
                    Ok(a) => a.id(),
                    Err(_) if value.eq_ignore_ascii_case("dusk") => DUSK_ID,
                    Err(_) => num(key, value)?,
                }
            }
            "seed" | "seeds" => self.seed = num(key, value)?,
            "model.widths" => {
                let w: Vec<usize> =
                    value.split(',').map(|p| num(key, p.trim())).collect::<Result<_, _>>()?;
                let widths: [usize; NUM_BLOCKS] = w.try_into().map_err(|_| bad(key, value))?;
                self.model = ModelConfig::with_widths(widths);
            }
            "eval.every" => self.eval_every = num(key, value)?,
            other => return Err(TrainError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    fn mmd_options_mut(&mut self, key: &str) -> Result<&mut MmdOptions, TrainError> {
        match &mut self.align {
            Alignment::Features(AlignmentMetric::Mmd(o)) => Ok(o),
            _ => Err(TrainError::Config(format!("`{key}` requires align.metric = mmd (set it first)"))),
        }
    }

    /// Parses flat `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || line.starts_with('[') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat text that [`TrainConfig::parse`] reads back to an equal config.
    pub fn to_text(&self) -> String {
        let w = self.model.widths;
        let mut out = format!(
            "mode = {}\niterations = {}\nbatch = {}\nlr = {}\nlr.power = {}\nprotocol = {}\nalign.metric = {}\nalign.blocks = {}\n",
            self.mode,
            self.iterations,
            self.batch,
            self.lr,
            self.lr_power,
            self.protocol,
            self.align,
            self.blocks.blocks().iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
        );
        if let Alignment::Features(AlignmentMetric::Mmd(o)) = self.align {
            let sigma = match o.bandwidth {
                Bandwidth::Median => "median".to_string(),
                Bandwidth::Fixed(s) => s.to_string(),
            };
            out += &format!("align.mmd_sigma = {sigma}\nalign.mmd_max_samples = {}\n", o.max_samples);
        }
        out += &format!(
            "uda.mixup = {}\nuda.tau = {}\nuda.ema = {}\nuda.target = {}\nseed = {}\nmodel.widths = {},{},{},{}\neval.every = {}\n",
            if self.mixup { "on" } else { "off" },
            self.tau,
            self.ema,
            self.target_appearance,
            self.seed,
            w[0],
            w[1],
            w[2],
            w[3],
            self.eval_every,
        );
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.iterations == 0 || self.batch == 0 {
            return fail("iterations and batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_power >= 0.0) {
            return fail("lr must be positive and lr.power non-negative");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return fail("uda.tau must lie in (0, 1)");
        }
        if !(0.9..1.0).contains(&self.ema) {
            return fail("uda.ema must lie in [0.9, 1)");
        }
        if let Alignment::Features(m) = &self.align {
            m.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        }
        if !self.align.is_none() && matches!(self.protocol, AppearanceProtocol::Single(_)) {
            return fail("alignment needs two appearances; the single protocol only supports align.metric = none");
        }
        Ok(())
    }
}
