//! Run configuration: TOML file plus command-line overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::segpipe::{AttentionKind, ModelConfig, SceneConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Inductive,
    Transductive,
    /// All classes labelled; upper reference.
    FullySupervised,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Inductive => "inductive",
            Mode::Transductive => "transductive",
            Mode::FullySupervised => "fully-supervised",
        })
    }
}

/// Seeds given as `a..b` (inclusive), `a..=b`, `a,b,c` or a single value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

impl FromStr for SeedList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let num = |t: &str| t.trim().parse::<u64>().map_err(|_| format!("bad seed `{}`", t.trim()));
        if let Some((a, b)) = s.split_once("..") {
            let (a, b) = (num(a)?, num(b.strip_prefix('=').unwrap_or(b))?);
            if b < a {
                return Err(format!("empty seed range {s}"));
            }
            return Ok(SeedList((a..=b).collect()));
        }
        let seeds = s.split(',').map(num).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(SeedList(seeds))
    }
}

impl Serialize for SeedList {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SeedList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Spec(String),
            One(u64),
            List(Vec<u64>),
        }
        match Raw::deserialize(d)? {
            Raw::Spec(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::One(v) => Ok(SeedList(vec![v])),
            Raw::List(v) => Ok(SeedList(v)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Per-prompt score maps as PGM images.
    pub scoremaps: bool,
    /// Trained parameters per seed.
    pub checkpoints: bool,
    /// Generated scenes per seed.
    pub scenes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub seeds: SeedList,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub export: ExportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Transductive,
            seeds: SeedList(vec![0]),
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            export: ExportConfig::default(),
        }
    }
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            field: "<toml>".into(),
            reason: e.to_string().trim_end().replace('\n', " "),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { reason, .. } => Error::Config {
                field: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    /// The decoder's class and prompt counts follow the scene.
    pub fn sync(&mut self) {
        self.model.decoder.classes = self.scene.classes;
        self.model.decoder.prompts = self.scene.prompts;
    }

    /// Checks every field; errors name the offending path.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.0.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.0.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.0.len() {
            return Err(Error::config("seeds", "duplicate seed"));
        }
        self.scene.validate()?;
        self.model.validate().map_err(|e| prefixed("model", e))?;
        self.train.validate().map_err(|e| prefixed("train", e))?;
        if self.model.decoder.classes != self.scene.classes || self.model.decoder.prompts != self.scene.prompts {
            return Err(Error::config("model.decoder.classes", "class and prompt counts must match the scene"));
        }
        Ok(())
    }
}

/// Command-line overrides applied on top of the configuration file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// `0..4` (inclusive), `0..=4`, `1,3,5` or `7`.
    #[arg(long, value_name = "SPEC")]
    pub seeds: Option<SeedList>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Temperature of both the score-map transport and the decoder attention.
    #[arg(long, allow_hyphen_values = true)]
    pub epsilon: Option<f64>,
    /// Iteration cap of the score-map transport.
    #[arg(long)]
    pub sinkhorn_iters: Option<usize>,
    /// Transport iterations inside decoder attention.
    #[arg(long)]
    pub mpsa_iters: Option<usize>,
    /// Decoder weight in the ensemble.
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub lr: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub weight_decay: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda_ce: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda_focal: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda_dice: Option<f64>,
    /// Focal exponent.
    #[arg(long, allow_hyphen_values = true)]
    pub gamma: Option<f64>,
    #[arg(long, value_parser = parse_attention)]
    pub attention: Option<AttentionKind>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub prompts: Option<usize>,
    /// Embedding dimension of the scene.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Feature grid as `HxW`.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    /// Label grid as `HxW`.
    #[arg(long, value_parser = parse_grid)]
    pub image: Option<(usize, usize)>,
    #[arg(long, allow_hyphen_values = true)]
    pub noise: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub text_gap: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub domain_shift: Option<f64>,
    /// Withheld classes, comma separated; empty for none.
    #[arg(long, value_parser = parse_class_list)]
    pub unseen: Option<ClassList>,
    #[arg(long, allow_hyphen_values = true)]
    pub pseudo_threshold: Option<f64>,
    #[arg(long)]
    pub pseudo_every: Option<usize>,
    #[arg(long)]
    pub export_scoremaps: bool,
    #[arg(long)]
    pub export_checkpoints: bool,
    #[arg(long)]
    pub export_scenes: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassList(pub Vec<usize>);

fn parse_class_list(s: &str) -> std::result::Result<ClassList, String> {
    if s.trim().is_empty() {
        return Ok(ClassList(Vec::new()));
    }
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad class `{}`", t.trim())))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(ClassList)
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad size `{t}`"));
    Ok((p(h)?, p(w)?))
}

fn parse_attention(s: &str) -> std::result::Result<AttentionKind, String> {
    match s {
        "mpsa" => Ok(AttentionKind::Mpsa),
        "softmax" => Ok(AttentionKind::Softmax),
        _ => Err(format!("expected `mpsa` or `softmax`, got `{s}`")),
    }
}

impl Overrides {
    /// Loads the configuration file (or defaults), applies the overrides,
    /// syncs derived fields and validates.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut c);
        c.sync();
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&self, c: &mut RunConfig) {
        macro_rules! set {
            ($opt:expr => $($dst:expr),+) => {
                if let Some(v) = $opt.clone() {
                    $($dst = v.clone();)+
                }
            };
        }
        set!(self.mode => c.mode);
        set!(self.seeds => c.seeds);
        set!(self.steps => c.train.steps);
        set!(self.epsilon => c.model.score.epsilon, c.model.decoder.mpsa.epsilon);
        set!(self.sinkhorn_iters => c.model.score.max_iters);
        set!(self.mpsa_iters => c.model.decoder.mpsa.iters);
        set!(self.lambda => c.model.lambda);
        set!(self.lr => c.train.optimizer.lr);
        set!(self.weight_decay => c.train.optimizer.weight_decay);
        set!(self.lambda_ce => c.train.loss.lambda_ce);
        set!(self.lambda_focal => c.train.loss.lambda_focal);
        set!(self.lambda_dice => c.train.loss.lambda_dice);
        set!(self.gamma => c.train.loss.gamma);
        set!(self.attention => c.model.decoder.attention);
        set!(self.classes => c.scene.classes);
        set!(self.prompts => c.scene.prompts);
        set!(self.dim => c.scene.dim);
        set!(self.grid => c.scene.grid);
        set!(self.image => c.scene.image);
        set!(self.noise => c.scene.noise);
        set!(self.text_gap => c.scene.text_gap);
        set!(self.domain_shift => c.scene.domain_shift);
        set!(self.pseudo_threshold => c.train.pseudo.threshold);
        set!(self.pseudo_every => c.train.pseudo.every);
        if let Some(u) = &self.unseen {
            c.scene.unseen = u.0.clone();
        }
        c.export.scoremaps |= self.export_scoremaps;
        c.export.checkpoints |= self.export_checkpoints;
        c.export.scenes |= self.export_scenes;
    }
}
