//! Flat `key = value` run configuration.
//!
//! One file format covers training, loss and synthetic-data settings.
//! Blank lines and `#` comments are ignored; unknown or repeated keys are
//! errors. Precedence is defaults < file < command-line overrides.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::dataio::SyntheticSpec;
use crate::eae::DistanceMode;
use crate::error::{Error, Result};
use crate::loss::FgvNorm;
use crate::trainer::{Precision, TrainConfig};

/// Every key with its one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("learning_rate", "Adam step size"),
    ("batch_size", "conversations per batch"),
    ("dropout", "dropout rate in [0, 1)"),
    ("lstm_layers", "stacked BiLSTM layers in the continuation encoder"),
    ("ece_heads", "heads of the global attention (must divide 2*d_u)"),
    ("ia_heads", "heads of the attribution attention (must divide 2*d_u)"),
    ("scale_ia_logits", "scale attribution logits by 1/sqrt(head width)"),
    ("distance_mode", "index | turn-taking"),
    ("alpha", "weight of the KL term"),
    ("beta", "weight of the adversarial term"),
    ("epsilon", "FGV perturbation radius"),
    ("fgv_norm", "global | per-utterance"),
    ("epochs", "maximum training epochs"),
    ("patience", "epochs without val improvement before stopping"),
    ("seed", "training seed (init, shuffling, dropout)"),
    ("grad_clip_norm", "global gradient-norm clip"),
    ("encoder_init_gain", "multiplier on the context-encoder weight init range"),
    ("output_gain", "initial W_o = output_gain * I"),
    ("no_ece", "replace the continuation encoder with a linear map"),
    ("no_eae", "drop the attribution encoder and the KL term"),
    ("no_kl", "drop the KL term"),
    ("no_adv", "drop the adversarial term"),
    ("precision", "32 | 64: state precision between updates"),
    ("num_emotions", "synthetic: emotion classes"),
    ("num_speakers", "synthetic: speakers"),
    ("feature_dim", "synthetic: utterance feature width d_u"),
    ("train_conversations", "synthetic: train split size"),
    ("val_conversations", "synthetic: val split size"),
    ("test_conversations", "synthetic: test split size"),
    ("min_length", "synthetic: shortest conversation"),
    ("max_length", "synthetic: longest conversation"),
    ("cluster_separation", "synthetic: norm of each emotion center"),
    ("speaker_offset_scale", "synthetic: per-speaker offset scale"),
    ("emotion_transition_stickiness", "synthetic: probability of keeping the emotion"),
    ("data_seed", "synthetic: generator seed"),
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}` (expected true/false)"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synthetic;
        match key {
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "dropout" => t.dropout = parse(key, value)?,
            "lstm_layers" => t.lstm_layers = parse(key, value)?,
            "ece_heads" => t.ece_heads = parse(key, value)?,
            "ia_heads" => t.ia_heads = parse(key, value)?,
            "scale_ia_logits" => t.scale_ia_logits = parse_bool(key, value)?,
            "distance_mode" => {
                t.distance_mode = match value {
                    "index" => DistanceMode::Index,
                    "turn-taking" => DistanceMode::TurnTaking,
                    _ => return Err(Error::Config(format!("invalid distance_mode `{value}`"))),
                }
            }
            "alpha" => t.alpha = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "epsilon" => t.epsilon = parse(key, value)?,
            "fgv_norm" => {
                t.fgv_norm = match value {
                    "global" => FgvNorm::Global,
                    "per-utterance" => FgvNorm::PerUtterance,
                    _ => return Err(Error::Config(format!("invalid fgv_norm `{value}`"))),
                }
            }
            "epochs" => t.epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "grad_clip_norm" => t.grad_clip_norm = parse(key, value)?,
            "encoder_init_gain" => t.encoder_init_gain = parse(key, value)?,
            "output_gain" => t.output_gain = parse(key, value)?,
            "no_ece" => t.ablation.no_ece = parse_bool(key, value)?,
            "no_eae" => t.ablation.no_eae = parse_bool(key, value)?,
            "no_kl" => t.ablation.no_kl = parse_bool(key, value)?,
            "no_adv" => t.ablation.no_adv = parse_bool(key, value)?,
            "precision" => {
                t.precision = match value {
                    "32" => Precision::F32,
                    "64" => Precision::F64,
                    _ => return Err(Error::Config(format!("invalid precision `{value}` (expected 32 or 64)"))),
                }
            }
            "num_emotions" => s.num_emotions = parse(key, value)?,
            "num_speakers" => s.num_speakers = parse(key, value)?,
            "feature_dim" => s.feature_dim = parse(key, value)?,
            "train_conversations" => s.conversations_per_split.train = parse(key, value)?,
            "val_conversations" => s.conversations_per_split.val = parse(key, value)?,
            "test_conversations" => s.conversations_per_split.test = parse(key, value)?,
            "min_length" => s.length_range.0 = parse(key, value)?,
            "max_length" => s.length_range.1 = parse(key, value)?,
            "cluster_separation" => s.cluster_separation = parse(key, value)?,
            "speaker_offset_scale" => s.speaker_offset_scale = parse(key, value)?,
            "emotion_transition_stickiness" => s.emotion_transition_stickiness = parse(key, value)?,
            "data_seed" => s.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let s = &self.synthetic;
        let v = match key {
            "learning_rate" => t.learning_rate.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "dropout" => t.dropout.to_string(),
            "lstm_layers" => t.lstm_layers.to_string(),
            "ece_heads" => t.ece_heads.to_string(),
            "ia_heads" => t.ia_heads.to_string(),
            "scale_ia_logits" => t.scale_ia_logits.to_string(),
            "distance_mode" => match t.distance_mode {
                DistanceMode::Index => "index".into(),
                DistanceMode::TurnTaking => "turn-taking".into(),
            },
            "alpha" => t.alpha.to_string(),
            "beta" => t.beta.to_string(),
            "epsilon" => t.epsilon.to_string(),
            "fgv_norm" => match t.fgv_norm {
                FgvNorm::Global => "global".into(),
                FgvNorm::PerUtterance => "per-utterance".into(),
            },
            "epochs" => t.epochs.to_string(),
            "patience" => t.patience.to_string(),
            "seed" => t.seed.to_string(),
            "grad_clip_norm" => t.grad_clip_norm.to_string(),
            "encoder_init_gain" => t.encoder_init_gain.to_string(),
            "output_gain" => t.output_gain.to_string(),
            "no_ece" => t.ablation.no_ece.to_string(),
            "no_eae" => t.ablation.no_eae.to_string(),
            "no_kl" => t.ablation.no_kl.to_string(),
            "no_adv" => t.ablation.no_adv.to_string(),
            "precision" => match t.precision {
                Precision::F32 => "32".into(),
                Precision::F64 => "64".into(),
            },
            "num_emotions" => s.num_emotions.to_string(),
            "num_speakers" => s.num_speakers.to_string(),
            "feature_dim" => s.feature_dim.to_string(),
            "train_conversations" => s.conversations_per_split.train.to_string(),
            "val_conversations" => s.conversations_per_split.val.to_string(),
            "test_conversations" => s.conversations_per_split.test.to_string(),
            "min_length" => s.length_range.0.to_string(),
            "max_length" => s.length_range.1.to_string(),
            "cluster_separation" => s.cluster_separation.to_string(),
            "speaker_offset_scale" => s.speaker_offset_scale.to_string(),
            "emotion_transition_stickiness" => s.emotion_transition_stickiness.to_string(),
            "data_seed" => s.seed.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{origin}:{}: duplicate key `{key}`", no + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", no + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Every key in canonical order, as a parseable config file.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synthetic.validate()?;
        Ok(())
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
