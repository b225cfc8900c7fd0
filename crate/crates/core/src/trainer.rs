//! Training loop, optimizer, evaluation and ablation orchestration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Conversation, Corpus, Split};
use crate::eae::DistanceMode;
use crate::error::{Error, Result};
use crate::loss::{conversation_objective, FgvNorm, LossComponents, LossConfig};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{conversation_features, HcanModel, Mode, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Array, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Precision {
    /// Parameters and optimizer moments are rounded to f32 after every
    /// update, so checkpoints are lossless.
    #[default]
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Ablation {
    pub no_ece: bool,
    pub no_eae: bool,
    pub no_kl: bool,
    pub no_adv: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSwitch {
    NoEce,
    NoEae,
    NoKl,
    NoAdv,
}

impl AblationSwitch {
    pub const ALL: [AblationSwitch; 4] = [Self::NoEce, Self::NoEae, Self::NoKl, Self::NoAdv];

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "no_ece" => Some(Self::NoEce),
            "no_eae" => Some(Self::NoEae),
            "no_kl" => Some(Self::NoKl),
            "no_adv" => Some(Self::NoAdv),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NoEce => "no_ece",
            Self::NoEae => "no_eae",
            Self::NoKl => "no_kl",
            Self::NoAdv => "no_adv",
        }
    }

    /// Row label in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::NoEce => "w/o ECE",
            Self::NoEae => "w/o EAE",
            Self::NoKl => "w/o L_KL",
            Self::NoAdv => "w/o L_adv",
        }
    }

    pub fn apply(self, a: &mut Ablation) {
        match self {
            Self::NoEce => a.no_ece = true,
            Self::NoEae => a.no_eae = true,
            Self::NoKl => a.no_kl = true,
            Self::NoAdv => a.no_adv = true,
        }
    }
}

impl Ablation {
    pub fn label(&self) -> String {
        let parts: Vec<&str> = AblationSwitch::ALL
            .into_iter()
            .filter(|s| match s {
                AblationSwitch::NoEce => self.no_ece,
                AblationSwitch::NoEae => self.no_eae,
                AblationSwitch::NoKl => self.no_kl,
                AblationSwitch::NoAdv => self.no_adv,
            })
            .map(AblationSwitch::label)
            .collect();
        if parts.is_empty() {
            "HCAN".into()
        } else {
            parts.join(", ")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Conversations per batch.
    pub batch_size: usize,
    pub dropout: f64,
    pub lstm_layers: usize,
    pub ece_heads: usize,
    pub ia_heads: usize,
    pub scale_ia_logits: bool,
    pub distance_mode: DistanceMode,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub fgv_norm: FgvNorm,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    pub encoder_init_gain: f64,
    pub output_gain: f64,
    pub ablation: Ablation,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            dropout: 0.2,
            lstm_layers: 1,
            ece_heads: 8,
            ia_heads: 4,
            scale_ia_logits: true,
            distance_mode: DistanceMode::Index,
            alpha: 0.2,
            beta: 0.05,
            epsilon: 0.1,
            fgv_norm: FgvNorm::Global,
            epochs: 30,
            patience: 10,
            seed: 0,
            grad_clip_norm: 5.0,
            encoder_init_gain: 0.2,
            output_gain: 200.0,
            ablation: Ablation::default(),
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.lstm_layers == 0 || self.ece_heads == 0 || self.ia_heads == 0 {
            return bad("lstm_layers, ece_heads and ia_heads must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive".into());
        }
        self.model_config(1, 1).validate()?;
        self.loss_config().validate()
    }

    pub fn model_config(&self, feature_dim: usize, num_emotions: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            num_emotions,
            lstm_layers: self.lstm_layers,
            ece_heads: self.ece_heads,
            ia_heads: self.ia_heads,
            scale_ia_logits: self.scale_ia_logits,
            distance_mode: self.distance_mode,
            no_ece: self.ablation.no_ece,
            no_eae: self.ablation.no_eae,
            encoder_init_gain: self.encoder_init_gain,
            output_gain: self.output_gain,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            epsilon: self.epsilon,
            fgv_norm: self.fgv_norm,
            ablate_kl: self.ablation.no_kl,
            ablate_adv: self.ablation.no_adv,
            ablate_eae: self.ablation.no_eae,
        }
    }
}

fn round_f32(a: &mut Array) {
    a.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Adaptive-moment optimizer (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros = || store.values().iter().map(|a| Array::zeros(a.shape())).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the store's gradients. An all-zero gradient is a
    /// no-op: neither parameters nor moments change.
    pub fn step(&mut self, store: &mut ParamStore, precision: Precision) {
        if store.grads().iter().all(|g| g.data().iter().all(|&v| v == 0.0)) {
            return;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let g = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.value_mut(id);
            for i in 0..g.len() {
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g[i];
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g[i] * g[i];
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = self.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p.data_mut()[i] -= update;
            }
            if precision == Precision::F32 {
                round_f32(p);
                round_f32(m);
                round_f32(v);
            }
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Utterance-weighted mean of the total objective over the epoch.
    pub train_loss: f64,
    pub components: LossComponents,
    pub val: Option<Metrics>,
    pub improved: bool,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: HcanModel,
    pub best: HcanModel,
    pub best_f1: Option<f64>,
    pub bad_epochs: usize,
    pub epoch: usize,
    pub stopped: bool,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation weighted F1 (or the latest ones
    /// when there is no validation split).
    pub model: HcanModel,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
}

pub struct Trainer<'a> {
    corpus: &'a Corpus,
    config: TrainConfig,
    state: TrainState,
}

/// Fails unless every training utterance carries a label.
pub fn require_labels(convs: &[Conversation], what: &str) -> Result<()> {
    match convs.iter().find(|c| !c.is_labeled()) {
        Some(c) => Err(Error::LabelsRequired(format!("{what}: conversation `{}` is unlabeled", c.id))),
        None => Ok(()),
    }
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        require_labels(&corpus.train, "train split")
            .map_err(|e| Error::TrainingData(e.to_string()))?;
        let mcfg = config.model_config(corpus.feature_dim, corpus.num_emotions());
        let mut model = HcanModel::new(mcfg, config.seed)?;
        if config.precision == Precision::F32 {
            let ids: Vec<_> = model.store().ids().collect();
            for id in ids {
                round_f32(model.store_mut().value_mut(id));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let state = TrainState {
            optimizer: Adam::new(model.store(), config.learning_rate),
            best: model.clone(),
            model,
            best_f1: None,
            bad_epochs: 0,
            epoch: 0,
            stopped: false,
            rng,
            history: Vec::new(),
        };
        Ok(Trainer { corpus, config, state })
    }

    /// Continues from a saved state.
    pub fn resume(corpus: &'a Corpus, config: TrainConfig, mut state: TrainState) -> Result<Self> {
        config.validate()?;
        state.optimizer.learning_rate = config.learning_rate;
        check_compatible(&state.model, corpus)?;
        Ok(Trainer { corpus, config, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.state.stopped || self.state.epoch >= self.config.epochs
    }

    /// Trains until `config.epochs` or early stopping.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            model: self.state.best.clone(),
            history: self.state.history.clone(),
            state: self.state,
        }
    }

    /// One pass over the shuffled training split plus validation.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let st = &mut self.state;
        let mut order: Vec<usize> = (0..self.corpus.train.len()).collect();
        order.shuffle(&mut st.rng);
        let loss_cfg = self.config.loss_config();
        let mut sum_total = 0.0;
        let mut sum_comp = LossComponents::default();
        let mut utterances = 0usize;
        for (bi, batch) in order.chunks(self.config.batch_size).enumerate() {
            let batch_utts: usize = batch.iter().map(|&i| self.corpus.train[i].len()).sum();
            st.model.store_mut().zero_grad();
            let mut batch_total = 0.0;
            for &ci in batch {
                let conv = &self.corpus.train[ci];
                let x = conversation_features(conv, self.corpus.feature_dim)?;
                let labels = conv.labels().expect("checked at train start");
                let mut tape = Tape::new();
                let mut mode = Mode::Train {
                    rng: &mut st.rng,
                    rate: self.config.dropout,
                };
                let obj = conversation_objective(
                    &mut tape,
                    &st.model,
                    &x,
                    &conv.speakers(),
                    &labels,
                    &loss_cfg,
                    None,
                    &mut mode,
                )?;
                let root = tape.scale(obj.total, 1.0 / batch_utts as f64);
                tape.backward(root)?;
                for b in &obj.bounds {
                    st.model.store_mut().accumulate(&tape, b);
                }
                batch_total += tape.scalar(obj.total);
                sum_comp.cross += obj.components.cross;
                sum_comp.kl += obj.components.kl;
                sum_comp.adv += obj.components.adv;
            }
            let batch_loss = batch_total / batch_utts as f64;
            if !batch_loss.is_finite() || !st.model.store().grad_norm().is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: bi,
                    value: batch_loss,
                });
            }
            sum_total += batch_total;
            utterances += batch_utts;
            clip_grad_norm(st.model.store_mut(), self.config.grad_clip_norm);
            st.optimizer.step(st.model.store_mut(), self.config.precision);
        }
        st.epoch += 1;
        let denom = utterances.max(1) as f64;
        let val = if self.corpus.val.is_empty() {
            None
        } else {
            Some(evaluate(&st.model, &self.corpus.val, self.corpus.num_emotions())?)
        };
        let improved = match &val {
            None => {
                st.best = st.model.clone();
                true
            }
            Some(m) => {
                if st.best_f1.is_none_or(|b| m.weighted_f1 > b) {
                    st.best_f1 = Some(m.weighted_f1);
                    st.best = st.model.clone();
                    st.bad_epochs = 0;
                    true
                } else {
                    st.bad_epochs += 1;
                    if st.bad_epochs >= self.config.patience {
                        st.stopped = true;
                    }
                    false
                }
            }
        };
        st.history.push(EpochRecord {
            epoch: st.epoch,
            train_loss: sum_total / denom,
            components: LossComponents {
                cross: sum_comp.cross / denom,
                kl: sum_comp.kl / denom,
                adv: sum_comp.adv / denom,
            },
            val,
            improved,
        });
        Ok(st.history.last().expect("just pushed"))
    }
}

/// Trains a fresh model on `corpus.train`, selecting on `corpus.val`.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(corpus, config.clone())?.run()
}

pub fn check_compatible(model: &HcanModel, corpus: &Corpus) -> Result<()> {
    let c = model.config();
    if c.feature_dim != corpus.feature_dim || c.num_emotions != corpus.num_emotions() {
        return Err(Error::Compatibility(format!(
            "model expects d_u = {} and {} emotions, corpus has d_u = {} and {} labels",
            c.feature_dim,
            c.num_emotions,
            corpus.feature_dim,
            corpus.num_emotions()
        )));
    }
    Ok(())
}

/// Predicted labels for each conversation, computed in parallel over
/// read-only parameters.
pub fn predict_all(model: &HcanModel, convs: &[Conversation]) -> Result<Vec<crate::model::Prediction>> {
    convs.par_iter().map(|c| model.predict(c)).collect()
}

/// Argmax-of-ŷ metrics over a labeled split.
pub fn evaluate(model: &HcanModel, convs: &[Conversation], num_emotions: usize) -> Result<Metrics> {
    require_labels(convs, "evaluation split")?;
    let preds = predict_all(model, convs)?;
    let mut p = Vec::new();
    let mut g = Vec::new();
    for (pred, conv) in preds.iter().zip(convs) {
        p.extend_from_slice(&pred.labels);
        g.extend(conv.labels().expect("checked"));
    }
    Ok(compute_metrics(&p, &g, num_emotions))
}

pub fn evaluate_split(model: &HcanModel, corpus: &Corpus, split: Split) -> Result<Metrics> {
    check_compatible(model, corpus)?;
    evaluate(model, corpus.split(split), corpus.num_emotions())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub test: Metrics,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    if xs.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

/// Independent runs with `config.seed` replaced by each seed; executed in
/// parallel. Results are returned in seed order.
pub fn run_seeds(corpus: &Corpus, config: &TrainConfig, seeds: &[u64]) -> Result<Vec<(SeedRun, HcanModel)>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..config.clone() };
            let out = train(corpus, &cfg)?;
            let test = evaluate_split(&out.model, corpus, Split::Test)?;
            Ok((
                SeedRun {
                    seed,
                    test,
                    epochs_run: out.history.len(),
                },
                out.model,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub test_weighted_f1: Vec<f64>,
    pub summary: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<14} {:>10} {:>8}\n", "model", "W-Avg F1", "std");
        let full = self.rows.first().map(|r| r.summary.mean);
        for r in &self.rows {
            let delta = match full {
                Some(f) if r.label != "HCAN" => format!(" ({:+.2})", 100.0 * (r.summary.mean - f)),
                _ => String::new(),
            };
            s.push_str(&format!(
                "{:<14} {:>10.2} {:>8.2}{delta}\n",
                r.label,
                100.0 * r.summary.mean,
                100.0 * r.summary.std
            ));
        }
        s
    }
}

/// Trains the full model plus one variant per switch over every seed and
/// tabulates test weighted F1. The full model is always the first row.
pub fn run_ablation(corpus: &Corpus, config: &TrainConfig, which: &[AblationSwitch], seeds: &[u64]) -> Result<AblationTable> {
    let mut variants = vec![config.ablation];
    for &sw in which {
        let mut a = config.ablation;
        sw.apply(&mut a);
        if !variants.contains(&a) {
            variants.push(a);
        }
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let cfg = TrainConfig {
                seed,
                ablation: variants[v],
                ..config.clone()
            };
            let out = train(corpus, &cfg)?;
            Ok(evaluate_split(&out.model, corpus, Split::Test)?.weighted_f1)
        })
        .collect::<Result<_>>()?;
    let rows = variants
        .iter()
        .enumerate()
        .map(|(v, a)| {
            let f1: Vec<f64> = scores[v * seeds.len()..(v + 1) * seeds.len()].to_vec();
            AblationRow {
                label: a.label(),
                ablation: *a,
                seeds: seeds.to_vec(),
                summary: mean_std(&f1),
                test_weighted_f1: f1,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}
