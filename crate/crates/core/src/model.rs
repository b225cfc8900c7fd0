//! The assembled network: continuation encoder, attribution encoder and
//! emotion heads over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Conversation;
use crate::eae::{eae_forward, AttributionTrace, DistanceMode, EaeParams};
use crate::ece::{ece_forward, EceParams};
use crate::error::{Error, Result};
use crate::loss::{heads_forward, EmotionDistributions, HeadParams};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Array, Tape, TensorError, Var};

/// Forward-pass mode. Dropout is only active in `Train`.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng, rate: f64 },
}

impl Mode<'_> {
    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { rng, rate } => Ok(tape.dropout(x, *rate, true, &mut **rng)?),
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_emotions: usize,
    pub lstm_layers: usize,
    pub ece_heads: usize,
    pub ia_heads: usize,
    pub scale_ia_logits: bool,
    pub distance_mode: DistanceMode,
    /// Replace the continuation encoder with a learned linear map d_u → 2d_u.
    pub no_ece: bool,
    /// Force V̂ to zero.
    pub no_eae: bool,
    /// Multiplier on the ±1/√fan-in range of context-encoder weight
    /// matrices (biases untouched).
    pub encoder_init_gain: f64,
    /// W_o starts as this multiple of the identity.
    pub output_gain: f64,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, num_emotions: usize) -> Self {
        ModelConfig {
            feature_dim,
            num_emotions,
            lstm_layers: 1,
            ece_heads: 8,
            ia_heads: 4,
            scale_ia_logits: true,
            distance_mode: DistanceMode::Index,
            no_ece: false,
            no_eae: false,
            encoder_init_gain: 0.2,
            output_gain: 200.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_emotions == 0 {
            return Err(Error::Config("feature_dim and num_emotions must be positive".into()));
        }
        if !(self.encoder_init_gain > 0.0 && self.encoder_init_gain.is_finite()) {
            return Err(Error::Config(format!("encoder_init_gain must be positive, got {}", self.encoder_init_gain)));
        }
        if !(self.output_gain > 0.0 && self.output_gain.is_finite()) {
            return Err(Error::Config(format!("output_gain must be positive, got {}", self.output_gain)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextEncoder {
    Ece(EceParams),
    Linear(ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HcanModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: ContextEncoder,
    eae: Option<EaeParams>,
    heads: HeadParams,
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub g: Var,
    pub v_hat: Var,
    pub dists: EmotionDistributions,
    pub trace: Option<AttributionTrace>,
}

/// Plain-value outputs for one conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y_hat: Array,
    pub d_src: Array,
    pub d_tmp: Array,
    pub labels: Vec<usize>,
    pub trace: Option<AttributionTrace>,
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl HcanModel {
    /// Builds a freshly initialized model; the initialization stream is
    /// derived from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.feature_dim;
        let encoder = if config.no_ece {
            ContextEncoder::Linear(store.add_uniform("ece.linear", &[d, 2 * d], &mut rng))
        } else {
            ContextEncoder::Ece(EceParams::init(&mut store, d, config.lstm_layers, config.ece_heads, &mut rng)?)
        };
        let eae = if config.no_eae {
            None
        } else {
            Some(EaeParams::init(
                &mut store,
                d,
                config.ia_heads,
                config.scale_ia_logits,
                config.distance_mode,
                &mut rng,
            )?)
        };
        let heads = HeadParams::init(&mut store, d, config.num_emotions, &mut rng);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let name = store.name(id);
            let scaled = name.starts_with("ece.") && !name.ends_with(".bias");
            if scaled {
                let g = config.encoder_init_gain;
                store.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= g);
            }
        }
        let g = config.output_gain;
        store.value_mut(heads.w_o).data_mut().iter_mut().for_each(|v| *v *= g);
        Ok(HcanModel {
            config,
            store,
            encoder,
            eae,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &ContextEncoder {
        &self.encoder
    }

    pub fn eae(&self) -> Option<&EaeParams> {
        self.eae.as_ref()
    }

    pub fn heads(&self) -> &HeadParams {
        &self.heads
    }

    /// Forward pass over one conversation's n×d_u feature node.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, features: Var, speakers: &[usize], mode: &mut Mode) -> Result<ForwardOutput> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.config.feature_dim || shape[0] != speakers.len() {
            return Err(TensorError::Dimension {
                op: "forward",
                lhs: shape,
                rhs: vec![speakers.len(), self.config.feature_dim],
            }
            .into());
        }
        let n = shape[0];
        let g = match &self.encoder {
            ContextEncoder::Ece(p) => ece_forward(tape, features, p, bound, mode)?,
            ContextEncoder::Linear(w) => tape.matmul(features, bound[*w])?,
        };
        let (v_hat, trace) = match &self.eae {
            Some(p) => {
                let (v, t) = eae_forward(tape, g, speakers, p, bound)?;
                (v, Some(t))
            }
            None => (tape.constant(Array::zeros(&[n, 4 * self.config.feature_dim])), None),
        };
        let dists = heads_forward(tape, v_hat, g, &self.heads, bound)?;
        Ok(ForwardOutput { g, v_hat, dists, trace })
    }

    pub fn predict_features(&self, features: &Array, speakers: &[usize]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, &bound, x, speakers, &mut Mode::Eval)?;
        let y_hat = tape.value(out.dists.y_hat).clone();
        let labels = (0..y_hat.rows()).map(|i| argmax(y_hat.row(i))).collect();
        Ok(Prediction {
            labels,
            y_hat,
            d_src: tape.value(out.dists.d_src).clone(),
            d_tmp: tape.value(out.dists.d_tmp).clone(),
            trace: out.trace,
        })
    }

    pub fn predict(&self, conv: &Conversation) -> Result<Prediction> {
        let x = conversation_features(conv, self.config.feature_dim)?;
        self.predict_features(&x, &conv.speakers())
    }
}

/// n×d_u feature array of a conversation.
pub fn conversation_features(conv: &Conversation, feature_dim: usize) -> Result<Array> {
    if conv.utterances.iter().any(|u| u.features.len() != feature_dim) {
        return Err(Error::Compatibility(format!(
            "conversation `{}` features do not have width {feature_dim}",
            conv.id
        )));
    }
    Ok(Array::new(vec![conv.len(), feature_dim], conv.feature_matrix())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Utterance;

    fn conv(n: usize, d: usize) -> Conversation {
        Conversation {
            id: "c".into(),
            utterances: (0..n)
                .map(|i| Utterance {
                    speaker: i % 2,
                    features: (0..d).map(|k| ((i * d + k) as f32 * 0.37).sin()).collect(),
                    label: Some(i % 3),
                })
                .collect(),
        }
    }

    #[test]
    fn prediction_rows_are_distributions() {
        let m = HcanModel::new(ModelConfig::new(8, 3), 0).unwrap();
        let p = m.predict(&conv(5, 8)).unwrap();
        for a in [&p.y_hat, &p.d_src, &p.d_tmp] {
            for i in 0..5 {
                let r = a.row(i);
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(r.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
        // no history for the first utterance: V̂ = 0, λ bias-free
        assert!(p.d_tmp.row(0).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn ablated_variants_have_expected_parameters() {
        let mut cfg = ModelConfig::new(4, 3);
        cfg.no_ece = true;
        cfg.no_eae = true;
        let m = HcanModel::new(cfg, 0).unwrap();
        assert!(m.eae().is_none());
        assert!(matches!(m.encoder(), ContextEncoder::Linear(_)));
        let p = m.predict(&conv(4, 4)).unwrap();
        assert!(p.trace.is_none());
        for i in 0..4 {
            assert!(p.d_tmp.row(i).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn feature_width_mismatch() {
        let m = HcanModel::new(ModelConfig::new(8, 3), 0).unwrap();
        assert!(matches!(m.predict(&conv(3, 4)), Err(Error::Compatibility(_))));
    }

    #[test]
    fn shared_w_d_drives_both_distributions() {
        let mut m = HcanModel::new(ModelConfig::new(4, 3), 1).unwrap();
        let c = conv(4, 4);
        let before = m.predict(&c).unwrap();
        let w_d = m.heads().w_d;
        m.store_mut().value_mut(w_d).data_mut()[0] += 0.5;
        let after = m.predict(&c).unwrap();
        assert_ne!(before.d_src.row(2), after.d_src.row(2));
        assert_ne!(before.d_tmp.row(2), after.d_tmp.row(2));
    }
}
