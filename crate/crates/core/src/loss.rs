//! Emotion heads and the emotional-cognitive training objective:
//! cross-entropy, KL consistency between predicted and recognized emotion,
//! and the fast-gradient-value adversarial term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HcanModel, Mode};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Array, Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// λ_θ: 4d_u → 2d_u, bias-free.
    pub lambda: ParamId,
    /// Shared by the recognized and predicted distributions.
    pub w_d: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, feature_dim: usize, num_emotions: usize, rng: &mut R) -> Self {
        let e = num_emotions;
        let mut eye = vec![0.0; e * e];
        (0..e).for_each(|i| eye[i * e + i] = 1.0);
        HeadParams {
            lambda: store.add_uniform("head.lambda", &[4 * feature_dim, 2 * feature_dim], rng),
            w_d: store.add_uniform("head.w_d", &[2 * feature_dim, e], rng),
            w_o: store.add("head.w_o", Array::new(vec![e, e], eye).expect("square")),
            b_o: store.add("head.b_o", Array::zeros(&[1, e])),
        }
    }
}

/// Row-stochastic n×|E| outputs of the heads.
#[derive(Debug, Clone, Copy)]
pub struct EmotionDistributions {
    pub d_src: Var,
    pub d_tmp: Var,
    pub y_hat: Var,
}

/// `D^src = softmax((λ(v̂) + g) W_D)`, `D^tmp = softmax(λ(v̂) W_D)`,
/// `ŷ = softmax(D^src W_o + b_o)`.
pub fn heads_forward(tape: &mut Tape, v_hat: Var, g: Var, params: &HeadParams, bound: &Bound) -> Result<EmotionDistributions> {
    let n = tape.shape(g)[0];
    let lam = tape.matmul(v_hat, bound[params.lambda])?;
    let src_in = tape.add(lam, g)?;
    let src_logits = tape.matmul(src_in, bound[params.w_d])?;
    let d_src = tape.softmax(src_logits);
    let tmp_logits = tape.matmul(lam, bound[params.w_d])?;
    let d_tmp = tape.softmax(tmp_logits);
    let ones = tape.constant(Array::filled(&[n, 1], 1.0));
    let bias = tape.matmul(ones, bound[params.b_o])?;
    let out = tape.matmul(d_src, bound[params.w_o])?;
    let out = tape.add(out, bias)?;
    let y_hat = tape.softmax(out);
    Ok(EmotionDistributions { d_src, d_tmp, y_hat })
}

/// Σ_i −ln ŷ[i, gold_i] over the rows of one conversation.
pub fn cross_entropy_sum(tape: &mut Tape, y_hat: Var, labels: &[usize]) -> Result<Var> {
    let picked = tape.pick(y_hat, labels)?;
    let logs = tape.log(picked)?;
    let s = tape.sum(logs);
    Ok(tape.scale(s, -1.0))
}

/// Mean cross-entropy over every utterance of a batch of conversations,
/// normalized by the total utterance count.
pub fn cross_entropy(tape: &mut Tape, batch: &[(Var, &[usize])]) -> Result<Var> {
    let mut total = None;
    let mut count = 0usize;
    for (y_hat, labels) in batch {
        let s = cross_entropy_sum(tape, *y_hat, labels)?;
        count += labels.len();
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::TrainingData("empty batch".into()))?;
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Σ_i KL(D^tmp_i ‖ D^src_i).
pub fn kl_sum(tape: &mut Tape, d_tmp: Var, d_src: Var) -> Result<Var> {
    let lt = tape.log(d_tmp)?;
    let ls = tape.log(d_src)?;
    let diff = tape.sub(lt, ls)?;
    let terms = tape.mul(d_tmp, diff)?;
    Ok(tape.sum(terms))
}

/// Mean over rows of KL(D^tmp_i ‖ D^src_i).
pub fn kl_loss(tape: &mut Tape, d_tmp: Var, d_src: Var) -> Result<Var> {
    let n = tape.shape(d_tmp)[0];
    let s = kl_sum(tape, d_tmp, d_src)?;
    Ok(tape.scale(s, 1.0 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FgvNorm {
    /// One Frobenius norm over the whole conversation.
    #[default]
    Global,
    PerUtterance,
}

/// Gradients whose norm falls below this are treated as zero.
pub const FGV_MIN_NORM: f64 = 1e-12;

/// `ε g / ‖g‖`, or zeros when ‖g‖ < 1e-12.
pub fn fgv_perturbation(grad: &Array, epsilon: f64, norm: FgvNorm) -> Array {
    let mut out = Array::zeros(grad.shape());
    match norm {
        FgvNorm::Global => {
            let nrm = grad.frobenius_norm();
            if nrm >= FGV_MIN_NORM {
                for (o, g) in out.data_mut().iter_mut().zip(grad.data()) {
                    *o = epsilon * g / nrm;
                }
            }
        }
        FgvNorm::PerUtterance => {
            let w = grad.cols();
            for (o, g) in out.data_mut().chunks_mut(w).zip(grad.data().chunks(w)) {
                let nrm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm >= FGV_MIN_NORM {
                    o.iter_mut().zip(g).for_each(|(o, g)| *o = epsilon * g / nrm);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub fgv_norm: FgvNorm,
    pub ablate_kl: bool,
    pub ablate_adv: bool,
    pub ablate_eae: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.2,
            beta: 0.05,
            epsilon: 0.1,
            fgv_norm: FgvNorm::Global,
            ablate_kl: false,
            ablate_adv: false,
            ablate_eae: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn kl_active(&self) -> bool {
        !self.ablate_kl && !self.ablate_eae
    }

    pub fn adv_active(&self) -> bool {
        !self.ablate_adv
    }
}

/// Scalar loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cross: f64,
    pub kl: f64,
    pub adv: f64,
}

/// `cross + (α·kl + β·adv)`, with ablated terms contributing exactly 0.
pub fn total_loss_value(c: LossComponents, cfg: &LossConfig) -> f64 {
    let kl = if cfg.kl_active() { cfg.alpha * c.kl } else { 0.0 };
    let adv = if cfg.adv_active() { cfg.beta * c.adv } else { 0.0 };
    c.cross + (kl + adv)
}

/// Tape form of [`total_loss_value`]. Absent terms are skipped.
pub fn total_loss(tape: &mut Tape, cross: Var, kl: Option<Var>, adv: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    let kl = kl.filter(|_| cfg.kl_active()).map(|k| tape.scale(k, cfg.alpha));
    let adv = adv.filter(|_| cfg.adv_active()).map(|a| tape.scale(a, cfg.beta));
    let extra = match (kl, adv) {
        (Some(k), Some(a)) => Some(tape.add(k, a)?),
        (k, a) => k.or(a),
    };
    Ok(match extra {
        Some(e) => tape.add(cross, e)?,
        None => cross,
    })
}

/// Both passes of the adversarial term for one conversation.
#[derive(Debug, Clone)]
pub struct Adversarial {
    pub clean: Var,
    pub perturbed: Var,
    /// `clean + perturbed`.
    pub total: Var,
    pub noise: Array,
    /// Parameter leaves of the second pass.
    pub bound: Bound,
    pub perturbed_outputs: crate::model::ForwardOutput,
}

/// Gradient of `of` with respect to `wrt`, without touching accumulated grads.
pub fn gradient_wrt(tape: &Tape, of: Var, wrt: Var) -> Result<Array> {
    let grads = tape.gradients(of)?;
    let g = grads
        .get(wrt.index())
        .cloned()
        .flatten()
        .unwrap_or_else(|| vec![0.0; tape.value(wrt).len()]);
    Ok(Array::new(tape.shape(wrt).to_vec(), g)?)
}

/// Second pass of the adversarial loss. `clean_ce` must be the summed
/// cross-entropy of a first pass whose input node is `features`; the
/// perturbation `ε ∇_c L / ‖∇_c L‖` is computed from it unless `noise` is
/// supplied, and is held constant in the second pass.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_pass(
    tape: &mut Tape,
    model: &HcanModel,
    features: Var,
    speakers: &[usize],
    labels: &[usize],
    clean_ce: Var,
    cfg: &LossConfig,
    noise: Option<&Array>,
    mode: &mut Mode,
) -> Result<Adversarial> {
    let noise = match noise {
        Some(n) => n.clone(),
        None => {
            let g = gradient_wrt(tape, clean_ce, features)?;
            fgv_perturbation(&g, cfg.epsilon, cfg.fgv_norm)
        }
    };
    let clean_x = tape.value(features);
    if noise.shape() != clean_x.shape() {
        return Err(TensorError::Dimension {
            op: "adversarial_pass",
            lhs: clean_x.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        }
        .into());
    }
    let perturbed_x: Vec<f64> = clean_x.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    let px = tape.constant(Array::new(clean_x.shape().to_vec(), perturbed_x)?);
    let bound = model.store().bind(tape);
    let out = model.forward(tape, &bound, px, speakers, mode)?;
    let perturbed = cross_entropy_sum(tape, out.dists.y_hat, labels)?;
    let total = tape.add(clean_ce, perturbed)?;
    Ok(Adversarial {
        clean: clean_ce,
        perturbed,
        total,
        noise,
        bound,
        perturbed_outputs: out,
    })
}

/// `L_adv = L_cross + L'_cross` for one conversation, both as summed
/// per-utterance cross-entropy. Runs the clean pass itself.
pub fn adversarial_loss(
    tape: &mut Tape,
    model: &HcanModel,
    features: &Array,
    speakers: &[usize],
    labels: &[usize],
    cfg: &LossConfig,
    mode: &mut Mode,
) -> Result<(Adversarial, Bound)> {
    let bound = model.store().bind(tape);
    let x = tape.leaf(features.clone(), true);
    let out = model.forward(tape, &bound, x, speakers, mode)?;
    let ce = cross_entropy_sum(tape, out.dists.y_hat, labels)?;
    let adv = adversarial_pass(tape, model, x, speakers, labels, ce, cfg, None, mode)?;
    Ok((adv, bound))
}

/// Summed (not yet normalized) objective of one conversation.
#[derive(Debug, Clone)]
pub struct ConversationObjective {
    /// `cross + (α·kl + β·adv)` summed over utterances.
    pub total: Var,
    pub components: LossComponents,
    pub bounds: Vec<Bound>,
    pub utterances: usize,
}

/// Builds the summed emotional-cognitive objective of one conversation.
/// `noise`, when given, replaces the computed adversarial perturbation.
pub fn conversation_objective(
    tape: &mut Tape,
    model: &HcanModel,
    features: &Array,
    speakers: &[usize],
    labels: &[usize],
    cfg: &LossConfig,
    noise: Option<&Array>,
    mode: &mut Mode,
) -> Result<ConversationObjective> {
    let bound = model.store().bind(tape);
    let x = tape.leaf(features.clone(), cfg.adv_active() && noise.is_none());
    let out = model.forward(tape, &bound, x, speakers, mode)?;
    let cross = cross_entropy_sum(tape, out.dists.y_hat, labels)?;
    let kl = if cfg.kl_active() && !model.config().no_eae {
        Some(kl_sum(tape, out.dists.d_tmp, out.dists.d_src)?)
    } else {
        None
    };
    let mut bounds = vec![bound];
    let adv = if cfg.adv_active() {
        let a = adversarial_pass(tape, model, x, speakers, labels, cross, cfg, noise, mode)?;
        bounds.push(a.bound.clone());
        Some(a.total)
    } else {
        None
    };
    let total = total_loss(tape, cross, kl, adv, cfg)?;
    let components = LossComponents {
        cross: tape.scalar(cross),
        kl: kl.map(|k| tape.scalar(k)).unwrap_or(0.0),
        adv: adv.map(|a| tape.scalar(a)).unwrap_or(0.0),
    };
    Ok(ConversationObjective {
        total,
        components,
        bounds,
        utterances: labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(t: &mut Tape, rows: &[Vec<f64>]) -> Var {
        t.constant(Array::from_rows(rows).unwrap())
    }

    #[test]
    fn kl_closed_forms() {
        let mut t = Tape::new();
        let p = dist(&mut t, &[vec![0.5, 0.5]]);
        let q = dist(&mut t, &[vec![0.25, 0.75]]);
        let same = kl_loss(&mut t, p, p).unwrap();
        assert_eq!(t.scalar(same), 0.0);
        let k = kl_loss(&mut t, p, q).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((t.scalar(k) - want).abs() < 1e-15);
        assert!((t.scalar(k) - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut t = Tape::new();
        let uniform = dist(&mut t, &vec![vec![0.25; 4]; 3]);
        let ce = cross_entropy(&mut t, &[(uniform, &[0, 3, 1][..])]).unwrap();
        assert!((t.scalar(ce) - 4f64.ln()).abs() < 1e-12);
        let onehot = dist(&mut t, &[vec![0.0, 1.0, 0.0]]);
        let ce = cross_entropy_sum(&mut t, onehot, &[1]).unwrap();
        assert_eq!(t.scalar(ce), 0.0);
    }

    #[test]
    fn batch_cross_entropy_uses_total_utterance_count() {
        let mut t = Tape::new();
        let a = [vec![0.2, 0.8], vec![0.6, 0.4]];
        let b = [vec![0.1, 0.9], vec![0.3, 0.7], vec![0.5, 0.5]];
        let (la, lb) = ([1usize, 0], [0usize, 1, 1]);
        let va = dist(&mut t, &a);
        let vb = dist(&mut t, &b);
        let ce = cross_entropy(&mut t, &[(va, &la[..]), (vb, &lb[..])]).unwrap();
        let direct = -(0.8f64.ln() + 0.6f64.ln() + 0.1f64.ln() + 0.7f64.ln() + 0.5f64.ln()) / 5.0;
        assert!((t.scalar(ce) - direct).abs() < 1e-15);
    }

    #[test]
    fn fgv_cases() {
        let g = Array::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let v = fgv_perturbation(&g, 1.0, FgvNorm::Global);
        assert!((v.data()[0] - 0.6).abs() < 1e-15 && (v.data()[1] - 0.8).abs() < 1e-15);
        let z = fgv_perturbation(&Array::zeros(&[2, 3]), 1.0, FgvNorm::Global);
        assert!(z.data().iter().all(|&x| x == 0.0));
        let g = Array::new(vec![2, 2], vec![3.0, 4.0, 0.0, 2.0]).unwrap();
        let v = fgv_perturbation(&g, 2.0, FgvNorm::PerUtterance);
        assert_eq!(v.data(), &[1.2, 1.6, 0.0, 2.0]);
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = LossConfig::default();
        let c = LossComponents { cross: 1.0, kl: 0.5, adv: 2.0 };
        assert_eq!(total_loss_value(c, &cfg), 1.2);
        let zero = LossConfig { alpha: 0.0, beta: 0.0, ..cfg.clone() };
        assert_eq!(total_loss_value(c, &zero), 1.0);
        let mut t = Tape::new();
        let (x, k, a) = (
            t.constant(Array::scalar(1.0)),
            t.constant(Array::scalar(0.5)),
            t.constant(Array::scalar(2.0)),
        );
        let l = total_loss(&mut t, x, Some(k), Some(a), &cfg).unwrap();
        assert_eq!(t.scalar(l), 1.2);
    }

    #[test]
    fn ablation_flag_matches_zero_coefficient_bitwise() {
        let c = LossComponents { cross: 0.731, kl: 0.113, adv: 1.52 };
        let base = LossConfig::default();
        let flag_kl = LossConfig { ablate_kl: true, ..base.clone() };
        let zero_kl = LossConfig { alpha: 0.0, ..base.clone() };
        assert_eq!(total_loss_value(c, &flag_kl).to_bits(), total_loss_value(c, &zero_kl).to_bits());
        let flag_adv = LossConfig { ablate_adv: true, ..base.clone() };
        let zero_adv = LossConfig { beta: 0.0, ..base };
        assert_eq!(total_loss_value(c, &flag_adv).to_bits(), total_loss_value(c, &zero_adv).to_bits());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { epsilon: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, ..LossConfig::default() }.validate().is_err());
        LossConfig::default().validate().unwrap();
    }
}
