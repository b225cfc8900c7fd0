//! Emotional attribution encoding.
//!
//! Causal attention in which each utterance queries its history through one
//! of two projections: the intra-attribution query when the earlier
//! utterance has the same speaker, the inter-attribution query otherwise.
//! Both logit families share one softmax normalizer per row. The attended
//! states are then reweighted by a learnable Gaussian density over the
//! conversational distance between utterances.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Array, Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    /// d(i, j) = i - j
    #[default]
    Index,
    /// d(i, j) = number of speaker changes in positions (j, i]
    TurnTaking,
}

impl DistanceMode {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "index" => Some(Self::Index),
            "turn-taking" => Some(Self::TurnTaking),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Index => "index",
            Self::TurnTaking => "turn-taking",
        }
    }
}

/// Learnable Gaussian reweighting; σ = exp(ρ) keeps the width positive.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDecay {
    pub mu: ParamId,
    pub rho: ParamId,
    pub distance: DistanceMode,
}

/// Unnormalized Gaussian density φ(d | μ, σ).
pub fn gaussian_density(d: f64, mu: f64, sigma: f64) -> f64 {
    (-(d - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Distance matrix, row-major n×n; only entries with j < i are meaningful.
pub fn distances(speakers: &[usize], mode: DistanceMode) -> Vec<f64> {
    let n = speakers.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let mut changes = 0usize;
        for j in (0..i).rev() {
            if speakers[j + 1] != speakers[j] {
                changes += 1;
            }
            d[i * n + j] = match mode {
                DistanceMode::Index => (i - j) as f64,
                DistanceMode::TurnTaking => changes as f64,
            };
        }
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct EaeParams {
    pub w_qa: ParamId,
    pub w_qe: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub heads: usize,
    /// Scale logits by 1/√(subspace width).
    pub scale_logits: bool,
    pub gaussian: GaussianDecay,
    pub feature_dim: usize,
}

impl EaeParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dim: usize,
        heads: usize,
        scale_logits: bool,
        distance: DistanceMode,
        rng: &mut R,
    ) -> Result<Self> {
        let (inp, out) = (2 * feature_dim, 4 * feature_dim);
        if heads == 0 || out % heads != 0 {
            return Err(Error::Config(format!("ia_heads = {heads} must divide 4*d_u = {out}")));
        }
        Ok(EaeParams {
            w_qa: store.add_uniform("eae.w_qa", &[inp, out], rng),
            w_qe: store.add_uniform("eae.w_qe", &[inp, out], rng),
            w_k: store.add_uniform("eae.w_k", &[inp, out], rng),
            w_v: store.add_uniform("eae.w_v", &[inp, out], rng),
            heads,
            scale_logits,
            gaussian: GaussianDecay {
                mu: store.add("eae.gauss.mu", Array::scalar(1.0)),
                rho: store.add("eae.gauss.rho", Array::scalar(0.0)),
                distance,
            },
            feature_dim,
        })
    }
}

/// Per-utterance record of the attribution stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceTrace {
    /// Head-averaged mixed attention weights over j < i.
    pub weights: Vec<f64>,
    /// `head_weights[h][j]` for j < i.
    pub head_weights: Vec<Vec<f64>>,
    /// true where the intra-attribution (same speaker) query was used.
    pub intra: Vec<bool>,
    pub distances: Vec<f64>,
    /// φ(d(i, j)) for j < i.
    pub gaussian: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionTrace {
    pub utterances: Vec<UtteranceTrace>,
}

/// Raw outputs of the intra/inter attention stage.
#[derive(Debug, Clone)]
pub struct IaOutput {
    pub v_tilde: Var,
    /// Per head, the n×n weight matrix node (zero on and above the diagonal).
    pub head_weights: Vec<Var>,
    pub intra: Vec<bool>,
}

fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n < k / n).collect()
}

/// Intra/inter attribution attention: Ṽ (n×4d_u).
pub fn ia_attention(tape: &mut Tape, g: Var, speakers: &[usize], params: &EaeParams, bound: &Bound) -> Result<IaOutput> {
    let n = tape.shape(g)[0];
    if speakers.len() != n {
        return Err(TensorError::Dimension {
            op: "ia_attention",
            lhs: tape.shape(g).to_vec(),
            rhs: vec![speakers.len()],
        }
        .into());
    }
    let width = 4 * params.feature_dim;
    if params.heads == 0 || width % params.heads != 0 {
        return Err(Error::Config(format!("ia_heads = {} must divide {width}", params.heads)));
    }
    let qa = tape.matmul(g, bound[params.w_qa])?;
    let qe = tape.matmul(g, bound[params.w_qe])?;
    let k = tape.matmul(g, bound[params.w_k])?;
    let v = tape.matmul(g, bound[params.w_v])?;

    let intra: Vec<bool> = (0..n * n).map(|x| speakers[x / n] == speakers[x % n]).collect();
    let same = Array::new(vec![n, n], intra.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
    let other = Array::new(vec![n, n], intra.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect())?;
    let mask = causal_mask(n);

    let sub = width / params.heads;
    let scale = if params.scale_logits { 1.0 / (sub as f64).sqrt() } else { 1.0 };
    let mut outs = Vec::with_capacity(params.heads);
    let mut head_weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let kh = tape.slice(k, 1, h * sub, sub)?;
        let kt = tape.transpose(kh)?;
        let qah = tape.slice(qa, 1, h * sub, sub)?;
        let qeh = tape.slice(qe, 1, h * sub, sub)?;
        let la = tape.matmul(qah, kt)?;
        let le = tape.matmul(qeh, kt)?;
        let la = tape.mul_const(la, &same)?;
        let le = tape.mul_const(le, &other)?;
        let mixed = tape.add(la, le)?;
        let mixed = tape.scale(mixed, scale);
        let weights = tape.masked_softmax(mixed, &mask)?;
        let vh = tape.slice(v, 1, h * sub, sub)?;
        outs.push(tape.matmul(weights, vh)?);
        head_weights.push(weights);
    }
    Ok(IaOutput {
        v_tilde: tape.concat(&outs, 1)?,
        head_weights,
        intra,
    })
}

/// V̂ = Φ Ṽ with Φ[i][j] = φ(d(i, j) | μ, σ) for j < i and 0 otherwise.
/// Returns the output node and the Φ node.
pub fn gaussian_reweight(
    tape: &mut Tape,
    v_tilde: Var,
    speakers: &[usize],
    decay: &GaussianDecay,
    bound: &Bound,
) -> Result<(Var, Var)> {
    let n = speakers.len();
    if tape.shape(v_tilde)[0] != n {
        return Err(TensorError::Dimension {
            op: "gaussian_reweight",
            lhs: tape.shape(v_tilde).to_vec(),
            rhs: vec![n],
        }
        .into());
    }
    let shape = [n, n];
    let d = tape.constant(Array::new(shape.to_vec(), distances(speakers, decay.distance))?);
    let mu = tape.expand(bound[decay.mu], &shape)?;
    let diff = tape.sub(d, mu)?;
    let sq = tape.mul(diff, diff)?;
    let rho = bound[decay.rho];
    let neg2rho = tape.scale(rho, -2.0);
    let inv_var = tape.exp(neg2rho);
    let inv_var = tape.expand(inv_var, &shape)?;
    let z = tape.mul(sq, inv_var)?;
    let z = tape.scale(z, -0.5);
    let rho_e = tape.expand(rho, &shape)?;
    let log_phi = tape.sub(z, rho_e)?;
    let log_phi = tape.add_const(log_phi, -0.5 * (2.0 * PI).ln());
    let phi = tape.exp(log_phi);
    let mask = Array::new(
        shape.to_vec(),
        causal_mask(n).into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    let phi = tape.mul_const(phi, &mask)?;
    Ok((tape.matmul(phi, v_tilde)?, phi))
}

/// Full attribution encoder. Returns V̂ and the trace.
pub fn eae_forward(
    tape: &mut Tape,
    g: Var,
    speakers: &[usize],
    params: &EaeParams,
    bound: &Bound,
) -> Result<(Var, AttributionTrace)> {
    let ia = ia_attention(tape, g, speakers, params, bound)?;
    let (v_hat, phi) = gaussian_reweight(tape, ia.v_tilde, speakers, &params.gaussian, bound)?;
    let trace = build_trace(tape, &ia, phi, speakers, params.gaussian.distance);
    Ok((v_hat, trace))
}

fn build_trace(tape: &Tape, ia: &IaOutput, phi: Var, speakers: &[usize], mode: DistanceMode) -> AttributionTrace {
    let n = speakers.len();
    let d = distances(speakers, mode);
    let phi = tape.value(phi);
    let heads: Vec<&Array> = ia.head_weights.iter().map(|&w| tape.value(w)).collect();
    let utterances = (0..n)
        .map(|i| {
            let head_weights: Vec<Vec<f64>> = heads.iter().map(|w| w.row(i)[..i].to_vec()).collect();
            let weights = (0..i)
                .map(|j| head_weights.iter().map(|hw| hw[j]).sum::<f64>() / heads.len() as f64)
                .collect();
            UtteranceTrace {
                weights,
                head_weights,
                intra: (0..i).map(|j| ia.intra[i * n + j]).collect(),
                distances: d[i * n..i * n + i].to_vec(),
                gaussian: phi.row(i)[..i].to_vec(),
            }
        })
        .collect();
    AttributionTrace { utterances }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, heads: usize, seed: u64) -> (ParamStore, EaeParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = EaeParams::init(&mut store, d, heads, true, DistanceMode::Index, &mut rng).unwrap();
        (store, p)
    }

    fn rand_g(n: usize, d: usize, seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::new(vec![n, 2 * d], (0..n * 2 * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn gaussian_density_at_unit_distance() {
        let want = 1.0 / (2.0 * PI).sqrt();
        assert!((gaussian_density(1.0, 1.0, 1.0) - want).abs() < 1e-15);
        assert!((want - 0.39894).abs() < 1e-5);
    }

    #[test]
    fn distance_modes() {
        let s = [0, 0, 1, 1, 0];
        let idx = distances(&s, DistanceMode::Index);
        assert_eq!(idx[4 * 5], 4.0);
        assert_eq!(idx[4 * 5 + 3], 1.0);
        let tt = distances(&s, DistanceMode::TurnTaking);
        // changes in (0, 4]: 1->2 and 3->4
        assert_eq!(tt[4 * 5], 2.0);
        assert_eq!(tt[3 * 5 + 2], 0.0);
        assert_eq!(tt[2 * 5 + 1], 1.0);
    }

    #[test]
    fn first_row_is_zero_and_second_copies_v1() {
        let (store, p) = setup(2, 2, 0);
        let gv = rand_g(2, 2, 1);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let g = t.constant(gv);
        let ia = ia_attention(&mut t, g, &[0, 1], &p, &b).unwrap();
        let vt = t.value(ia.v_tilde).clone();
        assert!(vt.row(0).iter().all(|&x| x == 0.0));
        let vproj = t.matmul(g, b[p.w_v]).unwrap();
        for (a, b) in vt.row(1).iter().zip(t.value(vproj).row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_reweight_two_steps() {
        let (store, p) = setup(1, 1, 0);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let vt = t.constant(Array::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0]).unwrap());
        let (vh, _) = gaussian_reweight(&mut t, vt, &[0, 1], &p.gaussian, &b).unwrap();
        let f = 1.0 / (2.0 * PI).sqrt();
        assert!(t.value(vh).row(0).iter().all(|&x| x == 0.0));
        for (k, want) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            assert!((t.value(vh).row(1)[k] - f * want).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_reweight_is_linear_in_common_vector() {
        let (mut store, p) = setup(1, 1, 0);
        store.value_mut(p.gaussian.mu).data_mut()[0] = 1.7;
        store.value_mut(p.gaussian.rho).data_mut()[0] = 0.3;
        let speakers = [0, 1, 1, 0, 1, 0];
        for mode in [DistanceMode::Index, DistanceMode::TurnTaking] {
            let decay = GaussianDecay { distance: mode, ..p.gaussian.clone() };
            let tvec = [0.5, -1.0, 2.0, 0.25];
            let mut t = Tape::new();
            let b = store.bind(&mut t);
            let vt = t.constant(Array::new(vec![6, 4], tvec.repeat(6)).unwrap());
            let (vh, _) = gaussian_reweight(&mut t, vt, &speakers, &decay, &b).unwrap();
            let d = distances(&speakers, mode);
            let sigma = 0.3f64.exp();
            for i in 0..6 {
                let s: f64 = (0..i).map(|j| gaussian_density(d[i * 6 + j], 1.7, sigma)).sum();
                for (k, tv) in tvec.iter().enumerate() {
                    assert!((t.value(vh).row(i)[k] - s * tv).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn speakers_length_mismatch() {
        let (store, p) = setup(2, 2, 0);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let g = t.constant(rand_g(3, 2, 1));
        assert!(matches!(
            ia_attention(&mut t, g, &[0, 1], &p, &b),
            Err(Error::Tensor(TensorError::Dimension { .. }))
        ));
    }

    #[test]
    fn trace_weights_normalize_and_flags_follow_speakers() {
        let (store, p) = setup(2, 4, 3);
        let speakers = [0, 1, 0, 0, 1, 2];
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let g = t.constant(rand_g(6, 2, 4));
        let (_, trace) = eae_forward(&mut t, g, &speakers, &p, &b).unwrap();
        assert!(trace.utterances[0].weights.is_empty());
        for (i, u) in trace.utterances.iter().enumerate().skip(1) {
            for hw in &u.head_weights {
                assert!((hw.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert!((u.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for j in 0..i {
                assert_eq!(u.intra[j], speakers[j] == speakers[i]);
            }
        }
    }

    #[test]
    fn eae_gradient_matches_finite_differences() {
        let (mut store, p) = setup(8, 4, 5);
        store.value_mut(p.gaussian.mu).data_mut()[0] = 1.3;
        store.value_mut(p.gaussian.rho).data_mut()[0] = 0.2;
        let speakers = [0, 1, 1, 0, 1];
        let gv = rand_g(5, 8, 6);
        let mut params = store.values().to_vec();
        params.push(gv);
        let report = finite_diff_check(
            |t: &mut Tape, vars: &[Var]| -> Result<Var> {
                let (ps, g) = vars.split_at(vars.len() - 1);
                let b = Bound::from_vars(ps.to_vec());
                let (vh, _) = eae_forward(t, g[0], &speakers, &p, &b)?;
                let sq = t.mul(vh, vh)?;
                Ok(t.mean(sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
