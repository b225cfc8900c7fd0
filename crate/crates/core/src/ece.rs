//! Emotional continuation encoding: a stacked bidirectional LSTM over the
//! utterance features followed by residual multi-head self-attention over
//! the whole conversation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Mode;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Array, Tape, Var};

/// One LSTM direction. Gate blocks are laid out as
/// `[input | forget | candidate | output]`, each `hidden` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_ih = store.add_uniform(&format!("{prefix}.w_ih"), &[input, 4 * hidden], rng);
        let w_hh = store.add_uniform(&format!("{prefix}.w_hh"), &[hidden, 4 * hidden], rng);
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{prefix}.bias"), Array::new(vec![1, 4 * hidden], b).expect("bias shape"));
        LstmCell {
            w_ih,
            w_hh,
            bias,
            hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EceParams {
    /// `[forward, backward]` cells per layer.
    pub layers: Vec<[LstmCell; 2]>,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub feature_dim: usize,
    pub heads: usize,
}

impl EceParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dim: usize,
        layer_count: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let width = 2 * feature_dim;
        if layer_count == 0 {
            return Err(Error::Config("lstm_layers must be at least 1".into()));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "ece_heads = {heads} must divide 2*d_u = {width}"
            )));
        }
        let layers = (0..layer_count)
            .map(|l| {
                let input = if l == 0 { feature_dim } else { width };
                [
                    LstmCell::init(store, &format!("ece.lstm{l}.fwd"), input, feature_dim, rng),
                    LstmCell::init(store, &format!("ece.lstm{l}.bwd"), input, feature_dim, rng),
                ]
            })
            .collect();
        Ok(EceParams {
            layers,
            w_q: store.add_uniform("ece.attn.w_q", &[width, width], rng),
            w_k: store.add_uniform("ece.attn.w_k", &[width, width], rng),
            w_v: store.add_uniform("ece.attn.w_v", &[width, width], rng),
            feature_dim,
            heads,
        })
    }
}

/// Runs one LSTM direction over the rows of `x` (n×input) and returns the
/// hidden states n×hidden in original row order. With `reverse` the
/// recurrence starts at the last row.
pub fn lstm_direction(tape: &mut Tape, x: Var, cell: &LstmCell, bound: &Bound, reverse: bool) -> Result<Var> {
    let n = tape.shape(x)[0];
    let h = cell.hidden;
    let pre = tape.matmul(x, bound[cell.w_ih])?;
    let mut hidden = tape.constant(Array::zeros(&[1, h]));
    let mut state = tape.constant(Array::zeros(&[1, h]));
    let mut outputs = vec![hidden; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let xt = tape.row(pre, t)?;
        let rec = tape.matmul(hidden, bound[cell.w_hh])?;
        let z = tape.add(xt, rec)?;
        let z = tape.add(z, bound[cell.bias])?;
        let zi = tape.slice(z, 1, 0, h)?;
        let zf = tape.slice(z, 1, h, h)?;
        let zg = tape.slice(z, 1, 2 * h, h)?;
        let zo = tape.slice(z, 1, 3 * h, h)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let keep = tape.mul(f, state)?;
        let write = tape.mul(i, g)?;
        state = tape.add(keep, write)?;
        let squashed = tape.tanh(state);
        hidden = tape.mul(o, squashed)?;
        outputs[t] = hidden;
    }
    Ok(tape.concat(&outputs, 0)?)
}

/// Stacked bidirectional LSTM: n×d_u features to G^l (n×2d_u).
pub fn bilstm_forward(tape: &mut Tape, features: Var, params: &EceParams, bound: &Bound, mode: &mut Mode) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 || shape[1] != params.feature_dim {
        return Err(crate::tensor::TensorError::Dimension {
            op: "bilstm",
            lhs: shape,
            rhs: vec![params.feature_dim],
        }
        .into());
    }
    let mut x = features;
    for (l, [fwd, bwd]) in params.layers.iter().enumerate() {
        let f = lstm_direction(tape, x, fwd, bound, false)?;
        let b = lstm_direction(tape, x, bwd, bound, true)?;
        x = tape.concat(&[f, b], 1)?;
        if l + 1 < params.layers.len() {
            x = mode.dropout(tape, x)?;
        }
    }
    Ok(x)
}

/// Unmasked multi-head self-attention over G^l with a residual connection:
/// `G = MultiHead(G^l W_Q, G^l W_K, G^l W_V) + G^l`.
pub fn global_attention(tape: &mut Tape, gl: Var, params: &EceParams, bound: &Bound, mode: &mut Mode) -> Result<Var> {
    let width = tape.shape(gl)[1];
    if params.heads == 0 || width % params.heads != 0 {
        return Err(Error::Config(format!(
            "ece_heads = {} must divide width {width}",
            params.heads
        )));
    }
    let dk = width / params.heads;
    let q = tape.matmul(gl, bound[params.w_q])?;
    let k = tape.matmul(gl, bound[params.w_k])?;
    let v = tape.matmul(gl, bound[params.w_v])?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    for hd in 0..params.heads {
        let qh = tape.slice(q, 1, hd * dk, dk)?;
        let kh = tape.slice(k, 1, hd * dk, dk)?;
        let vh = tape.slice(v, 1, hd * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores);
        heads.push(tape.matmul(weights, vh)?);
    }
    let attn = tape.concat(&heads, 1)?;
    let attn = mode.dropout(tape, attn)?;
    Ok(tape.add(attn, gl)?)
}

pub fn ece_forward(tape: &mut Tape, features: Var, params: &EceParams, bound: &Bound, mode: &mut Mode) -> Result<Var> {
    let gl = bilstm_forward(tape, features, params, bound, mode)?;
    global_attention(tape, gl, params, bound, mode)
}
