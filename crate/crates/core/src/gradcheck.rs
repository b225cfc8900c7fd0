//! Finite-difference verification suite: every primitive tape operation plus
//! the full training objective on a small conversation.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{adversarial_loss, conversation_objective, LossConfig};
use crate::model::{HcanModel, Mode, ModelConfig};
use crate::tensor::{finite_diff_check_with, Array, OpKind, Tape, TensorError, Var};

pub const PRIMITIVE_THRESHOLD: f64 = 1e-5;
pub const MODEL_THRESHOLD: f64 = 1e-3;
pub const MODEL_STEP: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteSize {
    /// One random instance per operation and one model instance.
    Small,
    /// Several instances per operation and model variants.
    Full,
}

impl SuiteSize {
    fn instances(self) -> u64 {
        match self {
            SuiteSize::Small => 1,
            SuiteSize::Full => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentResult {
    pub component: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub results: Vec<ComponentResult>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.component.as_str())
            .collect()
    }
}

/// Operations covered by the primitive checks.
pub const PRIMITIVES: [OpKind; 20] = [
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Tanh,
    OpKind::Sigmoid,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Scale,
    OpKind::AddConst,
    OpKind::MulConst,
    OpKind::Softmax,
    OpKind::MaskedSoftmax,
    OpKind::Concat,
    OpKind::Slice,
    OpKind::Transpose,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Expand,
    OpKind::Pick,
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Reduces `out` to a scalar through fixed random weights so every output
/// coordinate contributes a distinct amount.
fn weigh(tape: &mut Tape, out: Var, w: &Array) -> std::result::Result<Var, TensorError> {
    let m = tape.mul_const(out, w)?;
    Ok(tape.sum(m))
}

/// Inputs and objective exercising one primitive.
fn primitive_case(op: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Array>, Box<dyn Fn(&mut Tape, &[Var]) -> std::result::Result<Var, TensorError>>) {
    let a34 = uniform(rng, &[3, 4], -2.0, 2.0);
    let b34 = uniform(rng, &[3, 4], -2.0, 2.0);
    let w34 = uniform(rng, &[3, 4], -1.0, 1.0);
    match op {
        OpKind::MatMul => {
            let b = uniform(rng, &[4, 2], -2.0, 2.0);
            let w = uniform(rng, &[3, 2], -1.0, 1.0);
            (vec![a34, b], Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weigh(t, y, &w)
            }))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => (vec![a34, b34], Box::new(move |t, v| {
            let y = match op {
                OpKind::Add => t.add(v[0], v[1])?,
                OpKind::Sub => t.sub(v[0], v[1])?,
                _ => t.mul(v[0], v[1])?,
            };
            weigh(t, y, &w34)
        })),
        OpKind::Tanh | OpKind::Sigmoid | OpKind::Exp | OpKind::Scale | OpKind::AddConst => {
            (vec![a34], Box::new(move |t, v| {
                let y = match op {
                    OpKind::Tanh => t.tanh(v[0]),
                    OpKind::Sigmoid => t.sigmoid(v[0]),
                    OpKind::Exp => t.exp(v[0]),
                    OpKind::Scale => t.scale(v[0], -0.7),
                    _ => t.add_const(v[0], 0.3),
                };
                weigh(t, y, &w34)
            }))
        }
        OpKind::Log => {
            let x = uniform(rng, &[3, 4], 0.5, 2.0);
            (vec![x], Box::new(move |t, v| {
                let y = t.log(v[0])?;
                weigh(t, y, &w34)
            }))
        }
        OpKind::MulConst => {
            let c = uniform(rng, &[3, 4], -2.0, 2.0);
            (vec![a34], Box::new(move |t, v| {
                let y = t.mul_const(v[0], &c)?;
                Ok(t.sum(y))
            }))
        }
        OpKind::Softmax => (vec![a34], Box::new(move |t, v| {
            let y = t.softmax(v[0]);
            weigh(t, y, &w34)
        })),
        OpKind::MaskedSoftmax => {
            // lower-triangular causal pattern including an empty first row
            let mask: Vec<bool> = (0..12).map(|k| k % 4 < k / 4).collect();
            (vec![a34], Box::new(move |t, v| {
                let y = t.masked_softmax(v[0], &mask)?;
                weigh(t, y, &w34)
            }))
        }
        OpKind::Concat => {
            let b = uniform(rng, &[3, 2], -2.0, 2.0);
            let w = uniform(rng, &[3, 6], -1.0, 1.0);
            (vec![a34, b], Box::new(move |t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                weigh(t, y, &w)
            }))
        }
        OpKind::Slice => {
            let w = uniform(rng, &[3, 2], -1.0, 1.0);
            (vec![a34], Box::new(move |t, v| {
                let y = t.slice(v[0], 1, 1, 2)?;
                weigh(t, y, &w)
            }))
        }
        OpKind::Transpose => {
            let w = uniform(rng, &[4, 3], -1.0, 1.0);
            (vec![a34], Box::new(move |t, v| {
                let y = t.transpose(v[0])?;
                weigh(t, y, &w)
            }))
        }
        OpKind::Sum | OpKind::Mean => (vec![a34], Box::new(move |t, v| {
            let s = if op == OpKind::Sum { t.sum(v[0]) } else { t.mean(v[0]) };
            Ok(t.mul(s, s)?)
        })),
        OpKind::Expand => {
            let x = uniform(rng, &[1], -2.0, 2.0);
            (vec![x], Box::new(move |t, v| {
                let y = t.expand(v[0], &[3, 4])?;
                let y = t.mul(y, y)?;
                weigh(t, y, &w34)
            }))
        }
        OpKind::Pick => (vec![a34], Box::new(move |t, v| {
            let y = t.pick(v[0], &[3, 0, 2])?;
            let y = t.exp(y);
            Ok(t.sum(y))
        })),
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
}

/// Worst relative error of one primitive over `instances` random draws.
pub fn check_primitive(op: OpKind, instances: u64) -> Result<ComponentResult> {
    check_primitive_faulted(op, instances, None)
}

/// A d_u = 8, n = 5, two-speaker conversation with every loss term active.
pub struct ModelCase {
    pub model: HcanModel,
    pub features: Array,
    pub speakers: Vec<usize>,
    pub labels: Vec<usize>,
    pub loss: LossConfig,
}

impl ModelCase {
    pub fn new(seed: u64, config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let d = config.feature_dim;
        let e = config.num_emotions;
        let model = HcanModel::new(config, seed)?;
        let features = uniform(&mut rng, &[n, d], -2.0, 2.0);
        let mut speakers: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        speakers[0] = 0;
        speakers[1] = 1;
        let labels = (0..n).map(|_| rng.random_range(0..e)).collect();
        Ok(ModelCase {
            model,
            features,
            speakers,
            labels,
            loss: LossConfig {
                alpha: 0.2,
                beta: 0.05,
                ..LossConfig::default()
            },
        })
    }

    fn objective(&self, model: &HcanModel, noise: &Array, fault: Option<OpKind>, grads: bool) -> Result<(f64, Option<HcanModel>)> {
        let mut tape = Tape::new();
        tape.inject_fault(fault);
        let obj = conversation_objective(
            &mut tape,
            model,
            &self.features,
            &self.speakers,
            &self.labels,
            &self.loss,
            Some(noise),
            &mut Mode::Eval,
        )?;
        let value = tape.scalar(obj.total);
        if !value.is_finite() {
            return Err(TensorError::NonFinite(format!("objective evaluated to {value}")).into());
        }
        if !grads {
            return Ok((value, None));
        }
        tape.backward(obj.total)?;
        let mut m = model.clone();
        m.store_mut().zero_grad();
        for b in &obj.bounds {
            m.store_mut().accumulate(&tape, b);
        }
        Ok((value, Some(m)))
    }

    /// Perturbation computed at the base parameters and then held fixed.
    pub fn base_noise(&self) -> Result<Array> {
        let mut tape = Tape::new();
        let (adv, _) = adversarial_loss(
            &mut tape,
            &self.model,
            &self.features,
            &self.speakers,
            &self.labels,
            &self.loss,
            &mut Mode::Eval,
        )?;
        Ok(adv.noise)
    }

    /// Five-point central differences over every parameter coordinate.
    /// The loss carries a few ulps of roundoff, which a narrow step turns
    /// into large relative errors on tiny gradients; the wide fourth-order
    /// stencil avoids that.
    pub fn check(&self, step: f64, fault: Option<OpKind>) -> Result<(f64, usize)> {
        let noise = self.base_noise()?;
        let (_, with_grads) = self.objective(&self.model, &noise, fault, true)?;
        let analytic = with_grads.expect("requested");
        let mut work = self.model.clone();
        let mut worst = 0.0f64;
        let mut coords = 0;
        let ids: Vec<_> = self.model.store().ids().collect();
        for id in ids {
            for ci in 0..self.model.store().value(id).len() {
                let orig = self.model.store().value(id).data()[ci];
                let mut at = |offset: f64| -> Result<f64> {
                    work.store_mut().value_mut(id).data_mut()[ci] = orig + offset;
                    let (v, _) = self.objective(&work, &noise, None, false)?;
                    Ok(v)
                };
                let (p2, p1, m1, m2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
                work.store_mut().value_mut(id).data_mut()[ci] = orig;
                let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * step);
                let a = analytic.store().grad(id).data()[ci];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(err);
                coords += 1;
            }
        }
        Ok((worst, coords))
    }
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig::new(8, 3)
}

fn model_component(name: &str, seed: u64, config: ModelConfig, fault: Option<OpKind>) -> Result<ComponentResult> {
    let case = ModelCase::new(seed, config)?;
    let (worst, coords) = case.check(MODEL_STEP, fault)?;
    Ok(ComponentResult {
        component: name.into(),
        max_rel_error: worst,
        threshold: MODEL_THRESHOLD,
        coordinates: coords,
        passed: worst < MODEL_THRESHOLD,
    })
}

/// Runs every check. `fault` corrupts one backward rule (negative control).
pub fn run_suite(size: SuiteSize, fault: Option<OpKind>) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut results = Vec::new();
    for op in PRIMITIVES {
        results.push(check_primitive_faulted(op, size.instances(), fault)?);
    }
    results.push(model_component("model:L_EC", 11, small_model_config(), fault)?);
    if size == SuiteSize::Full {
        let mut turn = small_model_config();
        turn.distance_mode = crate::eae::DistanceMode::TurnTaking;
        turn.lstm_layers = 2;
        results.push(model_component("model:L_EC turn-taking, 2 layers", 12, turn, fault)?);
        let mut unscaled = small_model_config();
        unscaled.scale_ia_logits = false;
        unscaled.output_gain = 1.0;
        results.push(model_component("model:L_EC unscaled logits", 13, unscaled, fault)?);
        let mut linear = small_model_config();
        linear.no_ece = true;
        results.push(model_component("model:L_EC linear encoder", 14, linear, fault)?);
    }
    Ok(SuiteReport {
        results,
        elapsed: start.elapsed(),
    })
}

fn check_primitive_faulted(op: OpKind, instances: u64, fault: Option<OpKind>) -> Result<ComponentResult> {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37 + 31 * k + op as u64);
        let (params, f) = primitive_case(op, &mut rng);
        let r = finite_diff_check_with(|t: &mut Tape, v: &[Var]| f(t, v), &params, 1e-6, fault)?;
        worst = worst.max(r.max_rel_error);
        coords += r.coordinates;
    }
    Ok(ComponentResult {
        component: op.name().into(),
        max_rel_error: worst,
        threshold: PRIMITIVE_THRESHOLD,
        coordinates: coords,
        passed: worst < PRIMITIVE_THRESHOLD,
    })
}

/// Converts a failing report into a verification error naming the
/// components.
pub fn require_pass(report: &SuiteReport) -> Result<()> {
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Verification(format!("gradient check failed for: {}", report.failing().join(", "))))
    }
}
