//! Central finite-difference checks of the tape gradients, run in `f64`.
//!
//! Each check reduces the output of an operation (or block, or model) to a
//! scalar through a fixed random projection, compares the analytic gradient
//! of every input and parameter entry against `(f(x+h) - f(x-h)) / 2h`, and
//! reports the largest relative error. Steps that flip any ReLU on/off state
//! are retried with a smaller `h`; if the kink cannot be avoided the entry is
//! skipped and counted.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{ad_forward, cmm_forward, cstm_forward, mcb_forward, mcm_forward, AdParams, BlockMode, McbParams};
use crate::error::{Error, Result};
use crate::network::{compute_loss, L1Reduction, Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const STEP: f64 = 1e-3;
/// Smallest step tried when a probe crosses a ReLU kink.
const MIN_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;
/// Pass threshold used by the CLI.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpId {
    ConvPointwise,
    ConvChannelwiseSpatial,
    ConvChannelwiseTemporal,
    ShiftedSubtract,
    Add,
    Relu,
    MeanPool2,
    GlobalAvgPool,
    Linear,
    SoftmaxCrossEntropy,
    L1,
    Cstm,
    Cmm,
    Mcm,
    Mcb,
    Ad,
    Model,
}

impl OpId {
    pub const ALL: [OpId; 17] = [
        OpId::ConvPointwise,
        OpId::ConvChannelwiseSpatial,
        OpId::ConvChannelwiseTemporal,
        OpId::ShiftedSubtract,
        OpId::Add,
        OpId::Relu,
        OpId::MeanPool2,
        OpId::GlobalAvgPool,
        OpId::Linear,
        OpId::SoftmaxCrossEntropy,
        OpId::L1,
        OpId::Cstm,
        OpId::Cmm,
        OpId::Mcm,
        OpId::Mcb,
        OpId::Ad,
        OpId::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpId::ConvPointwise => "conv_pointwise",
            OpId::ConvChannelwiseSpatial => "conv_channelwise_spatial",
            OpId::ConvChannelwiseTemporal => "conv_channelwise_temporal",
            OpId::ShiftedSubtract => "shifted_subtract",
            OpId::Add => "add",
            OpId::Relu => "relu",
            OpId::MeanPool2 => "mean_pool2",
            OpId::GlobalAvgPool => "global_avg_pool",
            OpId::Linear => "linear",
            OpId::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpId::L1 => "l1",
            OpId::Cstm => "cstm",
            OpId::Cmm => "cmm",
            OpId::Mcm => "mcm",
            OpId::Mcb => "mcb",
            OpId::Ad => "ad",
            OpId::Model => "model",
        }
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpId::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: OpId,
    pub max_rel_error: f64,
    /// Entries compared.
    pub checked: usize,
    /// Entries skipped because every step crossed a ReLU kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol && self.checked > 0
    }
}

/// Builds the scalar under test from a bound input.
type LossFn<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, Var) -> Result<Var> + 'a;

/// `|a - n| / max(|a|, |n|, floor)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic and numeric gradients of `f` with respect to `input`
/// and every parameter in `store`. At most `per_tensor` entries of each
/// tensor are probed (all of them when `None`).
pub fn check_gradients(
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    per_tensor: Option<usize>,
    rng: &mut ChaCha8Rng,
    f: &LossFn<'_>,
) -> Result<(f64, usize, usize)> {
    let eval = |store: &ParamStore<f64>, input: &Tensor<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let loss = f(&mut tape, store, x)?;
        Ok((tape.value(loss).item(), tape.relu_signature()))
    };

    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let loss = f(&mut tape, &analytic_store, x)?;
    let base_sig = tape.relu_signature();
    let grads = tape.backward_into(loss, &mut analytic_store)?;
    let input_grad = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
    drop(tape);

    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        match per_tensor {
            Some(k) if k < n => {
                let mut v = sample(rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        }
    };

    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);

    // Probes one coordinate; `set` writes a value into the perturbed copy.
    let mut probe = |analytic: f64, base: f64, eval_at: &mut dyn FnMut(f64) -> Result<(f64, u64)>| -> Result<()> {
        let mut h = STEP;
        while h >= MIN_STEP {
            let (fp, sp) = eval_at(base + h)?;
            let (fm, sm) = eval_at(base - h)?;
            if sp == base_sig && sm == base_sig {
                let numeric = (fp - fm) / (2.0 * h);
                worst = worst.max(rel_error(analytic, numeric));
                checked += 1;
                return Ok(());
            }
            h /= 10.0;
        }
        skipped += 1;
        Ok(())
    };

    for i in pick(input.numel(), rng) {
        let analytic = input_grad.data()[i];
        let base = input.data()[i];
        let mut work = input.clone();
        probe(analytic, base, &mut |v| {
            work.data_mut()[i] = v;
            eval(store, &work)
        })?;
    }

    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let grad = analytic_store
            .grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for i in pick(n, rng) {
            let analytic = grad.data()[i];
            let base = store.value(id).data()[i];
            let mut work = store.clone();
            probe(analytic, base, &mut |v| {
                work.value_mut(id).data_mut()[i] = v;
                eval(&work, input)
            })?;
        }
    }
    Ok((worst, checked, skipped))
}

fn unit(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform in `±[0.1, 1]` so no entry sits near zero.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Runs the finite-difference comparison for one operation.
pub fn grad_check(op: OpId, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fm = [2, 4, 3, 4, 5];
    let mut store = ParamStore::<f64>::new();

    let (input, per_tensor, f): (Tensor<f64>, Option<usize>, Box<LossFn<'static>>) = match op {
        OpId::ConvPointwise => {
            let w = store.add("w", unit(&[3, 4], &mut rng))?;
            let b = store.add("b", unit(&[3], &mut rng))?;
            let probe = unit(&[2, 3, 3, 4, 5], &mut rng);
            (
                unit(&fm, &mut rng),
                None,
                Box::new(move |t, s, x| {
                    let (w, b) = (t.param(s, w), t.param(s, b));
                    let y = t.conv_pointwise(x, w, b)?;
                    t.project(y, &probe)
                }),
            )
        }
        OpId::ConvChannelwiseSpatial => {
            let k = store.add("k", unit(&[4, 3, 3], &mut rng))?;
            let probe = unit(&fm, &mut rng);
            (
                unit(&fm, &mut rng),
                None,
                Box::new(move |t, s, x| {
                    let k = t.param(s, k);
                    let y = t.conv_channelwise_spatial(x, k)?;
                    t.project(y, &probe)
                }),
            )
        }
        OpId::ConvChannelwiseTemporal => {
            let k = store.add("k", unit(&[4, 3], &mut rng))?;
            let probe = unit(&fm, &mut rng);
            (
                unit(&fm, &mut rng),
                None,
                Box::new(move |t, s, x| {
                    let k = t.param(s, k);
                    let y = t.conv_channelwise_temporal(x, k)?;
                    t.project(y, &probe)
                }),
            )
        }
        OpId::ShiftedSubtract => {
            let pre = store.add("pre", unit(&fm, &mut rng))?;
            let probe = unit(&fm, &mut rng);
            (
                unit(&fm, &mut rng),
                None,
                Box::new(move |t, s, x| {
                    let pre = t.param(s, pre);
                    let y = t.shifted_subtract(x, pre)?;
                    t.project(y, &probe)
                }),
            )
        }
        OpId::Add => {
            let other = store.add("other", unit(&fm, &mut rng))?;
            let probe = unit(&fm, &mut rng);
            (
                unit(&fm, &mut rng),
                None,
                Box::new(move |t, s, x| {
                    let o = t.param(s, other);
                    let y = t.add(x, o)?;
                    t.project(y, &probe)
                }),
            )
        }
        OpId::Relu => {
            let probe = unit(&fm, &mut rng);
            (
                away_from_zero(&fm, &mut rng),
                None,
                Box::new(move |t, _, x| {
                    let y = t.relu(x);
                    t.project(y, &probe)
                }),
            )
        }
        OpId::MeanPool2 => {
            let probe = unit(&[2, 4, 3, 2, 2], &mut rng);
            (
                unit(&fm, &mut rng),
                None,
                Box::new(move |t, _, x| {
                    let y = t.mean_pool2(x)?;
                    t.project(y, &probe)
                }),
            )
        }
        OpId::GlobalAvgPool => {
            let probe = unit(&[2, 4], &mut rng);
            (
                unit(&fm, &mut rng),
                None,
                Box::new(move |t, _, x| {
                    let y = t.global_avg_pool(x)?;
                    t.project(y, &probe)
                }),
            )
        }
        OpId::Linear => {
            let w = store.add("w", unit(&[3, 5], &mut rng))?;
            let b = store.add("b", unit(&[3], &mut rng))?;
            let probe = unit(&[4, 3], &mut rng);
            (
                unit(&[4, 5], &mut rng),
                None,
                Box::new(move |t, s, x| {
                    let (w, b) = (t.param(s, w), t.param(s, b));
                    let y = t.linear(x, w, b)?;
                    t.project(y, &probe)
                }),
            )
        }
        OpId::SoftmaxCrossEntropy => {
            let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..2)).collect();
            (
                Tensor::uniform(&[6, 2], -2.0, 2.0, &mut rng),
                None,
                Box::new(move |t, _, x| t.softmax_cross_entropy(x, &labels)),
            )
        }
        OpId::L1 => {
            let weights = vec![0.5, 0.0, 0.25];
            (
                away_from_zero(&[3, 2, 2, 3, 3], &mut rng),
                None,
                Box::new(move |t, _, x| t.weighted_sample_l1(x, &weights)),
            )
        }
        OpId::Cstm | OpId::Cmm | OpId::Mcm | OpId::Mcb => {
            let p = McbParams::init(&mut store, "blk", 4, 2, BlockMode::Mcb, &mut rng)?;
            randomize_biases(&mut store, &mut rng);
            let probe = unit(&[2, 4, 3, 4, 5], &mut rng);
            let f: Box<LossFn<'static>> = match op {
                OpId::Cstm => Box::new(move |t, s, x| {
                    let y = cstm_forward(t, s, x, &p)?;
                    t.project(y, &probe)
                }),
                OpId::Cmm => {
                    let probe_raw = unit(&[2, 2, 3, 4, 5], &mut rng);
                    Box::new(move |t, s, x| {
                        let (raw, up) = cmm_forward(t, s, x, &p)?;
                        let a = t.project(raw, &probe_raw)?;
                        let b = t.project(up, &probe)?;
                        t.add(a, b)
                    })
                }
                OpId::Mcm => {
                    let probe_raw = unit(&[2, 2, 3, 4, 5], &mut rng);
                    Box::new(move |t, s, x| {
                        let m = mcm_forward(t, s, x, &p)?;
                        let a = t.project(m.mm_raw.expect("mcm"), &probe_raw)?;
                        let b = t.project(m.mm_up.expect("mcm"), &probe)?;
                        let c = t.project(m.m_up, &probe)?;
                        let ab = t.add(a, b)?;
                        t.add(ab, c)
                    })
                }
                _ => Box::new(move |t, s, x| {
                    let y = mcb_forward(t, s, x, &p)?;
                    t.project(y, &probe)
                }),
            };
            (unit(&fm, &mut rng), None, f)
        }
        OpId::Ad => {
            let p = AdParams::init(&mut store, "ad", 4, &mut rng)?;
            randomize_biases(&mut store, &mut rng);
            let probe = unit(&[2, 4, 3, 4, 5], &mut rng);
            (
                unit(&fm, &mut rng),
                Some(100),
                Box::new(move |t, s, x| {
                    let y = ad_forward(t, s, x, &p)?;
                    t.project(y, &probe)
                }),
            )
        }
        OpId::Model => return model_grad_check(seed),
    };

    let (max_rel_error, checked, skipped) = check_gradients(&store, &input, per_tensor, &mut rng, f.as_ref())?;
    Ok(GradCheckReport {
        op,
        max_rel_error,
        checked,
        skipped,
    })
}

/// Non-zero biases and AD pointwise weights so the checks exercise every
/// path. Both start at zero in a fresh model.
fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        let range = if p.name.ends_with(".bias") {
            0.5
        } else if p.name.starts_with("ad.unit") && p.name.ends_with(".pw.weight") {
            0.1
        } else {
            continue;
        };
        for v in p.value.data_mut() {
            *v = rng.gen_range(-range..range);
        }
    }
}

/// End-to-end check: one MCB stage of width 16 with the AD branch, input
/// `(2, 3, 4, 8, 8)`, full three-term loss, up to 100 entries per tensor.
///
/// The zero-map term uses the per-element mean. With the plain sum the loss
/// is in the thousands while single-entry gradients are near 1e-4, and the
/// cancellation error of the difference quotient alone exceeds 1e-4.
pub fn model_grad_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        stages: 1,
        base_width: 16,
        width_multiplier: 1,
        mode: BlockMode::Mcb,
        ad_enabled: true,
        ad_tap_stage: 0,
        reduction_ratio: 16,
        seed,
        l1_reduction: L1Reduction::Mean,
    };
    let model = Model::build(&cfg)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut store = model.store.clone();
    randomize_biases(&mut store, &mut rng);
    let input = Tensor::uniform(&[2, 3, 4, 8, 8], 0.0, 1.0, &mut rng);
    let labels = vec![0usize, 1];
    let structure = Model { store: ParamStore::new(), ..model };
    let f = move |t: &mut Tape<f64>, s: &ParamStore<f64>, x: Var| -> Result<Var> {
        let out = structure.forward_with(t, s, x)?;
        let loss = compute_loss(t, out.logits_main, out.logits_ad, out.f_star, &labels, structure.config.l1_reduction)?;
        Ok(loss.total)
    };
    let (max_rel_error, checked, skipped) = check_gradients(&store, &input, Some(100), &mut rng, &f)?;
    Ok(GradCheckReport {
        op: OpId::Model,
        max_rel_error,
        checked,
        skipped,
    })
}

/// Every registered check, in [`OpId::ALL`] order.
pub fn grad_check_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    OpId::ALL.iter().map(|&op| grad_check(op, seed)).collect()
}
