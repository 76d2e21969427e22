//! Full detector: stem, block stages, main classifier, and the optional
//! anomaly-detection branch with its own classifier.
//!
//! Labels: `1` is fake, `0` is real. The zero-map L1 term acts on real
//! samples only.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{ad_forward, mcb_forward, reduced_channels, AdParams, BlockMode, McbParams, PointwiseIds};
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{FeatureMap, Scalar, Tensor};

pub const REAL: usize = 0;
pub const FAKE: usize = 1;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stages: usize,
    pub base_width: usize,
    /// Width of stage `i + 1` is the width of stage `i` times this.
    pub width_multiplier: usize,
    pub mode: BlockMode,
    pub ad_enabled: bool,
    /// Stage whose (post-ReLU) output feeds the AD branch.
    pub ad_tap_stage: usize,
    pub reduction_ratio: usize,
    pub seed: u64,
    /// How each real sample's `F*` is reduced in the zero-map loss.
    pub l1_reduction: L1Reduction,
}

/// Per-sample reduction of `|F*|` in the zero-map loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum L1Reduction {
    /// `||F*_i||_1`, the plain L1 norm.
    #[default]
    Sum,
    /// `||F*_i||_1 / numel(F*_i)`.
    Mean,
}

impl L1Reduction {
    pub fn as_str(self) -> &'static str {
        match self {
            L1Reduction::Sum => "sum",
            L1Reduction::Mean => "mean",
        }
    }
}

impl fmt::Display for L1Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for L1Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(L1Reduction::Sum),
            "mean" => Ok(L1Reduction::Mean),
            _ => Err(Error::Config(format!("unknown l1 reduction {s:?} (expected sum or mean)"))),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            base_width: 16,
            width_multiplier: 1,
            mode: BlockMode::Mcb,
            ad_enabled: true,
            ad_tap_stage: 1,
            reduction_ratio: 16,
            seed: 0,
            l1_reduction: L1Reduction::Sum,
        }
    }
}

impl ModelConfig {
    pub fn stage_widths(&self) -> Vec<usize> {
        let mut w = self.base_width;
        (0..self.stages)
            .map(|_| {
                let cur = w;
                w *= self.width_multiplier;
                cur
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stages must be at least 1".into()));
        }
        if self.base_width == 0 || self.width_multiplier == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.ad_tap_stage >= self.stages {
            return Err(Error::Config(format!(
                "ad_tap_stage {} out of range for {} stages",
                self.ad_tap_stage, self.stages
            )));
        }
        for w in self.stage_widths() {
            reduced_channels(w, self.reduction_ratio)?;
        }
        Ok(())
    }

    /// Minimum frame side accepted by the pooling chain.
    pub fn min_frame_side(&self) -> usize {
        1 << self.stages
    }

    /// `key = value` lines, readable by [`ModelConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stages = {}", self.stages);
        let _ = writeln!(s, "base_width = {}", self.base_width);
        let _ = writeln!(s, "width_multiplier = {}", self.width_multiplier);
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "ad = {}", if self.ad_enabled { "on" } else { "off" });
        let _ = writeln!(s, "ad_tap_stage = {}", self.ad_tap_stage);
        let _ = writeln!(s, "reduction_ratio = {}", self.reduction_ratio);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "l1_reduction = {}", self.l1_reduction);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut tap_given = false;
        for (key, value) in crate::config::parse_kv(text)? {
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key}: {e}"));
            match key.as_str() {
                "stages" => cfg.stages = value.parse().map_err(|e| bad(&e))?,
                "base_width" => cfg.base_width = value.parse().map_err(|e| bad(&e))?,
                "width_multiplier" => cfg.width_multiplier = value.parse().map_err(|e| bad(&e))?,
                "mode" => cfg.mode = value.parse()?,
                "ad" => cfg.ad_enabled = crate::config::parse_switch(&value)?,
                "ad_tap_stage" => {
                    cfg.ad_tap_stage = value.parse().map_err(|e| bad(&e))?;
                    tap_given = true;
                }
                "reduction_ratio" => cfg.reduction_ratio = value.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                "l1_reduction" => cfg.l1_reduction = value.parse()?,
                _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
            }
        }
        if !tap_given {
            cfg.ad_tap_stage = cfg.stages.saturating_sub(1);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearIds {
    fn init<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{prefix}.weight"), &[c_out, c_in], c_in, rng)?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self { weight, bias })
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub block: McbParams,
    /// Width change after pooling; absent on the last stage.
    pub transition: Option<PointwiseIds>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdBranch {
    pub params: AdParams,
    pub head: LinearIds,
}

/// Model structure plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub stem: PointwiseIds,
    pub stages: Vec<Stage>,
    pub head: LinearIds,
    pub ad: Option<AdBranch>,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits_main: Var,
    pub logits_ad: Option<Var>,
    pub f_star: Option<Var>,
    /// The tapped backbone feature `F_out`.
    pub tap: Var,
}

/// Values of the three loss terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle<T = f32> {
    pub l_cls1: T,
    pub l_l1: T,
    pub l_cls2: T,
    pub total: T,
}

/// Tape handles of the three loss terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_cls1: Var,
    pub l_l1: Var,
    pub l_cls2: Var,
    pub total: Var,
}

impl LossVars {
    pub fn bundle<T: Scalar>(&self, tape: &Tape<T>) -> LossBundle<T> {
        LossBundle {
            l_cls1: tape.value(self.l_cls1).item(),
            l_l1: tape.value(self.l_l1).item(),
            l_cls2: tape.value(self.l_cls2).item(),
            total: tape.value(self.total).item(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Softmax of the main head, `[p_real, p_fake]` per sample.
    pub p_main: Vec<[f32; 2]>,
    /// Softmax of the AD head when the branch is enabled.
    pub p_ad: Option<Vec<[f32; 2]>>,
    /// Probability of fake, averaged over the available heads.
    pub score: Vec<f32>,
}

impl Model<f32> {
    /// Deterministically initialized model for `cfg`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let widths = cfg.stage_widths();
        let stem = PointwiseIds::init(&mut store, "stem", INPUT_CHANNELS, widths[0], &mut rng)?;
        let mut stages = Vec::with_capacity(cfg.stages);
        for (i, &w) in widths.iter().enumerate() {
            let block = McbParams::init(&mut store, &format!("stage{i}"), w, cfg.reduction_ratio, cfg.mode, &mut rng)?;
            let transition = match widths.get(i + 1) {
                Some(&next) => Some(PointwiseIds::init(&mut store, &format!("stage{i}.transition"), w, next, &mut rng)?),
                None => None,
            };
            stages.push(Stage { block, transition });
        }
        let last = *widths.last().expect("at least one stage");
        let head = LinearIds::init(&mut store, "head", last, 2, &mut rng)?;
        // Drawn last so disabling AD leaves the backbone initialization intact.
        let ad = if cfg.ad_enabled {
            let tap_w = widths[cfg.ad_tap_stage];
            let params = AdParams::init(&mut store, "ad", tap_w, &mut rng)?;
            let head = LinearIds::init(&mut store, "ad.head", tap_w, 2, &mut rng)?;
            Some(AdBranch { params, head })
        } else {
            None
        };
        Ok(Self {
            config: cfg.clone(),
            store,
            stem,
            stages,
            head,
            ad,
        })
    }
}

impl<T: Scalar> Model<T> {
    /// Same structure with parameters converted to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            stem: self.stem,
            stages: self.stages.clone(),
            head: self.head.clone(),
            ad: self.ad.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let d = x.dims5()?;
        if d.c != INPUT_CHANNELS {
            return Err(Error::dim("forward", format!("expected {INPUT_CHANNELS} input channels, got {}", d.c)));
        }
        let need = self.config.min_frame_side();
        if d.h < need || d.w < need {
            return Err(Error::dim(
                "forward",
                format!("frames {}x{} too small for {} stages (need {need})", d.h, d.w, self.config.stages),
            ));
        }
        Ok(())
    }

    /// Records a forward pass of the input `x` (shape `(B, 3, T, H, W)`).
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<ForwardOutput> {
        self.forward_with(tape, &self.store, x)
    }

    /// Forward pass of this structure using parameters from `store`, which
    /// must have been laid out by the same configuration.
    pub fn forward_with(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<ForwardOutput> {
        self.check_input(tape.value(x))?;
        let mut h = self.stem.apply(tape, store, x)?;
        let mut tap = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let b = mcb_forward(tape, store, h, &stage.block)?;
            h = tape.relu(b);
            if i == self.config.ad_tap_stage {
                tap = Some(h);
            }
            if let Some(tr) = &stage.transition {
                let pooled = tape.mean_pool2(h)?;
                h = tr.apply(tape, store, pooled)?;
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits_main = self.head.apply(tape, store, pooled)?;
        let tap = tap.expect("tap stage validated");
        let (logits_ad, f_star) = match &self.ad {
            Some(ad) => {
                let f_star = ad_forward(tape, store, tap, &ad.params)?;
                let pooled = tape.global_avg_pool(f_star)?;
                let logits = ad.head.apply(tape, store, pooled)?;
                (Some(logits), Some(f_star))
            }
            None => (None, None),
        };
        Ok(ForwardOutput {
            logits_main,
            logits_ad,
            f_star,
            tap,
        })
    }

    /// Softmax probabilities and the averaged fake score.
    pub fn predict(&self, x: &FeatureMap<T>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, xv)?;
        let p_main = probs(tape.value(out.logits_main))?;
        let p_ad = out.logits_ad.map(|l| probs(tape.value(l))).transpose()?;
        let score = average_fake_score(&p_main, p_ad.as_deref());
        Ok(Prediction { p_main, p_ad, score })
    }
}

fn probs<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<[f32; 2]>> {
    let p = ops::softmax(logits)?;
    Ok(p.data()
        .chunks_exact(2)
        .map(|r| [r[0].as_f64() as f32, r[1].as_f64() as f32])
        .collect())
}

/// Per-sample fake probability: the mean of both heads when the AD head is
/// present, otherwise the main head alone.
pub fn average_fake_score(p_main: &[[f32; 2]], p_ad: Option<&[[f32; 2]]>) -> Vec<f32> {
    match p_ad {
        Some(ad) => p_main
            .iter()
            .zip(ad)
            .map(|(m, a)| (m[FAKE] + a[FAKE]) / 2.0)
            .collect(),
        None => p_main.iter().map(|m| m[FAKE]).collect(),
    }
}

/// Records `L_cls1`, `L_l1`, `L_cls2` and `total = (L_cls1 + L_l1) + L_cls2`.
///
/// `L_l1` averages the reduced `|F*_i|` over the real samples of the batch and
/// is zero when the batch has none. Without an AD branch both auxiliary terms
/// are zero constants.
pub fn compute_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits_main: Var,
    logits_ad: Option<Var>,
    f_star: Option<Var>,
    labels: &[usize],
    reduction: L1Reduction,
) -> Result<LossVars> {
    if let Some(&bad) = labels.iter().find(|&&l| l > FAKE) {
        return Err(Error::InvalidLabel(bad));
    }
    let l_cls1 = tape.softmax_cross_entropy(logits_main, labels)?;
    let (l_l1, l_cls2) = match (logits_ad, f_star) {
        (Some(la), Some(fs)) => {
            let n_real = labels.iter().filter(|&&l| l == REAL).count();
            let per_sample = match reduction {
                L1Reduction::Sum => 1.0,
                L1Reduction::Mean => tape.value(fs).dims5()?.sample() as f64,
            };
            let weights: Vec<T> = labels
                .iter()
                .map(|&l| {
                    if l == REAL {
                        T::one() / T::lit(n_real as f64 * per_sample)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let l1 = tape.weighted_sample_l1(fs, &weights)?;
            let cls2 = tape.softmax_cross_entropy(la, labels)?;
            (l1, cls2)
        }
        (None, None) => (tape.leaf(Tensor::scalar(T::zero())), tape.leaf(Tensor::scalar(T::zero()))),
        _ => {
            return Err(Error::Config("AD logits and F* must be given together".into()));
        }
    };
    let partial = tape.add(l_cls1, l_l1)?;
    let total = tape.add(partial, l_cls2)?;
    Ok(LossVars {
        l_cls1,
        l_l1,
        l_cls2,
        total,
    })
}
