//! Spatio-temporal building blocks.
//!
//! * CSTM: channel-wise temporal fusion (3x1x1) followed by channel-wise
//!   spatial embedding (1x3x3), producing `F_S`.
//! * CMM: pointwise channel reduction to `F_D`, a channel-wise 3x3 kernel
//!   `K_PM` that pre-models per-pixel motion, and the frame-by-frame
//!   subtraction `F_M[t] = F_D[t] - F_PM[t-1]`.
//! * MCM: the same subtraction applied once more to `F_M` with the *same*
//!   `K_PM`, giving the second-order motion-consistency feature `F_MM`.
//! * MCB: `F_S + up_m(F_M)` (STM) or `F_S + up_m(F_M) + up_mm(F_MM)` (MCB).
//! * AD: nine channel-preserving residual units producing the forgery-clue
//!   map `F*` with the shape of its input.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Which motion modules a block contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockMode {
    /// Spatio-temporal features only.
    CstmOnly,
    /// CSTM plus first-order motion (CMM).
    Stm,
    /// CSTM plus first- and second-order motion (MCM).
    Mcb,
}

impl BlockMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockMode::CstmOnly => "cstm",
            BlockMode::Stm => "stm",
            BlockMode::Mcb => "mcb",
        }
    }
}

impl fmt::Display for BlockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cstm" | "cstm_only" => Ok(BlockMode::CstmOnly),
            "stm" => Ok(BlockMode::Stm),
            "mcb" => Ok(BlockMode::Mcb),
            other => Err(Error::Config(format!("unknown block mode {other:?}"))),
        }
    }
}

/// Parameter ids of a 1x1x1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointwiseIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PointwiseIds {
    /// Weight uniform in `±sqrt(6 / c_in)`, zero bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{prefix}.weight"), &[c_out, c_in], c_in, rng)?;
        let bias = store.add(format!("{prefix}.bias"), crate::Tensor::zeros(&[c_out]))?;
        Ok(Self { weight, bias })
    }

    /// Zero weight and bias: the convolution starts as the zero map.
    pub fn init_zero<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let weight = store.add(format!("{prefix}.weight"), crate::Tensor::zeros(&[c_out, c_in]))?;
        let bias = store.add(format!("{prefix}.bias"), crate::Tensor::zeros(&[c_out]))?;
        Ok(Self { weight, bias })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv_pointwise(x, w, b)
    }
}

/// Motion-branch parameters: channel reduction, the shared `K_PM`, and the
/// restoration convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MotionIds {
    pub down: PointwiseIds,
    pub kpm: ParamId,
    pub up_m: PointwiseIds,
    /// Present only in MCB mode.
    pub up_mm: Option<PointwiseIds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McbParams {
    pub channels: usize,
    pub reduced: usize,
    pub temporal_k: ParamId,
    pub spatial_k: ParamId,
    /// Absent in CSTM-only mode.
    pub motion: Option<MotionIds>,
    pub mode: BlockMode,
}

/// Reduced channel count `max(C / ratio, 1)`; `C` must be divisible by the
/// ratio once it reaches it.
pub fn reduced_channels(channels: usize, ratio: usize) -> Result<usize> {
    if channels == 0 || ratio == 0 {
        return Err(Error::Config("channels and reduction ratio must be positive".into()));
    }
    if channels >= ratio && channels % ratio != 0 {
        return Err(Error::Config(format!(
            "{channels} channels not divisible by reduction ratio {ratio}"
        )));
    }
    Ok((channels / ratio).max(1))
}

impl McbParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        reduction_ratio: usize,
        mode: BlockMode,
        rng: &mut R,
    ) -> Result<Self> {
        let reduced = reduced_channels(channels, reduction_ratio)?;
        let temporal_k = store.add_uniform(format!("{prefix}.temporal"), &[channels, 3], 3, rng)?;
        let spatial_k = store.add_uniform(format!("{prefix}.spatial"), &[channels, 3, 3], 9, rng)?;
        let motion = match mode {
            BlockMode::CstmOnly => None,
            BlockMode::Stm | BlockMode::Mcb => {
                let down = PointwiseIds::init(store, &format!("{prefix}.down"), channels, reduced, rng)?;
                let kpm = store.add_uniform(format!("{prefix}.kpm"), &[reduced, 3, 3], 9, rng)?;
                let up_m = PointwiseIds::init(store, &format!("{prefix}.up_m"), reduced, channels, rng)?;
                let up_mm = if mode == BlockMode::Mcb {
                    Some(PointwiseIds::init(store, &format!("{prefix}.up_mm"), reduced, channels, rng)?)
                } else {
                    None
                };
                Some(MotionIds { down, kpm, up_m, up_mm })
            }
        };
        Ok(Self {
            channels,
            reduced,
            temporal_k,
            spatial_k,
            motion,
            mode,
        })
    }

    fn motion(&self) -> Result<&MotionIds> {
        self.motion
            .as_ref()
            .ok_or_else(|| Error::Config(format!("block has no motion parameters for mode {}", self.mode)))
    }
}

/// Intermediate features of the motion branch.
#[derive(Debug, Clone, Copy)]
pub struct MotionFeatures {
    /// `F_M` at the reduced width.
    pub m_raw: Var,
    /// `F_M` restored to the block width.
    pub m_up: Var,
    /// `F_MM` at the reduced width (MCM only).
    pub mm_raw: Option<Var>,
    /// `F_MM` restored to the block width (MCM only).
    pub mm_up: Option<Var>,
}

/// `F_S = spatial(temporal(F))`
pub fn cstm_forward<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, f: Var, p: &McbParams) -> Result<Var> {
    let tk = tape.param(store, p.temporal_k);
    let sk = tape.param(store, p.spatial_k);
    let fused = tape.conv_channelwise_temporal(f, tk)?;
    tape.conv_channelwise_spatial(fused, sk)
}

/// First-order motion. Returns `(F_M raw, F_M restored)`.
pub fn cmm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    f: Var,
    p: &McbParams,
) -> Result<(Var, Var)> {
    let m = p.motion()?;
    let f_d = m.down.apply(tape, store, f)?;
    let kpm = tape.param(store, m.kpm);
    let f_pm = tape.conv_channelwise_spatial(f_d, kpm)?;
    let m_raw = tape.shifted_subtract(f_d, f_pm)?;
    let m_up = m.up_m.apply(tape, store, m_raw)?;
    Ok((m_raw, m_up))
}

/// First- and second-order motion; `K_PM` is applied to both orders.
pub fn mcm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    f: Var,
    p: &McbParams,
) -> Result<MotionFeatures> {
    let m = p.motion()?;
    let up_mm = m
        .up_mm
        .ok_or_else(|| Error::Config("block has no up_mm restoration for MCM".into()))?;
    let (m_raw, m_up) = cmm_forward(tape, store, f, p)?;
    let kpm = tape.param(store, m.kpm);
    let f_pmm = tape.conv_channelwise_spatial(m_raw, kpm)?;
    let mm_raw = tape.shifted_subtract(m_raw, f_pmm)?;
    let mm_up = up_mm.apply(tape, store, mm_raw)?;
    Ok(MotionFeatures {
        m_raw,
        m_up,
        mm_raw: Some(mm_raw),
        mm_up: Some(mm_up),
    })
}

/// Block output according to `p.mode`.
pub fn mcb_forward<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, f: Var, p: &McbParams) -> Result<Var> {
    let c = tape.value(f).dims5()?.c;
    if c != p.channels {
        return Err(Error::dim(
            "mcb_forward",
            format!("block built for {} channels, input has {c}", p.channels),
        ));
    }
    let f_s = cstm_forward(tape, store, f, p)?;
    match p.mode {
        BlockMode::CstmOnly => Ok(f_s),
        BlockMode::Stm => {
            let (_, m_up) = cmm_forward(tape, store, f, p)?;
            tape.add(f_s, m_up)
        }
        BlockMode::Mcb => {
            let mf = mcm_forward(tape, store, f, p)?;
            let s = tape.add(f_s, mf.m_up)?;
            tape.add(s, mf.mm_up.expect("mcm yields F_MM"))
        }
    }
}

/// One residual unit of the AD branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdUnit {
    pub cw_k: ParamId,
    pub pw: PointwiseIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdParams {
    pub channels: usize,
    pub units: Vec<AdUnit>,
}

pub const AD_UNITS: usize = 9;

impl AdParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::init_with_units(store, prefix, channels, AD_UNITS, rng)
    }

    /// Branch with a custom unit count; models always use [`AD_UNITS`].
    ///
    /// The pointwise output of every unit starts at zero, so a fresh branch
    /// is the identity. With fan-in scaling each unit would grow its input by
    /// about 1.7x and nine of them compound past 100x.
    pub fn init_with_units<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        units: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let units = (0..units)
            .map(|i| {
                let cw_k = store.add_uniform(format!("{prefix}.unit{i}.cw"), &[channels, 3, 3], 9, rng)?;
                let pw = PointwiseIds::init_zero(store, &format!("{prefix}.unit{i}.pw"), channels, channels)?;
                Ok(AdUnit { cw_k, pw })
            })
            .collect::<Result<_>>()?;
        Ok(Self { channels, units })
    }
}

/// `x_{i+1} = x_i + pw(relu(cw(x_i)))`, returning `F* = x_n`.
pub fn ad_forward<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, f_out: Var, p: &AdParams) -> Result<Var> {
    let c = tape.value(f_out).dims5()?.c;
    if c != p.channels {
        return Err(Error::dim(
            "ad_forward",
            format!("branch built for {} channels, input has {c}", p.channels),
        ));
    }
    let mut x = f_out;
    for unit in &p.units {
        let k = tape.param(store, unit.cw_k);
        let h = tape.conv_channelwise_spatial(x, k)?;
        let h = tape.relu(h);
        let h = unit.pw.apply(tape, store, h)?;
        x = tape.add(x, h)?;
    }
    Ok(x)
}
