//! Learning-rate schedules: the original training curve and the six
//! retraining schedules used after pruning (FT, LRW, SLR, CLR, LLR, ALLR).
//!
//! Everything is resolved per optimizer step. Epoch positions are 0-based
//! internally; piecewise curves are written with 1-based epochs, the way
//! training recipes usually state them.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of retraining steps spent warming up in SLR and CLR.
pub const WARMUP_FRACTION: f64 = 0.05;

pub trait LrSchedule: Sync {
    fn lr_at(&self, step: u64, steps_per_epoch: u64) -> Result<f32>;
}

/// Constant rate with no horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantLr(pub f32);

impl LrSchedule for ConstantLr {
    fn lr_at(&self, _step: u64, _steps_per_epoch: u64) -> Result<f32> {
        Ok(self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrCurve {
    Constant { lr: f32 },
    /// Linear interpolation from `from` at the start of training to `to` at the end.
    Linear { from: f32, to: f32 },
    /// `(first_epoch, lr)` pairs with 1-based epochs; each rate holds until the
    /// next segment starts.
    Piecewise { segments: Vec<(u32, f32)> },
}

/// The schedule a model was originally trained with, over `epochs` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginalSchedule {
    pub curve: LrCurve,
    pub epochs: u32,
}

impl OriginalSchedule {
    pub fn new(curve: LrCurve, epochs: u32) -> Result<Self> {
        if epochs == 0 {
            return Err(Error::Schedule("original schedule needs at least one epoch".into()));
        }
        match &curve {
            LrCurve::Constant { lr } if !(*lr >= 0.0) => {
                return Err(Error::Schedule(format!("negative learning rate {lr}")));
            }
            LrCurve::Linear { from, to } if !(*from >= 0.0 && *to >= 0.0) => {
                return Err(Error::Schedule(format!("negative learning rate in {from} -> {to}")));
            }
            LrCurve::Piecewise { segments } => {
                if segments.first().map(|s| s.0) != Some(1) {
                    return Err(Error::Schedule("piecewise schedule must start at epoch 1".into()));
                }
                if segments.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(Error::Schedule("piecewise segment starts must increase".into()));
                }
                if segments.iter().any(|s| !(s.1 >= 0.0)) {
                    return Err(Error::Schedule("negative learning rate in piecewise schedule".into()));
                }
            }
            _ => {}
        }
        Ok(OriginalSchedule { curve, epochs })
    }

    pub fn linear(from: f32, to: f32, epochs: u32) -> Result<Self> {
        Self::new(LrCurve::Linear { from, to }, epochs)
    }

    pub fn piecewise(segments: Vec<(u32, f32)>, epochs: u32) -> Result<Self> {
        Self::new(LrCurve::Piecewise { segments }, epochs)
    }

    /// Rate at a fractional 0-based epoch position `x`.
    pub fn at_epoch(&self, x: f64) -> f32 {
        match &self.curve {
            LrCurve::Constant { lr } => *lr,
            LrCurve::Linear { from, to } => {
                let u = (x / f64::from(self.epochs)).clamp(0.0, 1.0);
                (f64::from(*from) + (f64::from(*to) - f64::from(*from)) * u) as f32
            }
            LrCurve::Piecewise { segments } => {
                let t = x.max(0.0).floor() as u64 + 1;
                segments
                    .iter()
                    .take_while(|(start, _)| u64::from(*start) <= t)
                    .last()
                    .map_or(segments[0].1, |s| s.1)
            }
        }
    }

    /// Initial rate.
    pub fn eta_1(&self) -> f32 {
        self.at_epoch(0.0)
    }

    /// Rate at the start of the last epoch.
    pub fn eta_final(&self) -> f32 {
        self.at_epoch(f64::from(self.epochs - 1))
    }
}

impl LrSchedule for OriginalSchedule {
    fn lr_at(&self, step: u64, steps_per_epoch: u64) -> Result<f32> {
        let total = u64::from(self.epochs) * steps_per_epoch;
        if steps_per_epoch == 0 || step >= total {
            return Err(Error::Schedule(format!("step {step} outside the original schedule of {total} steps")));
        }
        Ok(self.at_epoch(step as f64 / steps_per_epoch as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetrainVariant {
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "LRW")]
    Lrw,
    #[serde(rename = "SLR")]
    Slr,
    #[serde(rename = "CLR")]
    Clr,
    #[serde(rename = "LLR")]
    Llr,
    #[serde(rename = "ALLR")]
    Allr,
}

impl RetrainVariant {
    pub const ALL: [RetrainVariant; 6] = [
        RetrainVariant::Ft,
        RetrainVariant::Lrw,
        RetrainVariant::Slr,
        RetrainVariant::Clr,
        RetrainVariant::Llr,
        RetrainVariant::Allr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RetrainVariant::Ft => "FT",
            RetrainVariant::Lrw => "LRW",
            RetrainVariant::Slr => "SLR",
            RetrainVariant::Clr => "CLR",
            RetrainVariant::Llr => "LLR",
            RetrainVariant::Allr => "ALLR",
        }
    }
}

impl fmt::Display for RetrainVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrainVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RetrainVariant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown retraining schedule `{s}`")))
    }
}

/// Learning-rate schedule for one prune-retrain cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainSchedule {
    pub variant: RetrainVariant,
    /// Initial rate of the original schedule (or an override).
    pub eta_1: f32,
    /// Final rate of the original schedule.
    pub eta_final: f32,
    pub original: OriginalSchedule,
    pub retrain_epochs: u32,
    /// Relative validation-accuracy drop caused by the preceding prune (ALLR).
    pub allr_drop: Option<f32>,
}

impl RetrainSchedule {
    pub fn new(variant: RetrainVariant, original: OriginalSchedule, retrain_epochs: u32) -> Result<Self> {
        if retrain_epochs == 0 {
            return Err(Error::Schedule("retraining needs at least one epoch".into()));
        }
        if variant == RetrainVariant::Lrw && retrain_epochs > original.epochs {
            return Err(Error::Schedule(format!(
                "LRW cannot rewind {retrain_epochs} epochs of a {}-epoch schedule",
                original.epochs
            )));
        }
        let sched = RetrainSchedule {
            variant,
            eta_1: original.eta_1(),
            eta_final: original.eta_final(),
            original,
            retrain_epochs,
            allr_drop: None,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn with_initial_lr(mut self, eta_1: f32) -> Result<Self> {
        self.eta_1 = eta_1;
        self.validate()?;
        Ok(self)
    }

    pub fn with_drop(mut self, drop: f32) -> Result<Self> {
        self.allr_drop = Some(drop);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta_final >= 0.0 && self.eta_1 >= self.eta_final) {
            return Err(Error::Schedule(format!(
                "need eta_1 >= eta_final >= 0, got {} and {}",
                self.eta_1, self.eta_final
            )));
        }
        if let Some(d) = self.allr_drop {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Schedule(format!("ALLR drop must lie in [0, 1], got {d}")));
            }
        }
        Ok(())
    }

    /// Initial rate of the linear decay, for LLR and ALLR.
    pub fn linear_start(&self) -> Result<f32> {
        match self.variant {
            RetrainVariant::Allr => {
                let drop = self
                    .allr_drop
                    .ok_or_else(|| Error::Schedule("ALLR needs the measured accuracy drop".into()))?;
                Ok(allr_init(self.eta_1, self.eta_final, self.original.epochs, self.retrain_epochs, drop))
            }
            _ => Ok(self.eta_1),
        }
    }
}

impl LrSchedule for RetrainSchedule {
    fn lr_at(&self, step: u64, steps_per_epoch: u64) -> Result<f32> {
        let total = u64::from(self.retrain_epochs) * steps_per_epoch;
        if steps_per_epoch == 0 || step >= total {
            return Err(Error::Schedule(format!("step {step} outside the retraining budget of {total} steps")));
        }
        let warmup = (WARMUP_FRACTION * total as f64).floor() as u64;
        let after_warmup = |peak: f32, shape: &dyn Fn(f64) -> f32| {
            if step < warmup {
                (f64::from(peak) * step as f64 / warmup as f64) as f32
            } else {
                shape((step - warmup) as f64 / (total - warmup) as f64)
            }
        };
        let lr = match self.variant {
            RetrainVariant::Ft => self.eta_final,
            RetrainVariant::Lrw => {
                let epoch = u64::from(self.original.epochs - self.retrain_epochs) + step / steps_per_epoch;
                self.original.at_epoch(epoch as f64)
            }
            RetrainVariant::Slr => {
                let base = self.original.eta_1();
                let scale = if base > 0.0 { f64::from(self.eta_1) / f64::from(base) } else { 1.0 };
                let t = f64::from(self.original.epochs);
                after_warmup(self.eta_1, &|u| (scale * f64::from(self.original.at_epoch(u * t))) as f32)
            }
            RetrainVariant::Clr => after_warmup(self.eta_1, &|u| {
                (f64::from(self.eta_1) * 0.5 * (1.0 + (PI * u).cos())) as f32
            }),
            RetrainVariant::Llr | RetrainVariant::Allr => {
                let start = self.linear_start()?;
                (f64::from(start) * (1.0 - step as f64 / total as f64)) as f32
            }
        };
        Ok(lr)
    }
}

/// Initial rate of ALLR:
/// `min(eta_1, max(eta_final, eta_1 * drop * min(1, T_rt / (0.1 * T))))`.
///
/// `drop` is the relative accuracy loss caused by pruning, clamped to
/// `[0, 1]`: a harmless prune fine-tunes at `eta_final`, a destructive one with
/// enough retraining budget restarts at `eta_1`.
pub fn allr_init(eta_1: f32, eta_final: f32, original_epochs: u32, retrain_epochs: u32, drop: f32) -> f32 {
    let drop = if drop.is_nan() { 0.0 } else { drop.clamp(0.0, 1.0) };
    let budget = (f64::from(retrain_epochs) / (0.1 * f64::from(original_epochs))).min(1.0);
    let raw = f64::from(eta_1) * f64::from(drop) * budget;
    raw.max(f64::from(eta_final)).min(f64::from(eta_1)) as f32
}

/// Relative accuracy degradation `(before - after) / before`, clamped to `[0, 1]`.
pub fn relative_drop(acc_before: f32, acc_after: f32) -> f32 {
    if acc_before <= 0.0 {
        return 0.0;
    }
    ((acc_before - acc_after) / acc_before).clamp(0.0, 1.0)
}
