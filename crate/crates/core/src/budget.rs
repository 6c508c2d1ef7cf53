//! Training-budget accounting in total training images.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    /// Images or clips.
    pub instances: u64,
    /// 1 for image datasets.
    pub frames_per_instance: u64,
    /// Raw decoded frame count, informational only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_frames: Option<u64>,
}

impl DatasetSpec {
    pub fn new(name: impl Into<String>, instances: u64, frames_per_instance: u64) -> Result<Self> {
        let d = Self {
            name: name.into(),
            instances,
            frames_per_instance,
            raw_frames: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn imagenet() -> Self {
        Self::new("imagenet", 1_280_000, 1).expect("valid")
    }

    pub fn k400() -> Self {
        Self {
            raw_frames: Some(68_890_000),
            ..Self::new("k400", 240_000, 300).expect("valid")
        }
    }

    pub fn ssv2() -> Self {
        Self::new("ssv2", 170_000, 45).expect("valid")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "imagenet" => Some(Self::imagenet()),
            "k400" => Some(Self::k400()),
            "ssv2" => Some(Self::ssv2()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.frames_per_instance == 0 {
            return Err(Error::config(format!("dataset {:?} needs positive counts", self.name)));
        }
        Ok(())
    }

    pub fn is_image(&self) -> bool {
        self.frames_per_instance == 1
    }
}

/// Images seen in one epoch at `frames` input frames per clip. Image
/// datasets always count one frame.
pub fn images_per_epoch(d: &DatasetSpec, frames: u64) -> u64 {
    if d.is_image() {
        d.instances
    } else {
        d.instances * frames
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub pretrain_epochs: u64,
    pub finetune_epochs: u64,
    pub frames: u64,
    pub pretrain: DatasetSpec,
    pub finetune: DatasetSpec,
}

impl SchedulePlan {
    pub fn from_scratch(finetune: DatasetSpec, frames: u64, epochs: u64) -> Self {
        Self {
            pretrain_epochs: 0,
            finetune_epochs: epochs,
            frames,
            pretrain: DatasetSpec::imagenet(),
            finetune,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.frames == 0 {
            return Err(Error::config("input frames must be positive"));
        }
        Ok(())
    }

    pub fn pretrain_budget(&self) -> u64 {
        self.pretrain_epochs * images_per_epoch(&self.pretrain, 1)
    }

    pub fn finetune_budget(&self) -> u64 {
        self.finetune_epochs * images_per_epoch(&self.finetune, self.frames)
    }
}

pub fn total_budget(plan: &SchedulePlan) -> u64 {
    plan.pretrain_budget() + plan.finetune_budget()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    #[default]
    Truncate,
    HalfUp,
}

/// Exact ratio of two budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Multiplier(pub Ratio<u128>);

impl Multiplier {
    pub fn ratio(&self) -> Ratio<u128> {
        self.0
    }

    pub fn to_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    /// Distance from 1 as an exact ratio.
    pub fn distance_from_one(&self) -> Ratio<u128> {
        let one = Ratio::from_integer(1);
        if self.0 >= one {
            self.0 - one
        } else {
            one - self.0
        }
    }

    /// Decimal rendering with trailing zeros trimmed, e.g. `"1.16"`, `"1"`.
    pub fn display(&self, decimals: u32, rounding: Rounding) -> String {
        let scale = 10u128.pow(decimals);
        let (n, d) = (*self.0.numer(), *self.0.denom());
        let scaled = match rounding {
            Rounding::Truncate => n * scale / d,
            Rounding::HalfUp => (2 * n * scale + d) / (2 * d),
        };
        let int = scaled / scale;
        let frac = scaled % scale;
        if frac == 0 {
            return int.to_string();
        }
        let digits = format!("{:0width$}", frac, width = decimals as usize);
        format!("{int}.{}", digits.trim_end_matches('0'))
    }
}

impl fmt::Display for Multiplier {
    /// `x` followed by the two-decimal truncated value.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.display(2, Rounding::Truncate))
    }
}

pub fn budget_multiplier(plan: &SchedulePlan, baseline: &SchedulePlan) -> Result<Multiplier> {
    let base = total_budget(baseline);
    if base == 0 {
        return Err(Error::config("baseline budget is zero"));
    }
    Ok(Multiplier(Ratio::new(total_budget(plan) as u128, base as u128)))
}

pub const DEFAULT_CANDIDATES: [u64; 3] = [100, 150, 300];
pub const DEFAULT_FINETUNE_EPOCHS: u64 = 50;
pub const SOTA_PRETRAIN_EPOCHS: u64 = 300;

/// Plans against a from-scratch baseline on `finetune`, pre-training on
/// `pretrain`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Planner {
    pub pretrain: DatasetSpec,
    pub finetune: DatasetSpec,
}

impl Planner {
    pub fn new(pretrain: DatasetSpec, finetune: DatasetSpec) -> Self {
        Self { pretrain, finetune }
    }

    pub fn plan(&self, frames: u64, pretrain_epochs: u64, finetune_epochs: u64) -> SchedulePlan {
        SchedulePlan {
            pretrain_epochs,
            finetune_epochs,
            frames,
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
        }
    }

    pub fn baseline(&self, frames: u64, epochs: u64) -> SchedulePlan {
        self.plan(frames, 0, epochs)
    }

    /// Candidate pre-train epoch count whose multiplier is closest to 1;
    /// ties go to the shorter schedule.
    pub fn plan_fixed_budget(
        &self,
        frames: u64,
        baseline_epochs: u64,
        finetune_epochs: u64,
        candidates: &[u64],
    ) -> Result<SchedulePlan> {
        if candidates.is_empty() {
            return Err(Error::config("no candidate pre-train epochs"));
        }
        let base = self.baseline(frames, baseline_epochs);
        base.validate()?;
        let mut best: Option<(Ratio<u128>, u64)> = None;
        for &c in candidates {
            let m = budget_multiplier(&self.plan(frames, c, finetune_epochs), &base)?;
            let key = (m.distance_from_one(), c);
            if best.map_or(true, |b| key < b) {
                best = Some(key);
            }
        }
        let (_, epochs) = best.expect("non-empty");
        Ok(self.plan(frames, epochs, finetune_epochs))
    }

    pub fn plan_sota(&self, frames: u64) -> SchedulePlan {
        self.plan(frames, SOTA_PRETRAIN_EPOCHS, DEFAULT_FINETUNE_EPOCHS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlanMode {
    #[default]
    Fixed,
    Sota,
}

impl FromStr for PlanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "sota" => Ok(Self::Sota),
            _ => Err(Error::config(format!("unknown mode {s:?}; expected fixed or sota"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k400() -> Planner {
        Planner::new(DatasetSpec::imagenet(), DatasetSpec::k400())
    }

    #[test]
    fn per_epoch_counts() {
        assert_eq!(images_per_epoch(&DatasetSpec::k400(), 32), 7_680_000);
        assert_eq!(images_per_epoch(&DatasetSpec::imagenet(), 1), 1_280_000);
        assert_eq!(images_per_epoch(&DatasetSpec::imagenet(), 16), 1_280_000);
        assert_eq!(images_per_epoch(&DatasetSpec::ssv2(), 1), 170_000);
    }

    #[test]
    fn totals() {
        let p = k400();
        assert_eq!(total_budget(&p.plan(8, 100, 50)), 224_000_000);
        assert_eq!(total_budget(&p.plan(8, 0, 100)), 192_000_000);
        assert_eq!(total_budget(&p.plan(8, 0, 0)), 0);
    }

    #[test]
    fn table_multipliers() {
        let p = k400();
        let m = |t, e| budget_multiplier(&p.plan(t, e, 50), &p.baseline(t, 100)).unwrap().to_string();
        assert_eq!(m(8, 100), "x1.16");
        assert_eq!(m(16, 150), "x1");
        assert_eq!(m(32, 300), "x1");
    }

    #[test]
    fn zero_baseline_rejected() {
        let p = k400();
        assert!(budget_multiplier(&p.plan(8, 1, 1), &p.baseline(8, 0)).is_err());
    }

    #[test]
    fn fixed_budget_choice() {
        let p = k400();
        let pick = |t| p.plan_fixed_budget(t, 100, 50, &DEFAULT_CANDIDATES).unwrap().pretrain_epochs;
        assert_eq!(pick(8), 100);
        assert_eq!(pick(16), 150);
        assert_eq!(pick(32), 300);
        assert!(p.plan_fixed_budget(8, 100, 50, &[]).is_err());
    }

    #[test]
    fn sota_is_cheaper_than_long_scratch() {
        let p = k400();
        let m = budget_multiplier(&p.plan_sota(32), &p.baseline(32, 256)).unwrap();
        assert_eq!(m.display(2, Rounding::HalfUp), "0.39");
        assert!(m.to_f64() < 1.0);
    }

    #[test]
    fn display_rules() {
        let m = Multiplier(Ratio::new(7, 6));
        assert_eq!(m.display(2, Rounding::Truncate), "1.16");
        assert_eq!(m.display(2, Rounding::HalfUp), "1.17");
        assert_eq!(Multiplier(Ratio::new(1, 2)).display(2, Rounding::Truncate), "0.5");
        assert_eq!(Multiplier(Ratio::new(25, 32)).display(1, Rounding::HalfUp), "0.8");
        assert_eq!(Multiplier(Ratio::new(3, 1)).display(0, Rounding::Truncate), "3");
    }

    #[test]
    fn custom_dataset_json() {
        let d = DatasetSpec::from_json(r#"{"name":"toy","instances":10,"frames_per_instance":8}"#).unwrap();
        assert_eq!(images_per_epoch(&d, 4), 40);
        assert!(DatasetSpec::from_json(r#"{"name":"bad","instances":0,"frames_per_instance":1}"#).is_err());
    }
}
