//! Fine-tuning protocols compiled into phase schedules, and their execution.

mod train;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::BlockId;

pub use train::{
    batch_tensor, class_weights_for, evaluate_loss, foreground_dice, predict_labels, run_schedule, EpochLog,
    Example, ScheduleOutcome, TrainOptions, TrainSet,
};

pub const MIN_LR: f64 = 1e-8;
pub const LR_DECAY: f64 = 0.9;
pub const LR_DECAY_EVERY: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Random initialization, no transfer.
    Baseline,
    /// Transfer, nothing frozen.
    Naive,
    /// Transfer, all encoder blocks frozen.
    FreezeEncoder,
    HierFreeze,
    HierUnfreeze,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::Baseline,
        Protocol::Naive,
        Protocol::FreezeEncoder,
        Protocol::HierFreeze,
        Protocol::HierUnfreeze,
    ];
    /// Row order of the comparison report.
    pub const REPORT_ORDER: [Protocol; 5] = [
        Protocol::Baseline,
        Protocol::Naive,
        Protocol::HierFreeze,
        Protocol::FreezeEncoder,
        Protocol::HierUnfreeze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Baseline => "baseline",
            Protocol::Naive => "naive",
            Protocol::FreezeEncoder => "freeze_encoder",
            Protocol::HierFreeze => "hier_freeze",
            Protocol::HierUnfreeze => "hier_unfreeze",
        }
    }

    /// Label used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Protocol::Baseline => "baseline",
            Protocol::Naive => "no-freezing",
            Protocol::FreezeEncoder => "freeze-encoder",
            Protocol::HierFreeze => "hier-freeze",
            Protocol::HierUnfreeze => "hier-unfreeze",
        }
    }

    pub fn transfers_weights(self) -> bool {
        self != Protocol::Baseline
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownProtocol(s.to_string()))
    }
}

/// How `hier_freeze` advances between phases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeStyle {
    /// `{}`, `{1}`, `{1,2}`, ...
    #[default]
    Cumulative,
    /// `{}`, `{1}`, `{2}`, ...
    Sliding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub frozen_blocks: BTreeSet<BlockId>,
    pub lr0: f64,
    pub max_epochs: u32,
    pub patience: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub protocol: Protocol,
    pub phases: Vec<Phase>,
}

/// Learning rate, epoch budget and patience shared by every phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseBudget {
    pub lr0: f64,
    pub max_epochs: u32,
    pub patience: u32,
}

impl Default for PhaseBudget {
    fn default() -> Self {
        Self {
            lr0: 5e-5,
            max_epochs: 20,
            patience: 5,
        }
    }
}

fn blocks(range: std::ops::RangeInclusive<u8>) -> BTreeSet<BlockId> {
    range.map(BlockId).collect()
}

pub fn build_schedule(
    protocol: Protocol,
    encoder_blocks: usize,
    budget: PhaseBudget,
    style: FreezeStyle,
) -> Result<Schedule> {
    if !(1..=7).contains(&encoder_blocks) {
        return Err(Error::Config(format!("encoder_blocks must be in 1..=7, got {encoder_blocks}")));
    }
    let e = encoder_blocks as u8;
    let sets: Vec<BTreeSet<BlockId>> = match protocol {
        Protocol::Baseline | Protocol::Naive => vec![BTreeSet::new()],
        Protocol::FreezeEncoder => vec![blocks(1..=e)],
        Protocol::HierFreeze => (0..e)
            .map(|k| match (k, style) {
                (0, _) => BTreeSet::new(),
                (_, FreezeStyle::Cumulative) => blocks(1..=k),
                (_, FreezeStyle::Sliding) => blocks(k..=k),
            })
            .collect(),
        Protocol::HierUnfreeze => (0..=e).rev().map(|k| blocks(1..=k)).collect(),
    };
    let schedule = Schedule {
        protocol,
        phases: sets
            .into_iter()
            .map(|frozen_blocks| Phase {
                frozen_blocks,
                lr0: budget.lr0,
                max_epochs: budget.max_epochs,
                patience: budget.patience,
            })
            .collect(),
    };
    schedule.validate(encoder_blocks)?;
    Ok(schedule)
}

impl Schedule {
    pub fn validate(&self, encoder_blocks: usize) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("schedule has no phases".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if let Some(b) = p.frozen_blocks.iter().find(|b| b.0 == 0 || b.0 as usize > encoder_blocks) {
                return Err(Error::UnknownBlock(b.0));
            }
            if !(p.lr0 > 0.0) || p.max_epochs == 0 || p.patience == 0 {
                return Err(Error::Config(format!(
                    "phase {i}: lr0, max_epochs and patience must be positive"
                )));
            }
        }
        let ok = match self.protocol {
            Protocol::HierFreeze => self.phases[0].frozen_blocks.is_empty(),
            Protocol::HierUnfreeze => self.is_inclusion_decreasing_to_empty(),
            _ => self.phases.len() == 1,
        };
        if !ok {
            return Err(Error::Config(format!(
                "frozen-set sequence does not fit protocol {}",
                self.protocol
            )));
        }
        Ok(())
    }

    /// Whether consecutive frozen sets strictly grow under inclusion.
    pub fn is_inclusion_increasing(&self) -> bool {
        self.phases.windows(2).all(|w| {
            w[0].frozen_blocks.is_subset(&w[1].frozen_blocks) && w[0].frozen_blocks != w[1].frozen_blocks
        })
    }

    /// Whether consecutive frozen sets strictly shrink and the last is empty.
    pub fn is_inclusion_decreasing_to_empty(&self) -> bool {
        self.phases.last().is_some_and(|p| p.frozen_blocks.is_empty())
            && self.phases.windows(2).all(|w| {
                w[1].frozen_blocks.is_subset(&w[0].frozen_blocks) && w[0].frozen_blocks != w[1].frozen_blocks
            })
    }

    pub fn frozen_sets(&self) -> Vec<Vec<u8>> {
        self.phases
            .iter()
            .map(|p| p.frozen_blocks.iter().map(|b| b.0).collect())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

/// `max(lr0 * 0.9^floor(epoch / 2), 1e-8)`.
pub fn lr_at_epoch(lr0: f64, epoch: u32) -> f64 {
    (lr0 * LR_DECAY.powi((epoch / LR_DECAY_EVERY) as i32)).max(MIN_LR)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(p: Protocol) -> Schedule {
        build_schedule(p, 5, PhaseBudget::default(), FreezeStyle::Cumulative).unwrap()
    }

    #[test]
    fn protocol_shapes() {
        assert_eq!(sched(Protocol::Baseline).frozen_sets(), vec![Vec::<u8>::new()]);
        assert_eq!(sched(Protocol::Naive).frozen_sets(), vec![Vec::<u8>::new()]);
        assert_eq!(sched(Protocol::FreezeEncoder).frozen_sets(), vec![vec![1, 2, 3, 4, 5]]);
        assert_eq!(
            sched(Protocol::HierFreeze).frozen_sets(),
            vec![vec![], vec![1], vec![1, 2], vec![1, 2, 3], vec![1, 2, 3, 4]]
        );
        assert_eq!(
            sched(Protocol::HierUnfreeze).frozen_sets(),
            vec![vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4], vec![1, 2, 3], vec![1, 2], vec![1], vec![]]
        );
        assert!(sched(Protocol::HierFreeze).is_inclusion_increasing());
        assert!(sched(Protocol::HierUnfreeze).is_inclusion_decreasing_to_empty());
    }

    #[test]
    fn sliding_variant() {
        let s = build_schedule(Protocol::HierFreeze, 5, PhaseBudget::default(), FreezeStyle::Sliding).unwrap();
        assert_eq!(s.frozen_sets(), vec![vec![], vec![1], vec![2], vec![3], vec![4]]);
    }

    #[test]
    fn names_parse_and_unknown_rejected() {
        for p in Protocol::ALL {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.name()));
        }
        assert!(matches!("hier-freeze".parse::<Protocol>(), Err(Error::UnknownProtocol(_))));
    }

    #[test]
    fn lr_examples_and_monotonicity() {
        assert_eq!(lr_at_epoch(1e-4, 0), 1e-4);
        assert_eq!(lr_at_epoch(1e-4, 1), 1e-4);
        assert!((lr_at_epoch(1e-4, 2) - 9e-5).abs() < 1e-18);
        assert!((lr_at_epoch(1e-4, 5) - 8.1e-5).abs() < 1e-18);
        assert_eq!(lr_at_epoch(1e-4, 1000), 1e-8);
        for e in 0..500 {
            assert!(lr_at_epoch(5e-5, e + 1) <= lr_at_epoch(5e-5, e));
            assert!(lr_at_epoch(5e-5, e) >= 1e-8);
        }
    }

    #[test]
    fn validation_rejects_bad_schedules() {
        let mut s = sched(Protocol::Naive);
        s.phases[0].frozen_blocks.insert(BlockId(6));
        assert!(matches!(s.validate(5), Err(Error::UnknownBlock(6))));
        let mut s = sched(Protocol::Naive);
        s.phases[0].lr0 = 0.0;
        assert!(s.validate(5).is_err());
        let mut s = sched(Protocol::HierUnfreeze);
        s.phases.pop();
        assert!(s.validate(5).is_err());
        assert!(Schedule { protocol: Protocol::Naive, phases: vec![] }.validate(5).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = sched(Protocol::HierUnfreeze);
        let back: Schedule = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert!(s.to_json().contains("\"frozen_blocks\": [\n        1,"));
    }
}
