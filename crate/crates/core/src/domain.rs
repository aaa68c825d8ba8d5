//! Label vocabulary shared by the generator, the model and the harness.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Discrete locomotion mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Level walking.
    LW,
    /// Ramp ascent.
    RA,
    /// Ramp descent.
    RD,
    /// Stair ascent.
    SA,
    /// Stair descent.
    SD,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::LW, Mode::RA, Mode::RD, Mode::SA, Mode::SD];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_stair(self) -> bool {
        matches!(self, Mode::SA | Mode::SD)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::LW => "LW",
            Mode::RA => "RA",
            Mode::RD => "RD",
            Mode::SA => "SA",
            Mode::SD => "SD",
        }
    }

    /// Whether `incline` (degrees) is a valid terrain angle for this mode.
    pub fn accepts_incline(self, incline: f64) -> bool {
        match self {
            Mode::LW => incline == 0.0,
            Mode::RA => incline > 0.0 && incline < 20.0,
            Mode::RD => incline < 0.0 && incline > -20.0,
            Mode::SA => incline == STAIR_INCLINE_DEG,
            Mode::SD => incline == -STAIR_INCLINE_DEG,
        }
    }
}

/// Slope-equivalent incline label used for stairs, signed by direction.
pub const STAIR_INCLINE_DEG: f64 = 33.0;

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown locomotion mode {s:?}")))
    }
}

/// Gait phase by foot-ground contact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    /// Double support, right foot about to lift off.
    G1,
    /// Left single support.
    G2,
    /// Double support, left foot about to lift off.
    G3,
    /// Right single support.
    G4,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::G1, Phase::G2, Phase::G3, Phase::G4];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn next(self) -> Self {
        Self::ALL[(self.index() + 1) % Self::COUNT]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::G1 => "G1",
            Phase::G2 => "G2",
            Phase::G3 => "G3",
            Phase::G4 => "G4",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown gait phase {s:?}")))
    }
}

/// Ground truth for one time step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub mode: Mode,
    pub phase: Phase,
    /// Terrain incline in degrees.
    pub incline: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One walking condition of one subject: the unit of meta-training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub subject: u32,
    pub mode: Mode,
    /// Degrees.
    pub incline: f64,
    /// m/s.
    pub speed: f64,
    pub split: Split,
}

impl TaskDescriptor {
    pub fn new(subject: u32, mode: Mode, incline: f64, speed: f64) -> crate::Result<Self> {
        let task = Self {
            subject,
            mode,
            incline,
            speed,
            split: Split::Train,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !self.mode.accepts_incline(self.incline) {
            return Err(Error::invalid(format!(
                "incline {}° is not valid for mode {}",
                self.incline, self.mode
            )));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::invalid(format!("speed must be positive, got {}", self.speed)));
        }
        Ok(())
    }

    /// Same walking condition regardless of subject and split.
    pub fn same_condition(&self, other: &TaskDescriptor) -> bool {
        self.mode == other.mode && self.incline == other.incline && self.speed == other.speed
    }

    pub fn label(&self) -> String {
        format!(
            "sub{:02}-{}{:+}-{:.1}",
            self.subject, self.mode, self.incline, self.speed
        )
    }
}
