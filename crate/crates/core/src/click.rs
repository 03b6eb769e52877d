use serde::{Deserialize, Serialize};

/// Background (0) or foreground (1) interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ClickLabel {
    Background,
    Foreground,
}

impl From<ClickLabel> for u8 {
    fn from(l: ClickLabel) -> u8 {
        match l {
            ClickLabel::Background => 0,
            ClickLabel::Foreground => 1,
        }
    }
}

impl TryFrom<u8> for ClickLabel {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(ClickLabel::Background),
            1 => Ok(ClickLabel::Foreground),
            _ => Err(format!("click label must be 0 or 1, got {v}")),
        }
    }
}

/// A click `(x, y, slice, label)` in volume voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub x: usize,
    pub y: usize,
    pub slice: usize,
    pub label: ClickLabel,
}

impl Click {
    pub fn positive(x: usize, y: usize, slice: usize) -> Self {
        Self {
            x,
            y,
            slice,
            label: ClickLabel::Foreground,
        }
    }

    pub fn negative(x: usize, y: usize, slice: usize) -> Self {
        Self {
            x,
            y,
            slice,
            label: ClickLabel::Background,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label == ClickLabel::Foreground
    }
}
