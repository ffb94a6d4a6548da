//! Observations, beliefs and actions of the tracking agent.

use crate::heatmap::Heatmap;
use serde::{Deserialize, Serialize};
use std::fmt;

/// A single-channel intensity image in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Frame {
    /// Panics on size mismatch or intensities outside `[0, 1]`.
    pub fn new(index: usize, width: usize, height: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), width * height, "frame size mismatch");
        assert!(
            pixels.iter().all(|p| (0.0..=1.0).contains(p)),
            "frame intensities must lie in [0, 1]"
        );
        Self {
            index,
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

/// Correlation filter over `channels` feature planes plus the target size.
///
/// The filter is stored row-major with channels interleaved
/// (`[row][col][channel]`), matching the feature-map layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceModel {
    filter: Vec<f64>,
    filter_h: usize,
    filter_w: usize,
    channels: usize,
}

impl AppearanceModel {
    /// An all-zero filter sized to the target. Target sides must be odd so
    /// that the filter has a center cell.
    pub fn zeros(target_size: (u32, u32), channels: usize) -> Self {
        let (w, h) = (target_size.0 as usize, target_size.1 as usize);
        assert!(w % 2 == 1 && h % 2 == 1, "filter sides must be odd");
        Self {
            filter: vec![0.0; w * h * channels],
            filter_h: h,
            filter_w: w,
            channels,
        }
    }

    pub fn from_filter(target_size: (u32, u32), channels: usize, filter: Vec<f64>) -> Self {
        let mut m = Self::zeros(target_size, channels);
        assert_eq!(filter.len(), m.filter.len(), "filter size mismatch");
        assert!(filter.iter().all(|v| v.is_finite()), "filter must be finite");
        m.filter = filter;
        m
    }

    pub fn target_size(&self) -> (u32, u32) {
        (self.filter_w as u32, self.filter_h as u32)
    }

    pub fn filter(&self) -> &[f64] {
        &self.filter
    }

    pub fn filter_mut(&mut self) -> &mut [f64] {
        &mut self.filter
    }

    pub fn filter_h(&self) -> usize {
        self.filter_h
    }

    pub fn filter_w(&self) -> usize {
        self.filter_w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn norm(&self) -> f64 {
        self.filter.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// The agent's memory: appearance model plus location heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub appearance: AppearanceModel,
    pub heatmap: Heatmap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Motion {
    Track,
    Reinit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Appearance {
    Update,
    Ignore,
}

impl Motion {
    /// Output slot of this action in the motion head.
    pub fn index(self) -> usize {
        match self {
            Motion::Track => 0,
            Motion::Reinit => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Motion::Track
        } else {
            Motion::Reinit
        }
    }

    pub fn other(self) -> Self {
        Self::from_index(1 - self.index())
    }
}

impl Appearance {
    /// Output slot of this action in the appearance head.
    pub fn index(self) -> usize {
        match self {
            Appearance::Update => 0,
            Appearance::Ignore => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Appearance::Update
        } else {
            Appearance::Ignore
        }
    }

    pub fn other(self) -> Self {
        Self::from_index(1 - self.index())
    }
}

/// One decision per axis: where to look, and whether to adapt appearance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub motion: Motion,
    pub appearance: Appearance,
}

impl Action {
    pub const fn new(motion: Motion, appearance: Appearance) -> Self {
        Self { motion, appearance }
    }

    pub const ALL: [Action; 4] = [
        Action::new(Motion::Track, Appearance::Update),
        Action::new(Motion::Track, Appearance::Ignore),
        Action::new(Motion::Reinit, Appearance::Update),
        Action::new(Motion::Reinit, Appearance::Ignore),
    ];
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Motion::Track => "TRACK",
            Motion::Reinit => "REINIT",
        })
    }
}

impl fmt::Display for Appearance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Appearance::Update => "UPDATE",
            Appearance::Ignore => "IGNORE",
        })
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.motion, self.appearance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_serde_uses_uppercase_names() {
        let a = Action::new(Motion::Reinit, Appearance::Ignore);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, r#"{"motion":"REINIT","appearance":"IGNORE"}"#);
        assert_eq!(a.to_string(), "(REINIT, IGNORE)");
    }

    #[test]
    fn index_roundtrip() {
        for m in [Motion::Track, Motion::Reinit] {
            assert_eq!(Motion::from_index(m.index()), m);
            assert_ne!(m.other(), m);
        }
        for a in [Appearance::Update, Appearance::Ignore] {
            assert_eq!(Appearance::from_index(a.index()), a);
        }
    }

    #[test]
    #[should_panic]
    fn even_filter_rejected() {
        AppearanceModel::zeros((8, 9), 3);
    }
}
