//! Facial region decomposition into superpixels and per-region colour traces.

mod color;
mod slic;
mod traces;

pub use color::rgb_to_lab;
pub use slic::{slic_segment, Centroid, SuperpixelMap, DEFAULT_COMPACTNESS};
pub use traces::{extract_traces, extract_traces_with, ColorMoments, FrameStack, RegionTraceSet, RegionTraces};

use serde::{Deserialize, Serialize};

/// Face rectangle in frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn area(&self) -> usize {
        self.w as usize * self.h as usize
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

pub(crate) use traces::sorted_eigen;
