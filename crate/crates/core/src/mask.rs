//! Keep masks over the patch grid and their PGM rendering.
//!
//! Per-stage images are binary: 255 kept, 0 dropped. The combined image
//! uses three levels: [`DROPPED_STAGE1`], [`DROPPED_STAGE2`], [`KEPT`].

use serde::Serialize;

use crate::pipeline::PruneTrace;

pub const KEPT: u8 = 255;
pub const DROPPED_STAGE2: u8 = 64;
pub const DROPPED_STAGE1: u8 = 0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MaskError {
    #[error("grid {height}x{width} does not cover {tokens} visual tokens")]
    GridMismatch {
        height: usize,
        width: usize,
        tokens: usize,
    },
    #[error("trace index {0} outside the grid")]
    OutOfRange(usize),
    #[error("stage-2 kept token {0} was not kept by stage 1")]
    NotSubset(usize),
}

/// Per-cell kept flags for each stage, row-major over an `height × width`
/// patch grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeepMask {
    pub height: usize,
    pub width: usize,
    pub stage1: Vec<Vec<u8>>,
    pub stage2: Vec<Vec<u8>>,
}

impl KeepMask {
    pub fn from_trace(trace: &PruneTrace, height: usize, width: usize) -> Result<Self, MaskError> {
        let tokens = trace.original_count();
        if height * width != tokens {
            return Err(MaskError::GridMismatch { height, width, tokens });
        }
        let mut s1 = vec![false; tokens];
        let mut s2 = vec![false; tokens];
        for &i in &trace.stage1.kept {
            *s1.get_mut(i).ok_or(MaskError::OutOfRange(i))? = true;
        }
        for &i in &trace.stage2.kept {
            if !*s1.get(i).ok_or(MaskError::OutOfRange(i))? {
                return Err(MaskError::NotSubset(i));
            }
            s2[i] = true;
        }
        let grid = |flags: &[bool]| {
            flags
                .chunks(width)
                .map(|row| row.iter().map(|&k| k as u8).collect())
                .collect()
        };
        Ok(Self {
            height,
            width,
            stage1: grid(&s1),
            stage2: grid(&s2),
        })
    }

    fn cells<'a>(rows: &'a [Vec<u8>]) -> impl Iterator<Item = bool> + 'a {
        rows.iter().flatten().map(|&v| v != 0)
    }

    pub fn kept_count(&self, stage: u8) -> usize {
        let rows = if stage == 1 { &self.stage1 } else { &self.stage2 };
        Self::cells(rows).filter(|&k| k).count()
    }

    pub fn stage1_pixels(&self) -> Vec<u8> {
        Self::cells(&self.stage1).map(|k| if k { KEPT } else { 0 }).collect()
    }

    pub fn stage2_pixels(&self) -> Vec<u8> {
        Self::cells(&self.stage2).map(|k| if k { KEPT } else { 0 }).collect()
    }

    pub fn combined_pixels(&self) -> Vec<u8> {
        Self::cells(&self.stage1)
            .zip(Self::cells(&self.stage2))
            .map(|(a, b)| match (a, b) {
                (_, true) => KEPT,
                (true, false) => DROPPED_STAGE2,
                (false, _) => DROPPED_STAGE1,
            })
            .collect()
    }
}

/// Binary PGM (`P5`, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count must match grid");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}
