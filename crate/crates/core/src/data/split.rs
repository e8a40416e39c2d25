use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

/// Chronological 7:1:2 train/validation/test boundaries of one series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub len: usize,
    /// `floor(0.7 · len)`
    pub train_end: usize,
    /// `floor(0.8 · len)`
    pub val_end: usize,
}

impl SplitSpec {
    pub fn train(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn val(&self) -> Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test(&self) -> Range<usize> {
        self.val_end..self.len
    }
}

pub fn chronological_split(len: usize) -> Result<SplitSpec> {
    if len < 10 {
        return Err(DataError::TooShortToSplit(len));
    }
    // Integer arithmetic keeps the floor exact.
    Ok(SplitSpec {
        len,
        train_end: len * 7 / 10,
        val_end: len * 8 / 10,
    })
}
