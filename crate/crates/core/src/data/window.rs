use super::{MtsDataset, SplitKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One lookback/horizon pair cut from a single entity.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub entity: usize,
    /// Absolute time index of the first input step.
    pub start: usize,
    /// `[lookback × features]`
    pub input: Tensor,
    /// `[horizon × features]`
    pub target: Tensor,
}

impl WindowSample {
    pub fn lookback(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.target.shape()[0]
    }

    /// Absolute time index of the first target step.
    pub fn target_start(&self) -> usize {
        self.start + self.lookback()
    }
}

/// Number of windows a series of `len` steps yields.
pub fn window_count(len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    match len.checked_sub(lookback + horizon) {
        Some(slack) => slack / stride + 1,
        None => 0,
    }
}

/// Sliding windows over one split, per entity, starting at offsets
/// `0, stride, 2·stride, …` from the split start. A split shorter than
/// `lookback + horizon` yields no windows.
pub fn make_windows(
    ds: &MtsDataset,
    split: SplitKind,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "lookback ({lookback}), horizon ({horizon}) and stride ({stride}) must be positive"
        )));
    }
    let range = ds.range(split)?;
    let per_entity = window_count(range.len(), lookback, horizon, stride);
    if per_entity == 0 {
        log::warn!(
            "{split} split has {} steps, fewer than lookback {lookback} + horizon {horizon}; no windows",
            range.len()
        );
        return Ok(Vec::new());
    }
    let (ne, _, nv) = ds.dims();
    let mut out = Vec::with_capacity(ne * per_entity);
    let cut = |e: usize, from: usize, len: usize| {
        let mut data = Vec::with_capacity(len * nv);
        for t in from..from + len {
            data.extend((0..nv).map(|v| ds.value(e, t, v)));
        }
        Tensor::new(vec![len, nv], data).expect("window shape")
    };
    for e in 0..ne {
        for k in 0..per_entity {
            let start = range.start + k * stride;
            out.push(WindowSample {
                entity: e,
                start,
                input: cut(e, start, lookback),
                target: cut(e, start + lookback, horizon),
            });
        }
    }
    Ok(out)
}
