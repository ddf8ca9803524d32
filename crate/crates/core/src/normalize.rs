//! Channel-wise standardization: `(x - mean) / std` and its inverse.
//!
//! Values are stored as `f32`; each cell is widened to `f64` for the
//! subtraction and division so large-magnitude channels (geopotential is
//! ~10⁵ m² s⁻²) do not lose precision before rounding back.

use crate::error::{Error, Result};
use crate::tensorio::{NormStats, StateTensor};

pub fn normalize(state: &StateTensor, stats: &NormStats) -> Result<StateTensor> {
    if state.is_normalized() {
        return Err(Error::StateFlag("state is already normalized".into()));
    }
    let ordered = stats.ordered_for(state.schema())?;
    let mut out = state.clone();
    for (c, s) in ordered.iter().enumerate() {
        for v in out.channel_mut(c) {
            *v = ((*v as f64 - s.mean) / s.std) as f32;
        }
    }
    out.validate()?;
    Ok(out.with_normalized(true))
}

pub fn denormalize(state: &StateTensor, stats: &NormStats) -> Result<StateTensor> {
    if !state.is_normalized() {
        return Err(Error::StateFlag("cannot denormalize a state in physical units".into()));
    }
    let ordered = stats.ordered_for(state.schema())?;
    let mut out = state.clone();
    for (c, s) in ordered.iter().enumerate() {
        for v in out.channel_mut(c) {
            *v = (*v as f64 * s.std + s.mean) as f32;
        }
    }
    out.validate()?;
    Ok(out.with_normalized(false))
}

/// Marks a state read from a `.norm.wxs` file as already normalized.
pub fn assume_normalized(state: StateTensor) -> StateTensor {
    state.with_normalized(true)
}
