//! Lightweight frequency processing: a hard radial split of each channel's
//! spectrum into a low and a high band, re-weighted by one learnable gain
//! per band and channel.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::fft;
use crate::tensor::Tensor;

pub const DEFAULT_CUTOFF: f32 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct LfpmWeights<T = Tensor> {
    pub low_gain: T,
    pub high_gain: T,
    /// Fixed at construction; not trained.
    pub cutoff_ratio: f32,
}

pub(crate) fn check_cutoff(cutoff: f32) -> Result<()> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::Param(format!("cutoff ratio must lie in (0, 1), got {cutoff}")));
    }
    Ok(())
}

impl LfpmWeights<Tensor> {
    /// Unit gains: the module starts as the identity.
    pub fn new(channels: usize, cutoff_ratio: f32) -> Result<Self> {
        check_cutoff(cutoff_ratio)?;
        Ok(LfpmWeights {
            low_gain: Tensor::full([channels], 1.0),
            high_gain: Tensor::full([channels], 1.0),
            cutoff_ratio,
        })
    }

    pub fn param_count(&self) -> usize {
        self.low_gain.numel() + self.high_gain.numel()
    }
}

impl<T> LfpmWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LfpmWeights<U> {
        LfpmWeights {
            low_gain: f(&self.low_gain),
            high_gain: f(&self.high_gain),
            cutoff_ratio: self.cutoff_ratio,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        f(format!("{prefix}low_gain"), &self.low_gain);
        f(format!("{prefix}high_gain"), &self.high_gain);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{prefix}low_gain"), &mut self.low_gain);
        f(format!("{prefix}high_gain"), &mut self.high_gain);
    }
}

/// Low and high bands of `x: [H, W, C]`. The masks are complementary, so
/// the high band is taken as `x - low`.
pub fn spectrum_split(tape: &mut Tape, x: Var, cutoff_ratio: f32) -> Result<(Var, Var)> {
    check_cutoff(cutoff_ratio)?;
    let (h, w, _) = tape.value(x).hwc()?;
    let low = tape.spectral_filter(x, fft::radial_lowpass_mask(h, w, cutoff_ratio))?;
    let high = tape.sub(x, low)?;
    Ok((low, high))
}

/// Tensor-level [`spectrum_split`].
pub fn split_bands(x: &Tensor, cutoff_ratio: f32) -> Result<(Tensor, Tensor)> {
    check_cutoff(cutoff_ratio)?;
    let (h, w, _) = x.hwc()?;
    let low = fft::filter_channels(x, &fft::radial_lowpass_mask(h, w, cutoff_ratio))?;
    let high = x.zip_map(&low, |a, b| a - b)?;
    Ok((low, high))
}

/// `low_gain ⊙ low + high_gain ⊙ high`.
pub fn lfpm_forward(tape: &mut Tape, x: Var, w: &LfpmWeights<Var>) -> Result<Var> {
    let c = *tape.shape(x).last().unwrap_or(&0);
    for g in [w.low_gain, w.high_gain] {
        if tape.shape(g) != [c] {
            return Err(Error::Dimension {
                op: "lfpm_forward",
                lhs: tape.shape(x).to_vec(),
                rhs: tape.shape(g).to_vec(),
            });
        }
    }
    let (low, high) = spectrum_split(tape, x, w.cutoff_ratio)?;
    let low = tape.scale_channels(low, w.low_gain)?;
    let high = tape.scale_channels(high, w.high_gain)?;
    tape.add(low, high)
}

pub fn lfpm_apply(x: &Tensor, w: &LfpmWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = w.map(&mut |t| tape.constant(t.clone()));
    let y = lfpm_forward(&mut tape, xv, &wv)?;
    Ok(tape.value(y).clone())
}
