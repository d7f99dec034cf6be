//! The fusion block: routing attention over the spatial features and over
//! their low- and high-frequency bands in parallel, merged by a 1×1
//! convolution plus residual.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::lfpm::{check_cutoff, spectrum_split};
use crate::mkra::{mkra_forward_routed, MkraConfig, MkraWeights, Routing};
use crate::ops::Padding;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MkramWeights<T = Tensor> {
    pub spatial: MkraWeights<T>,
    pub low: MkraWeights<T>,
    pub high: MkraWeights<T>,
    /// `[1, 1, 3C, C]` kernel over `concat(spatial, low, high)`.
    pub fuse: T,
    /// Band split point. The bands are fed raw; learnable band gains live
    /// in the standalone frequency layers.
    pub cutoff_ratio: f32,
}

impl MkramWeights<Tensor> {
    pub fn init(cfg: &MkraConfig, cutoff_ratio: f32, rng: &mut impl Rng) -> Result<Self> {
        check_cutoff(cutoff_ratio)?;
        let c = cfg.channels;
        Ok(MkramWeights {
            spatial: MkraWeights::init(cfg, rng),
            low: MkraWeights::init(cfg, rng),
            high: MkraWeights::init(cfg, rng),
            fuse: Tensor::randn([1, 1, 3 * c, c], (1.0 / (3 * c) as f32).sqrt(), rng),
            cutoff_ratio,
        })
    }
}

impl<T> MkramWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MkramWeights<U> {
        MkramWeights {
            spatial: self.spatial.map(f),
            low: self.low.map(f),
            high: self.high.map(f),
            fuse: f(&self.fuse),
            cutoff_ratio: self.cutoff_ratio,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        self.spatial.visit(&format!("{prefix}spatial."), f);
        self.low.visit(&format!("{prefix}low."), f);
        self.high.visit(&format!("{prefix}high."), f);
        f(format!("{prefix}fuse"), &self.fuse);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        self.spatial.visit_mut(&format!("{prefix}spatial."), f);
        self.low.visit_mut(&format!("{prefix}low."), f);
        self.high.visit_mut(&format!("{prefix}high."), f);
        f(format!("{prefix}fuse"), &mut self.fuse);
    }
}

/// `conv1x1(concat(mkra(x), mkra(low), mkra(high))) + x`.
pub fn mkram_forward(tape: &mut Tape, x: Var, w: &MkramWeights<Var>, cfg: &MkraConfig) -> Result<Var> {
    mkram_forward_routed(tape, x, w, cfg, None).map(|(y, _)| y)
}

/// Like [`mkram_forward`], optionally with frozen routing for the spatial,
/// low and high attention (in that order), returning the routing used.
pub fn mkram_forward_routed(
    tape: &mut Tape,
    x: Var,
    w: &MkramWeights<Var>,
    cfg: &MkraConfig,
    frozen: Option<&[Routing]>,
) -> Result<(Var, Vec<Routing>)> {
    let c = cfg.channels;
    if tape.shape(w.fuse) != [1, 1, 3 * c, c] {
        return Err(Error::Dimension {
            op: "mkram_forward",
            lhs: vec![1, 1, 3 * c, c],
            rhs: tape.shape(w.fuse).to_vec(),
        });
    }
    if let Some(r) = frozen {
        if r.len() != 3 {
            return Err(Error::Param(format!("fused block needs 3 routing tables, got {}", r.len())));
        }
    }
    let (low, high) = spectrum_split(tape, x, w.cutoff_ratio)?;
    let mut ys = Vec::with_capacity(3);
    let mut used = Vec::with_capacity(3);
    for (i, (input, weights)) in [(x, &w.spatial), (low, &w.low), (high, &w.high)].into_iter().enumerate() {
        let (y, r) = mkra_forward_routed(tape, input, cfg, weights, frozen.map(|f| &f[i]))?;
        ys.push(y);
        used.push(r);
    }
    let cat = tape.concat_last(&ys)?;
    let fused = tape.conv2d(cat, w.fuse, 1, Padding::Valid)?;
    Ok((tape.add(fused, x)?, used))
}

pub fn mkram_apply(x: &Tensor, w: &MkramWeights, cfg: &MkraConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = w.map(&mut |t| tape.constant(t.clone()));
    let y = mkram_forward(&mut tape, xv, &wv, cfg)?;
    Ok(tape.value(y).clone())
}
