//! Multi-scale key-select routing attention.
//!
//! The channels are split into four groups. Each group is cut into
//! non-overlapping `n × n` windows (its own `n`), region-level queries and
//! keys are averaged out of each window, and a region-to-region affinity
//! picks the `k` most relevant regions per query region. Tokens then attend
//! only to the keys and values gathered from those regions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Indices, Tensor};

pub const BRANCHES: usize = 4;
pub const DEFAULT_WINDOW_SIDES: [usize; BRANCHES] = [2, 4, 8, 64];

/// Routed region count when none is configured: a quarter of the regions.
pub fn default_k(regions: usize) -> usize {
    regions.div_ceil(4).max(1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MkraConfig {
    pub channels: usize,
    pub side: usize,
    /// Effective window side per branch; requested sides above `side` are
    /// reduced to `side` (one global region).
    pub window_sides: [usize; BRANCHES],
    /// Routed regions per branch, each in `1..=S²`.
    pub ks: [usize; BRANCHES],
}

impl MkraConfig {
    /// `k = None` applies [`default_k`] per branch; an explicit `k` is
    /// clamped to each branch's region count.
    pub fn new(
        channels: usize,
        side: usize,
        requested_sides: [usize; BRANCHES],
        k: Option<usize>,
    ) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(BRANCHES) {
            return Err(Error::Config(format!(
                "channel count {channels} is not a positive multiple of {BRANCHES}"
            )));
        }
        if k == Some(0) {
            return Err(Error::Config("routed region count k must be at least 1".into()));
        }
        let mut window_sides = [0; BRANCHES];
        let mut ks = [0; BRANCHES];
        for b in 0..BRANCHES {
            let n = requested_sides[b].min(side);
            if n == 0 || !side.is_multiple_of(n) {
                return Err(Error::Config(format!(
                    "window side {n} of branch {} does not divide feature side {side}",
                    b + 1
                )));
            }
            let regions = (side / n).pow(2);
            window_sides[b] = n;
            ks[b] = k.map_or(default_k(regions), |k| k.min(regions));
        }
        Ok(MkraConfig {
            channels,
            side,
            window_sides,
            ks,
        })
    }

    /// Explicit per-branch `k` values; each must lie in `1..=S²`.
    pub fn with_ks(mut self, ks: [usize; BRANCHES]) -> Result<Self> {
        for (b, &k) in ks.iter().enumerate() {
            let regions = self.regions(b);
            if k == 0 || k > regions {
                return Err(Error::Config(format!("branch {} needs 1 <= k <= {regions}, got {k}", b + 1)));
            }
        }
        self.ks = ks;
        Ok(self)
    }

    /// Same windows with every branch routed to all regions.
    pub fn dense(&self) -> Self {
        let mut cfg = self.clone();
        for b in 0..BRANCHES {
            cfg.ks[b] = cfg.regions(b);
        }
        cfg
    }

    pub fn branch_channels(&self) -> usize {
        self.channels / BRANCHES
    }

    /// Regions per side, `S = H / n`.
    pub fn regions_per_side(&self, branch: usize) -> usize {
        self.side / self.window_sides[branch]
    }

    /// `S²`.
    pub fn regions(&self, branch: usize) -> usize {
        self.regions_per_side(branch).pow(2)
    }

    /// Tokens per region, `n²`.
    pub fn tokens(&self, branch: usize) -> usize {
        self.window_sides[branch].pow(2)
    }

    /// Multiply-accumulates of the score and value-apply stages of one branch:
    /// `S² · T · (k·T) · c · 2`.
    pub fn attention_macs(&self, branch: usize) -> u64 {
        let s2 = self.regions(branch) as u64;
        let t = self.tokens(branch) as u64;
        let k = self.ks[branch] as u64;
        s2 * t * (k * t) * self.branch_channels() as u64 * 2
    }

    /// Projection, pooling and region-affinity work, independent of `k`.
    pub fn routing_macs(&self) -> u64 {
        let hw = (self.side * self.side) as u64;
        let c = self.channels as u64;
        let cb = self.branch_channels() as u64;
        let qkv = 3 * hw * cb * cb * BRANCHES as u64;
        let out = hw * c * c;
        let adjacency: u64 = (0..BRANCHES)
            .map(|b| (self.regions(b) as u64).pow(2) * cb)
            .sum();
        qkv + out + adjacency
    }
}

/// Projection weights of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchWeights<T = Tensor> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MkraWeights<T = Tensor> {
    pub branches: [BranchWeights<T>; BRANCHES],
    /// `[C, C]` projection applied after the branches are concatenated.
    pub wo: T,
}

impl MkraWeights<Tensor> {
    pub fn init(cfg: &MkraConfig, rng: &mut impl Rng) -> Self {
        let cb = cfg.branch_channels();
        let c = cfg.channels;
        let std_b = (1.0 / cb as f32).sqrt();
        let mat = |rng: &mut _| Tensor::randn([cb, cb], std_b, rng);
        let branches = std::array::from_fn(|_| BranchWeights {
            wq: mat(rng),
            wk: mat(rng),
            wv: mat(rng),
        });
        MkraWeights {
            branches,
            wo: Tensor::randn([c, c], (1.0 / c as f32).sqrt(), rng),
        }
    }

    pub fn check(&self, cfg: &MkraConfig) -> Result<()> {
        let cb = cfg.branch_channels();
        let mut bad = None;
        self.visit("", &mut |name, t| {
            let want = if name == "wo" { vec![cfg.channels; 2] } else { vec![cb; 2] };
            if t.shape() != want && bad.is_none() {
                bad = Some(format!("{name} has shape {:?}, expected {want:?}", t.shape()));
            }
        });
        match bad {
            Some(msg) => Err(Error::Shape(msg)),
            None => Ok(()),
        }
    }
}

impl<T> MkraWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MkraWeights<U> {
        MkraWeights {
            branches: std::array::from_fn(|b| {
                let br = &self.branches[b];
                BranchWeights {
                    wq: f(&br.wq),
                    wk: f(&br.wk),
                    wv: f(&br.wv),
                }
            }),
            wo: f(&self.wo),
        }
    }

    /// Visits `{prefix}b{1..4}.wq|wk|wv` then `{prefix}wo`.
    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        for (b, br) in self.branches.iter().enumerate() {
            f(format!("{prefix}b{}.wq", b + 1), &br.wq);
            f(format!("{prefix}b{}.wk", b + 1), &br.wk);
            f(format!("{prefix}b{}.wv", b + 1), &br.wv);
        }
        f(format!("{prefix}wo"), &self.wo);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        for (b, br) in self.branches.iter_mut().enumerate() {
            f(format!("{prefix}b{}.wq", b + 1), &mut br.wq);
            f(format!("{prefix}b{}.wk", b + 1), &mut br.wk);
            f(format!("{prefix}b{}.wv", b + 1), &mut br.wv);
        }
        f(format!("{prefix}wo"), &mut self.wo);
    }
}

/// Region index tables chosen by each branch, `[S², k]` per branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Routing {
    pub branches: Vec<Indices>,
}

/// `Q, K, V = X^r W` with weights shared across regions.
pub fn project_qkv(tape: &mut Tape, xr: Var, w: &BranchWeights<Var>) -> Result<(Var, Var, Var)> {
    let c = *tape.shape(xr).last().unwrap_or(&0);
    if tape.shape(w.wq)[0] != c {
        return Err(Error::Dimension {
            op: "project_qkv",
            lhs: tape.shape(xr).to_vec(),
            rhs: tape.shape(w.wq).to_vec(),
        });
    }
    Ok((tape.matmul(xr, w.wq)?, tape.matmul(xr, w.wk)?, tape.matmul(xr, w.wv)?))
}

/// Mean over each region's tokens: `[S², T, c] -> [S², c]`.
pub fn region_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.mean_axis(x, 1)
}

/// `softmax(Q_r K_rᵀ / sqrt(c))`, an `[S², S²]` row-stochastic matrix.
pub fn region_adjacency(tape: &mut Tape, qr: Var, kr: Var) -> Result<Var> {
    if tape.shape(qr) != tape.shape(kr) {
        return Err(Error::Dimension {
            op: "region_adjacency",
            lhs: tape.shape(qr).to_vec(),
            rhs: tape.shape(kr).to_vec(),
        });
    }
    let c = tape.shape(qr)[1];
    let kt = tape.transpose(kr)?;
    let logits = tape.matmul(qr, kt)?;
    let scaled = tape.scale(logits, 1.0 / (c as f32).sqrt());
    tape.softmax(scaled)
}

/// Indices of the `k` most related regions per row, most related first.
pub fn select_topk(adjacency: &Tensor, k: usize) -> Result<Indices> {
    ops::topk_lastdim(adjacency, k).map(|(_, idx)| idx)
}

/// For region `i`, the token blocks of regions `idx[i, 0..k]` concatenated
/// in routing order: `[S², T, c] -> [S², k·T, c]`.
pub fn gather_kv(tape: &mut Tape, k: Var, v: Var, idx: &Indices) -> Result<(Var, Var)> {
    let [regions, tokens, c] = tape.shape(k)[..] else {
        return Err(Error::Shape(format!("gather_kv expects [S², T, c], got {:?}", tape.shape(k))));
    };
    if tape.shape(v) != tape.shape(k) {
        return Err(Error::Dimension {
            op: "gather_kv",
            lhs: tape.shape(k).to_vec(),
            rhs: tape.shape(v).to_vec(),
        });
    }
    let sel = *idx.shape().last().unwrap_or(&0);
    let gather = |tape: &mut Tape, x: Var| -> Result<Var> {
        let flat = tape.reshape(x, [regions, tokens * c])?;
        let g = tape.gather_rows(flat, idx)?;
        tape.reshape(g, [idx.shape()[0], sel * tokens, c])
    };
    Ok((gather(tape, k)?, gather(tape, v)?))
}

/// Per region: `softmax(Q K_gᵀ / sqrt(c)) V_g`.
pub fn routed_attention(tape: &mut Tape, q: Var, kg: Var, vg: Var) -> Result<Var> {
    let c = *tape.shape(q).last().unwrap_or(&1);
    let kt = tape.transpose(kg)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (c as f32).sqrt());
    let attn = tape.softmax(scaled)?;
    tape.matmul(attn, vg)
}

/// Full block on `x: [H, W, C]`, including output projection and residual.
pub fn mkra_forward(tape: &mut Tape, x: Var, cfg: &MkraConfig, w: &MkraWeights<Var>) -> Result<Var> {
    mkra_forward_routed(tape, x, cfg, w, None).map(|(y, _)| y)
}

/// Like [`mkra_forward`], optionally with frozen routing tables, and
/// returning the tables that were used.
pub fn mkra_forward_routed(
    tape: &mut Tape,
    x: Var,
    cfg: &MkraConfig,
    w: &MkraWeights<Var>,
    frozen: Option<&Routing>,
) -> Result<(Var, Routing)> {
    let (h, wd, c) = tape.value(x).hwc()?;
    if h != cfg.side || wd != cfg.side || c != cfg.channels {
        return Err(Error::Config(format!(
            "input [{h}, {wd}, {c}] does not match config side {} / channels {}",
            cfg.side, cfg.channels
        )));
    }
    let cb = cfg.branch_channels();
    let mut outs = Vec::with_capacity(BRANCHES);
    let mut used = Vec::with_capacity(BRANCHES);
    for b in 0..BRANCHES {
        let n = cfg.window_sides[b];
        let xb = tape.slice_last(x, b * cb, cb)?;
        let xr = tape.window_partition(xb, n)?;
        let (q, k, v) = project_qkv(tape, xr, &w.branches[b])?;
        let idx = match frozen {
            Some(r) => r.branches[b].clone(),
            None => {
                let qr = region_pool(tape, q)?;
                let kr = region_pool(tape, k)?;
                let a = region_adjacency(tape, qr, kr)?;
                select_topk(tape.value(a), cfg.ks[b])?
            }
        };
        let (kg, vg) = gather_kv(tape, k, v, &idx)?;
        let o = routed_attention(tape, q, kg, vg)?;
        outs.push(tape.window_reverse(o, n, cfg.side)?);
        used.push(idx);
    }
    let cat = tape.concat_last(&outs)?;
    let flat = tape.reshape(cat, [h * wd, c])?;
    let proj = tape.matmul(flat, w.wo)?;
    let proj = tape.reshape(proj, [h, wd, c])?;
    let y = tape.add(proj, x)?;
    Ok((y, Routing { branches: used }))
}

/// Convenience evaluation outside of training.
pub fn mkra_apply(x: &Tensor, cfg: &MkraConfig, w: &MkraWeights) -> Result<Tensor> {
    w.check(cfg)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = w.map(&mut |t| tape.constant(t.clone()));
    let y = mkra_forward(&mut tape, xv, cfg, &wv)?;
    Ok(tape.value(y).clone())
}
