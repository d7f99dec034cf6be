//! Straight-loop f64 forward passes, written independently of the tape and
//! its kernels, for checking the f32 network: its outputs, and its gradients
//! through [`check_network_gradients`]. Slow by design.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check_against, GradCheck, ParamCheck};
use crate::lfpm::LfpmWeights;
use crate::mkra::{MkraConfig, MkraWeights, Routing, BRANCHES};
use crate::mkram::MkramWeights;
use crate::network::{forward_routed, Bottleneck, Conv, KsformerModel, NetworkConfig};
use crate::tensor::Tensor;

pub type P = Vec<f64>;

#[derive(Clone, Debug)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl Grid {
    pub fn from_tensor(t: &Tensor) -> Grid {
        let (h, w, c) = t.hwc().unwrap();
        Grid { h, w, c, d: t.data().iter().map(|&v| v as f64).collect() }
    }

    fn zeros(h: usize, w: usize, c: usize) -> Grid {
        Grid { h, w, c, d: vec![0.0; h * w * c] }
    }

    fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.d[(y * self.w + x) * self.c + ch]
    }

    fn zip(&self, o: &Grid, f: impl Fn(f64, f64) -> f64) -> Grid {
        Grid { d: self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect(), ..*self }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid { d: self.d.iter().map(|&a| f(a)).collect(), ..*self }
    }
}

pub fn to_f64(t: &Tensor) -> P {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Same-padded `k × k` cross-correlation plus bias.
pub fn conv(x: &Grid, w: &[f64], b: &[f64], k: usize, cout: usize, stride: usize) -> Grid {
    let pad = (k - 1) / 2;
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Grid::zeros(ho, wo, cout);
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = b[co];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                            continue;
                        }
                        for ci in 0..x.c {
                            acc += x.at(iy as usize, ix as usize, ci) * w[((ky * k + kx) * x.c + ci) * cout + co];
                        }
                    }
                }
                out.d[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    out
}

fn conv_layer(x: &Grid, c: &Conv<P>, k: usize, stride: usize) -> Grid {
    let cout = c.b.len();
    conv(x, &c.w, &c.b, k, cout, stride)
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

/// Low band by a direct 2-D DFT: keep bins with normalized radius ≤ cutoff.
pub fn lowpass(x: &Grid, cutoff: f64) -> Grid {
    let (h, w) = (x.h, x.w);
    let signed = |k: usize, n: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 } * 2.0 / n as f64;
    let keep: Vec<bool> = (0..h * w)
        .map(|i| (signed(i / w, h).powi(2) + signed(i % w, w).powi(2)).sqrt() <= cutoff)
        .collect();
    // twiddles e^{-2πi·m/n}, indexed by m mod n
    let roots = |n: usize| -> Vec<(f64, f64)> {
        (0..n).map(|m| {
            let a = -2.0 * std::f64::consts::PI * m as f64 / n as f64;
            (a.cos(), a.sin())
        }).collect()
    };
    let (ry, rx) = (roots(h), roots(w));
    let tw = |u: usize, v: usize, y: usize, xx: usize| {
        let (a, b) = ry[u * y % h];
        let (c, d) = rx[v * xx % w];
        (a * c - b * d, a * d + b * c)
    };
    let bins: Vec<usize> = (0..h * w).filter(|&i| keep[i]).collect();
    let mut out = Grid::zeros(h, w, x.c);
    for ch in 0..x.c {
        let spec: Vec<(f64, f64)> = bins
            .iter()
            .map(|&bin| {
                let (u, v) = (bin / w, bin % w);
                let mut s = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let (c, sn) = tw(u, v, y, xx);
                        let val = x.at(y, xx, ch);
                        s.0 += val * c;
                        s.1 += val * sn;
                    }
                }
                s
            })
            .collect();
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (&bin, s) in bins.iter().zip(&spec) {
                    // inverse transform uses the conjugate twiddle
                    let (c, sn) = tw(bin / w, bin % w, y, xx);
                    acc += s.0 * c + s.1 * sn;
                }
                out.d[(y * w + xx) * x.c + ch] = acc / (h * w) as f64;
            }
        }
    }
    out
}

pub fn lfpm(x: &Grid, l: &LfpmWeights<P>) -> Grid {
    let low = lowpass(x, l.cutoff_ratio as f64);
    let mut out = x.clone();
    for (i, v) in out.d.iter_mut().enumerate() {
        let ch = i % x.c;
        let lo = low.d[i];
        *v = l.low_gain[ch] * lo + l.high_gain[ch] * (*v - lo);
    }
    out
}

/// Routed window attention with the given routing tables, plus output
/// projection and residual.
pub fn mkra(x: &Grid, cfg: &MkraConfig, w: &MkraWeights<P>, routing: &Routing) -> Grid {
    let (side, c) = (x.h, x.c);
    let cb = c / BRANCHES;
    let mut cat = Grid::zeros(side, side, c);
    for b in 0..BRANCHES {
        let n = cfg.window_sides[b];
        let s = side / n;
        let t = n * n;
        // token p of region r sits at this pixel
        let pix = |r: usize, p: usize| ((r / s) * n + p / n, (r % s) * n + p % n);
        let br = &w.branches[b];
        let proj = |m: &[f64], r: usize, p: usize| -> Vec<f64> {
            let (y, xx) = pix(r, p);
            (0..cb).map(|j| (0..cb).map(|i| x.at(y, xx, b * cb + i) * m[i * cb + j]).sum()).collect()
        };
        let idx = &routing.branches[b];
        for r in 0..s * s {
            let keys: Vec<(usize, usize)> = idx.row(r).iter().flat_map(|&g| (0..t).map(move |p| (g, p))).collect();
            let ks: Vec<Vec<f64>> = keys.iter().map(|&(g, p)| proj(&br.wk, g, p)).collect();
            let vs: Vec<Vec<f64>> = keys.iter().map(|&(g, p)| proj(&br.wv, g, p)).collect();
            for p in 0..t {
                let q = proj(&br.wq, r, p);
                let logits: Vec<f64> = ks
                    .iter()
                    .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (cb as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                let (y, xx) = pix(r, p);
                for j in 0..cb {
                    cat.d[(y * side + xx) * c + b * cb + j] = e.iter().zip(&vs).map(|(e, v)| e / z * v[j]).sum();
                }
            }
        }
    }
    let mut out = x.clone();
    for px in 0..side * side {
        for j in 0..c {
            out.d[px * c + j] += (0..c).map(|l| cat.d[px * c + l] * w.wo[l * c + j]).sum::<f64>();
        }
    }
    out
}

/// Spatial, low-band and high-band attention, fused by a 1×1 conv, plus residual.
pub fn mkram(x: &Grid, cfg: &MkraConfig, w: &MkramWeights<P>, routing: &[Routing]) -> Grid {
    let low = lowpass(x, w.cutoff_ratio as f64);
    let high = x.zip(&low, |a, b| a - b);
    let ys = [
        mkra(x, cfg, &w.spatial, &routing[0]),
        mkra(&low, cfg, &w.low, &routing[1]),
        mkra(&high, cfg, &w.high, &routing[2]),
    ];
    let c = x.c;
    let mut cat = Grid::zeros(x.h, x.w, 3 * c);
    for px in 0..x.h * x.w {
        for (i, y) in ys.iter().enumerate() {
            cat.d[px * 3 * c + i * c..px * 3 * c + (i + 1) * c].copy_from_slice(&y.d[px * c..(px + 1) * c]);
        }
    }
    let fused = conv(&cat, &w.fuse, &vec![0.0; c], 1, c, 1);
    fused.zip(x, |a, b| a + b)
}

fn upsample(x: &Grid) -> Grid {
    let mut out = Grid::zeros(2 * x.h, 2 * x.w, x.c);
    for y in 0..out.h {
        for xx in 0..out.w {
            for ch in 0..x.c {
                out.d[(y * out.w + xx) * x.c + ch] = x.at(y / 2, xx / 2, ch);
            }
        }
    }
    out
}

pub fn network(m: &KsformerModel<P>, hazy: &Grid, routing: &[Routing]) -> Grid {
    let mut skips = Vec::new();
    let mut x = hazy.clone();
    for (i, e) in m.encoders.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        x = conv_layer(&x, &e.conv_a, 3, stride).map(gelu);
        x = conv_layer(&x, &e.conv_b, 3, 1).map(gelu);
        if let Some(l) = m.lfpm.get(i) {
            x = lfpm(&x, l);
        }
        skips.push(x.clone());
    }
    let cfg = m.config.mkra_config().unwrap();
    let mut at = 0;
    for block in &m.bottleneck {
        x = match block {
            Bottleneck::Mkra(w) => {
                at += 1;
                mkra(&x, &cfg, w, &routing[at - 1])
            }
            Bottleneck::Mkram(w) => {
                at += 3;
                mkram(&x, &cfg, w, &routing[at - 3..at])
            }
        };
    }
    for (i, d) in m.decoders.iter().enumerate() {
        if i > 0 {
            x = upsample(&x);
        }
        let a = conv_layer(&x, &d.conv_a, 3, 1).map(gelu);
        let s = conv_layer(&skips[2 - i], &d.skip, 1, 1);
        x = conv_layer(&a.zip(&s, |p, q| p + q), &d.conv_b, 3, 1).map(gelu);
    }
    conv_layer(&x, &m.head, 3, 1).zip(hazy, |r, h| (h + r).clamp(0.0, 1.0))
}

/// `Σ out ⊙ r`.
pub fn readout(out: &Grid, r: &Tensor) -> f64 {
    out.d.iter().zip(r.data()).map(|(a, &b)| a * b as f64).sum()
}

/// Fixed weights in `[-1, 1]` for a scalar readout of a network output.
pub fn readout_weights(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A model and input for gradient checks. The model's zero head is
/// replaced by small random weights, since the identity initialization
/// blocks the gradient to every other layer; the head is then halved until
/// every output sits in `[0.1, 0.9]`, clear of the clamp's kinks. The input
/// is hazy-like noise in `[0.3, 0.7]`.
pub fn probe(config: NetworkConfig, seed: u64) -> Result<(KsformerModel, Tensor)> {
    let side = config.side;
    let mut m = KsformerModel::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let hazy = Tensor::rand_uniform([side, side, 3], 0.3, 0.7, &mut rng);
    m.head.w = Tensor::randn(m.head.w.shape().to_vec(), 0.05, &mut rng);
    for _ in 0..30 {
        let y = m.infer(&hazy)?;
        if y.data().iter().all(|v| (0.1..=0.9).contains(v)) {
            break;
        }
        m.head.w = m.head.w.map(|v| v * 0.5);
    }
    Ok((m, hazy))
}

/// Routing tables of one forward pass, and its output.
pub fn frozen_routing(m: &KsformerModel, hazy: &Tensor) -> Result<(Vec<Routing>, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.constant(hazy.clone());
    let bound = m.bind_frozen(&mut tape);
    let (y, r) = forward_routed(&mut tape, x, &bound, None)?;
    Ok((r, tape.value(y).clone()))
}

/// Gradient check of `Σ r ⊙ model(hazy)` over every parameter tensor, with
/// routing frozen at the unperturbed pass. Analytic gradients come from
/// the f32 tape; central differences from [`network`] in f64.
pub fn check_network_gradients(
    m: &KsformerModel,
    hazy: &Tensor,
    readout_seed: u64,
    cfg: GradCheck,
) -> Result<Vec<(String, ParamCheck)>> {
    let (routing, _) = frozen_routing(m, hazy)?;
    let mut names = Vec::new();
    let mut params = Vec::new();
    m.visit(&mut |n, t| {
        names.push(n);
        params.push(t.clone());
    });
    let r = readout_weights(hazy.shape(), readout_seed);
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut it = v.iter().copied();
        let bound = m.map(&mut |_| it.next().unwrap());
        let x = t.constant(hazy.clone());
        let (y, _) = forward_routed(t, x, &bound, Some(&routing))?;
        let rv = t.constant(r.clone());
        let p = t.mul(y, rv)?;
        Ok(t.sum(p))
    };
    let hz = Grid::from_tensor(hazy);
    let reference = |p: &[Vec<f64>]| {
        let mut it = p.iter();
        let mm = m.map(&mut |_| it.next().unwrap().clone());
        readout(&network(&mm, &hz, &routing), &r)
    };
    let checks = grad_check_against(&f, &reference, &params, cfg)?;
    Ok(names.into_iter().zip(checks).collect())
}
