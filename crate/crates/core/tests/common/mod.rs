#![allow(dead_code)]

pub mod suite;

use ksformer_core::mkra::{MkraWeights, BRANCHES};
use ksformer_core::reference::readout_weights;
use ksformer_core::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Global attention per channel group in f64, with no windows at all. With
/// every region routed, the windowed block must reduce to this.
pub fn dense_attention_oracle(x: &Tensor, w: &MkraWeights) -> Vec<f64> {
    let (h, wd, c) = x.hwc().unwrap();
    let n = h * wd;
    let cb = c / BRANCHES;
    let xd: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut cat = vec![0.0f64; n * c];
    let proj = |m: &Tensor, b: usize| -> Vec<f64> {
        let m: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
        let mut out = vec![0.0; n * cb];
        for p in 0..n {
            for j in 0..cb {
                out[p * cb + j] = (0..cb).map(|i| xd[p * c + b * cb + i] * m[i * cb + j]).sum();
            }
        }
        out
    };
    for b in 0..BRANCHES {
        let br = &w.branches[b];
        let (q, k, v) = (proj(&br.wq, b), proj(&br.wk, b), proj(&br.wv, b));
        let scale = 1.0 / (cb as f64).sqrt();
        for p in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|r| (0..cb).map(|j| q[p * cb + j] * k[r * cb + j]).sum::<f64>() * scale)
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..cb {
                cat[p * c + b * cb + j] = (0..n).map(|r| e[r] / z * v[r * cb + j]).sum();
            }
        }
    }
    let wo: Vec<f64> = w.wo.data().iter().map(|&v| v as f64).collect();
    (0..n * c)
        .map(|i| {
            let (p, j) = (i / c, i % c);
            xd[i] + (0..c).map(|l| cat[p * c + l] * wo[l * c + j]).sum::<f64>()
        })
        .collect()
}

/// `Σ out ⊙ r` for a fixed random `r`: a smooth scalar readout whose
/// gradient reaches every output element with O(1) weight.
pub fn readout(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(readout_weights(tape.shape(out), seed));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}
