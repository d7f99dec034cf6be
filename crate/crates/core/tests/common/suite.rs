//! Gradient cases shared by the `gradients` tests and the acceptance run.
//! Each returns relative errors rather than asserting.

use ksformer_core::gradcheck::{grad_check, grad_check_against, GradCheck};
use ksformer_core::lfpm::{lfpm_forward, LfpmWeights};
use ksformer_core::mkra::{mkra_forward_routed, MkraConfig, MkraWeights, DEFAULT_WINDOW_SIDES};
use ksformer_core::mkram::{mkram_forward_routed, MkramWeights};
use ksformer_core::ops::Padding;
use ksformer_core::reference::{self, readout_weights, Grid};
use ksformer_core::{Indices, KsformerModel, NetworkConfig, Result, Tape, Tensor, Var};

use super::{readout, rng};

pub fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

/// Values with magnitude in [0.2, 1], away from the kinks of abs / clamp.
fn off_kink(shape: &[usize], seed: u64) -> Tensor {
    rand(shape, seed).map(|v| if v >= 0.0 { 0.2 + 0.8 * v } else { -0.2 + 0.8 * v })
}

type Cases = Vec<(String, f32)>;

fn check(out: &mut Cases, name: &str, params: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let err = grad_check(
        |t: &mut Tape, v: &[Var]| {
            let y = f(t, v)?;
            if t.shape(y).is_empty() {
                Ok(y)
            } else {
                readout(t, y, 99)
            }
        },
        params,
        1e-3,
    )
    .unwrap();
    out.push((name.to_owned(), err));
}

pub fn elementwise_ops() -> Cases {
    let mut out = Vec::new();
    let (a, b) = (rand(&[3, 4], 1), rand(&[3, 4], 2));
    check(&mut out, "add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check(&mut out, "sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check(&mut out, "mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check(&mut out, "scale", std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], -1.7)));
    check(&mut out, "gelu", &[rand(&[2, 3, 4], 3).map(|x| 3.0 * x)], |t, v| Ok(t.gelu(v[0])));
    check(&mut out, "abs", &[off_kink(&[4, 5], 4)], |t, v| Ok(t.abs(v[0])));
    check(&mut out, "clamp", &[off_kink(&[4, 5], 5).map(|x| 0.5 + 0.4 * x)], |t, v| Ok(t.clamp(v[0], 0.2, 0.8)));
    out
}

pub fn channel_ops() -> Cases {
    let mut out = Vec::new();
    let x = rand(&[4, 3, 5], 6);
    check(&mut out, "scale_channels", &[x.clone(), rand(&[5], 7)], |t, v| t.scale_channels(v[0], v[1]));
    check(&mut out, "add_channels", &[x.clone(), rand(&[5], 8)], |t, v| t.add_channels(v[0], v[1]));
    check(&mut out, "slice_last", std::slice::from_ref(&x), |t, v| t.slice_last(v[0], 1, 3));
    check(&mut out, "concat_last", &[x.clone(), rand(&[4, 3, 2], 9)], |t, v| t.concat_last(&[v[0], v[1]]));
    check(&mut out, "mean_axis", &[rand(&[4, 6, 3], 10)], |t, v| t.mean_axis(v[0], 1));
    check(&mut out, "sum", std::slice::from_ref(&x), |t, v| Ok(t.sum(v[0])));
    check(&mut out, "mean", &[x], |t, v| Ok(t.mean(v[0])));
    out
}

pub fn matrix_ops() -> Cases {
    let mut out = Vec::new();
    check(&mut out, "matmul", &[rand(&[3, 4, 5], 11), rand(&[3, 5, 2], 12)], |t, v| t.matmul(v[0], v[1]));
    check(&mut out, "matmul broadcast", &[rand(&[3, 4, 5], 13), rand(&[5, 6], 14)], |t, v| t.matmul(v[0], v[1]));
    check(&mut out, "transpose", &[rand(&[2, 3, 4], 15)], |t, v| t.transpose(v[0]));
    check(&mut out, "reshape", &[rand(&[2, 3, 4], 16)], |t, v| t.reshape(v[0], [6, 4]));
    check(&mut out, "softmax", &[rand(&[3, 7], 17).map(|x| 2.0 * x)], |t, v| t.softmax(v[0]));
    let idx = Indices::new([3, 2], vec![2, 0, 1, 1, 0, 2]).unwrap();
    check(&mut out, "gather_rows", &[rand(&[3, 4], 18)], move |t, v| t.gather_rows(v[0], &idx));
    out
}

pub fn spatial_ops() -> Cases {
    let mut out = Vec::new();
    let x = rand(&[8, 8, 2], 19);
    check(&mut out, "window_partition", &[x], |t, v| t.window_partition(v[0], 4));
    check(&mut out, "window_reverse", &[rand(&[4, 16, 2], 20)], |t, v| t.window_reverse(v[0], 4, 8));
    check(&mut out, "upsample2x", &[rand(&[3, 4, 2], 21)], |t, v| t.upsample2x(v[0]));
    for (stride, pad, k) in [(1, Padding::Same, 3), (2, Padding::Same, 3), (1, Padding::Valid, 3), (1, Padding::Same, 1)] {
        check(&mut out, &format!("conv2d s{stride} {pad:?} k{k}"), &[rand(&[7, 6, 3], 22), rand(&[k, k, 3, 4], 23)], move |t, v| {
            t.conv2d(v[0], v[1], stride, pad)
        });
    }
    out
}

pub fn spectral_and_metric_ops() -> Cases {
    let mut out = Vec::new();
    let mask = ksformer_core::fft::radial_lowpass_mask(8, 8, 0.5);
    check(&mut out, "spectral_filter", &[rand(&[8, 8, 3], 24)], move |t, v| t.spectral_filter(v[0], mask.clone()));
    check(&mut out, "spectral_l1", &[rand(&[8, 8, 2], 25)], |t, v| t.spectral_l1(v[0]));
    let target = Tensor::rand_uniform([16, 16, 2], 0.0, 1.0, &mut rng(26));
    let x = Tensor::rand_uniform([16, 16, 2], 0.0, 1.0, &mut rng(27));
    check(&mut out, "ssim", &[x], move |t, v| t.ssim(v[0], &target));
    let w = LfpmWeights::new(3, 0.25).unwrap();
    let params = vec![rand(&[8, 8, 3], 28), rand(&[3], 29), rand(&[3], 30)];
    check(&mut out, "lfpm_forward", &params, |t, v| {
        let lw = LfpmWeights { low_gain: v[1], high_gain: v[2], cutoff_ratio: w.cutoff_ratio };
        lfpm_forward(t, v[0], &lw)
    });
    out
}

pub fn every_op() -> Cases {
    [elementwise_ops(), channel_ops(), matrix_ops(), spatial_ops(), spectral_and_metric_ops()].concat()
}

/// Flattens weights so the checker sees each tensor as a separate parameter.
fn flat<T: Clone>(visit: impl FnOnce(&mut dyn FnMut(String, &T))) -> Vec<T> {
    let mut out = Vec::new();
    visit(&mut |_, t| out.push(t.clone()));
    out
}

/// Routing attention at H = 8, C = 8 with the routes of the unperturbed
/// input held fixed, against its f64 reference. One entry per parameter
/// tensor, input first.
pub fn routed_attention() -> Cases {
    let cfg = MkraConfig::new(8, 8, DEFAULT_WINDOW_SIDES, None).unwrap();
    let mut r = rng(31);
    let w = MkraWeights::init(&cfg, &mut r);
    let x = Tensor::randn([8, 8, 8], 1.0, &mut r);
    let (routing, y0) = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = w.map(&mut |t| tape.constant(t.clone()));
        let (y, r) = mkra_forward_routed(&mut tape, xv, &cfg, &wv, None).unwrap();
        (r, tape.value(y).clone())
    };
    let refd = reference::mkra(&Grid::from_tensor(&x), &cfg, &w.map(&mut reference::to_f64), &routing);
    assert!(max_diff(&refd, &y0) < 1e-5, "reference forward off by {}", max_diff(&refd, &y0));

    let mut names = vec!["x".to_owned()];
    w.visit("", &mut |n, _| names.push(n));
    let mut params = vec![x.clone()];
    params.extend(flat(|f| w.visit("", &mut |n, t| f(n, t))));
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut it = v[1..].iter().copied();
        let wv = w.map(&mut |_| it.next().unwrap());
        let (y, _) = mkra_forward_routed(t, v[0], &cfg, &wv, Some(&routing))?;
        readout(t, y, 5)
    };
    let r5 = readout_weights(&[8, 8, 8], 5);
    let reference = |p: &[Vec<f64>]| {
        let xm = Grid { d: p[0].clone(), ..Grid::from_tensor(&x) };
        let mut it = p[1..].iter();
        let wm = w.map(&mut |_| it.next().unwrap().clone());
        reference::readout(&reference::mkra(&xm, &cfg, &wm, &routing), &r5)
    };
    let checks = grad_check_against(&f, &reference, &params, GradCheck::default()).unwrap();
    checks.iter().map(|c| (names[c.index].clone(), c.rel_error)).collect()
}

pub fn max_diff(a: &Grid, b: &Tensor) -> f64 {
    a.d.iter().zip(b.data()).map(|(x, &y)| (x - y as f64).abs()).fold(0.0, f64::max)
}

/// The fused block at H = 8, C = 8 against its f64 reference. Panics if
/// the reference forward disagrees with the f32 one.
pub fn fused_block() -> Cases {
    let cfg = MkraConfig::new(8, 8, DEFAULT_WINDOW_SIDES, None).unwrap();
    let mut r = rng(32);
    let w = MkramWeights::init(&cfg, 0.25, &mut r).unwrap();
    let x = Tensor::randn([8, 8, 8], 1.0, &mut r);
    let (routing, y0) = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = w.map(&mut |t| tape.constant(t.clone()));
        let (y, r) = mkram_forward_routed(&mut tape, xv, &wv, &cfg, None).unwrap();
        (r, tape.value(y).clone())
    };
    let refd = reference::mkram(&Grid::from_tensor(&x), &cfg, &w.map(&mut reference::to_f64), &routing);
    assert!(max_diff(&refd, &y0) < 1e-5, "reference forward off by {}", max_diff(&refd, &y0));

    let mut names = vec!["x".to_owned()];
    w.visit("", &mut |n, _| names.push(n));
    let mut params = vec![x.clone()];
    params.extend(flat(|f| w.visit("", &mut |n, t| f(n, t))));
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut it = v[1..].iter().copied();
        let wv = w.map(&mut |_| it.next().unwrap());
        let (y, _) = mkram_forward_routed(t, v[0], &wv, &cfg, Some(&routing))?;
        readout(t, y, 6)
    };
    let r6 = readout_weights(&[8, 8, 8], 6);
    let reference = |p: &[Vec<f64>]| {
        let xm = Grid { d: p[0].clone(), ..Grid::from_tensor(&x) };
        let mut it = p[1..].iter();
        let wm = w.map(&mut |_| it.next().unwrap().clone());
        reference::readout(&reference::mkram(&xm, &cfg, &wm, &routing), &r6)
    };
    let checks = grad_check_against(&f, &reference, &params, GradCheck::default()).unwrap();
    checks.iter().map(|c| (names[c.index].clone(), c.rel_error)).collect()
}

/// H = 32, C0 = 4, one fused block, at a probe point whose outputs stay
/// clear of the clamp.
pub fn tiny_network() -> (KsformerModel, Tensor) {
    let cfg = NetworkConfig { side: 32, base_channels: 4, mkram_blocks: 1, ..Default::default() };
    reference::probe(cfg, 33).unwrap()
}

/// Every parameter tensor of [`tiny_network`], 16 coordinates each.
pub fn end_to_end() -> Cases {
    let (m, hazy) = tiny_network();
    let checks = reference::check_network_gradients(&m, &hazy, 7, GradCheck { max_coords: 16, ..Default::default() }).unwrap();
    checks.into_iter().map(|(n, c)| (n, c.rel_error)).collect()
}

pub fn worst(cases: &[(String, f32)]) -> (String, f32) {
    cases
        .iter()
        .fold((String::new(), 0.0), |w, (n, e)| if *e >= w.1 { (n.clone(), *e) } else { w })
}
