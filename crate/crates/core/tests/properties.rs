mod common;

use common::rng;
use ksformer_core::fft::{irfft2, rfft2};
use ksformer_core::haze::{clean_scene, synthesize_haze, HazeParams};
use ksformer_core::lfpm::{lfpm_apply, split_bands, LfpmWeights};
use ksformer_core::metrics::{psnr, ssim};
use ksformer_core::mkra::{MkraConfig, DEFAULT_WINDOW_SIDES};
use ksformer_core::mkram::{mkram_apply, MkramWeights};
use ksformer_core::network::flop_count;
use ksformer_core::ops::{conv2d, softmax_lastdim, window_partition, window_reverse, Padding};
use ksformer_core::train::dehaze_loss;
use ksformer_core::{KsformerModel, NetworkConfig, Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), lo, hi, &mut rng(seed))
}

fn pow2(max_log: u32) -> impl Strategy<Value = usize> {
    (1..=max_log).prop_map(|e| 1usize << e)
}

/// Straight f32 loop over output pixel, output channel, tap, input channel.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f32> {
    let (h, wd, cin) = x.hwc().unwrap();
    let (k, cout) = (w.shape()[0], w.shape()[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..cout {
                let mut s = 0.0f32;
                for ky in 0..k {
                    for kx in 0..k {
                        let (iy, ix) = ((oy * stride + ky) as isize - pad as isize, (ox * stride + kx) as isize - pad as isize);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for i in 0..cin {
                            s += x.data()[(iy as usize * wd + ix as usize) * cin + i] * w.data()[((ky * k + kx) * cin + i) * cout + o];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + o] = s;
            }
        }
    }
    out
}

fn max_abs(a: &Tensor, b: &[f32]) -> f32 {
    a.data().iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1f32..50.0, seed in any::<u64>()) {
        let y = softmax_lastdim(&tensor(&[rows, cols], seed, -scale, scale)).unwrap();
        for row in y.data().chunks(cols) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "{s}");
        }
    }

    #[test]
    fn window_round_trip_is_exact(
        (side_log, n_log) in (1u32..6).prop_flat_map(|s| (Just(s), 0..=s)), c in 1usize..4, seed in any::<u64>(),
    ) {
        let (side, n) = (1usize << side_log, 1usize << n_log);
        let x = tensor(&[side, side, c], seed, -1.0, 1.0);
        let back = window_reverse(&window_partition(&x, n).unwrap(), n, side).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn fft_round_trip(h in pow2(6), w in pow2(6), seed in any::<u64>()) {
        let x = tensor(&[h, w, 1], seed, -1.0, 1.0);
        let back = irfft2(&rfft2(&x).unwrap(), h, w).unwrap().reshape([h, w, 1]).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn conv_matches_naive_loop(
        h in 1usize..9, w in 1usize..9, cin in 1usize..4, cout in 1usize..4,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, same in any::<bool>(), seed in any::<u64>(),
    ) {
        prop_assume!(same || (h >= k && w >= k));
        let x = tensor(&[h, w, cin], seed, -1.0, 1.0);
        let kw = tensor(&[k, k, cin, cout], seed ^ 1, -1.0, 1.0);
        let (padding, pad) = if same { (Padding::Same, (k - 1) / 2) } else { (Padding::Valid, 0) };
        let y = conv2d(&x, &kw, stride, padding).unwrap();
        let err = max_abs(&y, &naive_conv(&x, &kw, stride, pad));
        prop_assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn bands_add_up(side in pow2(6), c in 1usize..3, cutoff in 0.05f32..0.95, seed in any::<u64>()) {
        let x = tensor(&[side, side, c], seed, -1.0, 1.0);
        let (low, high) = split_bands(&x, cutoff).unwrap();
        let sum = low.zip_map(&high, |a, b| a + b).unwrap();
        prop_assert!(sum.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn frequency_layer_is_linear(side in pow2(5), c in 1usize..4, a in -2.0f32..2.0, b in -2.0f32..2.0, seed in any::<u64>()) {
        let mut w = LfpmWeights::new(c, 0.25).unwrap();
        w.low_gain = tensor(&[c], seed, -2.0, 2.0);
        w.high_gain = tensor(&[c], seed ^ 2, -2.0, 2.0);
        let x = tensor(&[side, side, c], seed ^ 3, -1.0, 1.0);
        let y = tensor(&[side, side, c], seed ^ 4, -1.0, 1.0);
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let (fx, fy) = (lfpm_apply(&x, &w).unwrap(), lfpm_apply(&y, &w).unwrap());
        let want = fx.zip_map(&fy, |p, q| a * p + b * q).unwrap();
        prop_assert!(lfpm_apply(&mix, &w).unwrap().max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn frequency_layer_has_two_params_per_channel(c in 1usize..64) {
        prop_assert_eq!(LfpmWeights::new(c, 0.25).unwrap().param_count(), 2 * c);
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(side in 11usize..24, seed in any::<u64>()) {
        let a = tensor(&[side, side, 3], seed, 0.0, 1.0);
        let b = tensor(&[side, side, 3], seed ^ 5, 0.0, 1.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let (sab, sba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((sab - sba).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&sab));
        prop_assert!(sab < 1.0);
        prop_assert!(psnr(&a, &b).unwrap() >= 0.0);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>(), s in 0.01f32..0.3, step in 1.05f32..3.0) {
        let clean = tensor(&[16, 16, 3], seed, 0.0, 1.0);
        let noise = tensor(&[16, 16, 3], seed ^ 6, -1.0, 1.0);
        let noisy = |s: f32| clean.zip_map(&noise, |c, n| c + s * n).unwrap();
        prop_assert!(psnr(&noisy(s * step), &clean).unwrap() < psnr(&noisy(s), &clean).unwrap());
    }

    #[test]
    fn haze_is_a_convex_mix(side in 4usize..24, seed in any::<u64>()) {
        let mut r = rng(seed);
        let clean = clean_scene(side, &mut r);
        let p = HazeParams::random(side, &mut r);
        let hazy = synthesize_haze(&clean, &p).unwrap();
        for (i, (&h, &c)) in hazy.data().iter().zip(clean.data()).enumerate() {
            let t = p.transmission.data()[i / 3];
            prop_assert!(t > 0.0 && t <= 1.0);
            let (lo, hi) = (c.min(p.airlight), c.max(p.airlight));
            prop_assert!(h >= lo - 1e-6 && h <= hi + 1e-6, "{h} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_at_target(
        seed in any::<u64>(), spectral in 0.0f32..1.0, ssim_w in 0.0f32..1.0, same in any::<bool>(),
    ) {
        let target = tensor(&[16, 16, 3], seed, 0.0, 1.0);
        let pred = if same { target.clone() } else { tensor(&[16, 16, 3], seed ^ 7, 0.0, 1.0) };
        let mut tape = Tape::new();
        let p = tape.constant(pred);
        let l = dehaze_loss(&mut tape, p, &target, spectral, ssim_w).unwrap();
        let loss = tape.value(l).item();
        if same {
            prop_assert!(loss.abs() < 1e-6, "{loss}");
        } else {
            prop_assert!(loss > 0.0);
        }
    }

    #[test]
    fn routed_flops_undercut_dense(side_log in 5u32..9, c0 in 2usize..6, k in 1usize..4) {
        let cfg = NetworkConfig { base_channels: 2 * c0, k: Some(k), ..Default::default() };
        let r = flop_count(&cfg, 1 << side_log).unwrap();
        let mcfg = cfg.mkra_config_at(1 << side_log).unwrap();
        let partial = (0..4).any(|b| mcfg.ks[b] < mcfg.regions(b));
        if partial {
            prop_assert!(r.total_macs() < r.total_dense_macs());
        } else {
            prop_assert_eq!(r.total_macs(), r.total_dense_macs());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn model_output_keeps_shape_and_range(seed in any::<u64>(), head_scale in 0.1f32..20.0, blocks in 0usize..3) {
        let cfg = NetworkConfig { side: 32, base_channels: 4, mkram_blocks: blocks, ..Default::default() };
        let mut m = KsformerModel::new(cfg, seed).unwrap();
        m.head.w = tensor(m.head.w.shape(), seed, -head_scale, head_scale);
        let y = m.infer(&tensor(&[32, 32, 3], seed ^ 8, 0.0, 1.0)).unwrap();
        prop_assert_eq!(y.shape(), &[32, 32, 3]);
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_reload_is_bit_identical(seed in any::<u64>()) {
        let cfg = NetworkConfig { side: 32, base_channels: 4, mkram_blocks: 1, ..Default::default() };
        let mut m = KsformerModel::new(cfg, seed).unwrap();
        m.head.w = tensor(m.head.w.shape(), seed, -0.1, 0.1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ksf");
        m.save(&path).unwrap();
        let back = KsformerModel::load(&path).unwrap();
        let x = tensor(&[32, 32, 3], seed ^ 9, 0.0, 1.0);
        let (a, b) = (m.infer(&x).unwrap(), back.infer(&x).unwrap());
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    /// With the fusion kernel reading one branch only, perturbing any other
    /// branch's weights must leave the output untouched.
    #[test]
    fn fused_branches_do_not_share_weights(seed in any::<u64>(), pick in 0usize..3) {
        let cfg = MkraConfig::new(8, 16, DEFAULT_WINDOW_SIDES, None).unwrap();
        let mut r = rng(seed);
        let mut w = MkramWeights::init(&cfg, 0.25, &mut r).unwrap();
        w.fuse = Tensor::from_fn([1, 1, 24, 8], |i| {
            let (row, col) = (i / 8, i % 8);
            if row == pick * 8 + col { 1.0 } else { 0.0 }
        });
        let x = Tensor::randn([16, 16, 8], 1.0, &mut r);
        let base = mkram_apply(&x, &w, &cfg).unwrap();
        for branch in 0..3 {
            let mut p = w.clone();
            let target = [&mut p.spatial, &mut p.low, &mut p.high][branch].branches[1].wv.data_mut();
            target.iter_mut().for_each(|v| *v += 0.5);
            let moved = mkram_apply(&x, &p, &cfg).unwrap().max_abs_diff(&base);
            if branch == pick {
                prop_assert!(moved > 1e-4, "branch {branch}: {moved}");
            } else {
                prop_assert_eq!(moved, 0.0, "branch {} leaked into {}", branch, pick);
            }
        }
    }
}
