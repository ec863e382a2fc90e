use std::collections::BTreeMap;

use led_core::camera::{fit_gain_line, select_fewshot_pairs, PairCandidate, SelectionMode};
use led_core::metrics::{psnr, ssim, Psnr};
use led_core::noise::{tukey_lambda_quantile, SensorLevels};
use led_core::ops::conv3x3;
use led_core::raw::{crop_patches, denormalize, normalize, pack_bayer, unpack_bayer, BayerFrame, Container};
use led_core::repnr::{CsaBranch, CsaInit, Phase, PlainConv, RepNrBlock};
use led_core::rng::{domain, stream};
use led_core::{LedError, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn tensor(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = stream(seed, domain::INIT, dims.iter().product::<usize>() as u64);
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

/// Direct 3x3 convolution with a zero ring, one output at a time.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let [n, cin, h, wd] = x.dims()[..] else { unreachable!() };
    let cout = w.dims()[0];
    let at = |i: usize, c: usize, y: isize, xx: isize| {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[((i * cin + c) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = Vec::with_capacity(n * cout * h * wd);
    for i in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wv = w.data()[((o * cin + c) * 3 + ky) * 3 + kx];
                                acc += wv * at(i, c, y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn block(cin: usize, cout: usize, m: usize, phase: Phase, seed: u64) -> RepNrBlock<f64> {
    let branches = (0..m)
        .map(|k| CsaBranch {
            scale: tensor(&[cin], seed ^ (k as u64 + 1), 0.2, 2.0),
            shift: tensor(&[cin], seed ^ (k as u64 + 101), -1.0, 1.0),
        })
        .collect();
    let omnr = (phase == Phase::FinetuneOmnr).then(|| PlainConv {
        weight: tensor(&[cout, cin, 3, 3], seed ^ 7, -0.5, 0.5),
        bias: tensor(&[cout], seed ^ 8, -0.5, 0.5),
    });
    RepNrBlock::from_parts(
        branches,
        tensor(&[cout, cin, 3, 3], seed ^ 5, -1.0, 1.0),
        tensor(&[cout], seed ^ 6, -1.0, 1.0),
        omnr,
        phase,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pack_then_unpack_is_identity(hh in 1usize..12, hw in 1usize..12, seed in any::<u64>()) {
        let plane = tensor(&[2 * hh, 2 * hw], seed, 0.0, 1.0);
        let frame = BayerFrame::new(plane.clone(), SensorLevels::default()).unwrap();
        let packed = pack_bayer(&frame);
        prop_assert_eq!(packed.dims(), &[4, hh, hw]);
        // channel 0 is the top-left site of every cell
        prop_assert_eq!(packed.data()[0], plane.data()[0]);
        let back = unpack_bayer(&packed, SensorLevels::default()).unwrap();
        prop_assert_eq!(back.plane(), &plane);
    }

    #[test]
    fn normalize_inverts_denormalize(black in 0.0f64..1000.0, span in 1.0f64..16000.0, seed in any::<u64>()) {
        let levels = SensorLevels::new(black, black + span).unwrap();
        let adu = tensor(&[3, 5], seed, black, black + span);
        let back = denormalize(&normalize(&adu, levels).unwrap(), levels).unwrap();
        prop_assert!(back.max_abs_diff(&adu) <= 1e-12 * (black + span));
    }

    #[test]
    fn conv3x3_matches_direct_summation(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4, h in 1usize..7, w in 1usize..7, seed in any::<u64>()
    ) {
        let x = tensor(&[n, cin, h, w], seed, -1.0, 1.0);
        let wt = tensor(&[cout, cin, 3, 3], seed ^ 1, -1.0, 1.0);
        let b = tensor(&[cout], seed ^ 2, -1.0, 1.0);
        let fast = conv3x3(&x, &wt, &b, None).unwrap().output;
        for (f, s) in fast.data().iter().zip(naive_conv(&x, &wt, &b)) {
            prop_assert!((f - s).abs() <= 1e-12, "{} vs {}", f, s);
        }
    }

    #[test]
    fn fused_block_matches_multi_branch(
        cin in 1usize..5, cout in 1usize..5, m in 1usize..4, h in 1usize..6, w in 1usize..6,
        phase_pick in 0usize..3, seed in any::<u64>()
    ) {
        let phase = [Phase::Pretrain, Phase::FinetuneCsa, Phase::FinetuneOmnr][phase_pick];
        let m = if phase == Phase::Pretrain { m } else { 1 };
        let blk = block(cin, cout, m, phase, seed);
        let x = tensor(&[2, cin, h, w], seed ^ 3, -2.0, 2.0);
        for k in 0..m {
            let branch = (phase == Phase::Pretrain).then_some(k);
            let unfused = blk.forward(&x, branch).unwrap();
            let fused = blk.fuse_branch(k).unwrap().forward(&x).unwrap();
            prop_assert!(unfused.max_abs_diff(&fused) <= 1e-12);
        }
    }

    #[test]
    fn average_init_is_the_branch_mean(cin in 1usize..6, m in 1usize..6, seed in any::<u64>()) {
        let mut blk = block(cin, 2, m, Phase::Pretrain, seed);
        let before: Vec<CsaBranch<f64>> = blk.branches().to_vec();
        blk.init_target_csa(CsaInit::Average).unwrap();
        prop_assert_eq!(blk.phase(), Phase::FinetuneCsa);
        let target = &blk.branches()[0];
        for c in 0..cin {
            let mean_scale: f64 = before.iter().map(|b| b.scale.data()[c]).sum::<f64>() / m as f64;
            let mean_shift: f64 = before.iter().map(|b| b.shift.data()[c]).sum::<f64>() / m as f64;
            prop_assert!((target.scale.data()[c] - mean_scale).abs() <= 1e-15);
            prop_assert!((target.shift.data()[c] - mean_shift).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_omnr_keeps_the_output(cin in 1usize..4, cout in 1usize..4, seed in any::<u64>()) {
        let mut blk = block(cin, cout, 1, Phase::FinetuneCsa, seed);
        let x = tensor(&[1, cin, 4, 5], seed ^ 9, -1.0, 1.0);
        let before = blk.forward(&x, None).unwrap();
        blk.add_omnr().unwrap();
        prop_assert_eq!(blk.forward(&x, None).unwrap(), before);
    }

    #[test]
    fn container_roundtrips_and_detects_any_flip(
        len in 1usize..40, meta_val in "[a-z0-9 ]{0,16}", seed in any::<u64>(), flip in any::<prop::sample::Index>()
    ) {
        let mut c = Container::default();
        c.insert("a", tensor(&[len], seed, -1e3, 1e3));
        c.insert("b", tensor(&[2, len], seed ^ 1, -1.0, 1.0).cast::<f32>());
        c.metadata = BTreeMap::from([("note".to_string(), meta_val)]);
        let bytes = c.to_bytes().unwrap();
        prop_assert_eq!(&Container::from_bytes(&bytes).unwrap(), &c);
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x04;
        prop_assert!(matches!(Container::from_bytes(&bad), Err(LedError::Corrupt(_))));
        prop_assert!(matches!(Container::from_bytes(&bytes[..i]), Err(LedError::Corrupt(_))));
    }

    #[test]
    fn gain_line_recovers_exact_lines(
        slope in -2.0f64..2.0, intercept in -3.0f64..3.0, ks in prop::collection::btree_set(1u32..400, 2..8)
    ) {
        let pts: Vec<(f64, f64)> = ks
            .iter()
            .map(|&k| {
                let k = k as f64 / 20.0;
                (k, (slope * k.ln() + intercept).exp())
            })
            .collect();
        let line = fit_gain_line(&pts).unwrap();
        prop_assert!((line.slope - slope).abs() <= 1e-9);
        prop_assert!((line.intercept - intercept).abs() <= 1e-9);
        prop_assert!(line.residual <= 1e-9);
    }

    #[test]
    fn selection_takes_n_distinct_pairs_per_ratio(
        ks in prop::collection::vec(0.1f64..20.0, 3..18), n in 1usize..3, similar in any::<bool>()
    ) {
        let ratios = [100.0, 250.0, 300.0];
        let candidates: Vec<PairCandidate> = ks
            .iter()
            .enumerate()
            .map(|(i, &k)| PairCandidate { ratio: ratios[i % 3], k })
            .collect();
        let mode = if similar { SelectionMode::Similar } else { SelectionMode::Spread };
        match select_fewshot_pairs(&candidates, n, mode) {
            Ok(picked) => {
                prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
                for r in ratios {
                    let count = picked.iter().filter(|&&i| candidates[i].ratio == r).count();
                    prop_assert_eq!(count, n);
                }
            }
            Err(_) => {
                let short = ratios.iter().any(|&r| candidates.iter().filter(|c| c.ratio == r).count() < n);
                prop_assert!(short);
            }
        }
    }

    #[test]
    fn psnr_is_symmetric_and_ssim_bounded(len in 11usize..20, seed in any::<u64>()) {
        let a = tensor(&[1, 4, len, len], seed, 0.0, 1.0);
        let b = tensor(&[1, 4, len, len], seed ^ 1, 0.0, 1.0);
        let (Psnr::Finite(ab), Psnr::Finite(ba)) = (psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap()) else {
            return Err(TestCaseError::fail("distinct images give a finite PSNR"));
        };
        prop_assert_eq!(ab, ba);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(psnr(&a, &a).unwrap(), Psnr::Infinite);
    }

    #[test]
    fn tukey_quantile_is_odd_and_monotone(lambda in -0.5f64..1.5, p in 0.01f64..0.49) {
        let lo = tukey_lambda_quantile(p, lambda).unwrap();
        let hi = tukey_lambda_quantile(1.0 - p, lambda).unwrap();
        prop_assert!((lo + hi).abs() <= 1e-9 * hi.abs().max(1.0));
        prop_assert!(tukey_lambda_quantile(p + 0.005, lambda).unwrap() > lo);
    }

    #[test]
    fn patches_tile_without_overlap(h in 1usize..40, w in 1usize..40, patch in 1usize..9) {
        let plane = Tensor::from_fn(&[h, w], |i| i as f64);
        if patch > h || patch > w {
            prop_assert!(crop_patches(&plane, patch).is_err());
            return Ok(());
        }
        let tiles = crop_patches(&plane, patch).unwrap();
        prop_assert_eq!(tiles.len(), (h / patch) * (w / patch));
        if let Some(first) = tiles.first() {
            prop_assert_eq!(first.dims(), &[patch, patch]);
            prop_assert_eq!(first.data()[0], 0.0);
        }
        let mut seen: Vec<f64> = tiles.iter().flat_map(|t| t.data().to_vec()).collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        prop_assert_eq!(seen.len(), tiles.len() * patch * patch);
    }
}
