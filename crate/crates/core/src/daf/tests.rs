use super::*;
use crate::bev::GridConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn random_frames(c: usize, n_hist: usize, grid: &GridConfig, seed: u64) -> Vec<FeatureMap> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..=n_hist)
        .map(|offset| {
            let data = (0..c * grid.rows() * grid.cols())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            FeatureMap::from_data(grid, c, offset as u32, data).unwrap()
        })
        .collect()
}

fn tiny_grid() -> GridConfig {
    GridConfig::new(-1.8, 1.8, -1.8, 1.8, -2.0, 2.0, 0.6, 3).unwrap()
}

/// Parameters that pass the concatenated window through untouched: identity
/// depthwise stages, SA forced to all-ones, DA saturated at ~1, output
/// projection selecting the current frame's slice.
fn passthrough_params(c: usize, history: usize) -> DafParams {
    let c_cat = c * (history + 1);
    let mut p = DafParams {
        dw_kernel: Param::identity_kernel("daf.dw_kernel", c_cat, 3),
        dwd_kernel: Param::identity_kernel("daf.dwd_kernel", c_cat, 3),
        dilation: 2,
        proj_weight: Param::zeros("daf.proj_weight", &[c_cat, c_cat]),
        proj_bias: Param::zeros("daf.proj_bias", &[c_cat]),
        se_weight: Param::zeros("daf.se_weight", &[c_cat, c_cat]),
        se_bias: Param::zeros("daf.se_bias", &[c_cat]),
        out_weight: Param::identity_matrix("daf.out_weight", c, c_cat),
        out_bias: Param::zeros("daf.out_bias", &[c]),
        per_frame_channels: c,
        history,
    };
    for v in p.proj_bias.data.iter_mut() {
        *v = 1.0; // SA == 1 everywhere
    }
    for v in p.se_bias.data.iter_mut() {
        *v = 20.0; // DA ~= 1 - 2e-9
    }
    p
}

#[test]
fn static_attention_identity_composition() {
    let grid = tiny_grid();
    let frames = random_frames(2, 1, &grid, 1);
    let mut p = passthrough_params(2, 1);
    // proj = identity instead of the constant-one trick
    p.proj_weight = Param::identity_matrix("daf.proj_weight", 4, 4);
    p.proj_bias = Param::zeros("daf.proj_bias", &[4]);

    let mut tape = Tape::new();
    let tensors: Vec<Tensor> = frames.iter().map(|f| f.to_tensor()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let b_c = tape.concat_channels(&refs).unwrap();
    let sa = static_attention(&mut tape, &b_c, &p).unwrap();
    assert_eq!(sa.data(), b_c.data());
}

#[test]
fn static_attention_zero_weight_gives_constant_bias() {
    let grid = tiny_grid();
    let frames = random_frames(2, 1, &grid, 2);
    let mut p = passthrough_params(2, 1);
    for v in p.proj_bias.data.iter_mut() {
        *v = -0.75;
    }
    let mut tape = Tape::new();
    let tensors: Vec<Tensor> = frames.iter().map(|f| f.to_tensor()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let b_c = tape.concat_channels(&refs).unwrap();
    let sa = static_attention(&mut tape, &b_c, &p).unwrap();
    assert!(sa.data().iter().all(|&v| v == -0.75));
}

#[test]
fn static_attention_equals_op_by_op_composition() {
    let grid = tiny_grid();
    let frames = random_frames(3, 2, &grid, 3);
    let mut rng = ChaCha20Rng::seed_from_u64(30);
    let p = DafParams::with_kernels(3, 2, 3, 3, 2, &mut rng);

    let mut tape = Tape::new();
    let tensors: Vec<Tensor> = frames.iter().map(|f| f.to_tensor()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let b_c = tape.concat_channels(&refs).unwrap();
    let sa = static_attention(&mut tape, &b_c, &p).unwrap();

    // independently chained ops
    let mut t2 = Tape::new();
    let dw_k = p.dw_kernel.bind(&mut t2).unwrap();
    let dwd_k = p.dwd_kernel.bind(&mut t2).unwrap();
    let proj_w = p.proj_weight.bind(&mut t2).unwrap();
    let proj_b = p.proj_bias.bind(&mut t2).unwrap();
    let dw = t2.dw_conv2d(&b_c, &dw_k, 1).unwrap();
    let dwd = t2.dw_conv2d(&dw, &dwd_k, p.dilation).unwrap();
    let want = t2.conv1x1(&dwd, &proj_w, &proj_b).unwrap();
    assert_eq!(sa.data(), want.data());
}

#[test]
fn dynamic_attention_zero_params_is_half() {
    let grid = tiny_grid();
    let frames = random_frames(2, 1, &grid, 4);
    let mut p = passthrough_params(2, 1);
    for v in p.se_bias.data.iter_mut() {
        *v = 0.0;
    }
    let mut tape = Tape::new();
    let tensors: Vec<Tensor> = frames.iter().map(|f| f.to_tensor()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let b_c = tape.concat_channels(&refs).unwrap();
    let da = dynamic_attention(&mut tape, &b_c, &p).unwrap();
    assert!(da.data().iter().all(|&v| v == 0.5));
}

#[test]
fn dynamic_attention_saturates_near_one() {
    let grid = tiny_grid();
    let frames = random_frames(2, 1, &grid, 5);
    let p = passthrough_params(2, 1); // bias +20
    let mut tape = Tape::new();
    let tensors: Vec<Tensor> = frames.iter().map(|f| f.to_tensor()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let b_c = tape.concat_channels(&refs).unwrap();
    let da = dynamic_attention(&mut tape, &b_c, &p).unwrap();
    assert!(da.data().iter().all(|&v| v > 0.999999 && v < 1.0));
}

#[test]
fn dynamic_attention_matches_pool_fc_sigmoid() {
    let grid = tiny_grid();
    let frames = random_frames(3, 1, &grid, 6);
    let mut rng = ChaCha20Rng::seed_from_u64(60);
    let p = DafParams::with_kernels(3, 1, 3, 3, 2, &mut rng);
    let mut tape = Tape::new();
    let tensors: Vec<Tensor> = frames.iter().map(|f| f.to_tensor()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let b_c = tape.concat_channels(&refs).unwrap();
    let da = dynamic_attention(&mut tape, &b_c, &p).unwrap();

    let mut t2 = Tape::new();
    let se_w = p.se_weight.bind(&mut t2).unwrap();
    let se_b = p.se_bias.bind(&mut t2).unwrap();
    let pooled = t2.global_avg_pool(&b_c).unwrap();
    let fc = t2.fully_connected(&pooled, &se_w, &se_b).unwrap();
    let want = t2.sigmoid(&fc).unwrap();
    assert_eq!(da.data(), want.data());
}

#[test]
fn fuse_passthrough_reproduces_current_frame() {
    let grid = tiny_grid();
    let frames = random_frames(3, 2, &grid, 7);
    let p = passthrough_params(3, 2);
    let fused = daf_fuse(&frames, &p).unwrap();
    assert_eq!(fused.frame_offset, 0);
    let max_err = fused
        .data()
        .iter()
        .zip(frames[0].data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(max_err < 1e-4, "max err {max_err}");
}

#[test]
fn fuse_half_gate_halves_current_frame() {
    let grid = tiny_grid();
    let frames = random_frames(2, 1, &grid, 8);
    let mut p = passthrough_params(2, 1);
    for v in p.se_bias.data.iter_mut() {
        *v = 0.0; // DA = 0.5 exactly
    }
    let fused = daf_fuse(&frames, &p).unwrap();
    for (got, want) in fused.data().iter().zip(frames[0].data()) {
        assert!((got - 0.5 * want).abs() < 1e-5);
    }
}

#[test]
fn fuse_single_frame_window_degenerates_cleanly() {
    let grid = tiny_grid();
    let frames = random_frames(4, 0, &grid, 9);
    let mut rng = ChaCha20Rng::seed_from_u64(90);
    let p = DafParams::with_kernels(4, 0, 3, 3, 2, &mut rng);
    let fused = daf_fuse(&frames, &p).unwrap();
    assert_eq!(
        (fused.channels(), fused.rows(), fused.cols()),
        (4, grid.rows(), grid.cols())
    );
    assert!(fused.data().iter().all(|v| v.is_finite()));
}

#[test]
fn fuse_shape_contract_across_window_lengths() {
    let grid = tiny_grid();
    for n in [0usize, 1, 2, 4] {
        let mut rng = ChaCha20Rng::seed_from_u64(100 + n as u64);
        let p = DafParams::with_kernels(3, n, 3, 5, 2, &mut rng);
        let frames = random_frames(3, n, &grid, 200 + n as u64);
        let fused = daf_fuse(&frames, &p).unwrap();
        assert_eq!(
            (fused.channels(), fused.rows(), fused.cols()),
            (3, grid.rows(), grid.cols())
        );
    }
}

#[test]
fn fuse_rejects_bad_windows() {
    let grid = tiny_grid();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let p = DafParams::with_kernels(3, 1, 3, 3, 2, &mut rng);
    assert!(matches!(daf_fuse(&[], &p), Err(DafError::EmptyWindow)));

    let mut frames = random_frames(3, 1, &grid, 12);
    frames[0].frame_offset = 1;
    assert!(matches!(
        daf_fuse(&frames, &p),
        Err(DafError::NotCurrentFirst { offset: 1 })
    ));

    let mut frames = random_frames(3, 1, &grid, 13);
    frames[1] = random_frames(2, 0, &grid, 14).remove(0);
    assert!(matches!(
        daf_fuse(&frames, &p),
        Err(DafError::FrameMismatch { index: 1 })
    ));
}

#[test]
fn gating_bound_holds_before_projection() {
    let grid = tiny_grid();
    let frames = random_frames(2, 2, &grid, 15);
    let mut rng = ChaCha20Rng::seed_from_u64(150);
    let p = DafParams::with_kernels(2, 2, 3, 3, 2, &mut rng);

    let mut tape = Tape::new();
    let tensors: Vec<Tensor> = frames.iter().map(|f| f.to_tensor()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let fwd = daf_forward(&mut tape, &refs, &p).unwrap();

    let max_sa = fwd
        .attention
        .sa
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let max_da = fwd
        .attention
        .da
        .data()
        .iter()
        .fold(0.0f64, |m, &v| m.max(v));
    assert!(max_da < 1.0);
    for (g, b) in fwd.gated.data().iter().zip(fwd.b_c.data()) {
        assert!(g.abs() <= max_sa * max_da * b.abs() + 1e-12);
        if *b != 0.0 {
            assert!(g.abs() < max_sa * b.abs());
        }
    }
}

#[test]
fn zeroing_a_history_frame_zeroes_its_gated_slice() {
    let grid = tiny_grid();
    let c = 3;
    let mut frames = random_frames(c, 2, &grid, 16);
    for v in frames[1].data_mut() {
        *v = 0.0;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(160);
    let p = DafParams::with_kernels(c, 2, 3, 3, 2, &mut rng);

    let mut tape = Tape::new();
    let tensors: Vec<Tensor> = frames.iter().map(|f| f.to_tensor()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let fwd = daf_forward(&mut tape, &refs, &p).unwrap();

    let plane = grid.rows() * grid.cols();
    let slice1 = &fwd.gated.data()[c * plane..2 * c * plane];
    assert!(slice1.iter().all(|&v| v == 0.0));
    let slice0 = &fwd.gated.data()[..c * plane];
    assert!(slice0.iter().any(|&v| v != 0.0));
}

#[test]
fn history_permutation_covariance() {
    let grid = tiny_grid();
    let c = 2;
    let frames = random_frames(c, 2, &grid, 17);
    let mut rng = ChaCha20Rng::seed_from_u64(170);
    let p = DafParams::with_kernels(c, 2, 3, 3, 2, &mut rng);

    // swap history frames 1 and 2
    let swapped = vec![frames[0].clone(), frames[2].clone(), frames[1].clone()];

    // permute channel blocks (c..2c) <-> (2c..3c) in every parameter
    let c_cat = p.concat_channels();
    let perm: Vec<usize> = (0..c_cat)
        .map(|i| match i / c {
            1 => i + c,
            2 => i - c,
            _ => i,
        })
        .collect();
    let mut q = p.clone();
    let permute_blocks = |src: &[f64], block: usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for (dst_block, &src_block) in perm.iter().enumerate() {
            out[dst_block * block..(dst_block + 1) * block]
                .copy_from_slice(&src[src_block * block..(src_block + 1) * block]);
        }
        out
    };
    q.dw_kernel.data = permute_blocks(&p.dw_kernel.data, 9);
    q.dwd_kernel.data = permute_blocks(&p.dwd_kernel.data, 9);
    q.proj_bias.data = permute_blocks(&p.proj_bias.data, 1);
    q.se_bias.data = permute_blocks(&p.se_bias.data, 1);
    let permute_matrix = |src: &[f64], rows_too: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        let rows = src.len() / c_cat;
        for r in 0..rows {
            let src_r = if rows_too { perm[r] } else { r };
            for col in 0..c_cat {
                out[r * c_cat + col] = src[src_r * c_cat + perm[col]];
            }
        }
        out
    };
    q.proj_weight.data = permute_matrix(&p.proj_weight.data, true);
    q.se_weight.data = permute_matrix(&p.se_weight.data, true);
    q.out_weight.data = permute_matrix(&p.out_weight.data, false);

    let a = daf_fuse(&frames, &p).unwrap();
    let b = daf_fuse(&swapped, &q).unwrap();
    let max_err = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(max_err < 1e-9, "max err {max_err}");
}

#[test]
fn full_fusion_gradients_match_finite_differences() {
    let reports = daf_gradient_reports(1e-3, 1e-4).unwrap();
    assert_eq!(reports.len(), 8);
    for (name, report) in &reports {
        assert!(report.pass, "{name}: {report}");
    }
}
