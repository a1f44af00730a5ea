//! Central-difference verification of analytic gradients.

use super::{Tape, Tensor, TensorError};

/// Outcome of a gradient check over a set of parameter coordinates.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel: f64,
    pub max_abs: f64,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} coords, max rel {:.3e}, max abs {:.3e}, tol {:.1e}: {}",
            self.checked,
            self.max_rel,
            self.max_abs,
            self.tol,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Compares `analytic` against central differences of `loss_fn` at the given
/// coordinates of `params`.
///
/// The relative error divides by `max(|analytic|, |fd|)` with a floor of
/// 1e-4 times the largest checked analytic component, so coordinates whose
/// gradient vanishes do not dominate the report.
pub fn finite_diff_check(
    loss_fn: &mut dyn FnMut(&[f64]) -> Result<f64, TensorError>,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
    tol: f64,
) -> Result<FdReport, TensorError> {
    if params.len() != analytic.len() {
        return Err(TensorError::Usage(format!(
            "finite_diff_check: {} params but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let scale = coords
        .iter()
        .map(|&i| analytic[i].abs())
        .fold(0.0f64, f64::max);
    let floor = 1e-4 * scale + 1e-12;

    let mut work = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for &i in coords {
        work[i] = params[i] + eps;
        let up = loss_fn(&work)?;
        work[i] = params[i] - eps;
        let down = loss_fn(&work)?;
        work[i] = params[i];
        let fd = (up - down) / (2.0 * eps);
        let abs = (analytic[i] - fd).abs();
        let rel = abs / analytic[i].abs().max(fd.abs()).max(floor);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(FdReport {
        max_rel,
        max_abs,
        checked: coords.len(),
        tol,
        pass: max_rel <= tol,
    })
}

/// Deterministic coordinate subset: up to `count` distinct indices of a
/// tensor with `len` entries.
pub fn sample_coords(len: usize, count: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if len <= count {
        return (0..len).collect();
    }
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..len).collect();
    all.shuffle(&mut rng);
    all.truncate(count);
    all.sort_unstable();
    all
}

/// Runs a finite-difference check for one differentiable argument of an op.
///
/// `build` maps the checked parameter tensor to the op output; the loss is
/// the output contracted with a fixed pseudo-random weighting so that every
/// output coordinate influences the scalar with a distinct factor.
pub fn check_op_gradient(
    name: &str,
    shape: &[usize],
    init: &[f64],
    build: &dyn Fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
    eps: f64,
    tol: f64,
) -> Result<(String, FdReport), TensorError> {
    let weights_for = |len: usize, shape: &[usize]| -> Result<Tensor, TensorError> {
        let w: Vec<f64> = (0..len)
            .map(|i| 0.3 + 0.7 * ((i as f64 * 0.7311 + 0.17).sin()))
            .collect();
        Tensor::constant(w, shape)
    };
    let eval = |p: &[f64]| -> Result<(f64, Option<Vec<f64>>), TensorError> {
        let mut tape = Tape::new();
        let param = tape.leaf(p.to_vec(), shape, true)?;
        let out = build(&mut tape, &param)?;
        let w = weights_for(out.len(), out.shape())?;
        let prod = tape.hadamard(&out, &w)?;
        let loss = tape.sum(&prod)?;
        let grads = tape.backward(&loss)?;
        let g = grads.get(&param).map(|g| g.to_vec());
        Ok((loss.item(), g))
    };
    let (_, analytic) = eval(init)?;
    let analytic = analytic.ok_or_else(|| {
        TensorError::Usage(format!("{name}: no gradient reached the parameter"))
    })?;
    let coords = sample_coords(init.len(), 50, 0x5eed ^ init.len() as u64);
    let mut loss_only = |p: &[f64]| eval(p).map(|(l, _)| l);
    let report = finite_diff_check(&mut loss_only, init, &analytic, &coords, eps, tol)?;
    Ok((name.to_string(), report))
}

fn smooth_init(len: usize, offset: f64, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|i| offset + scale * ((i as f64 * 1.137 + 0.41).sin()))
        .collect()
}

/// Finite-difference verification of every differentiable op, one report
/// per checked argument.
pub fn op_gradient_suite(eps: f64, tol: f64) -> Result<Vec<(String, FdReport)>, TensorError> {
    let mut reports = Vec::new();
    let (c, h, w) = (3usize, 5usize, 4usize);
    let map_shape = [c, h, w];
    let map_len = c * h * w;
    let x_map = smooth_init(map_len, 0.1, 0.8);
    let const_map = Tensor::constant(smooth_init(map_len, -0.2, 0.6), &map_shape)?;

    let push = |r: Result<(String, FdReport), TensorError>,
                    reports: &mut Vec<(String, FdReport)>|
     -> Result<(), TensorError> {
        reports.push(r?);
        Ok(())
    };

    for dilation in [1usize, 2] {
        let k_shape = [c, 3, 3];
        let k_init = smooth_init(c * 9, 0.05, 0.3);
        let k_const = Tensor::constant(k_init.clone(), &k_shape)?;
        let x_const = Tensor::constant(x_map.clone(), &map_shape)?;
        push(
            check_op_gradient(
                &format!("dw_conv2d(d={dilation})/input"),
                &map_shape,
                &x_map,
                &|t, p| t.dw_conv2d(p, &k_const, dilation),
                eps,
                tol,
            ),
            &mut reports,
        )?;
        push(
            check_op_gradient(
                &format!("dw_conv2d(d={dilation})/kernel"),
                &k_shape,
                &k_init,
                &|t, p| t.dw_conv2d(&x_const, p, dilation),
                eps,
                tol,
            ),
            &mut reports,
        )?;
    }

    {
        let cout = 4usize;
        let w_init = smooth_init(cout * c, 0.0, 0.5);
        let b_init = smooth_init(cout, 0.1, 0.2);
        let w_const = Tensor::constant(w_init.clone(), &[cout, c])?;
        let b_const = Tensor::constant(b_init.clone(), &[cout])?;
        let x_const = Tensor::constant(x_map.clone(), &map_shape)?;
        push(
            check_op_gradient("conv1x1/input", &map_shape, &x_map, &|t, p| {
                t.conv1x1(p, &w_const, &b_const)
            }, eps, tol),
            &mut reports,
        )?;
        push(
            check_op_gradient("conv1x1/weight", &[cout, c], &w_init, &|t, p| {
                t.conv1x1(&x_const, p, &b_const)
            }, eps, tol),
            &mut reports,
        )?;
        push(
            check_op_gradient("conv1x1/bias", &[cout], &b_init, &|t, p| {
                t.conv1x1(&x_const, &w_const, p)
            }, eps, tol),
            &mut reports,
        )?;
    }

    push(
        check_op_gradient("global_avg_pool", &map_shape, &x_map, &|t, p| {
            t.global_avg_pool(p)
        }, eps, tol),
        &mut reports,
    )?;

    {
        let (cin, cout) = (6usize, 4usize);
        let x_init = smooth_init(cin, 0.2, 0.7);
        let w_init = smooth_init(cout * cin, 0.0, 0.5);
        let b_init = smooth_init(cout, 0.0, 0.3);
        let x_const = Tensor::constant(x_init.clone(), &[cin])?;
        let w_const = Tensor::constant(w_init.clone(), &[cout, cin])?;
        let b_const = Tensor::constant(b_init.clone(), &[cout])?;
        push(
            check_op_gradient("fully_connected/input", &[cin], &x_init, &|t, p| {
                t.fully_connected(p, &w_const, &b_const)
            }, eps, tol),
            &mut reports,
        )?;
        push(
            check_op_gradient("fully_connected/weight", &[cout, cin], &w_init, &|t, p| {
                t.fully_connected(&x_const, p, &b_const)
            }, eps, tol),
            &mut reports,
        )?;
        push(
            check_op_gradient("fully_connected/bias", &[cout], &b_init, &|t, p| {
                t.fully_connected(&x_const, &w_const, p)
            }, eps, tol),
            &mut reports,
        )?;
    }

    for (name, build) in [
        ("sigmoid", (|t: &mut Tape, p: &Tensor| t.sigmoid(p)) as fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>),
        ("tanh", |t, p| t.tanh(p)),
        ("exp", |t, p| t.exp(p)),
        ("sum", |t, p| t.sum(p)),
        ("softmax_channels", |t, p| t.softmax_channels(p)),
    ] {
        push(
            check_op_gradient(name, &map_shape, &x_map, &build, eps, tol),
            &mut reports,
        )?;
    }

    // stay away from ln's pole, abs's kink and clamp's corners
    let positive = smooth_init(map_len, 2.0, 0.8);
    push(
        check_op_gradient("ln", &map_shape, &positive, &|t, p| t.ln(p), eps, tol),
        &mut reports,
    )?;
    push(
        check_op_gradient("abs", &map_shape, &positive, &|t, p| t.abs(p), eps, tol),
        &mut reports,
    )?;
    push(
        check_op_gradient("clamp", &map_shape, &x_map, &|t, p| t.clamp(p, -5.0, 5.0), eps, tol),
        &mut reports,
    )?;

    push(
        check_op_gradient("concat_channels", &map_shape, &x_map, &|t, p| {
            t.concat_channels(&[p, &const_map])
        }, eps, tol),
        &mut reports,
    )?;
    push(
        check_op_gradient("slice", &map_shape, &x_map, &|t, p| t.slice(p, 1, 3), eps, tol),
        &mut reports,
    )?;

    {
        let v_init = smooth_init(c, 0.5, 0.4);
        let v_const = Tensor::constant(v_init.clone(), &[c])?;
        let x_const = Tensor::constant(x_map.clone(), &map_shape)?;
        push(
            check_op_gradient("broadcast_mul/map", &map_shape, &x_map, &|t, p| {
                t.broadcast_mul(p, &v_const)
            }, eps, tol),
            &mut reports,
        )?;
        push(
            check_op_gradient("broadcast_mul/vector", &[c], &v_init, &|t, p| {
                t.broadcast_mul(&x_const, p)
            }, eps, tol),
            &mut reports,
        )?;
    }

    {
        let g_shape = [1, h, w];
        let g_init = smooth_init(h * w, 0.4, 0.5);
        let g_const = Tensor::constant(g_init.clone(), &g_shape)?;
        let x_const = Tensor::constant(x_map.clone(), &map_shape)?;
        push(
            check_op_gradient("mul_spatial_gate/map", &map_shape, &x_map, &|t, p| {
                t.mul_spatial_gate(p, &g_const)
            }, eps, tol),
            &mut reports,
        )?;
        push(
            check_op_gradient("mul_spatial_gate/gate", &g_shape, &g_init, &|t, p| {
                t.mul_spatial_gate(&x_const, p)
            }, eps, tol),
            &mut reports,
        )?;
    }

    for (name, build) in [
        ("hadamard", (|t: &mut Tape, p: &Tensor| {
            let other = Tensor::constant(smooth_init(p.len(), -0.3, 0.9), p.shape())?;
            t.hadamard(p, &other)
        }) as fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>),
        ("add", |t, p| {
            let other = Tensor::constant(smooth_init(p.len(), 0.2, 0.5), p.shape())?;
            t.add(p, &other)
        }),
        ("sub", |t, p| {
            let other = Tensor::constant(smooth_init(p.len(), 0.2, 0.5), p.shape())?;
            t.sub(&other, p)
        }),
        ("scale", |t, p| t.scale(p, -1.7)),
    ] {
        push(
            check_op_gradient(name, &map_shape, &x_map, &build, eps, tol),
            &mut reports,
        )?;
    }

    {
        let x_init = smooth_init(8, 0.3, 0.8);
        push(
            check_op_gradient("softmax_vec", &[8], &x_init, &|t, p| t.softmax_vec(p), eps, tol),
            &mut reports,
        )?;
        let k_init = smooth_init(3, 0.2, 0.4);
        let k_const = Tensor::constant(k_init.clone(), &[3])?;
        let x_const = Tensor::constant(x_init.clone(), &[8])?;
        push(
            check_op_gradient("channel_conv1d/input", &[8], &x_init, &|t, p| {
                t.channel_conv1d(p, &k_const)
            }, eps, tol),
            &mut reports,
        )?;
        push(
            check_op_gradient("channel_conv1d/kernel", &[3], &k_init, &|t, p| {
                t.channel_conv1d(&x_const, p)
            }, eps, tol),
            &mut reports,
        )?;
    }

    push(
        check_op_gradient("gather_cell", &map_shape, &x_map, &|t, p| {
            t.gather_cell(p, 2, 1)
        }, eps, tol),
        &mut reports,
    )?;

    Ok(reports)
}
