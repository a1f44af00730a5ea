//! Forward kernels and their reverse-mode adjoints.
//!
//! Convolutions are cross-correlations with zero padding, so spatial dims
//! are preserved and cells beyond the grid contribute nothing.

use std::sync::Arc;

use super::{accumulate, Op, Saved, Tensor, TensorError, Tape};

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize), TensorError> {
    match t.shape[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::Shape {
            op,
            detail: format!("expected rank-3 tensor, got {:?}", t.shape),
        }),
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl Tape {
    /// Per-channel 2D cross-correlation with a square odd kernel; padding
    /// keeps spatial dims, dilation expands the receptive field.
    pub fn dw_conv2d(
        &mut self,
        x: &Tensor,
        kernel: &Tensor,
        dilation: usize,
    ) -> Result<Tensor, TensorError> {
        let (c, h, w) = dims3("dw_conv2d", x)?;
        let (kc, kh, kw) = dims3("dw_conv2d", kernel)?;
        if kh != kw {
            return Err(shape_err("dw_conv2d", format!("kernel not square: {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(TensorError::EvenKernel { size: kh });
        }
        if kc != c {
            return Err(shape_err("dw_conv2d", format!("{c} channels vs {kc} kernels")));
        }
        if dilation == 0 {
            return Err(TensorError::Usage("dilation must be >= 1".into()));
        }
        let out = dw_forward(&x.data, &kernel.data, c, h, w, kh, dilation);
        let tracked = x.tracked() || kernel.tracked();
        self.emit(
            "dw_conv2d",
            Op::DwConv2d {
                x: Saved::of(x),
                k: Saved::of(kernel),
                dilation,
            },
            tracked,
            out,
            vec![c, h, w],
        )
    }

    /// Per-pixel affine map across channels.
    pub fn conv1x1(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (cin, h, wd) = dims3("conv1x1", x)?;
        let [cout, wcin] = w.shape[..] else {
            return Err(shape_err("conv1x1", format!("weight rank: {:?}", w.shape)));
        };
        if wcin != cin || b.shape != [cout] {
            return Err(shape_err(
                "conv1x1",
                format!("x {:?}, w {:?}, b {:?}", x.shape, w.shape, b.shape),
            ));
        }
        let hw = h * wd;
        let mut out = vec![0.0; cout * hw];
        for o in 0..cout {
            let dst = &mut out[o * hw..(o + 1) * hw];
            dst.fill(b.data[o]);
            for i in 0..cin {
                let wv = w.data[o * cin + i];
                if wv == 0.0 {
                    continue;
                }
                let src = &x.data[i * hw..(i + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
        let tracked = x.tracked() || w.tracked() || b.tracked();
        self.emit(
            "conv1x1",
            Op::Conv1x1 {
                x: Saved::of(x),
                w: Saved::of(w),
                b: Saved::of(b),
            },
            tracked,
            out,
            vec![cout, h, wd],
        )
    }

    pub fn global_avg_pool(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (c, h, w) = dims3("global_avg_pool", x)?;
        let hw = h * w;
        let out: Vec<f64> = (0..c)
            .map(|ch| x.data[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.emit(
            "global_avg_pool",
            Op::GlobalAvgPool { x: Saved::of(x) },
            x.tracked(),
            out,
            vec![c],
        )
    }

    pub fn fully_connected(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let [cin] = x.shape[..] else {
            return Err(shape_err("fully_connected", format!("input rank: {:?}", x.shape)));
        };
        let [cout, wcin] = w.shape[..] else {
            return Err(shape_err("fully_connected", format!("weight rank: {:?}", w.shape)));
        };
        if wcin != cin || b.shape != [cout] {
            return Err(shape_err(
                "fully_connected",
                format!("x {:?}, w {:?}, b {:?}", x.shape, w.shape, b.shape),
            ));
        }
        let out: Vec<f64> = (0..cout)
            .map(|o| {
                b.data[o]
                    + w.data[o * cin..(o + 1) * cin]
                        .iter()
                        .zip(x.data.iter())
                        .map(|(wv, xv)| wv * xv)
                        .sum::<f64>()
            })
            .collect();
        let tracked = x.tracked() || w.tracked() || b.tracked();
        self.emit(
            "fully_connected",
            Op::FullyConnected {
                x: Saved::of(x),
                w: Saved::of(w),
                b: Saved::of(b),
            },
            tracked,
            out,
            vec![cout],
        )
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = x.data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let y = Arc::new(out.clone());
        self.emit(
            "sigmoid",
            Op::Sigmoid { x_node: x.node, y },
            x.tracked(),
            out,
            x.shape.clone(),
        )
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = x.data.iter().map(|v| v.tanh()).collect();
        let y = Arc::new(out.clone());
        self.emit(
            "tanh",
            Op::Tanh { x_node: x.node, y },
            x.tracked(),
            out,
            x.shape.clone(),
        )
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = x.data.iter().map(|v| v.exp()).collect();
        let y = Arc::new(out.clone());
        self.emit(
            "exp",
            Op::Exp { x_node: x.node, y },
            x.tracked(),
            out,
            x.shape.clone(),
        )
    }

    pub fn ln(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = x.data.iter().map(|v| v.ln()).collect();
        self.emit("ln", Op::Ln { x: Saved::of(x) }, x.tracked(), out, x.shape.clone())
    }

    /// Elementwise clamp; gradient passes only through the open interval.
    pub fn clamp(&mut self, x: &Tensor, lo: f64, hi: f64) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = x.data.iter().map(|v| v.clamp(lo, hi)).collect();
        self.emit(
            "clamp",
            Op::Clamp { x: Saved::of(x), lo, hi },
            x.tracked(),
            out,
            x.shape.clone(),
        )
    }

    /// Stacks maps along the channel dimension, preserving input order.
    pub fn concat_channels(&mut self, xs: &[&Tensor]) -> Result<Tensor, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::Usage("concat_channels: empty input list".into()));
        }
        let (_, h, w) = dims3("concat_channels", xs[0])?;
        let mut total_c = 0;
        for x in xs {
            let (c, xh, xw) = dims3("concat_channels", x)?;
            if (xh, xw) != (h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("spatial mismatch: {h}x{w} vs {xh}x{xw}"),
                ));
            }
            total_c += c;
        }
        let mut out = Vec::with_capacity(total_c * h * w);
        for x in xs {
            out.extend_from_slice(&x.data);
        }
        let tracked = xs.iter().any(|x| x.tracked());
        self.emit(
            "concat_channels",
            Op::ConcatChannels {
                xs: xs.iter().map(|x| Saved::of(x)).collect(),
            },
            tracked,
            out,
            vec![total_c, h, w],
        )
    }

    /// Slices `[from, to)` along the leading dimension.
    pub fn slice(&mut self, x: &Tensor, from: usize, to: usize) -> Result<Tensor, TensorError> {
        if x.shape.is_empty() || to > x.shape[0] || from >= to {
            return Err(shape_err(
                "slice",
                format!("[{from}, {to}) of leading dim {:?}", x.shape),
            ));
        }
        let inner: usize = x.shape[1..].iter().product();
        let out = x.data[from * inner..to * inner].to_vec();
        let mut shape = x.shape.clone();
        shape[0] = to - from;
        self.emit(
            "slice",
            Op::Slice { x: Saved::of(x), from },
            x.tracked(),
            out,
            shape,
        )
    }

    /// Scales each channel plane by the matching entry of a vector.
    pub fn broadcast_mul(&mut self, x: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
        let (c, h, w) = dims3("broadcast_mul", x)?;
        if v.shape != [c] {
            return Err(shape_err(
                "broadcast_mul",
                format!("map has {c} channels, vector is {:?}", v.shape),
            ));
        }
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let s = v.data[ch];
            for (o, xv) in out[ch * hw..(ch + 1) * hw]
                .iter_mut()
                .zip(&x.data[ch * hw..(ch + 1) * hw])
            {
                *o = s * xv;
            }
        }
        let tracked = x.tracked() || v.tracked();
        self.emit(
            "broadcast_mul",
            Op::BroadcastMul {
                x: Saved::of(x),
                v: Saved::of(v),
            },
            tracked,
            out,
            vec![c, h, w],
        )
    }

    /// Multiplies every channel by a single-channel spatial gate.
    pub fn mul_spatial_gate(&mut self, x: &Tensor, g: &Tensor) -> Result<Tensor, TensorError> {
        let (c, h, w) = dims3("mul_spatial_gate", x)?;
        let (gc, gh, gw) = dims3("mul_spatial_gate", g)?;
        if gc != 1 || gh != h || gw != w {
            return Err(shape_err(
                "mul_spatial_gate",
                format!("gate {:?} for map {:?}", g.shape, x.shape),
            ));
        }
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for i in 0..hw {
                out[ch * hw + i] = x.data[ch * hw + i] * g.data[i];
            }
        }
        let tracked = x.tracked() || g.tracked();
        self.emit(
            "mul_spatial_gate",
            Op::MulSpatialGate {
                x: Saved::of(x),
                g: Saved::of(g),
            },
            tracked,
            out,
            vec![c, h, w],
        )
    }

    pub fn hadamard(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape != b.shape {
            return Err(shape_err(
                "hadamard",
                format!("{:?} vs {:?}", a.shape, b.shape),
            ));
        }
        let out: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
        let tracked = a.tracked() || b.tracked();
        self.emit(
            "hadamard",
            Op::Hadamard {
                a: Saved::of(a),
                b: Saved::of(b),
            },
            tracked,
            out,
            a.shape.clone(),
        )
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape != b.shape {
            return Err(shape_err("add", format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        let out: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
        let tracked = a.tracked() || b.tracked();
        self.emit(
            "add",
            Op::Add { a: Saved::of(a), b: Saved::of(b) },
            tracked,
            out,
            a.shape.clone(),
        )
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape != b.shape {
            return Err(shape_err("sub", format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        let out: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x - y).collect();
        let tracked = a.tracked() || b.tracked();
        self.emit(
            "sub",
            Op::Sub { a: Saved::of(a), b: Saved::of(b) },
            tracked,
            out,
            a.shape.clone(),
        )
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = x.data.iter().map(|v| c * v).collect();
        self.emit(
            "scale",
            Op::Scale { x: Saved::of(x), c },
            x.tracked(),
            out,
            x.shape.clone(),
        )
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let out = vec![x.data.iter().sum::<f64>()];
        self.emit("sum", Op::Sum { x: Saved::of(x) }, x.tracked(), out, vec![1])
    }

    pub fn abs(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = x.data.iter().map(|v| v.abs()).collect();
        self.emit("abs", Op::Abs { x: Saved::of(x) }, x.tracked(), out, x.shape.clone())
    }

    /// Softmax across the leading (channel) dimension at every pixel.
    pub fn softmax_channels(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (c, h, w) = dims3("softmax_channels", x)?;
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for i in 0..hw {
            let max = (0..c).map(|ch| x.data[ch * hw + i]).fold(f64::MIN, f64::max);
            let mut denom = 0.0;
            for ch in 0..c {
                let e = (x.data[ch * hw + i] - max).exp();
                out[ch * hw + i] = e;
                denom += e;
            }
            for ch in 0..c {
                out[ch * hw + i] /= denom;
            }
        }
        let y = Arc::new(out.clone());
        self.emit(
            "softmax_channels",
            Op::SoftmaxChannels { x_node: x.node, y, hw },
            x.tracked(),
            out,
            vec![c, h, w],
        )
    }

    pub fn softmax_vec(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        if x.shape.len() != 1 {
            return Err(shape_err("softmax_vec", format!("rank: {:?}", x.shape)));
        }
        let max = x.data.iter().copied().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = x.data.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        let y = Arc::new(out.clone());
        self.emit(
            "softmax_vec",
            Op::SoftmaxVec { x_node: x.node, y },
            x.tracked(),
            out,
            x.shape.clone(),
        )
    }

    /// Same-size 1D cross-correlation over a channel vector (zero padded).
    pub fn channel_conv1d(&mut self, x: &Tensor, k: &Tensor) -> Result<Tensor, TensorError> {
        let [c] = x.shape[..] else {
            return Err(shape_err("channel_conv1d", format!("input rank: {:?}", x.shape)));
        };
        let [ks] = k.shape[..] else {
            return Err(shape_err("channel_conv1d", format!("kernel rank: {:?}", k.shape)));
        };
        if ks % 2 == 0 {
            return Err(TensorError::EvenKernel { size: ks });
        }
        let off = (ks / 2) as i64;
        let out: Vec<f64> = (0..c as i64)
            .map(|i| {
                (0..ks as i64)
                    .filter_map(|j| {
                        let src = i + j - off;
                        (src >= 0 && src < c as i64)
                            .then(|| x.data[src as usize] * k.data[j as usize])
                    })
                    .sum()
            })
            .collect();
        let tracked = x.tracked() || k.tracked();
        self.emit(
            "channel_conv1d",
            Op::ChannelConv1d {
                x: Saved::of(x),
                k: Saved::of(k),
            },
            tracked,
            out,
            vec![c],
        )
    }

    /// Extracts the channel vector at one spatial cell.
    pub fn gather_cell(&mut self, x: &Tensor, row: usize, col: usize) -> Result<Tensor, TensorError> {
        let (c, h, w) = dims3("gather_cell", x)?;
        if row >= h || col >= w {
            return Err(shape_err(
                "gather_cell",
                format!("cell ({row}, {col}) outside {h}x{w}"),
            ));
        }
        let hw = h * w;
        let out: Vec<f64> = (0..c).map(|ch| x.data[ch * hw + row * w + col]).collect();
        self.emit(
            "gather_cell",
            Op::GatherCell { x: Saved::of(x), row, col },
            x.tracked(),
            out,
            vec![c],
        )
    }
}

fn dw_forward(
    x: &[f64],
    kernel: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    let off = (k / 2) as i64;
    let d = dilation as i64;
    for ch in 0..c {
        let xin = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            let dy = (ky as i64 - off) * d;
            for kx in 0..k {
                let wv = kernel[(ch * k + ky) * k + kx];
                if wv == 0.0 {
                    continue;
                }
                let dx = (kx as i64 - off) * d;
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as i64 - dy).min(h as i64)).max(0) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as i64 - dx).min(w as i64)).max(0) as usize;
                for y in y0..y1 {
                    let src_row = ((y as i64 + dy) as usize) * w;
                    let dst_row = y * w;
                    for i in x0..x1 {
                        dst[dst_row + i] += wv * xin[src_row + (i as i64 + dx) as usize];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn backward_op(op: &Op, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf => unreachable!("leaves are handled by the sweep"),
        Op::DwConv2d { x, k, dilation } => {
            let [c, h, w] = x.shape[..] else { unreachable!() };
            let ks = k.shape[1];
            let off = (ks / 2) as i64;
            let d = *dilation as i64;
            accumulate(grads, x.node, x.data.len(), |gx| {
                for ch in 0..c {
                    let g_in = &gout[ch * h * w..(ch + 1) * h * w];
                    let gx_ch = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for ky in 0..ks {
                        let dy = (ky as i64 - off) * d;
                        for kx in 0..ks {
                            let wv = k.data[(ch * ks + ky) * ks + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let dx = (kx as i64 - off) * d;
                            let y0 = (-dy).max(0) as usize;
                            let y1 = ((h as i64 - dy).min(h as i64)).max(0) as usize;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = ((w as i64 - dx).min(w as i64)).max(0) as usize;
                            for y in y0..y1 {
                                let src_row = ((y as i64 + dy) as usize) * w;
                                let out_row = y * w;
                                for i in x0..x1 {
                                    gx_ch[src_row + (i as i64 + dx) as usize] +=
                                        wv * g_in[out_row + i];
                                }
                            }
                        }
                    }
                }
            });
            accumulate(grads, k.node, k.data.len(), |gk| {
                for ch in 0..c {
                    let g_in = &gout[ch * h * w..(ch + 1) * h * w];
                    let xin = &x.data[ch * h * w..(ch + 1) * h * w];
                    for ky in 0..ks {
                        let dy = (ky as i64 - off) * d;
                        for kx in 0..ks {
                            let dx = (kx as i64 - off) * d;
                            let y0 = (-dy).max(0) as usize;
                            let y1 = ((h as i64 - dy).min(h as i64)).max(0) as usize;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = ((w as i64 - dx).min(w as i64)).max(0) as usize;
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let src_row = ((y as i64 + dy) as usize) * w;
                                let out_row = y * w;
                                for i in x0..x1 {
                                    acc += g_in[out_row + i]
                                        * xin[src_row + (i as i64 + dx) as usize];
                                }
                            }
                            gk[(ch * ks + ky) * ks + kx] += acc;
                        }
                    }
                }
            });
        }
        Op::Conv1x1 { x, w, b } => {
            let [cin, h, wd] = x.shape[..] else { unreachable!() };
            let cout = w.shape[0];
            let hw = h * wd;
            accumulate(grads, x.node, x.data.len(), |gx| {
                for o in 0..cout {
                    let g_o = &gout[o * hw..(o + 1) * hw];
                    for i in 0..cin {
                        let wv = w.data[o * cin + i];
                        if wv == 0.0 {
                            continue;
                        }
                        for (gxi, g) in gx[i * hw..(i + 1) * hw].iter_mut().zip(g_o) {
                            *gxi += wv * g;
                        }
                    }
                }
            });
            accumulate(grads, w.node, w.data.len(), |gw| {
                for o in 0..cout {
                    let g_o = &gout[o * hw..(o + 1) * hw];
                    for i in 0..cin {
                        let xin = &x.data[i * hw..(i + 1) * hw];
                        gw[o * cin + i] += g_o.iter().zip(xin).map(|(g, xv)| g * xv).sum::<f64>();
                    }
                }
            });
            accumulate(grads, b.node, cout, |gb| {
                for o in 0..cout {
                    gb[o] += gout[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
            });
        }
        Op::GlobalAvgPool { x } => {
            let [c, h, w] = x.shape[..] else { unreachable!() };
            let hw = h * w;
            accumulate(grads, x.node, x.data.len(), |gx| {
                for ch in 0..c {
                    let g = gout[ch] / hw as f64;
                    for v in gx[ch * hw..(ch + 1) * hw].iter_mut() {
                        *v += g;
                    }
                }
            });
        }
        Op::FullyConnected { x, w, b } => {
            let cin = x.shape[0];
            let cout = w.shape[0];
            accumulate(grads, x.node, cin, |gx| {
                for o in 0..cout {
                    for i in 0..cin {
                        gx[i] += w.data[o * cin + i] * gout[o];
                    }
                }
            });
            accumulate(grads, w.node, w.data.len(), |gw| {
                for o in 0..cout {
                    for i in 0..cin {
                        gw[o * cin + i] += gout[o] * x.data[i];
                    }
                }
            });
            accumulate(grads, b.node, cout, |gb| {
                for o in 0..cout {
                    gb[o] += gout[o];
                }
            });
        }
        Op::Sigmoid { x_node, y } => {
            accumulate(grads, *x_node, y.len(), |gx| {
                for i in 0..y.len() {
                    gx[i] += gout[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Tanh { x_node, y } => {
            accumulate(grads, *x_node, y.len(), |gx| {
                for i in 0..y.len() {
                    gx[i] += gout[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Exp { x_node, y } => {
            accumulate(grads, *x_node, y.len(), |gx| {
                for i in 0..y.len() {
                    gx[i] += gout[i] * y[i];
                }
            });
        }
        Op::Ln { x } => {
            accumulate(grads, x.node, x.data.len(), |gx| {
                for i in 0..x.data.len() {
                    gx[i] += gout[i] / x.data[i];
                }
            });
        }
        Op::Clamp { x, lo, hi } => {
            accumulate(grads, x.node, x.data.len(), |gx| {
                for i in 0..x.data.len() {
                    if x.data[i] > *lo && x.data[i] < *hi {
                        gx[i] += gout[i];
                    }
                }
            });
        }
        Op::ConcatChannels { xs } => {
            let mut offset = 0;
            for x in xs {
                let len = x.data.len();
                accumulate(grads, x.node, len, |gx| {
                    for (g, s) in gx.iter_mut().zip(&gout[offset..offset + len]) {
                        *g += s;
                    }
                });
                offset += len;
            }
        }
        Op::Slice { x, from } => {
            let inner: usize = x.shape[1..].iter().product();
            let start = from * inner;
            accumulate(grads, x.node, x.data.len(), |gx| {
                for (g, s) in gx[start..start + gout.len()].iter_mut().zip(gout) {
                    *g += s;
                }
            });
        }
        Op::BroadcastMul { x, v } => {
            let [c, h, w] = x.shape[..] else { unreachable!() };
            let hw = h * w;
            accumulate(grads, x.node, x.data.len(), |gx| {
                for ch in 0..c {
                    let s = v.data[ch];
                    for i in 0..hw {
                        gx[ch * hw + i] += s * gout[ch * hw + i];
                    }
                }
            });
            accumulate(grads, v.node, c, |gv| {
                for ch in 0..c {
                    gv[ch] += gout[ch * hw..(ch + 1) * hw]
                        .iter()
                        .zip(&x.data[ch * hw..(ch + 1) * hw])
                        .map(|(g, xv)| g * xv)
                        .sum::<f64>();
                }
            });
        }
        Op::MulSpatialGate { x, g } => {
            let [c, h, w] = x.shape[..] else { unreachable!() };
            let hw = h * w;
            accumulate(grads, x.node, x.data.len(), |gx| {
                for ch in 0..c {
                    for i in 0..hw {
                        gx[ch * hw + i] += gout[ch * hw + i] * g.data[i];
                    }
                }
            });
            accumulate(grads, g.node, hw, |gg| {
                for ch in 0..c {
                    for i in 0..hw {
                        gg[i] += gout[ch * hw + i] * x.data[ch * hw + i];
                    }
                }
            });
        }
        Op::Hadamard { a, b } => {
            accumulate(grads, a.node, a.data.len(), |ga| {
                for i in 0..a.data.len() {
                    ga[i] += gout[i] * b.data[i];
                }
            });
            accumulate(grads, b.node, b.data.len(), |gb| {
                for i in 0..b.data.len() {
                    gb[i] += gout[i] * a.data[i];
                }
            });
        }
        Op::Add { a, b } => {
            accumulate(grads, a.node, a.data.len(), |ga| {
                for (g, s) in ga.iter_mut().zip(gout) {
                    *g += s;
                }
            });
            accumulate(grads, b.node, b.data.len(), |gb| {
                for (g, s) in gb.iter_mut().zip(gout) {
                    *g += s;
                }
            });
        }
        Op::Sub { a, b } => {
            accumulate(grads, a.node, a.data.len(), |ga| {
                for (g, s) in ga.iter_mut().zip(gout) {
                    *g += s;
                }
            });
            accumulate(grads, b.node, b.data.len(), |gb| {
                for (g, s) in gb.iter_mut().zip(gout) {
                    *g -= s;
                }
            });
        }
        Op::Scale { x, c } => {
            accumulate(grads, x.node, x.data.len(), |gx| {
                for (g, s) in gx.iter_mut().zip(gout) {
                    *g += c * s;
                }
            });
        }
        Op::Sum { x } => {
            accumulate(grads, x.node, x.data.len(), |gx| {
                for g in gx.iter_mut() {
                    *g += gout[0];
                }
            });
        }
        Op::Abs { x } => {
            accumulate(grads, x.node, x.data.len(), |gx| {
                for i in 0..x.data.len() {
                    gx[i] += gout[i] * x.data[i].signum() * f64::from(x.data[i] != 0.0);
                }
            });
        }
        Op::SoftmaxChannels { x_node, y, hw } => {
            let c = y.len() / hw;
            accumulate(grads, *x_node, y.len(), |gx| {
                for i in 0..*hw {
                    let dot: f64 = (0..c).map(|ch| gout[ch * hw + i] * y[ch * hw + i]).sum();
                    for ch in 0..c {
                        gx[ch * hw + i] += y[ch * hw + i] * (gout[ch * hw + i] - dot);
                    }
                }
            });
        }
        Op::SoftmaxVec { x_node, y } => {
            accumulate(grads, *x_node, y.len(), |gx| {
                let dot: f64 = gout.iter().zip(y.iter()).map(|(g, s)| g * s).sum();
                for i in 0..y.len() {
                    gx[i] += y[i] * (gout[i] - dot);
                }
            });
        }
        Op::ChannelConv1d { x, k } => {
            let c = x.shape[0] as i64;
            let ks = k.shape[0] as i64;
            let off = ks / 2;
            accumulate(grads, x.node, x.data.len(), |gx| {
                for i in 0..c {
                    for j in 0..ks {
                        let src = i + j - off;
                        if src >= 0 && src < c {
                            gx[src as usize] += gout[i as usize] * k.data[j as usize];
                        }
                    }
                }
            });
            accumulate(grads, k.node, k.data.len(), |gk| {
                for j in 0..ks {
                    let mut acc = 0.0;
                    for i in 0..c {
                        let src = i + j - off;
                        if src >= 0 && src < c {
                            acc += gout[i as usize] * x.data[src as usize];
                        }
                    }
                    gk[j as usize] += acc;
                }
            });
        }
        Op::GatherCell { x, row, col } => {
            let [c, h, w] = x.shape[..] else { unreachable!() };
            let hw = h * w;
            accumulate(grads, x.node, x.data.len(), |gx| {
                for ch in 0..c {
                    gx[ch * hw + row * w + col] += gout[ch];
                }
            });
        }
    }
}
