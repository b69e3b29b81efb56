//! Spatial operators on `[N, C, H, W]` feature maps.

use crate::error::{NtaaError, Result};

use super::element::matmul_into;
use super::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    size: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.size * self.size
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.size == 1 && self.stride == 1
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (s, st, p) = (g.size, g.stride, g.pad as isize);
    let ol = g.out_len();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..s {
            for kx in 0..s {
                let row = &mut cols[((ci * s + ky) * s + kx) * ol..][..ol];
                for oy in 0..g.ho {
                    let iy = (oy * st + ky) as isize - p;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * st + kx) as isize - p;
                        *d =
                            if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (s, st, p) = (g.size, g.stride, g.pad as isize);
    let ol = g.out_len();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..s {
            for kx in 0..s {
                let row = &cols[((ci * s + ky) * s + kx) * ol..][..ol];
                for oy in 0..g.ho {
                    let iy = (oy * st + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * st + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn spatial_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] if h >= 1 && w >= 1 => Ok((n, c, h, w)),
        _ => {
            Err(NtaaError::shape(format!("{what} expects [N,C,H,W] with H,W >= 1, got {shape:?}")))
        }
    }
}

impl<T: Element> Graph<T> {
    /// Stride-1 "same" convolution (cross-correlation) with zero padding `(s-1)/2`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        self.conv2d_strided(x, kernel, bias, 1)
    }

    /// Convolution with zero padding `(s-1)/2` and the given stride; `s` must be odd.
    pub fn conv2d_strided(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = spatial_dims(self.shape(x), "conv2d input")?;
        let ks = self.shape(kernel).to_vec();
        let (cout, kcin, size) = match ks[..] {
            [co, ci, a, b] if a == b && a % 2 == 1 => (co, ci, a),
            _ => {
                return Err(NtaaError::shape(format!(
                    "conv2d kernel must be [Cout,Cin,s,s] with odd s, got {ks:?}"
                )))
            }
        };
        if kcin != cin {
            return Err(NtaaError::shape(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kcin}"
            )));
        }
        if stride == 0 {
            return Err(NtaaError::arg("conv2d stride must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(NtaaError::shape(format!(
                    "conv2d bias {:?} for {cout} outputs",
                    self.shape(b)
                )));
            }
        }
        let pad = (size - 1) / 2;
        let ho = (h + 2 * pad - size) / stride + 1;
        let wo = (w + 2 * pad - size) / stride + 1;
        let g = ConvGeom { cin, h, w, size, stride, pad, ho, wo };
        let (pl, ol) = (g.patch_len(), g.out_len());
        let xin = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![T::zero(); n * cout * ol];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); pl * ol] };
        for s in 0..n {
            let xs = &xin[s * cin * h * w..(s + 1) * cin * h * w];
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            matmul_into(
                kd,
                false,
                b,
                false,
                &mut out[s * cout * ol..(s + 1) * cout * ol],
                cout,
                pl,
                ol,
                false,
            );
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (i, chunk) in out.chunks_mut(ol).enumerate() {
                let bv = bd[i % cout];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let out = Tensor::new(&[n, cout, ho, wo], out)?;
        self.push(
            "conv2d",
            out,
            &inputs,
            Box::new(move |c| {
                let (xin, kd) = (c.inputs[0].data(), c.inputs[1].data());
                let mut gx = c.needs[0].then(|| vec![T::zero(); xin.len()]);
                let mut gk = c.needs[1].then(|| vec![T::zero(); kd.len()]);
                let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { pl * ol }];
                let mut dcols = vec![T::zero(); if gx.is_some() { pl * ol } else { 0 }];
                for s in 0..n {
                    let go = &c.grad[s * cout * ol..(s + 1) * cout * ol];
                    let xs = &xin[s * cin * h * w..(s + 1) * cin * h * w];
                    if let Some(gk) = gk.as_mut() {
                        let b: &[T] = if g.is_pointwise() {
                            xs
                        } else {
                            im2col(xs, &g, &mut cols);
                            &cols
                        };
                        matmul_into(go, false, b, true, gk, cout, ol, pl, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[s * cin * h * w..(s + 1) * cin * h * w];
                        if g.is_pointwise() {
                            matmul_into(kd, true, go, false, dst, pl, cout, ol, true);
                        } else {
                            matmul_into(kd, true, go, false, &mut dcols, pl, cout, ol, false);
                            col2im_add(&dcols, &g, dst);
                        }
                    }
                }
                let mut grads = vec![gx, gk];
                if c.inputs.len() == 3 {
                    grads.push(c.needs[2].then(|| {
                        let mut gb = vec![T::zero(); cout];
                        for (i, chunk) in c.grad.chunks(ol).enumerate() {
                            gb[i % cout] = gb[i % cout] + chunk.iter().copied().sum::<T>();
                        }
                        gb
                    }));
                }
                grads
            }),
        )
    }

    /// 3x3 max pooling, stride 1, padded cells ignored. Ties route to the lowest linear index.
    pub fn max_pool3(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = spatial_dims(&shape, "max_pool3")?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        let mut argmax = vec![0u32; xd.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let mut best = usize::MAX;
                    for yy in y.saturating_sub(1)..(y + 2).min(h) {
                        for xw in xx.saturating_sub(1)..(xx + 2).min(w) {
                            let idx = yy * w + xw;
                            if best == usize::MAX || xd[base + idx] > xd[base + best] {
                                best = idx;
                            }
                        }
                    }
                    out[base + y * w + xx] = xd[base + best];
                    argmax[base + y * w + xx] = (base + best) as u32;
                }
            }
        }
        self.push(
            "max_pool3",
            Tensor::new(&shape, out)?,
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); ctx.grad.len()];
                for (&src, &gv) in argmax.iter().zip(ctx.grad) {
                    g[src as usize] = g[src as usize] + gv;
                }
                vec![Some(g)]
            }),
        )
    }

    /// 3x3 average pooling, stride 1; the divisor counts in-bounds cells only.
    pub fn avg_pool3(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = spatial_dims(&shape, "avg_pool3")?;
        let window = move |y: usize, xx: usize| {
            let ys = y.saturating_sub(1)..(y + 2).min(h);
            let xs = xx.saturating_sub(1)..(xx + 2).min(w);
            (ys, xs)
        };
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let (ys, xs) = window(y, xx);
                    let cnt = ys.len() * xs.len();
                    let mut s = T::zero();
                    for yy in ys {
                        for xw in xs.clone() {
                            s = s + xd[base + yy * w + xw];
                        }
                    }
                    out[base + y * w + xx] = s / T::c(cnt as f64);
                }
            }
        }
        self.push(
            "avg_pool3",
            Tensor::new(&shape, out)?,
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); ctx.grad.len()];
                for p in 0..n * c {
                    let base = p * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let (ys, xs) = window(y, xx);
                            let share =
                                ctx.grad[base + y * w + xx] / T::c((ys.len() * xs.len()) as f64);
                            for yy in ys {
                                for xw in xs.clone() {
                                    g[base + yy * w + xw] = g[base + yy * w + xw] + share;
                                }
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Replaces every spatial position with its channel mean ("globalization").
    pub fn global_avg_broadcast(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, _, h, w) = spatial_dims(&shape, "global_avg_broadcast")?;
        let hw = h * w;
        let inv = T::one() / T::c(hw as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .flat_map(|plane| {
                let m = plane.iter().copied().sum::<T>() * inv;
                std::iter::repeat_n(m, hw)
            })
            .collect();
        self.push(
            "global_avg_broadcast",
            Tensor::new(&shape, data)?,
            &[x],
            Box::new(move |c| {
                let g = c
                    .grad
                    .chunks(hw)
                    .flat_map(|plane| {
                        let m = plane.iter().copied().sum::<T>() * inv;
                        std::iter::repeat_n(m, hw)
                    })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Channel means, `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = spatial_dims(&shape, "global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::c(hw as f64);
        let data =
            self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.push(
            "global_avg_pool",
            Tensor::new(&[n, c], data)?,
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.iter().flat_map(|&v| std::iter::repeat_n(v * inv, hw)).collect();
                vec![Some(g)]
            }),
        )
    }
}
