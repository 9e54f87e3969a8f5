use super::{gemm_nn, Tensor};
use crate::error::{shape_err, Error, Result};

/// Weights of a 2-D cross-correlation layer.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 {
            return shape_err(format!("conv weight must be out×in×kh×kw, got {ws:?}"));
        }
        if ws[2].is_multiple_of(2) || ws[3].is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("conv kernel must be odd, got {}×{}", ws[2], ws[3])));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != [ws[0]] {
                return shape_err(format!("conv bias {:?} for {} output channels", b.shape(), ws[0]));
            }
        }
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, self)
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        (input + 2 * self.padding).checked_sub(kernel).map(|v| v / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox·stride + kx − pad` lies inside `0..w`.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 };
        let hi = if self.w + p > kx { (self.w + p - kx).div_ceil(s).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Column buffer [c_in·kh·kw × ho·wo], rows ordered (channel, ky, kx).
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let l = self.ho * self.wo;
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let base = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[base..base + hi - lo]);
                        } else {
                            for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[base + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let l = self.ho * self.wo;
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let base = lo * self.stride + kx - self.pad;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        let line = &src[oy * self.wo + lo..oy * self.wo + hi];
                        for (j, &v) in line.iter().enumerate() {
                            dst[base + j * self.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` (N×C_in×H×W) with `p.weight` (C_out×C_in×kh×kw).
///
/// Each output sums weight·input over (channel, ky, kx) in row-major order,
/// then adds the bias.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let xs = x.shape();
    let ws = p.weight.shape();
    if xs.len() != 4 {
        return shape_err(format!("conv2d input must be N×C×H×W, got {xs:?}"));
    }
    if xs[1] != ws[1] {
        return shape_err(format!("conv2d: input has {} channels, weight expects {}", xs[1], ws[1]));
    }
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    let (Some(ho), Some(wo)) = (p.out_size(h, kh), p.out_size(w, kw)) else {
        return shape_err(format!("conv2d: kernel {kh}×{kw} larger than padded input {h}×{w}"));
    };
    let g = Geometry { c_in, h, w, kh, kw, ho, wo, stride: p.stride, pad: p.padding };
    let k = c_in * kh * kw;
    let l = ho * wo;
    let in_sz = c_in * h * w;
    let out_sz = c_out * l;

    let mut out = vec![0.0; n * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * l] };
    for i in 0..n {
        let img = &x.data()[i * in_sz..(i + 1) * in_sz];
        let b: &[f64] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        let dst = &mut out[i * out_sz..(i + 1) * out_sz];
        gemm_nn(c_out, k, l, p.weight.data(), b, dst);
        if let Some(bias) = &p.bias {
            for (row, &bv) in dst.chunks_mut(l).zip(bias.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    let mut inputs = vec![x.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        inputs.push(b.clone());
    }
    let (xc, wc) = (x.clone(), p.weight.clone());
    Ok(Tensor::from_op(
        vec![n, c_out, ho, wo],
        out,
        inputs,
        Box::new(move |grad, needs| {
            let mut gx = needs[0].then(|| vec![0.0; n * in_sz]);
            let mut gw = needs[1].then(|| vec![0.0; c_out * k]);
            let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * l }];
            let mut dcols = vec![0.0; k * l];
            // weightᵀ, k × c_out, and the weight gradient in the same layout
            let mut wt = vec![0.0; k * c_out];
            for (o, row) in wc.data().chunks(k).enumerate() {
                for (r, &v) in row.iter().enumerate() {
                    wt[r * c_out + o] = v;
                }
            }
            let mut gwt = vec![0.0; if gw.is_some() { k * c_out } else { 0 }];
            let mut got = vec![0.0; l * c_out];
            for i in 0..n {
                let go = &grad[i * out_sz..(i + 1) * out_sz];
                let img = &xc.data()[i * in_sz..(i + 1) * in_sz];
                if gw.is_some() {
                    for (o, row) in go.chunks(l).enumerate() {
                        for (q, &v) in row.iter().enumerate() {
                            got[q * c_out + o] = v;
                        }
                    }
                    let b: &[f64] = if g.is_pointwise() {
                        img
                    } else {
                        g.im2col(img, &mut cols);
                        &cols
                    };
                    gemm_nn(k, l, c_out, b, &got, &mut gwt);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[i * in_sz..(i + 1) * in_sz];
                    if g.is_pointwise() {
                        gemm_nn(k, c_out, l, &wt, go, dst);
                    } else {
                        dcols.fill(0.0);
                        gemm_nn(k, c_out, l, &wt, go, &mut dcols);
                        g.col2im(&dcols, dst);
                    }
                }
            }
            if let Some(gw) = gw.as_mut() {
                for (r, row) in gwt.chunks(c_out).enumerate() {
                    for (o, &v) in row.iter().enumerate() {
                        gw[o * k + r] = v;
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![0.0; c_out];
                    for i in 0..n {
                        for (acc, row) in gb.iter_mut().zip(grad[i * out_sz..(i + 1) * out_sz].chunks(l)) {
                            *acc += row.iter().sum::<f64>();
                        }
                    }
                    gb
                }));
            }
            grads
        }),
    ))
}

fn spatial_dims(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 3 {
        return shape_err(format!("{what} needs at least 3 dims, got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((x.numel() / (h * w), h, w))
}

/// 2×2 mean pooling with stride 2 over the last two axes.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = spatial_dims(x, "avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!("avg_pool2 needs even spatial dims, got {h}×{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let (r0, r1) = (2 * oy * w, (2 * oy + 1) * w);
                let (c0, c1) = (2 * ox, 2 * ox + 1);
                out[(p * ho + oy) * wo + ox] = ((src[r0 + c0] + src[r0 + c1]) + (src[r1 + c0] + src[r1 + c1])) * 0.25;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Ok(Tensor::from_op(
        shape,
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                for y in 0..h {
                    for xx in 0..w {
                        gx[(p * h + y) * w + xx] = 0.25 * g[(p * ho + y / 2) * wo + xx / 2];
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Source taps and fraction for one output coordinate of a 2× bilinear
/// enlargement sampled at pixel centres, clamped at the borders.
fn taps(o: usize, n: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

/// 2× bilinear upsampling over the last two axes.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = spatial_dims(x, "upsample2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let ty: Vec<_> = (0..ho).map(|o| taps(o, h)).collect();
    let tx: Vec<_> = (0..wo).map(|o| taps(o, w)).collect();
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (a, b) = (src[y0 * w + x0], src[y0 * w + x1]);
                let (c, d) = (src[y1 * w + x0], src[y1 * w + x1]);
                let top = a + fx * (b - a);
                let bottom = c + fx * (d - c);
                out[(p * ho + oy) * wo + ox] = top + fy * (bottom - top);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Ok(Tensor::from_op(
        shape,
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = g[(p * ho + oy) * wo + ox];
                        dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                        dst[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Mean over the two spatial axes: N×C×H×W to N×C.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return shape_err(format!("global_avg_pool needs N×C×H×W, got {s:?}"));
    }
    let hw = s[2] * s[3];
    let out = x.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
    Ok(Tensor::from_op(
        vec![s[0], s[1]],
        out,
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect())]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_many;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pointwise_identity_kernel_is_identity() {
        let x = rand_tensor(&[2, 3, 4, 5], 0);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let p = ConvParams::new(w, Some(Tensor::zeros(&[3])), 1, 0).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().data(), x.data());
    }

    #[test]
    fn ones_kernel_sums_constant_neighbourhood() {
        let c = 1.75;
        let x = Tensor::full(&[1, 1, 5, 5], c);
        let p = ConvParams::new(Tensor::full(&[1, 1, 3, 3], 1.0), None, 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(y.data()[yy * 5 + xx], 9.0 * c);
            }
        }
        // corner sees four in-bounds taps
        assert_eq!(y.data()[0], 4.0 * c);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let p = ConvParams::new(Tensor::zeros(&[4, 3, 3, 3]), None, 1, 1).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(Error::Shape(_))));
        assert!(ConvParams::new(Tensor::zeros(&[4, 3, 2, 2]), None, 1, 0).is_err());
        assert!(ConvParams::new(Tensor::zeros(&[4, 3, 3, 3]), Some(Tensor::zeros(&[3])), 1, 0).is_err());
    }

    #[test]
    fn strided_output_size() {
        let x = Tensor::zeros(&[1, 1, 28, 28]);
        let p = ConvParams::new(Tensor::zeros(&[2, 1, 3, 3]), None, 2, 1).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().shape(), &[1, 2, 14, 14]);
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(avg_pool2(&x).unwrap().data(), &[4.0]);
        assert!(avg_pool2(&Tensor::zeros(&[1, 1, 3, 4])).is_err());

        let c = Tensor::full(&[2, 3, 6, 4], 0.3);
        let down = avg_pool2(&c).unwrap();
        assert!(down.data().iter().all(|&v| v == 0.3));
        let up = upsample2(&c).unwrap();
        assert_eq!(up.shape(), &[2, 3, 12, 8]);
        assert!(up.data().iter().all(|&v| v == 0.3));
        assert_eq!(upsample2(&down).unwrap().data(), c.data());
    }

    #[test]
    fn pool_then_upsample_keeps_channel_mean() {
        for seed in 0..10 {
            let x = rand_tensor(&[2, 3, 8, 6], seed);
            let y = upsample2(&avg_pool2(&x).unwrap()).unwrap();
            for (a, b) in x.data().chunks(48).zip(y.data().chunks(48)) {
                let (ma, mb) = (a.iter().sum::<f64>() / 48.0, b.iter().sum::<f64>() / 48.0);
                assert!((ma - mb).abs() < 1e-12, "{ma} vs {mb}");
            }
        }
    }

    #[test]
    fn spatial_gradients() {
        for seed in 0..4 {
            let x = rand_tensor(&[2, 2, 6, 4], seed);
            let w = rand_tensor(&[3, 2, 3, 3], seed + 10);
            let b = rand_tensor(&[3], seed + 20);
            let mix = rand_tensor(&[2, 3, 3, 2], seed + 30);
            let r = finite_diff_check_many(
                |t| {
                    let p = ConvParams::new(t[1].clone(), Some(t[2].clone()), 2, 1)?;
                    let y = upsample2(&conv2d(&t[0], &p)?)?;
                    avg_pool2(&y)?.mul(&mix)?.sum().add(&global_avg_pool(&y)?.sum())
                },
                &[x, w, b],
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}
