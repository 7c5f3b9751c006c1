//! Dense compute kernels shared by tape forward and backward passes.

use super::tensor::Tensor;
use super::Real;

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut od[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `[m,k] x [n,k]^T -> [m,n]`
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            od[i * n + j] = s;
        }
    }
    out
}

/// `[k,m]^T x [k,n] -> [m,n]`
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for p in 0..k {
        for i in 0..m {
            let api = ad[p * m + i];
            if api == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut od[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

pub struct ConvGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

pub fn conv_out_hw(h: usize, w: usize, kh: usize, kw: usize, g: &ConvGeom) -> (usize, usize) {
    let ho = (h + 2 * g.padding.0 - kh) / g.stride.0 + 1;
    let wo = (w + 2 * g.padding.1 - kw) / g.stride.1 + 1;
    (ho, wo)
}

/// 2-D convolution: `x [B,Ci,H,W]`, `w [Co,Ci,kh,kw]`, `b [Co]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = conv_out_hw(h, wd, kh, kw, g);
    let mut out = Tensor::zeros(&[bs, co, ho, wo]);
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let od = out.data_mut();
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    for n in 0..bs {
        for oc in 0..co {
            let bias = bd[oc];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias;
                    for ic in 0..ci {
                        let xbase = ((n * ci + ic) * h) * wd;
                        let wbase = ((oc * ci + ic) * kh) * kw;
                        for ki in 0..kh {
                            let ih = (oh * sh + ki).wrapping_sub(ph);
                            if ih >= h {
                                continue;
                            }
                            let xrow = xbase + ih * wd;
                            let wrow = wbase + ki * kw;
                            for kj in 0..kw {
                                let iw = (ow * sw + kj).wrapping_sub(pw);
                                if iw >= wd {
                                    continue;
                                }
                                acc += xd[xrow + iw] * wdat[wrow + kj];
                            }
                        }
                    }
                    od[((n * co + oc) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] w.r.t. input, weights and bias.
pub fn conv2d_backward<T: Real>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[co]);
    let (gd, xd, wdat) = (grad.data(), x.data(), w.data());
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    for n in 0..bs {
        for oc in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let gv = gd[((n * co + oc) * ho + oh) * wo + ow];
                    if gv == T::zero() {
                        continue;
                    }
                    gb.data_mut()[oc] += gv;
                    for ic in 0..ci {
                        let xbase = ((n * ci + ic) * h) * wd;
                        let wbase = ((oc * ci + ic) * kh) * kw;
                        for ki in 0..kh {
                            let ih = (oh * sh + ki).wrapping_sub(ph);
                            if ih >= h {
                                continue;
                            }
                            let xrow = xbase + ih * wd;
                            let wrow = wbase + ki * kw;
                            for kj in 0..kw {
                                let iw = (ow * sw + kj).wrapping_sub(pw);
                                if iw >= wd {
                                    continue;
                                }
                                gx.data_mut()[xrow + iw] += gv * wdat[wrow + kj];
                                gw.data_mut()[wrow + kj] += gv * xd[xrow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Max pooling over `x [B,C,H,W]`; returns output and flat argmax indices.
/// Ties resolve to the first element in row-major scan order.
pub fn maxpool2d<T: Real>(
    x: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> (Tensor<T>, Vec<u32>) {
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let ho = (h - kh) / sh + 1;
    let wo = (w - kw) / sw + 1;
    let mut out = Tensor::zeros(&[bs, c, ho, wo]);
    let mut arg = vec![0u32; bs * c * ho * wo];
    let xd = x.data();
    let od = out.data_mut();
    for n in 0..bs {
        for ch in 0..c {
            let base = (n * c + ch) * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ki in 0..kh {
                        let row = base + (oh * sh + ki) * w + ow * sw;
                        for kj in 0..kw {
                            let v = xd[row + kj];
                            if v > best {
                                best = v;
                                best_idx = row + kj;
                            }
                        }
                    }
                    let o = ((n * c + ch) * ho + oh) * wo + ow;
                    od[o] = best;
                    arg[o] = best_idx as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2d_backward<T: Real>(grad: &Tensor<T>, arg: &[u32], in_shape: &[usize]) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_shape);
    for (g, &i) in grad.data().iter().zip(arg) {
        gx.data_mut()[i as usize] += *g;
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1., -2., 3., 0.5, 5., -6.]).unwrap();
        let b = Tensor::<f64>::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let c = matmul(&a, &b);

        let bt = {
            let mut d = vec![0.0; 12];
            for i in 0..3 {
                for j in 0..4 {
                    d[j * 3 + i] = b.data()[i * 4 + j];
                }
            }
            Tensor::new(vec![4, 3], d).unwrap()
        };
        assert_eq!(matmul_nt(&a, &bt).data(), c.data());

        let at = {
            let mut d = vec![0.0; 6];
            for i in 0..2 {
                for j in 0..3 {
                    d[j * 2 + i] = a.data()[i * 3 + j];
                }
            }
            Tensor::new(vec![3, 2], d).unwrap()
        };
        assert_eq!(matmul_tn(&at, &b).data(), c.data());
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::new(vec![1, 1, 3, 3], (0..9).map(|i| i as f64).collect()).unwrap();
        let w = Tensor::<f64>::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::<f64>::new(vec![1], vec![0.5]).unwrap();
        let g = ConvGeom { stride: (1, 1), padding: (0, 0) };
        let y = conv2d(&x, &w, &b, &g);
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        for i in 0..9 {
            assert_eq!(y.data()[i], i as f64 + 0.5);
        }
    }

    #[test]
    fn conv_padding_and_stride_shape() {
        let x = Tensor::<f64>::zeros(&[2, 3, 8, 8]);
        let w = Tensor::<f64>::zeros(&[5, 3, 3, 3]);
        let b = Tensor::<f64>::zeros(&[5]);
        let g = ConvGeom { stride: (2, 2), padding: (1, 1) };
        let y = conv2d(&x, &w, &b, &g);
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn maxpool_forward_and_scatter() {
        let x = Tensor::<f64>::new(
            vec![1, 1, 4, 4],
            vec![
                1., 2., 3., 4., //
                5., 6., 7., 8., //
                9., 10., 11., 12., //
                13., 14., 15., 16.,
            ],
        )
        .unwrap();
        let (y, arg) = maxpool2d(&x, (2, 2), (2, 2));
        assert_eq!(y.data(), &[6., 8., 14., 16.]);
        let g = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let gx = maxpool2d_backward(&g, &arg, &[1, 1, 4, 4]);
        assert_eq!(gx.data()[5], 1.0);
        assert_eq!(gx.data()[7], 2.0);
        assert_eq!(gx.data()[13], 3.0);
        assert_eq!(gx.data()[15], 4.0);
        assert_eq!(gx.sum(), 10.0);
    }
}
