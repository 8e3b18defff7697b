//! Raw numeric kernels shared by the recording forward pass, the backward
//! pass, and the tape-free inference path. All tensors are flat row-major
//! slices; shapes travel alongside as plain integers.

/// Output spatial size for a conv/pool window.
pub fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// c[m,n] += a[k,m]^T * b[k,n]
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c_row[j] += acc;
        }
    }
}

/// Unfold one image [C,H,W] into columns [C*KH*KW, OH*OW].
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [f64],
) {
    let oh = out_dim(h, kh, stride, pad);
    let ow = out_dim(w, kw, stride, pad);
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    let mut row = 0usize;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let mut idx = 0usize;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for _ in 0..ow {
                            dst[idx] = 0.0;
                            idx += 1;
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[idx] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold columns [C*KH*KW, OH*OW] back into an image [C,H,W], accumulating
/// overlapping windows.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    img: &mut [f64],
) {
    let oh = out_dim(h, kh, stride, pad);
    let ow = out_dim(w, kw, stride, pad);
    let mut row = 0usize;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                let mut idx = 0usize;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += ow;
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Conv2d forward over a batch. input [N,C,H,W], weight [OC,C,KH,KW],
/// output [N,OC,OH,OW].
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    input: &[f64],
    weight: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = out_dim(h, kh, stride, pad);
    let ow = out_dim(w, kw, stride, pad);
    let ckk = c * kh * kw;
    let mut out = vec![0.0; n * oc * oh * ow];
    let mut col = vec![0.0; ckk * oh * ow];
    for i in 0..n {
        im2col(
            &input[i * c * h * w..(i + 1) * c * h * w],
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            &mut col,
        );
        matmul_acc(
            weight,
            &col,
            &mut out[i * oc * oh * ow..(i + 1) * oc * oh * ow],
            oc,
            ckk,
            oh * ow,
        );
    }
    out
}

/// Gradients of conv2d wrt input and weight.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>) {
    let oh = out_dim(h, kh, stride, pad);
    let ow = out_dim(w, kw, stride, pad);
    let ckk = c * kh * kw;
    let mut grad_in = vec![0.0; n * c * h * w];
    let mut grad_w = vec![0.0; oc * ckk];
    let mut col = vec![0.0; ckk * oh * ow];
    let mut col_grad = vec![0.0; ckk * oh * ow];
    for i in 0..n {
        let go = &grad_out[i * oc * oh * ow..(i + 1) * oc * oh * ow];
        im2col(
            &input[i * c * h * w..(i + 1) * c * h * w],
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            &mut col,
        );
        // dW += dOut * col^T
        matmul_a_bt_acc(go, &col, &mut grad_w, oc, oh * ow, ckk);
        // dCol = W^T * dOut
        col_grad.iter_mut().for_each(|v| *v = 0.0);
        matmul_at_b_acc(weight, go, &mut col_grad, oc, ckk, oh * ow);
        col2im_acc(
            &col_grad,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            &mut grad_in[i * c * h * w..(i + 1) * c * h * w],
        );
    }
    (grad_in, grad_w)
}

/// Max pool over a batch, returning values and flat argmax indices into the
/// input (one index per output element). Window == stride, no padding.
pub fn max_pool2d(
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    win: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = h / win;
    let ow = w / win;
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            let obase = (i * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + (oy * win) * w + ox * win;
                    let mut best = input[best_idx];
                    for ky in 0..win {
                        for kx in 0..win {
                            let idx = base + (oy * win + ky) * w + ox * win + kx;
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    arg[obase + oy * ow + ox] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

pub fn avg_pool2d(input: &[f64], n: usize, c: usize, h: usize, w: usize, win: usize) -> Vec<f64> {
    let oh = h / win;
    let ow = w / win;
    let inv = 1.0 / (win * win) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            let obase = (i * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..win {
                        for kx in 0..win {
                            acc += input[base + (oy * win + ky) * w + ox * win + kx];
                        }
                    }
                    out[obase + oy * ow + ox] = acc * inv;
                }
            }
        }
    }
    out
}

/// Row-wise softmax of logits [n, k], in place into a new buffer.
pub fn softmax_rows(logits: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * k..(i + 1) * k];
        let mut z = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones() {
        // 4x4 ones, 3x3 ones kernel, stride 1, pad 0 -> 2x2 of 9
        let input = vec![1.0; 16];
        let weight = vec![1.0; 9];
        let out = conv2d(&input, &weight, 1, 1, 4, 4, 1, 3, 3, 1, 0);
        assert_eq!(out, vec![9.0; 4]);
    }

    #[test]
    fn matmul_ones() {
        let a = vec![1.0; 6];
        let b = vec![1.0; 6];
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![3.0; 4]);
    }

    #[test]
    fn maxpool_picks_max_and_index() {
        let input = vec![1.0, 2.0, 3.0, 4.0]; // 2x2
        let (out, arg) = max_pool2d(&input, 1, 1, 2, 2, 2);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish data
        let (c, h, w, kh, kw, s, p) = (2, 5, 4, 3, 3, 1, 1);
        let oh = out_dim(h, kh, s, p);
        let ow = out_dim(w, kw, s, p);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * kh * kw * oh * ow)
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, c, h, w, kh, kw, s, p, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im_acc(&y, c, h, w, kh, kw, s, p, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
