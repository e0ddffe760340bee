//! Small dense-convolution kernels shared by the policy network and the
//! tiny CNN victim.
//!
//! Convolutions are 3×3 with padding 1 and go through a patch matrix
//! (`im2col`): one row of `in_ch · 9` inputs per output position, laid out
//! `(channel, kernel_row, kernel_col)` to match the weight tensors.

pub(crate) const KERNEL: usize = 3;

/// Output size of a padding-1, 3×3 convolution.
pub(crate) fn conv_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

pub(crate) fn im2col(input: &[f64], in_ch: usize, h: usize, w: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let kw = in_ch * KERNEL * KERNEL;
    let mut cols = vec![0.0; oh * ow * kw];
    for r in 0..oh {
        for k in 0..ow {
            let row = &mut cols[(r * ow + k) * kw..(r * ow + k + 1) * kw];
            for dr in 0..KERNEL {
                let ir = stride * r + dr;
                if ir == 0 || ir > h {
                    continue;
                }
                for dk in 0..KERNEL {
                    let ik = stride * k + dk;
                    if ik == 0 || ik > w {
                        continue;
                    }
                    for c in 0..in_ch {
                        row[(c * KERNEL + dr) * KERNEL + dk] = input[(c * h + ir - 1) * w + ik - 1];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Scatter-adds patch-matrix gradients back onto the input layout.
pub(crate) fn col2im(grad_cols: &[f64], in_ch: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let kw = in_ch * KERNEL * KERNEL;
    let mut out = vec![0.0; in_ch * h * w];
    for r in 0..oh {
        for k in 0..ow {
            let row = &grad_cols[(r * ow + k) * kw..(r * ow + k + 1) * kw];
            for dr in 0..KERNEL {
                let ir = stride * r + dr;
                if ir == 0 || ir > h {
                    continue;
                }
                for dk in 0..KERNEL {
                    let ik = stride * k + dk;
                    if ik == 0 || ik > w {
                        continue;
                    }
                    for c in 0..in_ch {
                        out[(c * h + ir - 1) * w + ik - 1] += row[(c * KERNEL + dr) * KERNEL + dk];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[f, p] = bias[f] + weight[f] · cols[p]`, filter-major.
pub(crate) fn conv_cols(cols: &[f64], positions: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let kw = weight.len() / bias.len();
    let mut out = Vec::with_capacity(bias.len() * positions);
    for (f, &b) in bias.iter().enumerate() {
        let wf = &weight[f * kw..(f + 1) * kw];
        out.extend((0..positions).map(|p| b + dot(wf, &cols[p * kw..(p + 1) * kw])));
    }
    out
}

/// Backward of [`conv_cols`]: accumulates weight and bias gradients and,
/// when asked, the patch-matrix gradient.
pub(crate) fn conv_cols_backward(
    cols: &[f64],
    positions: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_cols: Option<&mut [f64]>,
) {
    let kw = weight.len() / grad_b.len();
    for f in 0..grad_b.len() {
        let wf = &weight[f * kw..(f + 1) * kw];
        for p in 0..positions {
            let g = grad_out[f * positions + p];
            if g == 0.0 {
                continue;
            }
            grad_b[f] += g;
            axpy(&mut grad_w[f * kw..(f + 1) * kw], g, &cols[p * kw..(p + 1) * kw]);
            if let Some(gc) = grad_cols.as_deref_mut() {
                axpy(&mut gc[p * kw..(p + 1) * kw], g, wf);
            }
        }
    }
}
