//! Layer primitives on channel-major `[C][H][W]` buffers, each with a hand
//! written backward pass.

/// `C = A B + beta C` with explicit row/column strides for `A` and `B`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches, and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds 3x3 zero-padded neighbourhoods: row `ci*9 + ky*3 + kx`, column
/// `y*w + x`.
pub(crate) fn im2col(input: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; cin * hw];
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

/// 3x3 "same" convolution. `weights` is `[cout][cin][3][3]`. Returns the
/// output and the unfolded input needed by [`conv3x3_backward`].
pub(crate) fn conv3x3_forward(
    weights: &[f64],
    bias: &[f64],
    cin: usize,
    cout: usize,
    (h, w): (usize, usize),
    input: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let cols = im2col(input, cin, h, w);
    let mut out = vec![0.0; cout * hw];
    for (co, b) in bias.iter().enumerate() {
        out[co * hw..(co + 1) * hw].fill(*b);
    }
    gemm(
        cout,
        cin * 9,
        hw,
        weights,
        (cin * 9, 1),
        &cols,
        (hw, 1),
        1.0,
        &mut out,
    );
    (out, cols)
}

/// Accumulates weight and bias gradients; returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    weights: &[f64],
    cin: usize,
    cout: usize,
    (h, w): (usize, usize),
    cols: &[f64],
    dout: &[f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let hw = h * w;
    let k = cin * 9;
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dout[co * hw..(co + 1) * hw].iter().sum::<f64>();
    }
    // dW += dout * cols^T
    gemm(cout, hw, k, dout, (hw, 1), cols, (1, hw), 1.0, dweights);
    // dcols = W^T * dout
    let mut dcols = vec![0.0; k * hw];
    gemm(k, cout, hw, weights, (1, k), dout, (hw, 1), 0.0, &mut dcols);
    col2im(&dcols, cin, h, w)
}

pub(crate) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

pub(crate) fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

pub(crate) fn silu_forward(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| silu(*v)).collect()
}

pub(crate) fn silu_backward(z: &[f64], dout: &[f64]) -> Vec<f64> {
    z.iter().zip(dout).map(|(z, d)| d * silu_grad(*z)).collect()
}

/// 2x2 average pooling; `h` and `w` must be even.
pub(crate) fn avg_pool2(input: &[f64], c: usize, (h, w): (usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..];
        for y in 0..oh {
            for x in 0..ow {
                let s = src[2 * y * w + 2 * x]
                    + src[2 * y * w + 2 * x + 1]
                    + src[(2 * y + 1) * w + 2 * x]
                    + src[(2 * y + 1) * w + 2 * x + 1];
                out[ch * oh * ow + y * ow + x] = 0.25 * s;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(dout: &[f64], c: usize, (h, w): (usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut din = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                din[ch * h * w + y * w + x] = 0.25 * dout[ch * oh * ow + (y / 2) * ow + x / 2];
            }
        }
    }
    din
}

/// Nearest-neighbour 2x upsampling from `(h, w)`.
pub(crate) fn upsample2(input: &[f64], c: usize, (h, w): (usize, usize)) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[ch * oh * ow + y * ow + x] = input[ch * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dout: &[f64], c: usize, (h, w): (usize, usize)) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut din = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                din[ch * h * w + (y / 2) * w + x / 2] += dout[ch * oh * ow + y * ow + x];
            }
        }
    }
    din
}

/// `[sin(tau f_0) .. sin(tau f_{d/2-1}), cos(tau f_0) ..]` with geometric
/// frequencies from 1 down to 1e-4.
pub fn sinusoidal_embedding(tau: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; 2 * half];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let (s, c) = (tau * freq).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
    out
}
