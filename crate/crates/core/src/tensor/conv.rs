//! 3x3 valid convolution and its transpose, via im2col + gemm.
//!
//! Kernel layouts: conv kernels are `[c_out, c_in, 3, 3]`, deconv kernels are
//! `[c_in, c_out, 3, 3]`. With these layouts a deconv with kernel `k` is the
//! exact adjoint of a conv with the same buffer `k`.

use super::gemm::{gemm, Trans};

pub(crate) const K: usize = 3;
const KK: usize = K * K;

/// Output extent of a valid 3x3 convolution, `None` if the input is smaller
/// than the kernel.
pub fn conv2d_out_size(input: usize, stride: usize) -> Option<usize> {
    (input >= K).then(|| (input - K) / stride + 1)
}

pub fn deconv2d_out_size(input: usize, stride: usize, output_padding: usize) -> usize {
    (input - 1) * stride + K + output_padding
}

/// Spatial geometry shared by a conv and its transpose: `big` is the conv
/// input / deconv output, `small` the conv output / deconv input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub big_h: usize,
    pub big_w: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub stride: usize,
}

impl Geometry {
    fn small_len(&self) -> usize {
        self.small_h * self.small_w
    }

    fn big_len(&self) -> usize {
        self.big_h * self.big_w
    }
}

/// Gathers `[channels, big_h, big_w]` into `[channels * 9, small_h * small_w]`.
fn im2col(x: &[f64], channels: usize, g: Geometry, cols: &mut [f64]) {
    let p = g.small_len();
    for c in 0..channels {
        let plane = &x[c * g.big_len()..(c + 1) * g.big_len()];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((c * KK) + ky * K + kx) * p..][..p];
                for oy in 0..g.small_h {
                    let src = &plane[(oy * g.stride + ky) * g.big_w + kx..];
                    let dst = &mut row[oy * g.small_w..(oy + 1) * g.small_w];
                    if g.stride == 1 {
                        dst.copy_from_slice(&src[..g.small_w]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `[channels * 9, small_h * small_w]` into `[channels, big_h, big_w]`.
fn col2im_add(cols: &[f64], channels: usize, g: Geometry, x: &mut [f64]) {
    let p = g.small_len();
    for c in 0..channels {
        let plane = &mut x[c * g.big_len()..(c + 1) * g.big_len()];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((c * KK) + ky * K + kx) * p..][..p];
                for oy in 0..g.small_h {
                    let base = (oy * g.stride + ky) * g.big_w + kx;
                    let src = &row[oy * g.small_w..(oy + 1) * g.small_w];
                    for (ox, v) in src.iter().enumerate() {
                        plane[base + ox * g.stride] += v;
                    }
                }
            }
        }
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_bias_grad(dout: &[f64], plane: usize, dbias: &mut [f64]) {
    for (chunk, db) in dout.chunks(plane).zip(dbias.iter_mut()) {
        *db += chunk.iter().sum::<f64>();
    }
}

/// `x: [n, c_in, big_h, big_w]`, `k: [c_out, c_in * 9]` -> `[n, c_out, small_h, small_w]`.
pub(crate) fn conv_forward(
    x: &[f64],
    n: usize,
    c_in: usize,
    c_out: usize,
    k: &[f64],
    bias: Option<&[f64]>,
    g: Geometry,
) -> Vec<f64> {
    let p = g.small_len();
    let mut out = vec![0.0; n * c_out * p];
    let mut cols = vec![0.0; c_in * KK * p];
    for s in 0..n {
        im2col(&x[s * c_in * g.big_len()..][..c_in * g.big_len()], c_in, g, &mut cols);
        let o = &mut out[s * c_out * p..][..c_out * p];
        gemm(c_out, c_in * KK, p, k, Trans::N, &cols, Trans::N, 0.0, o);
        if let Some(b) = bias {
            add_channel_bias(o, b, p);
        }
    }
    out
}

/// Accumulates conv gradients into whichever of `dx`, `dk`, `dbias` are present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    n: usize,
    c_in: usize,
    c_out: usize,
    k: &[f64],
    g: Geometry,
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let p = g.small_len();
    let mut cols = vec![0.0; c_in * KK * p];
    for s in 0..n {
        let d = &dout[s * c_out * p..][..c_out * p];
        if let Some(dk) = dk.as_deref_mut() {
            im2col(&x[s * c_in * g.big_len()..][..c_in * g.big_len()], c_in, g, &mut cols);
            gemm(c_out, p, c_in * KK, d, Trans::N, &cols, Trans::T, 1.0, dk);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(c_in * KK, c_out, p, k, Trans::T, d, Trans::N, 0.0, &mut cols);
            col2im_add(&cols, c_in, g, &mut dx[s * c_in * g.big_len()..][..c_in * g.big_len()]);
        }
        if let Some(db) = dbias.as_deref_mut() {
            accumulate_channel_bias_grad(d, p, db);
        }
    }
}

/// `y: [n, c_in, small_h, small_w]`, `k: [c_in, c_out * 9]` -> `[n, c_out, big_h, big_w]`.
pub(crate) fn deconv_forward(
    y: &[f64],
    n: usize,
    c_in: usize,
    c_out: usize,
    k: &[f64],
    bias: Option<&[f64]>,
    g: Geometry,
) -> Vec<f64> {
    let p = g.small_len();
    let big = g.big_len();
    let mut out = vec![0.0; n * c_out * big];
    let mut cols = vec![0.0; c_out * KK * p];
    for s in 0..n {
        let ys = &y[s * c_in * p..][..c_in * p];
        gemm(c_out * KK, c_in, p, k, Trans::T, ys, Trans::N, 0.0, &mut cols);
        let o = &mut out[s * c_out * big..][..c_out * big];
        col2im_add(&cols, c_out, g, o);
        if let Some(b) = bias {
            add_channel_bias(o, b, big);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv_backward(
    y: &[f64],
    n: usize,
    c_in: usize,
    c_out: usize,
    k: &[f64],
    g: Geometry,
    dout: &[f64],
    mut dy: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let p = g.small_len();
    let big = g.big_len();
    let mut cols = vec![0.0; c_out * KK * p];
    for s in 0..n {
        let d = &dout[s * c_out * big..][..c_out * big];
        if dy.is_some() || dk.is_some() {
            im2col(d, c_out, g, &mut cols);
        }
        if let Some(dy) = dy.as_deref_mut() {
            gemm(c_in, c_out * KK, p, k, Trans::N, &cols, Trans::N, 1.0, &mut dy[s * c_in * p..][..c_in * p]);
        }
        if let Some(dk) = dk.as_deref_mut() {
            let ys = &y[s * c_in * p..][..c_in * p];
            gemm(c_in, p, c_out * KK, ys, Trans::N, &cols, Trans::T, 1.0, dk);
        }
        if let Some(db) = dbias.as_deref_mut() {
            accumulate_channel_bias_grad(d, big, db);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct six-loop convolution, independent of im2col.
    fn naive_conv(x: &[f64], c_in: usize, h: usize, w: usize, k: &[f64], c_out: usize, stride: usize) -> Vec<f64> {
        let oh = conv2d_out_size(h, stride).unwrap();
        let ow = conv2d_out_size(w, stride).unwrap();
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += k[((co * c_in + ci) * 3 + ky) * 3 + kx]
                                    * x[(ci * h + oy * stride + ky) * w + ox * stride + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let (c_in, c_out, h, w) = (2, 3, 7, 6);
        let x: Vec<f64> = (0..c_in * h * w).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let k: Vec<f64> = (0..c_out * c_in * 9).map(|i| ((i * 104729) % 7) as f64 - 3.0).collect();
        for stride in [1, 2] {
            let g = Geometry {
                big_h: h,
                big_w: w,
                small_h: conv2d_out_size(h, stride).unwrap(),
                small_w: conv2d_out_size(w, stride).unwrap(),
                stride,
            };
            let got = conv_forward(&x, 1, c_in, c_out, &k, None, g);
            assert_eq!(got, naive_conv(&x, c_in, h, w, &k, c_out, stride));
        }
    }

    #[test]
    fn out_sizes() {
        assert_eq!(conv2d_out_size(32, 2), Some(15));
        assert_eq!(conv2d_out_size(15, 1), Some(13));
        assert_eq!(conv2d_out_size(2, 1), None);
        assert_eq!(deconv2d_out_size(15, 2, 0), 31);
        assert_eq!(deconv2d_out_size(15, 2, 1), 32);
        assert_eq!(deconv2d_out_size(9, 1, 0), 11);
    }
}
