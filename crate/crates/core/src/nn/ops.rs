//! Layer kernels with explicit backward passes.

use super::scalar::{gemm, Mat, Scalar};
use super::tensor::Tensor;

pub(crate) const BN_EPS: f64 = 1e-5;

/// Copies `x` into a zero-bordered `(c, n, h + 2, w + 2)` buffer.
///
/// In the flattened padded layout the 3x3 neighbour `(ky, kx)` of every
/// output position `q` sits at `q + ky * (w + 2) + kx`, so each kernel tap is
/// one matrix product over a shifted view of the buffer. Positions that fall
/// on the border columns or rows produce values that are later discarded.
fn pad<T: Scalar>(x: &Tensor<T>, buf: &mut Vec<T>) {
    let (h, w) = (x.height, x.width);
    let wp = w + 2;
    let plane = (h + 2) * wp;
    buf.clear();
    buf.resize(x.channels * x.batch * plane, T::ZERO);
    for c in 0..x.channels {
        for n in 0..x.batch {
            let src = x.sample_plane(c, n);
            let dst = &mut buf[(c * x.batch + n) * plane..][..plane];
            for y in 0..h {
                dst[(y + 1) * wp + 1..][..w].copy_from_slice(&src[y * w..][..w]);
            }
        }
    }
}

/// Geometry of the padded layout.
struct Padded {
    wp: usize,
    plane: usize,
    /// Row stride between channels.
    stride: usize,
    /// Number of output positions computed per channel.
    len: usize,
}

impl Padded {
    fn of<T: Scalar>(x: &Tensor<T>) -> Padded {
        let wp = x.width + 2;
        let plane = (x.height + 2) * wp;
        let stride = x.batch * plane;
        Padded { wp, plane, stride, len: stride - 2 * wp - 2 }
    }

    fn tap_offset(&self, tap: usize) -> usize {
        (tap / 3) * self.wp + tap % 3
    }

    fn out_index(&self, n: usize, y: usize, x: usize) -> usize {
        n * self.plane + y * self.wp + x
    }
}

/// 3x3 convolution, stride 1, zero "same" padding.
/// `weight` is `cout x (cin*9)` row-major, `bias` has `cout` entries.
pub(crate) fn conv3x3_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    scratch: &mut Vec<T>,
) -> Tensor<T> {
    let cin = x.channels;
    let g = Padded::of(x);
    pad(x, scratch);
    let mut out = vec![T::ZERO; cout * g.len];
    for tap in 0..9 {
        let beta = if tap == 0 { T::ZERO } else { T::ONE };
        T::gemm_raw(
            cout,
            cin,
            g.len,
            T::ONE,
            &weight[tap..],
            cin * 9,
            9,
            &scratch[g.tap_offset(tap)..],
            g.stride,
            1,
            beta,
            &mut out,
            g.len,
            1,
        );
    }
    let mut y = Tensor::zeros(cout, x.batch, x.height, x.width);
    for co in 0..cout {
        let src = &out[co * g.len..][..g.len];
        for n in 0..x.batch {
            let dst = y.sample_plane_mut(co, n);
            for yy in 0..x.height {
                let row = &src[g.out_index(n, yy, 0)..][..x.width];
                for (d, &v) in dst[yy * x.width..][..x.width].iter_mut().zip(row) {
                    *d = v + bias[co];
                }
            }
        }
    }
    y
}

/// Returns the input gradient; accumulates weight and bias gradients.
pub(crate) fn conv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    scratch: &mut Vec<T>,
) -> Tensor<T> {
    let cout = dy.channels;
    let cin = x.channels;
    let g = Padded::of(x);
    pad(x, scratch);
    // output gradient laid out like the forward output, zero on discarded positions
    let mut dyp = vec![T::ZERO; cout * g.len];
    for co in 0..cout {
        dbias[co] += sum(dy.channel(co));
        let dst = &mut dyp[co * g.len..][..g.len];
        for n in 0..x.batch {
            let src = dy.sample_plane(co, n);
            for yy in 0..x.height {
                dst[g.out_index(n, yy, 0)..][..x.width].copy_from_slice(&src[yy * x.width..][..x.width]);
            }
        }
    }
    for tap in 0..9 {
        T::gemm_raw(
            cout,
            g.len,
            cin,
            T::ONE,
            &dyp,
            g.len,
            1,
            &scratch[g.tap_offset(tap)..],
            1,
            g.stride,
            T::ONE,
            &mut dweight[tap..],
            cin * 9,
            9,
        );
    }
    // reuse the padded buffer for the input gradient
    scratch.iter_mut().for_each(|v| *v = T::ZERO);
    for tap in 0..9 {
        let off = g.tap_offset(tap);
        T::gemm_raw(
            cin,
            cout,
            g.len,
            T::ONE,
            &weight[tap..],
            9,
            cin * 9,
            &dyp,
            g.len,
            1,
            T::ONE,
            &mut scratch[off..],
            g.stride,
            1,
        );
    }
    let mut dx = x.zeros_like();
    for ci in 0..cin {
        for n in 0..x.batch {
            let src = &scratch[ci * g.stride + n * g.plane..][..g.plane];
            let dst = dx.sample_plane_mut(ci, n);
            for yy in 0..x.height {
                dst[yy * x.width..][..x.width].copy_from_slice(&src[(yy + 1) * g.wp + 1..][..x.width]);
            }
        }
    }
    dx
}

/// 2x2 transposed convolution with stride 2.
/// `weight` is `cin x (cout*4)` with column index `co*4 + a*2 + b`.
pub(crate) fn tconv2_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    scratch: &mut Vec<T>,
) -> Tensor<T> {
    let m = x.channel_len();
    scratch.clear();
    scratch.resize(cout * 4 * m, T::ZERO);
    gemm(Mat::new(weight, x.channels, cout * 4).t(), Mat::new(&x.data, x.channels, m), T::ZERO, scratch);
    let (h, w) = (x.height, x.width);
    let mut y = Tensor::zeros(cout, x.batch, 2 * h, 2 * w);
    for co in 0..cout {
        for n in 0..x.batch {
            let plane = y.sample_plane_mut(co, n);
            for a in 0..2 {
                for b in 0..2 {
                    let t = &scratch[(co * 4 + a * 2 + b) * m + n * h * w..][..h * w];
                    for i in 0..h {
                        let out_row = &mut plane[(2 * i + a) * 2 * w..][..2 * w];
                        for j in 0..w {
                            out_row[2 * j + b] = t[i * w + j] + bias[co];
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn tconv2_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    scratch: &mut Vec<T>,
) -> Tensor<T> {
    let cout = dy.channels;
    let m = x.channel_len();
    let (h, w) = (x.height, x.width);
    scratch.clear();
    scratch.resize(cout * 4 * m, T::ZERO);
    for co in 0..cout {
        dbias[co] += sum(dy.channel(co));
        for n in 0..x.batch {
            let plane = dy.sample_plane(co, n);
            for a in 0..2 {
                for b in 0..2 {
                    let t = &mut scratch[(co * 4 + a * 2 + b) * m + n * h * w..][..h * w];
                    for i in 0..h {
                        let in_row = &plane[(2 * i + a) * 2 * w..][..2 * w];
                        for j in 0..w {
                            t[i * w + j] = in_row[2 * j + b];
                        }
                    }
                }
            }
        }
    }
    let cin = x.channels;
    gemm(Mat::new(&x.data, cin, m), Mat::new(scratch, cout * 4, m).t(), T::ONE, dweight);
    let mut dx = x.zeros_like();
    gemm(Mat::new(weight, cin, cout * 4), Mat::new(scratch, cout * 4, m), T::ZERO, &mut dx.data);
    dx
}

/// Saved state of a batch-norm + ReLU block.
#[derive(Debug, Clone)]
pub(crate) struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance (for running-stat updates).
    pub batch_var_unbiased: Vec<f64>,
    pub train: bool,
}

/// Batch norm followed by ReLU. In training mode batch statistics are used;
/// otherwise the running estimates.
pub(crate) fn bn_relu_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    train: bool,
) -> (Tensor<T>, BnCache<T>) {
    let c = x.channels;
    let m = x.channel_len();
    let mut xhat = x.zeros_like();
    let mut y = x.zeros_like();
    let mut inv_std = vec![0.0; c];
    let mut batch_mean = vec![0.0; c];
    let mut batch_var_unbiased = vec![0.0; c];
    for ch in 0..c {
        let xs = x.channel(ch);
        let (mean, var) = if train {
            let mean = xs.iter().map(|v| v.to_f64()).sum::<f64>() / m as f64;
            let var = xs.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / m as f64;
            batch_mean[ch] = mean;
            batch_var_unbiased[ch] = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
            (mean, var)
        } else {
            (running_mean[ch].to_f64(), running_var[ch].to_f64())
        };
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = is;
        let (mu, ist) = (T::from_f64(mean), T::from_f64(is));
        let (g, b) = (gamma[ch], beta[ch]);
        let xh = xhat.channel_mut(ch);
        for (d, &v) in xh.iter_mut().zip(xs) {
            *d = (v - mu) * ist;
        }
        let ys = y.channel_mut(ch);
        for (d, &h) in ys.iter_mut().zip(xhat.channel(ch)) {
            let v = g * h + b;
            *d = if v > T::ZERO { v } else { T::ZERO };
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean,
            batch_var_unbiased,
            train,
        },
    )
}

/// Backward through ReLU and batch norm. `y` is the block output.
pub(crate) fn bn_relu_backward<T: Scalar>(
    y: &Tensor<T>,
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let c = y.channels;
    let m = y.channel_len() as f64;
    let mut dx = y.zeros_like();
    let mut dz = vec![T::ZERO; y.channel_len()];
    for ch in 0..c {
        for ((d, &g), &out) in dz.iter_mut().zip(dy.channel(ch)).zip(y.channel(ch)) {
            *d = if out > T::ZERO { g } else { T::ZERO };
        }
        let xh = cache.xhat.channel(ch);
        let sum_dz: f64 = dz.iter().map(|v| v.to_f64()).sum();
        let sum_dz_xh: f64 = dz.iter().zip(xh).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
        dgamma[ch] += T::from_f64(sum_dz_xh);
        dbeta[ch] += T::from_f64(sum_dz);
        let scale = gamma[ch].to_f64() * cache.inv_std[ch];
        let out = dx.channel_mut(ch);
        if cache.train {
            let k = T::from_f64(scale / m);
            let (a, b) = (T::from_f64(sum_dz), T::from_f64(sum_dz_xh));
            let mm = T::from_f64(m);
            for ((o, &d), &h) in out.iter_mut().zip(&dz).zip(xh) {
                *o = k * (mm * d - a - h * b);
            }
        } else {
            let k = T::from_f64(scale);
            for (o, &d) in out.iter_mut().zip(&dz) {
                *o = k * d;
            }
        }
    }
    dx
}

/// 2x2 max pooling with stride 2. Returns the output and the argmax offsets.
pub(crate) fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (h2, w2) = (x.height / 2, x.width / 2);
    let mut y = Tensor::zeros(x.channels, x.batch, h2, w2);
    let mut arg = vec![0u8; y.data.len()];
    let w = x.width;
    let mut idx = 0;
    for c in 0..x.channels {
        for n in 0..x.batch {
            let src = x.sample_plane(c, n);
            for i in 0..h2 {
                for j in 0..w2 {
                    let base = 2 * i * w + 2 * j;
                    let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                    let mut best = 0;
                    for k in 1..4 {
                        if cand[k] > cand[best] {
                            best = k;
                        }
                    }
                    y.data[idx] = cand[best];
                    arg[idx] = best as u8;
                    idx += 1;
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool2_backward<T: Scalar>(
    dy: &Tensor<T>,
    arg: &[u8],
    height: usize,
    width: usize,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.channels, dy.batch, height, width);
    let (h2, w2) = (dy.height, dy.width);
    let mut idx = 0;
    for c in 0..dy.channels {
        for n in 0..dy.batch {
            let dst = dx.sample_plane_mut(c, n);
            for i in 0..h2 {
                for j in 0..w2 {
                    let k = arg[idx] as usize;
                    let pos = (2 * i + k / 2) * width + 2 * j + k % 2;
                    dst[pos] += dy.data[idx];
                    idx += 1;
                }
            }
        }
    }
    dx
}

fn sum<T: Scalar>(xs: &[T]) -> T {
    T::from_f64(xs.iter().map(|v| v.to_f64()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &[f64], b: &[f64], cout: usize) -> Tensor<f64> {
        let mut y = Tensor::zeros(cout, x.batch, x.height, x.width);
        for co in 0..cout {
            for n in 0..x.batch {
                for i in 0..x.height as isize {
                    for j in 0..x.width as isize {
                        let mut acc = b[co];
                        for ci in 0..x.channels {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (i + ky - 1, j + kx - 1);
                                    if sy >= 0 && sx >= 0 && sy < x.height as isize && sx < x.width as isize {
                                        acc += w[co * x.channels * 9 + ci * 9 + (ky * 3 + kx) as usize]
                                            * x.at(ci, n, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        let idx = y.index(co, n, i as usize, j as usize);
                        y.data[idx] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 % 101) as f64 - 50.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = Tensor::from_vec(2, 2, 4, 5, ramp(80, 0.1));
        let w = ramp(3 * 18, 0.01);
        let b = vec![0.5, -0.25, 0.0];
        let mut s = Vec::new();
        let fast = conv3x3_forward(&x, &w, &b, 3, &mut s);
        let slow = naive_conv(&x, &w, &b, 3);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tconv_places_each_tap() {
        // single input pixel, identity-like taps
        let x = Tensor::from_vec(1, 1, 1, 1, vec![2.0f64]);
        let w = vec![1.0, 2.0, 3.0, 4.0];
        let mut s = Vec::new();
        let y = tconv2_forward(&x, &w, &[0.5], 1, &mut s);
        assert_eq!(y.data, vec![2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn maxpool_roundtrip_gradient() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0f64, 3.0, 2.0, 0.0]);
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.data, vec![3.0]);
        let dx = maxpool2_backward(&Tensor::from_vec(1, 1, 1, 1, vec![1.0]), &arg, 2, 2);
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bn_train_output_is_standardized() {
        let x = Tensor::from_vec(1, 2, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let (_, cache) = bn_relu_forward(&x, &[1.0], &[0.0], &[0.0], &[1.0], true);
        let mean: f64 = cache.xhat.data.iter().sum::<f64>() / 8.0;
        let var: f64 = cache.xhat.data.iter().map(|v| v * v).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        assert!((cache.batch_mean[0] - 4.5).abs() < 1e-12);
        assert!((cache.batch_var_unbiased[0] - 6.0).abs() < 1e-12);
    }
}
