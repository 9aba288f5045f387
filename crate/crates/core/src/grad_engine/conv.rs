//! Strided 2-D convolution kernels.
//!
//! The three kernels are the partial gradients of one trilinear form
//! `T(x, w, y) = <conv(x, w), y>`: `conv_forward` is dT/dy, `conv_input_grad`
//! (the transposed convolution) is dT/dx and `conv_weight_grad` is dT/dw.
//! Because each is linear in both of its arguments, the backward pass of any
//! one of them is expressed with the other two, which is what makes double
//! backpropagation through conv layers possible.

use serde::{Deserialize, Serialize};

/// Square-kernel convolution geometry. `in_*` is the large (image) side,
/// `out_*` the strided side, regardless of the direction a layer runs in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over an `in_h x in_w` image.
    pub fn forward(kernel: usize, stride: usize, padding: usize, in_h: usize, in_w: usize) -> Option<Self> {
        let span_h = in_h + 2 * padding;
        let span_w = in_w + 2 * padding;
        if stride == 0 || kernel == 0 || span_h < kernel || span_w < kernel {
            return None;
        }
        Some(Self {
            kernel,
            stride,
            padding,
            in_h,
            in_w,
            out_h: (span_h - kernel) / stride + 1,
            out_w: (span_w - kernel) / stride + 1,
        })
    }

    /// Geometry of a transposed convolution mapping `out_h x out_w` up to
    /// `in_h x in_w`. The target size must be reachable with an output
    /// padding smaller than the stride.
    pub fn transposed(
        kernel: usize,
        stride: usize,
        padding: usize,
        out_h: usize,
        out_w: usize,
        in_h: usize,
        in_w: usize,
    ) -> Option<Self> {
        let g = Self::forward(kernel, stride, padding, in_h, in_w)?;
        (g.out_h == out_h && g.out_w == out_w).then_some(g)
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output indices `o` with `0 <= o*stride + offset - pad < in_len`.
fn valid_range(offset: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + pad > offset {
        ((in_len - 1 + pad - offset) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct Ranges {
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl Ranges {
    fn new(g: &ConvGeom) -> Self {
        Self {
            rows: (0..g.kernel)
                .map(|kh| valid_range(kh, g.padding, g.stride, g.in_h, g.out_h))
                .collect(),
            cols: (0..g.kernel)
                .map(|kw| valid_range(kw, g.padding, g.stride, g.in_w, g.out_w))
                .collect(),
        }
    }
}

/// `x: [n, ci, in_h, in_w]`, `w: [co, ci, k, k]` to `y: [n, co, out_h, out_w]`.
pub fn conv_forward(x: &[f64], w: &[f64], n: usize, ci: usize, co: usize, g: &ConvGeom) -> Vec<f64> {
    let k = g.kernel;
    let (s, p) = (g.stride, g.padding);
    let r = Ranges::new(g);
    let mut y = vec![0.0; n * co * g.out_plane()];
    for b in 0..n {
        for o in 0..co {
            let y_plane = &mut y[(b * co + o) * g.out_plane()..][..g.out_plane()];
            for c in 0..ci {
                let x_plane = &x[(b * ci + c) * g.in_plane()..][..g.in_plane()];
                let w_k = &w[(o * ci + c) * k * k..][..k * k];
                for kh in 0..k {
                    let (oh_lo, oh_hi) = r.rows[kh];
                    for kw in 0..k {
                        let wv = w_k[kh * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = r.cols[kw];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - p;
                            let x_row = &x_plane[ih * g.in_w..][..g.in_w];
                            let y_row = &mut y_plane[oh * g.out_w..][..g.out_w];
                            for ow in ow_lo..ow_hi {
                                y_row[ow] += wv * x_row[ow * s + kw - p];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Transposed convolution: `y: [n, co, out_h, out_w]`, `w: [co, ci, k, k]`
/// to `x: [n, ci, in_h, in_w]`.
pub fn conv_input_grad(y: &[f64], w: &[f64], n: usize, ci: usize, co: usize, g: &ConvGeom) -> Vec<f64> {
    let k = g.kernel;
    let (s, p) = (g.stride, g.padding);
    let r = Ranges::new(g);
    let mut x = vec![0.0; n * ci * g.in_plane()];
    for b in 0..n {
        for o in 0..co {
            let y_plane = &y[(b * co + o) * g.out_plane()..][..g.out_plane()];
            for c in 0..ci {
                let x_plane = &mut x[(b * ci + c) * g.in_plane()..][..g.in_plane()];
                let w_k = &w[(o * ci + c) * k * k..][..k * k];
                for kh in 0..k {
                    let (oh_lo, oh_hi) = r.rows[kh];
                    for kw in 0..k {
                        let wv = w_k[kh * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = r.cols[kw];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - p;
                            let x_row = &mut x_plane[ih * g.in_w..][..g.in_w];
                            let y_row = &y_plane[oh * g.out_w..][..g.out_w];
                            for ow in ow_lo..ow_hi {
                                x_row[ow * s + kw - p] += wv * y_row[ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `x: [n, ci, in_h, in_w]`, `y: [n, co, out_h, out_w]` to `dw: [co, ci, k, k]`.
pub fn conv_weight_grad(x: &[f64], y: &[f64], n: usize, ci: usize, co: usize, g: &ConvGeom) -> Vec<f64> {
    let k = g.kernel;
    let (s, p) = (g.stride, g.padding);
    let r = Ranges::new(g);
    let mut dw = vec![0.0; co * ci * k * k];
    for b in 0..n {
        for o in 0..co {
            let y_plane = &y[(b * co + o) * g.out_plane()..][..g.out_plane()];
            for c in 0..ci {
                let x_plane = &x[(b * ci + c) * g.in_plane()..][..g.in_plane()];
                let dw_k = &mut dw[(o * ci + c) * k * k..][..k * k];
                for kh in 0..k {
                    let (oh_lo, oh_hi) = r.rows[kh];
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = r.cols[kw];
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - p;
                            let x_row = &x_plane[ih * g.in_w..][..g.in_w];
                            let y_row = &y_plane[oh * g.out_w..][..g.out_w];
                            for ow in ow_lo..ow_hi {
                                acc += x_row[ow * s + kw - p] * y_row[ow];
                            }
                        }
                        dw_k[kh * k + kw] += acc;
                    }
                }
            }
        }
    }
    dw
}
