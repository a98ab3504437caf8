//! 3D cross-correlation via im2col + gemm.
//!
//! Activations are channel-major: `[C, B, W, H, D]`, so a layer's output
//! for all batch items is a single `[C_out, B * W*H*D]` matrix.

use super::gemm::{gemm, View};
use crate::error::{Error, Result};

/// Upper bound on the im2col buffer, in elements.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub batch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: usize,
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (cin, batch, input) = match *input_shape {
            [c, w, h, d] => (c, 1, [w, h, d]),
            [c, b, w, h, d] => (c, b, [w, h, d]),
            _ => {
                return Err(Error::dim(format!(
                    "conv3d input must be [C,W,H,D] or [C,B,W,H,D], got {input_shape:?}"
                )))
            }
        };
        let [cout, kc, kw, kh, kd] = *kernel_shape else {
            return Err(Error::dim(format!(
                "conv3d kernel must be [Cout,Cin,Kw,Kh,Kd], got {kernel_shape:?}"
            )));
        };
        if kc != cin {
            return Err(Error::dim(format!(
                "conv3d kernel expects {kc} input channels, input has {cin}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv3d stride must be positive"));
        }
        let kernel = [kw, kh, kd];
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad;
            if kernel[a] == 0 || span < kernel[a] {
                return Err(Error::dim(format!(
                    "conv3d output size along axis {a} is not positive (input {}, pad {pad}, kernel {})",
                    input[a], kernel[a]
                )));
            }
            output[a] = (span - kernel[a]) / stride + 1;
        }
        Ok(ConvGeom {
            cin,
            cout,
            batch,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn chunk(&self) -> usize {
        let per_item = self.rows() * self.out_spatial();
        (COLS_BUDGET / per_item.max(1)).clamp(1, self.batch.max(1))
    }

    /// Input coordinate hit by output coordinate `o` and kernel tap `k` on axis `a`.
    #[inline]
    fn src(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < self.input[a]).then_some(i as usize)
    }

    /// Visits (row, col, input offset) triples for items `b0..b1`.
    fn for_each_tap(&self, b0: usize, b1: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [kw, kh, kd] = self.kernel;
        let [ow, oh, od] = self.output;
        let [_, ih, id] = self.input;
        let (s_in, s_out) = (self.in_spatial(), self.out_spatial());
        let ncols = (b1 - b0) * s_out;
        let mut row = 0;
        for ci in 0..self.cin {
            for kx in 0..kw {
                for ky in 0..kh {
                    for kz in 0..kd {
                        for b in b0..b1 {
                            let in_base = (ci * self.batch + b) * s_in;
                            let col_base = row * ncols + (b - b0) * s_out;
                            for ox in 0..ow {
                                let Some(ix) = self.src(0, ox, kx) else { continue };
                                for oy in 0..oh {
                                    let Some(iy) = self.src(1, oy, ky) else { continue };
                                    let col_row = col_base + (ox * oh + oy) * od;
                                    let in_row = in_base + (ix * ih + iy) * id;
                                    for oz in 0..od {
                                        if let Some(iz) = self.src(2, oz, kz) {
                                            f(row, col_row + oz, in_row + iz);
                                        }
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f32], b0: usize, b1: usize, cols: &mut Vec<f32>) {
        cols.clear();
        cols.resize(self.rows() * (b1 - b0) * self.out_spatial(), 0.0);
        self.for_each_tap(b0, b1, |_, c, i| cols[c] = input[i]);
    }

    fn col2im(&self, cols: &[f32], b0: usize, b1: usize, grad_input: &mut [f32]) {
        self.for_each_tap(b0, b1, |_, c, i| grad_input[i] += cols[c]);
    }
}

pub(crate) fn forward(
    g: &ConvGeom,
    input: &[f32],
    kernel: &[f32],
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let s_out = g.out_spatial();
    let ld = g.batch * s_out;
    let mut out = vec![0.0; g.cout * ld];
    let rows = g.rows();
    let step = g.chunk();
    let mut cols = Vec::new();
    let mut b0 = 0;
    while b0 < g.batch {
        let b1 = (b0 + step).min(g.batch);
        g.im2col(input, b0, b1, &mut cols);
        let n = (b1 - b0) * s_out;
        gemm(
            View::rm(kernel, g.cout, rows),
            View::rm(&cols, rows, n),
            0.0,
            &mut out[b0 * s_out..],
            ld,
        );
        b0 = b1;
    }
    if let Some(bias) = bias {
        for (co, chan) in out.chunks_mut(ld).enumerate() {
            for v in chan {
                *v += bias[co];
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn backward(
    g: &ConvGeom,
    input: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    want_input: bool,
) -> ConvGrads {
    let s_out = g.out_spatial();
    let ld = g.batch * s_out;
    let rows = g.rows();
    let step = g.chunk();
    let mut grad_kernel = vec![0.0; g.cout * rows];
    let mut grad_input = want_input.then(|| vec![0.0; input.len()]);
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let mut b0 = 0;
    while b0 < g.batch {
        let b1 = (b0 + step).min(g.batch);
        let n = (b1 - b0) * s_out;
        let gout = View {
            data: &grad_out[b0 * s_out..],
            rows: g.cout,
            cols: n,
            rs: ld,
            cs: 1,
        };
        g.im2col(input, b0, b1, &mut cols);
        gemm(gout, View::rm(&cols, rows, n).t(), 1.0, &mut grad_kernel, rows);
        if let Some(gi) = grad_input.as_mut() {
            dcols.clear();
            dcols.resize(rows * n, 0.0);
            gemm(View::rm(kernel, g.cout, rows).t(), gout, 0.0, &mut dcols, n);
            g.col2im(&dcols, b0, b1, gi);
        }
        b0 = b1;
    }
    let grad_bias = grad_out.chunks(ld).map(|c| c.iter().sum()).collect();
    ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_geometry() {
        let g = ConvGeom::new(&[1, 4, 16, 16, 16], &[32, 1, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output, [8, 8, 8]);
        assert!(ConvGeom::new(&[1, 1, 1, 1], &[1, 1, 3, 3, 3], 1, 0).is_err());
        assert!(ConvGeom::new(&[2, 4, 4, 4], &[1, 1, 3, 3, 3], 1, 0).is_err());
    }

    #[test]
    fn ones_kernel_sums_window() {
        let g = ConvGeom::new(&[1, 2, 2, 2], &[1, 1, 2, 2, 2], 1, 0).unwrap();
        let out = forward(&g, &[1.0; 8], &[1.0; 8], None);
        assert_eq!(out, vec![8.0]);
    }
}
