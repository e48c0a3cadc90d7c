//! Convolution kernels over three spatial axes, channels last.
//!
//! 2D convolutions are run as 3D ones with a unit depth axis. Padding is
//! "same": the output extent along an axis is `ceil(n / stride)` and the
//! total padding `max((out - 1) * stride + (k - 1) * dilation + 1 - n, 0)` is
//! split with the smaller half first. Axes flagged circular wrap around
//! instead of reading zeros.

use crate::par;

/// Geometry of a strided, dilated, padded convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGeom {
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub circular: [bool; 3],
    pub cin: usize,
    pub cout: usize,
    /// per axis: `out * k` entries, the input index read by (output, tap)
    fwd: [Vec<Option<usize>>; 3],
    /// per axis: for each input index, the (tap, output) pairs that read it
    bwd: [Vec<Vec<(usize, usize)>>; 3],
}

impl ConvGeom {
    pub fn new(
        in_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        dilation: [usize; 3],
        circular: [bool; 3],
        cin: usize,
        cout: usize,
    ) -> Self {
        let out_dims = [0, 1, 2].map(|a| in_dims[a].div_ceil(stride[a]));
        Self::with_output(in_dims, out_dims, kernel, stride, dilation, circular, cin, cout)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn with_output(
        in_dims: [usize; 3],
        out_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        dilation: [usize; 3],
        circular: [bool; 3],
        cin: usize,
        cout: usize,
    ) -> Self {
        let mut fwd: [Vec<Option<usize>>; 3] = Default::default();
        let mut bwd: [Vec<Vec<(usize, usize)>>; 3] = Default::default();
        for a in 0..3 {
            let n = in_dims[a] as isize;
            let span = (kernel[a] as isize - 1) * dilation[a] as isize + 1;
            let total = ((out_dims[a] as isize - 1) * stride[a] as isize + span - n).max(0);
            let before = total / 2;
            let mut f = Vec::with_capacity(out_dims[a] * kernel[a]);
            let mut b = vec![Vec::new(); in_dims[a]];
            for o in 0..out_dims[a] {
                for k in 0..kernel[a] {
                    let i = o as isize * stride[a] as isize + k as isize * dilation[a] as isize - before;
                    let idx = if circular[a] {
                        Some(i.rem_euclid(n) as usize)
                    } else if (0..n).contains(&i) {
                        Some(i as usize)
                    } else {
                        None
                    };
                    if let Some(i) = idx {
                        b[i].push((k, o));
                    }
                    f.push(idx);
                }
            }
            fwd[a] = f;
            bwd[a] = b;
        }
        ConvGeom {
            in_dims,
            out_dims,
            kernel,
            stride,
            dilation,
            circular,
            cin,
            cout,
            fwd,
            bwd,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product::<usize>() * self.cin
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product::<usize>() * self.cout
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin * self.cout
    }

    #[inline]
    fn taps(&self, axis: usize, o: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.kernel[axis];
        self.fwd[axis][o * k..(o + 1) * k]
            .iter()
            .enumerate()
            .filter_map(|(t, i)| i.map(|i| (t, i)))
    }

    /// `y[o, co] = sum_{tap, ci} x[i(o, tap), ci] * w[tap, ci, co]`
    pub fn forward(&self, x: &[f32], w: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.in_len());
        debug_assert_eq!(w.len(), self.kernel_len());
        let [_, iw, id] = self.in_dims;
        let [_, ow, od] = self.out_dims;
        let [_, kw, kd] = self.kernel;
        let (cin, cout) = (self.cin, self.cout);
        let mut y = vec![0.0f32; self.out_len()];
        par::for_each_chunk_mut(&mut y, ow * od * cout, |oh, row| {
            for ox in 0..ow {
                for oz in 0..od {
                    let acc = &mut row[(ox * od + oz) * cout..(ox * od + oz + 1) * cout];
                    for (th, ih) in self.taps(0, oh) {
                        for (tw, iw_) in self.taps(1, ox) {
                            for (td, iz) in self.taps(2, oz) {
                                let xb = ((ih * iw + iw_) * id + iz) * cin;
                                let wb = ((th * kw + tw) * kd + td) * cin * cout;
                                let xs = &x[xb..xb + cin];
                                let ws = &w[wb..wb + cin * cout];
                                for (ci, &xv) in xs.iter().enumerate() {
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let wr = &ws[ci * cout..(ci + 1) * cout];
                                    for (a, &wv) in acc.iter_mut().zip(wr) {
                                        *a += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        y
    }

    /// Adjoint of [`forward`] in `x`: `dx[i, ci] = sum dy[o, co] * w[tap, ci, co]`.
    pub fn backward_input(&self, dy: &[f32], w: &[f32]) -> Vec<f32> {
        debug_assert_eq!(dy.len(), self.out_len());
        let [_, iw, id] = self.in_dims;
        let [_, ow, od] = self.out_dims;
        let [_, kw, kd] = self.kernel;
        let (cin, cout) = (self.cin, self.cout);
        let mut dx = vec![0.0f32; self.in_len()];
        par::for_each_chunk_mut(&mut dx, iw * id * cin, |ih, row| {
            for ix in 0..iw {
                for iz in 0..id {
                    let acc = &mut row[(ix * id + iz) * cin..(ix * id + iz + 1) * cin];
                    for &(th, oh) in &self.bwd[0][ih] {
                        for &(tw, ox) in &self.bwd[1][ix] {
                            for &(td, oz) in &self.bwd[2][iz] {
                                let yb = ((oh * ow + ox) * od + oz) * cout;
                                let wb = ((th * kw + tw) * kd + td) * cin * cout;
                                let gs = &dy[yb..yb + cout];
                                let ws = &w[wb..wb + cin * cout];
                                for (ci, a) in acc.iter_mut().enumerate() {
                                    let wr = &ws[ci * cout..(ci + 1) * cout];
                                    let mut s = 0.0f32;
                                    for (&g, &wv) in gs.iter().zip(wr) {
                                        s += g * wv;
                                    }
                                    *a += s;
                                }
                            }
                        }
                    }
                }
            }
        });
        dx
    }

    /// Gradient in `w`: `dw[tap, ci, co] = sum_o x[i(o, tap), ci] * dy[o, co]`.
    pub fn backward_kernel(&self, x: &[f32], dy: &[f32]) -> Vec<f32> {
        let [_, iw, id] = self.in_dims;
        let [oh_n, ow, od] = self.out_dims;
        let [_, kw, kd] = self.kernel;
        let (cin, cout) = (self.cin, self.cout);
        let klen = self.kernel_len();
        par::chunked_sum(oh_n, 2, klen, |start, end| {
            let mut dw = vec![0.0f32; klen];
            for oh in start..end {
                for ox in 0..ow {
                    for oz in 0..od {
                        let yb = ((oh * ow + ox) * od + oz) * cout;
                        let gs = &dy[yb..yb + cout];
                        if gs.iter().all(|&g| g == 0.0) {
                            continue;
                        }
                        for (th, ih) in self.taps(0, oh) {
                            for (tw, iw_) in self.taps(1, ox) {
                                for (td, iz) in self.taps(2, oz) {
                                    let xb = ((ih * iw + iw_) * id + iz) * cin;
                                    let wb = ((th * kw + tw) * kd + td) * cin * cout;
                                    let xs = &x[xb..xb + cin];
                                    let ws = &mut dw[wb..wb + cin * cout];
                                    for (ci, &xv) in xs.iter().enumerate() {
                                        if xv == 0.0 {
                                            continue;
                                        }
                                        let wr = &mut ws[ci * cout..(ci + 1) * cout];
                                        for (a, &g) in wr.iter_mut().zip(gs) {
                                            *a += xv * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dw
        })
    }
}

/// Swaps the two channel axes of a `(taps, a, b)` kernel into `(taps, b, a)`.
pub fn swap_channel_axes(w: &[f32], taps: usize, a: usize, b: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; w.len()];
    for t in 0..taps {
        let base = t * a * b;
        for i in 0..a {
            for j in 0..b {
                out[base + j * a + i] = w[base + i * b + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        let g = ConvGeom::new([128, 128, 1], [5, 5, 1], [2, 2, 1], [1, 1, 1], [false; 3], 1, 1);
        assert_eq!(g.out_dims, [64, 64, 1]);
        let g = ConvGeom::new([7, 9, 5], [3, 3, 3], [2, 2, 2], [1, 1, 1], [false; 3], 1, 1);
        assert_eq!(g.out_dims, [4, 5, 3]);
    }

    #[test]
    fn circular_axis_wraps() {
        let g = ConvGeom::new([1, 4, 1], [1, 3, 1], [1, 1, 1], [1, 1, 1], [false, true, false], 1, 1);
        // output column 0 reads columns 3, 0, 1
        let taps: Vec<_> = g.taps(1, 0).collect();
        assert_eq!(taps, vec![(0, 3), (1, 0), (2, 1)]);
    }
}
