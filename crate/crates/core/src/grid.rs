//! Zero-bordered plane stacks and the same-padding convolution kernels used by
//! the equilibrium block.
//!
//! Every plane is stored with a border of `pad` zeros on all four sides so a
//! tap at offset `(dy, dx)` is a constant shift of the flattened index. The
//! kernels sweep one contiguous index range covering all interior rows; the
//! cells that land in the left/right border columns are scratch and get
//! cleared afterwards, which keeps the hot loops free of per-row bookkeeping.

/// `channels` planes of `rows x cols` with a zero border of width `pad`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedStack {
    channels: usize,
    rows: usize,
    cols: usize,
    pad: usize,
    data: Vec<f64>,
}

impl PaddedStack {
    pub fn zeros(channels: usize, rows: usize, cols: usize, pad: usize) -> Self {
        let plane = (rows + 2 * pad) * (cols + 2 * pad);
        Self {
            channels,
            rows,
            cols,
            pad,
            data: vec![0.0; channels * plane],
        }
    }

    /// Copies row-major `[channels, rows, cols]` values into a padded stack.
    pub fn from_dense(channels: usize, rows: usize, cols: usize, pad: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), channels * rows * cols);
        let mut out = Self::zeros(channels, rows, cols, pad);
        for c in 0..channels {
            for r in 0..rows {
                let src = &dense[(c * rows + r) * cols..][..cols];
                let at = out.index(c, r, 0);
                out.data[at..at + cols].copy_from_slice(src);
            }
        }
        out
    }

    /// Row-major `[channels, rows, cols]` copy of the interior.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channels * self.rows * self.cols);
        for c in 0..self.channels {
            for r in 0..self.rows {
                let at = self.index(c, r, 0);
                out.extend_from_slice(&self.data[at..at + self.cols]);
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    #[inline]
    pub fn row_stride(&self) -> usize {
        self.cols + 2 * self.pad
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        (self.rows + 2 * self.pad) * self.row_stride()
    }

    #[inline]
    pub fn index(&self, c: usize, r: usize, t: usize) -> usize {
        c * self.plane_len() + (r + self.pad) * self.row_stride() + t + self.pad
    }

    pub fn get(&self, c: usize, r: usize, t: usize) -> f64 {
        self.data[self.index(c, r, t)]
    }

    pub fn set(&mut self, c: usize, r: usize, t: usize, v: f64) {
        let i = self.index(c, r, t);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flattened in-plane range `[first interior cell, last interior cell]`.
    #[inline]
    pub fn sweep(&self) -> std::ops::Range<usize> {
        let w = self.row_stride();
        let start = self.pad * w + self.pad;
        let end = (self.pad + self.rows - 1) * w + self.pad + self.cols;
        start..end
    }

    /// Zeroes the border columns that a sweep may have written into.
    pub fn clear_border(&mut self, c: usize) {
        let (w, pad, rows, cols) = (self.row_stride(), self.pad, self.rows, self.cols);
        if pad == 0 {
            return;
        }
        let plane = self.plane_mut(c);
        for r in 0..rows {
            let row = (r + pad) * w;
            plane[row..row + pad].fill(0.0);
            plane[row + pad + cols..row + w].fill(0.0);
        }
    }

    pub fn clear_all_borders(&mut self) {
        for c in 0..self.channels {
            self.clear_border(c);
        }
    }

    /// Same shape, all zero.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.rows, self.cols, self.pad)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.rows == other.rows && self.cols == other.cols && self.pad == other.pad
    }
}

/// Flattened offsets of a `k x k` kernel centred on the output cell.
fn tap_offsets(k: usize, row_stride: usize) -> Vec<isize> {
    let r = (k / 2) as isize;
    let w = row_stride as isize;
    let mut offs = Vec::with_capacity(k * k);
    for dy in -r..=r {
        for dx in -r..=r {
            offs.push(dy * w + dx);
        }
    }
    offs
}

#[inline(always)]
fn shifted<'a>(src: &'a [f64], range: &std::ops::Range<usize>, off: isize) -> &'a [f64] {
    let lo = (range.start as isize + off) as usize;
    &src[lo..lo + range.len()]
}

/// `dst[j] += sum_k w[k] * src[j + off[k]]` over one sweep, const-size tap set.
#[inline(always)]
fn taps_fixed<const NK: usize>(dst: &mut [f64], src: &[f64], range: &std::ops::Range<usize>, offs: &[isize], w: &[f64]) {
    let offs: &[isize; NK] = offs.try_into().expect("tap count");
    let w: &[f64; NK] = w.try_into().expect("tap count");
    let srcs: [&[f64]; NK] = std::array::from_fn(|k| shifted(src, range, offs[k]));
    let out = &mut dst[range.clone()];
    let n = out.len();
    for s in &srcs {
        assert_eq!(s.len(), n);
    }
    for j in 0..n {
        let mut acc = out[j];
        for k in 0..NK {
            acc += w[k] * srcs[k][j];
        }
        out[j] = acc;
    }
}

fn taps_any(dst: &mut [f64], src: &[f64], range: &std::ops::Range<usize>, offs: &[isize], w: &[f64]) {
    for (&off, &wk) in offs.iter().zip(w) {
        if wk == 0.0 {
            continue;
        }
        let s = shifted(src, range, off);
        for (d, &v) in dst[range.clone()].iter_mut().zip(s) {
            *d += wk * v;
        }
    }
}

fn accumulate_taps(dst: &mut [f64], src: &[f64], range: &std::ops::Range<usize>, offs: &[isize], w: &[f64]) {
    match offs.len() {
        1 => taps_fixed::<1>(dst, src, range, offs, w),
        9 => taps_fixed::<9>(dst, src, range, offs, w),
        25 => taps_fixed::<25>(dst, src, range, offs, w),
        _ => taps_any(dst, src, range, offs, w),
    }
}

/// Same-padding 2-D convolution (cross-correlation), `weight` laid out as
/// `[out, in, k, k]`. `out` must share geometry with `input` except for the
/// channel count; its previous contents are overwritten.
pub fn conv_forward(input: &PaddedStack, weight: &[f64], bias: &[f64], k: usize, out: &mut PaddedStack) {
    let cin = input.channels();
    let cout = out.channels();
    assert_eq!(weight.len(), cout * cin * k * k);
    assert_eq!(bias.len(), cout);
    assert!(k % 2 == 1 && k / 2 <= input.pad());
    assert_eq!((input.rows(), input.cols(), input.pad()), (out.rows(), out.cols(), out.pad()));
    let range = input.sweep();
    let offs = tap_offsets(k, input.row_stride());
    let kk = k * k;
    for o in 0..cout {
        let dst = out.plane_mut(o);
        dst.fill(0.0);
        dst[range.clone()].fill(bias[o]);
        for i in 0..cin {
            let w = &weight[(o * cin + i) * kk..][..kk];
            accumulate_taps(dst, input.plane(i), &range, &offs, w);
        }
        out.clear_border(o);
    }
}

/// Gradient of [`conv_forward`] with respect to its input, accumulated into
/// `grad_in`. `grad_out` must have zero borders.
pub fn conv_backward_input(grad_out: &PaddedStack, weight: &[f64], k: usize, grad_in: &mut PaddedStack) {
    let cout = grad_out.channels();
    let cin = grad_in.channels();
    assert_eq!(weight.len(), cout * cin * k * k);
    let range = grad_out.sweep();
    // Transposed correlation: flip the tap offsets.
    let offs: Vec<isize> = tap_offsets(k, grad_out.row_stride()).into_iter().map(|o| -o).collect();
    let kk = k * k;
    let mut w = vec![0.0; kk];
    for i in 0..cin {
        let dst = grad_in.plane_mut(i);
        for o in 0..cout {
            let src = &weight[(o * cin + i) * kk..][..kk];
            w.copy_from_slice(src);
            accumulate_taps(dst, grad_out.plane(o), &range, &offs, &w);
        }
        grad_in.clear_border(i);
    }
}

/// Accumulates the weight and bias gradients of [`conv_forward`].
pub fn conv_backward_params(input: &PaddedStack, grad_out: &PaddedStack, k: usize, grad_weight: &mut [f64], grad_bias: &mut [f64]) {
    let cin = input.channels();
    let cout = grad_out.channels();
    assert_eq!(grad_weight.len(), cout * cin * k * k);
    let range = input.sweep();
    let offs = tap_offsets(k, input.row_stride());
    let kk = k * k;
    for o in 0..cout {
        let g = &grad_out.plane(o)[range.clone()];
        grad_bias[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = input.plane(i);
            let gw = &mut grad_weight[(o * cin + i) * kk..][..kk];
            match kk {
                9 => tap_dots_fixed::<9>(g, src, &range, &offs, gw),
                25 => tap_dots_fixed::<25>(g, src, &range, &offs, gw),
                _ => {
                    for (t, &off) in offs.iter().enumerate() {
                        gw[t] += dot(g, shifted(src, &range, off));
                    }
                }
            }
        }
    }
}

/// `acc[k] += sum_j g[j] * src[j + off[k]]`, all taps in one pass over `g`.
#[inline(always)]
fn tap_dots_fixed<const NK: usize>(g: &[f64], src: &[f64], range: &std::ops::Range<usize>, offs: &[isize], acc_out: &mut [f64]) {
    const L: usize = 4;
    let srcs: [&[f64]; NK] = std::array::from_fn(|k| shifted(src, range, offs[k]));
    let n = g.len();
    for s in &srcs {
        assert_eq!(s.len(), n);
    }
    let mut acc = [[0.0f64; L]; NK];
    let chunks = n / L;
    for c in 0..chunks {
        let gj: [f64; L] = g[c * L..c * L + L].try_into().unwrap();
        for k in 0..NK {
            let sk = &srcs[k][c * L..c * L + L];
            for l in 0..L {
                acc[k][l] += gj[l] * sk[l];
            }
        }
    }
    for k in 0..NK {
        let mut tail = 0.0;
        for j in chunks * L..n {
            tail += g[j] * srcs[k][j];
        }
        acc_out[k] += (acc[k][0] + acc[k][1]) + (acc[k][2] + acc[k][3]) + tail;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    // Four accumulators let the loop vectorise without reassociation flags.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// 1x1 convolution (per-cell channel mixing): `out[o] = sum_i w[o,i] in[i] + b[o]`.
pub fn pointwise_forward(input: &PaddedStack, weight: &[f64], bias: Option<&[f64]>, out: &mut PaddedStack) {
    conv_forward_1x1(input, weight, bias, out, false)
}

/// As [`pointwise_forward`] but adds into `out` instead of overwriting.
pub fn pointwise_accumulate(input: &PaddedStack, weight: &[f64], out: &mut PaddedStack) {
    conv_forward_1x1(input, weight, None, out, true)
}

fn conv_forward_1x1(input: &PaddedStack, weight: &[f64], bias: Option<&[f64]>, out: &mut PaddedStack, accumulate: bool) {
    let cin = input.channels();
    let cout = out.channels();
    assert_eq!(weight.len(), cout * cin);
    let range = input.sweep();
    for o in 0..cout {
        let dst = out.plane_mut(o);
        if !accumulate {
            dst.fill(0.0);
            if let Some(b) = bias {
                dst[range.clone()].fill(b[o]);
            }
        }
        for i in 0..cin {
            let w = weight[o * cin + i];
            for (d, &v) in dst[range.clone()].iter_mut().zip(&input.plane(i)[range.clone()]) {
                *d += w * v;
            }
        }
        out.clear_border(o);
    }
}

/// Input gradient of a 1x1 convolution, accumulated into `grad_in`.
pub fn pointwise_backward_input(grad_out: &PaddedStack, weight: &[f64], grad_in: &mut PaddedStack) {
    let cout = grad_out.channels();
    let cin = grad_in.channels();
    assert_eq!(weight.len(), cout * cin);
    let range = grad_out.sweep();
    for i in 0..cin {
        let dst = grad_in.plane_mut(i);
        for o in 0..cout {
            let w = weight[o * cin + i];
            for (d, &v) in dst[range.clone()].iter_mut().zip(&grad_out.plane(o)[range.clone()]) {
                *d += w * v;
            }
        }
        grad_in.clear_border(i);
    }
}

/// Weight (and optional bias) gradients of a 1x1 convolution.
pub fn pointwise_backward_params(input: &PaddedStack, grad_out: &PaddedStack, grad_weight: &mut [f64], grad_bias: Option<&mut [f64]>) {
    let cin = input.channels();
    let cout = grad_out.channels();
    let range = input.sweep();
    for o in 0..cout {
        let g = &grad_out.plane(o)[range.clone()];
        for i in 0..cin {
            grad_weight[o * cin + i] += dot(g, &input.plane(i)[range.clone()]);
        }
    }
    if let Some(gb) = grad_bias {
        for o in 0..cout {
            gb[o] += grad_out.plane(o)[range.clone()].iter().sum::<f64>();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(dense: &[f64], cin: usize, rows: usize, cols: usize, w: &[f64], b: &[f64], k: usize) -> Vec<f64> {
        let cout = b.len();
        let r = (k / 2) as isize;
        let mut out = vec![0.0; cout * rows * cols];
        for o in 0..cout {
            for y in 0..rows {
                for x in 0..cols {
                    let mut acc = b[o];
                    for i in 0..cin {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (yy, xx) = (y as isize + dy, x as isize + dx);
                                if yy < 0 || xx < 0 || yy >= rows as isize || xx >= cols as isize {
                                    continue;
                                }
                                let wi = ((o * cin + i) * k + (dy + r) as usize) * k + (dx + r) as usize;
                                acc += w[wi] * dense[(i * rows + yy as usize) * cols + xx as usize];
                            }
                        }
                    }
                    out[(o * rows + y) * cols + x] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_for_each_kernel() {
        for &k in &[1usize, 3, 5, 7] {
            let (cin, cout, rows, cols) = (3, 2, 9, 6);
            let x = pseudo(cin * rows * cols, 1);
            let w = pseudo(cout * cin * k * k, 2);
            let b = pseudo(cout, 3);
            let input = PaddedStack::from_dense(cin, rows, cols, 3, &x);
            let mut out = PaddedStack::zeros(cout, rows, cols, 3);
            conv_forward(&input, &w, &b, k, &mut out);
            let want = naive_conv(&x, cin, rows, cols, &w, &b, k);
            for (a, e) in out.to_dense().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "k={k}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_input_gradient_is_the_adjoint() {
        let (cin, cout, rows, cols, k) = (2, 3, 7, 5, 3);
        let x = pseudo(cin * rows * cols, 4);
        let u = pseudo(cout * rows * cols, 5);
        let w = pseudo(cout * cin * k * k, 6);
        let input = PaddedStack::from_dense(cin, rows, cols, 2, &x);
        let mut out = PaddedStack::zeros(cout, rows, cols, 2);
        conv_forward(&input, &w, &vec![0.0; cout], k, &mut out);
        let gout = PaddedStack::from_dense(cout, rows, cols, 2, &u);
        let mut gin = PaddedStack::zeros(cin, rows, cols, 2);
        conv_backward_input(&gout, &w, k, &mut gin);
        let lhs = dot(&out.to_dense(), &u);
        let rhs = dot(&gin.to_dense(), &x);
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_weight_gradient_matches_linearity() {
        let (cin, cout, rows, cols, k) = (2, 2, 6, 5, 5);
        let x = pseudo(cin * rows * cols, 7);
        let u = pseudo(cout * rows * cols, 8);
        let w = pseudo(cout * cin * k * k, 9);
        let b = pseudo(cout, 10);
        let input = PaddedStack::from_dense(cin, rows, cols, 2, &x);
        let gout = PaddedStack::from_dense(cout, rows, cols, 2, &u);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; cout];
        conv_backward_params(&input, &gout, k, &mut gw, &mut gb);
        // The convolution is linear in (w, b): <u, conv(w, b)> = <gw, w> + <gb, b>.
        let mut out = PaddedStack::zeros(cout, rows, cols, 2);
        conv_forward(&input, &w, &b, k, &mut out);
        let lhs = dot(&out.to_dense(), &u);
        let rhs = dot(&gw, &w) + dot(&gb, &b);
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn dense_round_trip() {
        let x = pseudo(2 * 4 * 3, 11);
        let s = PaddedStack::from_dense(2, 4, 3, 2, &x);
        assert_eq!(s.to_dense(), x);
        assert_eq!(s.get(1, 3, 2), x[(4 + 3) * 3 + 2]);
    }
}
