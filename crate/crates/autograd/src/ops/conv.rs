//! Convolutions, channel concat, pixel shuffle and dense layers.

use crate::float::{gemm, Layout};
use crate::{Float, Tensor, Var};

/// Upper bound on im2col buffer elements; larger images are processed in row bands.
const COL_BUDGET: usize = 1 << 22;

/// Raw gemm with an explicit output row stride (`ldc`), row-major everywhere else.
#[allow(clippy::too_many_arguments)]
fn gemm_ldc<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    assert!(a.len() >= m * k && b.len() >= k * n);
    assert!(m == 0 || c.len() >= (m - 1) * ldc + n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::RowMajor => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::RowMajor => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: bounds asserted above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}

/// Rows of output processed per im2col band.
fn band_rows(kk_cin: usize, w: usize, h: usize) -> usize {
    (COL_BUDGET / (kk_cin * w).max(1)).clamp(1, h)
}

/// Output columns `lo..hi` whose source column `x + dx` lies inside `0..w`.
fn valid_span(dx: isize, w: usize) -> (usize, usize) {
    let lo = ((-dx).max(0) as usize).min(w);
    let hi = ((w as isize - dx).clamp(0, w as isize) as usize).max(lo);
    (lo, hi)
}

/// Fill `col[(ci·k² + ky·k + kx), (y−y0)·w + x]` for output rows `y0..y1`, zero padded.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    y0: usize,
    y1: usize,
    col: &mut [T],
) {
    let pad = (k / 2) as isize;
    let band = (y1 - y0) * w;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * band;
                let dst = &mut col[row..row + band];
                let dx = kx as isize - pad;
                for (r, y) in (y0..y1).enumerate() {
                    let sy = y as isize + ky as isize - pad;
                    let out = &mut dst[r * w..(r + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let (lo, hi) = valid_span(dx, w);
                    out[..lo].fill(T::zero());
                    out[lo..hi].copy_from_slice(
                        &src[(lo as isize + dx) as usize..(hi as isize + dx) as usize],
                    );
                    out[hi..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `col` back into the input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    y0: usize,
    y1: usize,
    dx_out: &mut [T],
) {
    let pad = (k / 2) as isize;
    let band = (y1 - y0) * w;
    for ci in 0..cin {
        let plane = &mut dx_out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * band;
                let src = &col[row..row + band];
                let dx = kx as isize - pad;
                for (r, y) in (y0..y1).enumerate() {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let (lo, hi) = valid_span(dx, w);
                    for x in lo..hi {
                        dst[(x as isize + dx) as usize] += src[r * w + x];
                    }
                }
            }
        }
    }
}

impl<T: Float> Var<T> {
    /// Stride-1 "same" convolution with an odd square kernel and zero padding.
    ///
    /// `weight` is `Cout×Cin×k×k`, `bias` is `Cout`.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
        let (n, cin, h, w) = self.value().dims4();
        let ws = weight.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be 4D");
        let (cout, wcin, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wcin, cin, "conv2d: input has {cin} channels, weight expects {wcin}");
        assert!(k == k2 && k % 2 == 1, "conv2d needs an odd square kernel");
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[cout], "conv2d bias shape");
        }
        let hw = h * w;
        let kk = cin * k * k;
        let x = self.value().data();
        let wd = weight.value().data();
        let mut out = vec![T::zero(); n * cout * hw];
        let rows = band_rows(kk, w, h);
        let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * rows * w] };
        for b in 0..n {
            let xb = &x[b * cin * hw..(b + 1) * cin * hw];
            let ob = &mut out[b * cout * hw..(b + 1) * cout * hw];
            if k == 1 {
                gemm(cout, cin, hw, T::one(), wd, Layout::RowMajor, xb, Layout::RowMajor, T::zero(), ob);
            } else {
                let mut y0 = 0;
                while y0 < h {
                    let y1 = (y0 + rows).min(h);
                    let band = (y1 - y0) * w;
                    im2col(xb, cin, h, w, k, y0, y1, &mut col);
                    gemm_ldc(
                        cout,
                        kk,
                        band,
                        wd,
                        Layout::RowMajor,
                        &col[..kk * band],
                        Layout::RowMajor,
                        T::zero(),
                        &mut ob[y0 * w..],
                        hw,
                    );
                    y0 = y1;
                }
            }
            if let Some(bias) = bias {
                for (co, &bv) in bias.value().data().iter().enumerate() {
                    for v in &mut ob[co * hw..(co + 1) * hw] {
                        *v += bv;
                    }
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(
            Tensor::new(vec![n, cout, h, w], out),
            parents,
            Box::new(move |g, p| {
                let gd = g.data();
                let x = p[0].value().data();
                let wd = p[1].value().data();
                let mut dx = p[0].requires_grad().then(|| vec![T::zero(); n * cin * hw]);
                let mut dw = p[1].requires_grad().then(|| vec![T::zero(); cout * kk]);
                let rows = band_rows(kk, w, h);
                let mut col = vec![T::zero(); if k == 1 { 0 } else { kk * rows * w }];
                let mut dcol = vec![T::zero(); if k == 1 { 0 } else { kk * rows * w }];
                for b in 0..n {
                    let gb = &gd[b * cout * hw..(b + 1) * cout * hw];
                    let xb = &x[b * cin * hw..(b + 1) * cin * hw];
                    if k == 1 {
                        if let Some(dw) = dw.as_mut() {
                            gemm(cout, hw, cin, T::one(), gb, Layout::RowMajor, xb, Layout::Transposed, T::one(), dw);
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dxb = &mut dx[b * cin * hw..(b + 1) * cin * hw];
                            gemm(cin, cout, hw, T::one(), wd, Layout::Transposed, gb, Layout::RowMajor, T::zero(), dxb);
                        }
                        continue;
                    }
                    let mut y0 = 0;
                    while y0 < h {
                        let y1 = (y0 + rows).min(h);
                        let band = (y1 - y0) * w;
                        // gradient rows for this band, gathered contiguously
                        let gband: Vec<T> = (0..cout)
                            .flat_map(|co| gb[co * hw + y0 * w..co * hw + y1 * w].iter().copied())
                            .collect();
                        if let Some(dw) = dw.as_mut() {
                            im2col(xb, cin, h, w, k, y0, y1, &mut col);
                            gemm(cout, band, kk, T::one(), &gband, Layout::RowMajor, &col[..kk * band], Layout::Transposed, T::one(), dw);
                        }
                        if let Some(dx) = dx.as_mut() {
                            gemm(kk, cout, band, T::one(), wd, Layout::Transposed, &gband, Layout::RowMajor, T::zero(), &mut dcol[..kk * band]);
                            col2im(&dcol, cin, h, w, k, y0, y1, &mut dx[b * cin * hw..(b + 1) * cin * hw]);
                        }
                        y0 = y1;
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::new(vec![n, cin, h, w], d)),
                    dw.map(|d| Tensor::new(vec![cout, cin, k, k], d)),
                ];
                if p.len() == 3 {
                    grads.push(p[2].requires_grad().then(|| {
                        let mut db = vec![T::zero(); cout];
                        for b in 0..n {
                            for (co, acc) in db.iter_mut().enumerate() {
                                let s = b * cout * hw + co * hw;
                                *acc += gd[s..s + hw].iter().copied().sum::<T>();
                            }
                        }
                        Tensor::new(vec![cout], db)
                    }));
                }
                grads
            }),
        )
    }

    /// Transposed convolution with kernel 2, stride 2 (exact 2× upsampling).
    ///
    /// `weight` is `Cin×Cout×2×2`, `bias` is `Cout`.
    pub fn conv_transpose2x2(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
        let (n, cin, h, w) = self.value().dims4();
        let ws = weight.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv_transpose2x2 weight must be 4D");
        assert_eq!(ws[0], cin, "conv_transpose2x2: channel mismatch");
        assert_eq!((ws[2], ws[3]), (2, 2), "conv_transpose2x2 needs a 2×2 kernel");
        let cout = ws[1];
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        // weight viewed as Cin × (Cout·4); out taps = Wᵀ · X
        let m = cout * 4;
        let x = self.value().data();
        let wd = weight.value().data();
        let mut taps = vec![T::zero(); m * hw];
        let mut out = vec![T::zero(); n * cout * oh * ow];
        for b in 0..n {
            let xb = &x[b * cin * hw..(b + 1) * cin * hw];
            gemm(m, cin, hw, T::one(), wd, Layout::Transposed, xb, Layout::RowMajor, T::zero(), &mut taps);
            let ob = &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow];
            for co in 0..cout {
                let bv = bias.map_or(T::zero(), |bb| bb.value().data()[co]);
                for t in 0..4 {
                    let (dy, dx) = (t / 2, t % 2);
                    let src = &taps[(co * 4 + t) * hw..(co * 4 + t + 1) * hw];
                    for y in 0..h {
                        let orow = co * oh * ow + (2 * y + dy) * ow;
                        for xx in 0..w {
                            ob[orow + 2 * xx + dx] = src[y * w + xx] + bv;
                        }
                    }
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[cout], "conv_transpose2x2 bias shape");
            parents.push(b.clone());
        }
        Var::from_op(
            Tensor::new(vec![n, cout, oh, ow], out),
            parents,
            Box::new(move |g, p| {
                let gd = g.data();
                let x = p[0].value().data();
                let wd = p[1].value().data();
                let mut dx = p[0].requires_grad().then(|| vec![T::zero(); n * cin * hw]);
                let mut dw = p[1].requires_grad().then(|| vec![T::zero(); cin * m]);
                let mut db = vec![T::zero(); cout];
                let mut gtaps = vec![T::zero(); m * hw];
                for b in 0..n {
                    let gb = &gd[b * cout * oh * ow..(b + 1) * cout * oh * ow];
                    for co in 0..cout {
                        for t in 0..4 {
                            let (dy, dxo) = (t / 2, t % 2);
                            let dst = &mut gtaps[(co * 4 + t) * hw..(co * 4 + t + 1) * hw];
                            for y in 0..h {
                                let orow = co * oh * ow + (2 * y + dy) * ow;
                                for xx in 0..w {
                                    dst[y * w + xx] = gb[orow + 2 * xx + dxo];
                                }
                            }
                        }
                        db[co] += gb[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum::<T>();
                    }
                    let xb = &x[b * cin * hw..(b + 1) * cin * hw];
                    if let Some(dw) = dw.as_mut() {
                        gemm(cin, hw, m, T::one(), xb, Layout::RowMajor, &gtaps, Layout::Transposed, T::one(), dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(cin, m, hw, T::one(), wd, Layout::RowMajor, &gtaps, Layout::RowMajor, T::zero(), &mut dx[b * cin * hw..(b + 1) * cin * hw]);
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::new(vec![n, cin, h, w], d)),
                    dw.map(|d| Tensor::new(vec![cin, cout, 2, 2], d)),
                ];
                if p.len() == 3 {
                    grads.push(Some(Tensor::new(vec![cout], db)));
                }
                grads
            }),
        )
    }

    /// Depth-to-space with factor 2: `N×4C×H×W → N×C×2H×2W`,
    /// `out[c, 2y+i, 2x+j] = in[4c + 2i + j, y, x]`.
    pub fn pixel_shuffle2(&self) -> Var<T> {
        let (n, c4, h, w) = self.value().dims4();
        assert_eq!(c4 % 4, 0, "pixel_shuffle2 needs channels divisible by 4");
        let c = c4 / 4;
        let (oh, ow) = (2 * h, 2 * w);
        let index = move |i: usize| {
            // output flat index -> input flat index
            let b = i / (c * oh * ow);
            let r = i % (c * oh * ow);
            let ch = r / (oh * ow);
            let oy = (r / ow) % oh;
            let ox = r % ow;
            let ic = 4 * ch + 2 * (oy % 2) + ox % 2;
            ((b * c4 + ic) * h + oy / 2) * w + ox / 2
        };
        let x = self.value().data();
        let value = Tensor::from_fn(vec![n, c, oh, ow], |i| x[index(i)]);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(vec![n, c4, h, w]);
                let d = dx.data_mut();
                for (i, &gv) in g.data().iter().enumerate() {
                    d[index(i)] = gv;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Channel concatenation of NCHW tensors with equal batch and spatial dims.
    pub fn concat_channels(parts: &[&Var<T>]) -> Var<T> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat_channels(&tensors);
        let (n, ctot, h, w) = value.dims4();
        let chans: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        Var::from_op(
            value,
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g, p| {
                let hw = h * w;
                let gd = g.data();
                let mut offset = 0;
                let mut out = Vec::with_capacity(chans.len());
                for (pi, &pc) in chans.iter().enumerate() {
                    if p[pi].requires_grad() {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let s = (b * ctot + offset) * hw;
                            d.extend_from_slice(&gd[s..s + pc * hw]);
                        }
                        out.push(Some(Tensor::new(vec![n, pc, h, w], d)));
                    } else {
                        out.push(None);
                    }
                    offset += pc;
                }
                out
            }),
        )
    }

    /// Dense layer on `N×F` input: `x · Wᵀ + b`, with `weight` `Out×F`.
    pub fn linear(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
        let (n, f) = match self.shape() {
            [n, f] => (*n, *f),
            s => panic!("linear expects N×F input, got {s:?}"),
        };
        let (o, wf) = match weight.shape() {
            [o, wf] => (*o, *wf),
            s => panic!("linear weight must be 2D, got {s:?}"),
        };
        assert_eq!(f, wf, "linear: feature mismatch");
        let mut out = vec![T::zero(); n * o];
        gemm(n, f, o, T::one(), self.value().data(), Layout::RowMajor, weight.value().data(), Layout::Transposed, T::zero(), &mut out);
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[o], "linear bias shape");
            for row in out.chunks_mut(o) {
                for (v, &bv) in row.iter_mut().zip(b.value().data()) {
                    *v += bv;
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(
            Tensor::new(vec![n, o], out),
            parents,
            Box::new(move |g, p| {
                let gd = g.data();
                let dx = p[0].requires_grad().then(|| {
                    let mut d = vec![T::zero(); n * f];
                    gemm(n, o, f, T::one(), gd, Layout::RowMajor, p[1].value().data(), Layout::RowMajor, T::zero(), &mut d);
                    Tensor::new(vec![n, f], d)
                });
                let dw = p[1].requires_grad().then(|| {
                    let mut d = vec![T::zero(); o * f];
                    gemm(o, n, f, T::one(), gd, Layout::Transposed, p[0].value().data(), Layout::RowMajor, T::zero(), &mut d);
                    Tensor::new(vec![o, f], d)
                });
                let mut grads = vec![dx, dw];
                if p.len() == 3 {
                    let mut db = vec![T::zero(); o];
                    for row in gd.chunks(o) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    grads.push(Some(Tensor::new(vec![o], db)));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let p = (k / 2) as isize;
        Tensor::from_fn(vec![n, cout, h, wd], |i| {
            let bi = i / (cout * h * wd);
            let co = (i / (h * wd)) % cout;
            let y = (i / wd) % h;
            let xx = i % wd;
            let mut s = b[co];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = xx as isize + kx as isize - p;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                            s += x.data()[((bi * cin + ci) * h + sy as usize) * wd + sx as usize]
                                * w.data()[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        for k in [1usize, 3, 5] {
            let x = Tensor::<f64>::from_fn(vec![2, 3, 5, 7], |i| ((i * 37) % 11) as f64 * 0.1 - 0.5);
            let w = Tensor::<f64>::from_fn(vec![4, 3, k, k], |i| ((i * 13) % 7) as f64 * 0.2 - 0.6);
            let b = [0.1, -0.2, 0.3, 0.0];
            let y = Var::constant(x.clone()).conv2d(
                &Var::constant(w.clone()),
                Some(&Var::constant(Tensor::new(vec![4], b.to_vec()))),
            );
            let expect = naive_conv(&x, &w, &b);
            for (a, e) in y.value().data().iter().zip(expect.data()) {
                assert!((a - e).abs() < 1e-12, "k={k}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn transposed_conv_places_taps() {
        let x = Var::constant(Tensor::<f64>::new(vec![1, 1, 1, 2], vec![1.0, 2.0]));
        let w = Var::constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = x.conv_transpose2x2(&w, None);
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.value().data(), &[1.0, 2.0, 2.0, 4.0, 3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = Var::constant(Tensor::<f64>::from_fn(vec![1, 4, 1, 1], |i| i as f64));
        let y = x.pixel_shuffle2();
        assert_eq!(y.value().data(), &[0.0, 1.0, 2.0, 3.0]);
    }
}
