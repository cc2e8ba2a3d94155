//! Pooling ops. Stride-1 pools keep the spatial size via replicate padding.

use crate::{Float, Tensor, Var};

fn clamp_idx(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// `dst[y][x] += Σ_{|d|≤r} src[y][clamp(x+d)]`.
fn box_rows<T: Float>(src: &[T], dst: &mut [T], h: usize, w: usize, r: usize) {
    for y in 0..h {
        let (s, d) = (&src[y * w..(y + 1) * w], &mut dst[y * w..(y + 1) * w]);
        for x in 0..w {
            let mut acc = T::zero();
            if x >= r && x + r < w {
                for v in &s[x - r..=x + r] {
                    acc += *v;
                }
            } else {
                for dx in 0..=2 * r {
                    acc += s[clamp_idx(x as isize + dx as isize - r as isize, w)];
                }
            }
            d[x] += acc;
        }
    }
}

/// Transpose of [`box_rows`]: `dst[y][clamp(x+d)] += src[y][x]`.
fn box_rows_transposed<T: Float>(src: &[T], dst: &mut [T], h: usize, w: usize, r: usize) {
    for y in 0..h {
        let (s, d) = (&src[y * w..(y + 1) * w], &mut dst[y * w..(y + 1) * w]);
        for x in 0..w {
            let v = s[x];
            if x >= r && x + r < w {
                for o in &mut d[x - r..=x + r] {
                    *o += v;
                }
            } else {
                for dx in 0..=2 * r {
                    d[clamp_idx(x as isize + dx as isize - r as isize, w)] += v;
                }
            }
        }
    }
}

/// `dst[y] += Σ_{|d|≤r} src[clamp(y+d)]`, whole rows at a time.
fn box_cols<T: Float>(src: &[T], dst: &mut [T], h: usize, w: usize, r: usize) {
    for y in 0..h {
        let d = &mut dst[y * w..(y + 1) * w];
        for dy in 0..=2 * r {
            let sy = clamp_idx(y as isize + dy as isize - r as isize, h);
            for (o, v) in d.iter_mut().zip(&src[sy * w..(sy + 1) * w]) {
                *o += *v;
            }
        }
    }
}

/// Transpose of [`box_cols`].
fn box_cols_transposed<T: Float>(src: &[T], dst: &mut [T], h: usize, w: usize, r: usize) {
    for y in 0..h {
        let s = &src[y * w..(y + 1) * w];
        for dy in 0..=2 * r {
            let ty = clamp_idx(y as isize + dy as isize - r as isize, h);
            for (o, v) in dst[ty * w..(ty + 1) * w].iter_mut().zip(s) {
                *o += *v;
            }
        }
    }
}

impl<T: Float> Var<T> {
    /// `k×k` stride-1 average pool with replicate padding; output shape equals input shape.
    pub fn avg_pool_same(&self, k: usize) -> Var<T> {
        assert!(k % 2 == 1, "avg_pool_same needs an odd window");
        let (n, c, h, w) = self.value().dims4();
        let r = k / 2;
        let inv = T::one() / T::from_usize(k * k).unwrap();
        let x = self.value().data();
        let mut out = vec![T::zero(); n * c * h * w];
        let mut tmp = vec![T::zero(); h * w];
        for (plane, oplane) in x.chunks(h * w).zip(out.chunks_mut(h * w)) {
            tmp.iter_mut().for_each(|v| *v = T::zero());
            box_rows(plane, &mut tmp, h, w, r);
            box_cols(&tmp, oplane, h, w, r);
            oplane.iter_mut().for_each(|v| *v *= inv);
        }
        Var::from_op(
            Tensor::new(vec![n, c, h, w], out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); n * c * h * w];
                let mut tmp = vec![T::zero(); h * w];
                for (gplane, dplane) in g.data().chunks(h * w).zip(dx.chunks_mut(h * w)) {
                    tmp.iter_mut().for_each(|v| *v = T::zero());
                    box_cols_transposed(gplane, &mut tmp, h, w, r);
                    box_rows_transposed(&tmp, dplane, h, w, r);
                    dplane.iter_mut().for_each(|v| *v *= inv);
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx))]
            }),
        )
    }

    /// `k×k` stride-1 max pool; the window is clipped at the borders, which is
    /// the same as replicate padding for a max.
    pub fn max_pool_same(&self, k: usize) -> Var<T> {
        assert!(k % 2 == 1, "max_pool_same needs an odd window");
        let (n, c, h, w) = self.value().dims4();
        let r = (k / 2) as isize;
        let x = self.value().data();
        let mut out = vec![T::zero(); n * c * h * w];
        let mut arg = vec![0u32; n * c * h * w];
        // separable: row max then column max, tracking the argmax position
        let mut row_max = vec![T::zero(); h * w];
        let mut row_arg = vec![0u32; h * w];
        for (p, plane) in x.chunks(h * w).enumerate() {
            for y in 0..h {
                for xx in 0..w {
                    let lo = (xx as isize - r).max(0) as usize;
                    let hi = ((xx as isize + r) as usize).min(w - 1);
                    let mut best = lo;
                    for j in lo + 1..=hi {
                        if plane[y * w + j] > plane[y * w + best] {
                            best = j;
                        }
                    }
                    row_max[y * w + xx] = plane[y * w + best];
                    row_arg[y * w + xx] = (y * w + best) as u32;
                }
            }
            for y in 0..h {
                let lo = (y as isize - r).max(0) as usize;
                let hi = ((y as isize + r) as usize).min(h - 1);
                for xx in 0..w {
                    let mut best = lo;
                    for i in lo + 1..=hi {
                        if row_max[i * w + xx] > row_max[best * w + xx] {
                            best = i;
                        }
                    }
                    out[p * h * w + y * w + xx] = row_max[best * w + xx];
                    arg[p * h * w + y * w + xx] = row_arg[best * w + xx];
                }
            }
        }
        Var::from_op(
            Tensor::new(vec![n, c, h, w], out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for (i, &gv) in g.data().iter().enumerate() {
                    let base = (i / (h * w)) * h * w;
                    dx[base + arg[i] as usize] += gv;
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx))]
            }),
        )
    }

    /// 2×2 stride-2 max pool; H and W must be even.
    pub fn max_pool2(&self) -> Var<T> {
        let (n, c, h, w) = self.value().dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}×{w}");
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value().data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut arg = vec![0u32; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = (2 * y) * w + 2 * xx;
                    for idx in [(2 * y) * w + 2 * xx + 1, (2 * y + 1) * w + 2 * xx, (2 * y + 1) * w + 2 * xx + 1] {
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    out[p * oh * ow + y * ow + xx] = plane[best];
                    arg[p * oh * ow + y * ow + xx] = best as u32;
                }
            }
        }
        Var::from_op(
            Tensor::new(vec![n, c, oh, ow], out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for (i, &gv) in g.data().iter().enumerate() {
                    let p = i / (oh * ow);
                    dx[p * h * w + arg[i] as usize] += gv;
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx))]
            }),
        )
    }

    /// Mean over the spatial dims: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&self) -> Var<T> {
        let (n, c, h, w) = self.value().dims4();
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let value = Tensor::new(
            vec![n, c],
            self.value().data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect(),
        );
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let d = g.data();
                vec![Some(Tensor::from_fn(vec![n, c, h, w], |i| d[i / hw] * inv))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_constant_is_fixed_point() {
        let x = Var::constant(Tensor::<f64>::full(vec![1, 2, 4, 3], 0.7));
        let y = x.avg_pool_same(3);
        assert!(y.value().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn max_pool_same_matches_window_scan() {
        let (h, w) = (6, 5);
        let x = Tensor::<f64>::from_fn(vec![1, 1, h, w], |i| ((i * 17) % 23) as f64);
        let y = Var::constant(x.clone()).max_pool_same(5);
        for yy in 0..h {
            for xx in 0..w {
                let mut m = f64::MIN;
                for sy in yy.saturating_sub(2)..=(yy + 2).min(h - 1) {
                    for sx in xx.saturating_sub(2)..=(xx + 2).min(w - 1) {
                        m = m.max(x.data()[sy * w + sx]);
                    }
                }
                assert_eq!(y.value().data()[yy * w + xx], m);
            }
        }
    }

    #[test]
    fn max_pool2_routes_gradient_to_argmax() {
        let x = Var::leaf(Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]));
        let y = x.max_pool2();
        assert_eq!(y.value().data(), &[4.0]);
        let g = y.sum_all().backward();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
