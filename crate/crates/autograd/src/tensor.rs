use crate::Float;

/// Dense row-major tensor. Image-like data is laid out NCHW.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(n, c, h, w)`; panics on non-4D tensors.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a 4D tensor, got shape {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in elementwise op");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch in accumulate");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.numel()).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect(),
        }
    }

    /// Sample `i` of an NCHW batch, keeping a leading batch dim of 1.
    pub fn sample(&self, i: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        assert!(i < n, "sample index {i} out of range for batch {n}");
        let len = c * h * w;
        Self::new(vec![1, c, h, w], self.data[i * len..(i + 1) * len].to_vec())
    }

    /// Concatenate NCHW tensors along the batch dimension.
    pub fn stack(parts: &[Self]) -> Self {
        assert!(!parts.is_empty(), "stack of zero tensors");
        let (_, c, h, w) = parts[0].dims4();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        let mut n = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4();
            assert_eq!((pc, ph, pw), (c, h, w), "stack: mismatched sample shapes");
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![n, c, h, w], data)
    }

    /// Spatial window `[top..top+height, left..left+width]` of an NCHW tensor.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        assert!(top + height <= h && left + width <= w, "crop out of bounds");
        let mut data = Vec::with_capacity(n * c * height * width);
        for plane in self.data.chunks(h * w) {
            for y in top..top + height {
                data.extend_from_slice(&plane[y * w + left..y * w + left + width]);
            }
        }
        Self::new(vec![n, c, height, width], data)
    }

    /// Mirror every plane left-right.
    pub fn flip_horizontal(&self) -> Self {
        let (_, _, _, w) = self.dims4();
        let mut out = self.clone();
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }

    /// Reflect-pad the bottom and right edges (mirror excluding the edge pixel).
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        assert!(
            (bottom < h || bottom == 0) && (right < w || right == 0),
            "reflect padding ({bottom},{right}) too large for {h}×{w}"
        );
        let (nh, nw) = (h + bottom, w + right);
        let reflect = |i: usize, len: usize| if i < len { i } else { 2 * (len - 1) - i };
        let mut data = Vec::with_capacity(n * c * nh * nw);
        for plane in self.data.chunks(h * w) {
            for y in 0..nh {
                let sy = reflect(y, h);
                for x in 0..nw {
                    data.push(plane[sy * w + reflect(x, w)]);
                }
            }
        }
        Self::new(vec![n, c, nh, nw], data)
    }

    /// Concatenate NCHW tensors along the channel dimension.
    pub fn concat_channels(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let (n, _, h, w) = parts[0].dims4();
        let hw = h * w;
        let mut c_total = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat: mismatched shapes");
            c_total += pc;
        }
        let mut data = Vec::with_capacity(n * c_total * hw);
        for b in 0..n {
            for p in parts {
                let pc = p.shape[1];
                data.extend_from_slice(&p.data[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        Self::new(vec![n, c_total, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_then_flip_indexing() {
        let t = Tensor::<f32>::from_fn(vec![1, 2, 4, 5], |i| i as f32);
        let c = t.crop(1, 2, 2, 3);
        assert_eq!(c.shape(), &[1, 2, 2, 3]);
        assert_eq!(c.data()[0], 7.0);
        assert_eq!(c.data()[6], 27.0);
        let f = c.flip_horizontal();
        assert_eq!(f.data()[0], 9.0);
        assert_eq!(f.flip_horizontal(), c);
    }

    #[test]
    fn reflect_padding_mirrors_without_edge() {
        let t = Tensor::<f32>::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]);
        let p = t.pad_reflect(0, 2);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn concat_interleaves_per_sample() {
        let a = Tensor::<f32>::from_fn(vec![2, 1, 1, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(vec![2, 2, 1, 2], |i| 10.0 + i as f32);
        let c = Tensor::concat_channels(&[&a, &b]);
        assert_eq!(
            c.data(),
            &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]
        );
    }
}
