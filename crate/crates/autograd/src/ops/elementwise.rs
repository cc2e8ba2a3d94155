use crate::{Float, Tensor, Var};

/// Branch-free so the loops vectorize; `exp` overflowing to infinity gives
/// the correct limit 0.
fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Float> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                vec![
                    p[0].requires_grad()
                        .then(|| g.zip_map(p[1].value(), |g, b| g * b)),
                    p[1].requires_grad()
                        .then(|| g.zip_map(p[0].value(), |g, a| g * a)),
                ]
            }),
        )
    }

    pub fn scale(&self, s: T) -> Var<T> {
        Var::from_op(
            self.value().scale(s),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.scale(s))]),
        )
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        Var::from_op(
            self.value().map(|x| x + s),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn square(&self) -> Var<T> {
        Var::from_op(
            self.value().map(|x| x * x),
            vec![self.clone()],
            Box::new(|g, p| {
                let two = T::one() + T::one();
                vec![Some(g.zip_map(p[0].value(), |g, x| two * g * x))]
            }),
        )
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(&self) -> Var<T> {
        Var::from_op(
            self.value().map(|x| x.abs()),
            vec![self.clone()],
            Box::new(|g, p| {
                vec![Some(g.zip_map(p[0].value(), |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        let value = self.value().map(sigmoid);
        let out = value.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.zip_map(&out, |g, s| g * s * (T::one() - s)))]),
        )
    }

    /// Swish / SiLU: `x · sigmoid(x)`.
    pub fn swish(&self) -> Var<T> {
        Var::from_op(
            self.value().map(|x| x * sigmoid(x)),
            vec![self.clone()],
            Box::new(|g, p| {
                vec![Some(g.zip_map(p[0].value(), |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (T::one() - s))
                }))]
            }),
        )
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        Var::from_op(
            self.value()
                .map(|x| if x > T::zero() { x } else { slope * x }),
            vec![self.clone()],
            Box::new(move |g, p| {
                vec![Some(g.zip_map(p[0].value(), |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        slope * g
                    }
                }))]
            }),
        )
    }

    /// Multiply an `N×C×H×W` tensor by an `N×1×H×W` map broadcast over channels.
    pub fn mul_spatial_map(&self, map: &Var<T>) -> Var<T> {
        let (n, c, h, w) = self.value().dims4();
        let (mn, mc, mh, mw) = map.value().dims4();
        assert_eq!((mn, mc, mh, mw), (n, 1, h, w), "spatial map shape mismatch");
        let hw = h * w;
        let x = self.value().data();
        let m = map.value().data();
        let value = Tensor::from_fn(vec![n, c, h, w], |i| {
            let b = i / (c * hw);
            x[i] * m[b * hw + i % hw]
        });
        Var::from_op(
            value,
            vec![self.clone(), map.clone()],
            Box::new(move |g, p| {
                let gd = g.data();
                let dx = p[0].requires_grad().then(|| {
                    let m = p[1].value().data();
                    Tensor::from_fn(vec![n, c, h, w], |i| gd[i] * m[(i / (c * hw)) * hw + i % hw])
                });
                let dm = p[1].requires_grad().then(|| {
                    let x = p[0].value().data();
                    let mut dm = Tensor::zeros(vec![n, 1, h, w]);
                    let dmd = dm.data_mut();
                    for (i, (&gi, &xi)) in gd.iter().zip(x).enumerate() {
                        dmd[(i / (c * hw)) * hw + i % hw] += gi * xi;
                    }
                    dm
                });
                vec![dx, dm]
            }),
        )
    }

    pub fn sum_all(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        Var::from_op(
            Tensor::scalar(self.value().sum()),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]),
        )
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = T::from_usize(self.value().numel()).unwrap();
        self.sum_all().scale(T::one() / n)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<T> {
        let old = self.shape().to_vec();
        Var::from_op(
            self.value().clone().reshape(shape),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.clone().reshape(old.clone()))]),
        )
    }
}
