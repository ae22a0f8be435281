use crate::{Scalar, Tensor, Var};

// Graph ops are plain methods so that chains read left to right without trait imports.
#[allow(clippy::should_implement_trait)]
impl<'g, T: Scalar> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph().record(&[self, other], out, |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph().record(&[self, other], out, |g| vec![Some(g.clone()), Some(g.map(|x| -x))])
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph().record(&[self, other], out, move |g| {
            vec![Some(g.zip_map(&b, |g, y| g * y)), Some(g.zip_map(&a, |g, x| g * x))]
        })
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x / y);
        self.graph().record(&[self, other], out, move |g| {
            let ga = g.zip_map(&b, |g, y| g / y);
            let mut gb = g.clone();
            for ((gb, &x), &y) in gb.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *gb = -*gb * x / (y * y);
            }
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let out = self.value().map(|x| x * c);
        self.graph().record(&[self], out, move |g| vec![Some(g.map(|x| x * c))])
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let out = self.value().map(|x| x + c);
        self.graph().record(&[self], out, |g| vec![Some(g.clone())])
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    /// Multiplies every element by the scalar variable `s`.
    pub fn mul_scalar(self, s: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let sv = s.item();
        let shape_s = s.shape();
        let out = a.map(|x| x * sv);
        self.graph().record(&[self, s], out, move |g| {
            let gs: T = g.data().iter().zip(a.data()).map(|(&g, &x)| g * x).sum();
            vec![Some(g.map(|x| x * sv)), Some(Tensor::new(&shape_s, vec![gs]))]
        })
    }

    /// Divides every element by the scalar variable `s`.
    pub fn div_scalar(self, s: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let sv = s.item();
        let shape_s = s.shape();
        let out = a.map(|x| x / sv);
        self.graph().record(&[self, s], out, move |g| {
            let gs: T = g.data().iter().zip(a.data()).map(|(&g, &x)| -g * x / (sv * sv)).sum();
            vec![Some(g.map(|x| x / sv)), Some(Tensor::new(&shape_s, vec![gs]))]
        })
    }

    pub fn exp(self) -> Var<'g, T> {
        let out = self.value().map(|x| x.exp());
        let y = out.clone();
        self.graph().record(&[self], out, move |g| vec![Some(g.zip_map(&y, |g, y| g * y))])
    }

    pub fn ln(self) -> Var<'g, T> {
        let a = self.value();
        let out = a.map(|x| x.ln());
        self.graph().record(&[self], out, move |g| vec![Some(g.zip_map(&a, |g, x| g / x))])
    }

    pub fn square(self) -> Var<'g, T> {
        let a = self.value();
        let out = a.map(|x| x * x);
        let two = T::lit(2.0);
        self.graph().record(&[self], out, move |g| vec![Some(g.zip_map(&a, |g, x| two * g * x))])
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = self.value().map(sigmoid);
        let y = out.clone();
        self.graph()
            .record(&[self], out, move |g| vec![Some(g.zip_map(&y, |g, y| g * y * (T::one() - y)))])
    }

    pub fn relu(self) -> Var<'g, T> {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        let a = self.value();
        let out = a.map(|x| if x > T::zero() { x } else { x * slope });
        self.graph().record(&[self], out, move |g| {
            vec![Some(g.zip_map(&a, |g, x| if x > T::zero() { g } else { g * slope }))]
        })
    }

    pub fn sum(self) -> Var<'g, T> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let out = Tensor::scalar(a.sum());
        self.graph().record(&[self], out, move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::from_usize(self.value().len()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Column sums of a 2-D tensor: `[m, n] -> [n]`.
    pub fn sum_rows(self) -> Var<'g, T> {
        let a = self.value();
        let (m, n) = (a.rows(), a.cols());
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(a.row(i)) {
                *o += x;
            }
        }
        self.graph().record(&[self], Tensor::new(&[n], out), move |g| {
            let gd = g.data();
            vec![Some(Tensor::from_fn(&[m, n], |i| gd[i % n]))]
        })
    }

    /// Row sums of a 2-D tensor: `[m, n] -> [m]`.
    pub fn sum_cols(self) -> Var<'g, T> {
        let a = self.value();
        let (m, n) = (a.rows(), a.cols());
        let out: Vec<T> = (0..m).map(|i| a.row(i).iter().copied().sum()).collect();
        self.graph().record(&[self], Tensor::new(&[m], out), move |g| {
            let gd = g.data();
            vec![Some(Tensor::from_fn(&[m, n], |i| gd[i / n]))]
        })
    }

    /// Weighted sum of scalar variables, `Σ w_i x_i`.
    pub fn weighted_sum(terms: &[(T, Var<'g, T>)]) -> Var<'g, T> {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let graph = terms[0].1.graph();
        let weights: Vec<T> = terms.iter().map(|t| t.0).collect();
        let vars: Vec<Var<'g, T>> = terms.iter().map(|t| t.1).collect();
        let shapes: Vec<Vec<usize>> = vars.iter().map(|v| v.shape()).collect();
        let total: T = terms.iter().map(|(w, v)| *w * v.item()).sum();
        graph.record(&vars, Tensor::scalar(total), move |g| {
            let gv = g.item();
            weights.iter().zip(&shapes).map(|(&w, s)| Some(Tensor::new(s, vec![gv * w]))).collect()
        })
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
