use crate::real::Real;

/// A single image's activations, channel-major (`C×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "activation buffer length");
        Self { c, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn plane(&self, c: usize) -> &[T] {
        &self.data[c * self.hw()..(c + 1) * self.hw()]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let hw = self.hw();
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn add_assign(&mut self, other: &Act<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat(&self, other: &Act<T>) -> Act<T> {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Act::from_vec(self.c + other.c, self.h, self.w, data)
    }

    /// Splits channels at `c`; inverse of [`Act::concat`].
    pub fn split(&self, c: usize) -> (Act<T>, Act<T>) {
        let at = c * self.hw();
        (
            Act::from_vec(c, self.h, self.w, self.data[..at].to_vec()),
            Act::from_vec(self.c - c, self.h, self.w, self.data[at..].to_vec()),
        )
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered parameter tensors. Gradients and optimizer moments use the same
/// type with identical names and shapes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "parameter shape");
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        self.params.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, i: usize) -> &[T] {
        &self.params[i].data
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.params[i].data
    }

    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.len() == other.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn add_assign(&mut self, other: &ParamSet<T>) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|x| *x = *x * s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| &p.data)
            .map(|&x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flat_map(|p| &p.data).all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&x| U::of(x.f64())).collect(),
                })
                .collect(),
        }
    }
}
