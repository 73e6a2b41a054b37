use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{LsdError, Result};
use crate::real::Real;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(LsdError::input(format!(
                "shape {:?} needs {expected} elements, got {}",
                shape,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a `[rows.len(), dim]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(LsdError::input("ragged rows"));
        }
        Tensor::from_vec(&[rows.len(), dim], rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named collection of tensors. Used both for model parameters and for
/// gradient buffers of identical layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, idx: usize) -> &Tensor<F> {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<F> {
        &mut self.tensors[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Maps a flat coordinate to `(tensor index, offset)`.
    pub fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return (i, flat);
            }
            flat -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat(&self, flat: usize) -> F {
        let (t, o) = self.locate(flat);
        self.tensors[t].data[o]
    }

    pub fn set_flat(&mut self, flat: usize, value: F) {
        let (t, o) = self.locate(flat);
        self.tensors[t].data[o] = value;
    }

    pub fn iter_flat(&self) -> impl Iterator<Item = F> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn fill(&mut self, value: F) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn scale(&mut self, a: F) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= a);
        }
    }

    /// `self += a * other`. Layouts must match.
    pub fn add_scaled(&mut self, other: &ParamSet<F>, a: F) {
        debug_assert_eq!(self.names, other.names);
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            for (v, &w) in t.data.iter_mut().zip(&o.data) {
                *v += a * w;
            }
        }
    }

    pub fn norm_sq(&self) -> F {
        self.iter_flat().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> F {
        self.norm_sq().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn same_layout(&self, other: &ParamSet<F>) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape == b.shape)
    }

    /// Uniform init on weight tensors, zeros on biases.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        let dist = Uniform::new_inclusive(-scale, scale).expect("valid range");
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if is_weight(name) {
                t.data.iter_mut().for_each(|v| *v = F::lit(dist.sample(rng)));
            } else {
                t.data.iter_mut().for_each(|v| *v = F::zero());
            }
        }
    }

    /// Adds N(0, std) noise to weight tensors only (biases untouched).
    pub fn add_weight_noise<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        if std <= 0.0 {
            return;
        }
        let dist = Normal::new(0.0, std).expect("finite std");
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if is_weight(name) {
                t.data.iter_mut().for_each(|v| *v += F::lit(dist.sample(rng)));
            }
        }
    }
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter tensors named `*.bias` are biases; everything else is a weight.
pub fn is_weight(name: &str) -> bool {
    !name.ends_with(".bias")
}

// Small dense kernels. Matrices are row-major `[rows, cols]`.

/// `out += W x`
#[inline]
pub(crate) fn matvec_acc<F: Real>(w: &[F], cols: usize, x: &[F], out: &mut [F]) {
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(w.len(), cols * out.len());
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = F::zero();
        for (&a, &b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// `out += W[:, col_start..col_start + x.len()] x`
#[inline]
pub(crate) fn matvec_cols_acc<F: Real>(w: &[F], cols: usize, col_start: usize, x: &[F], out: &mut [F]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = F::zero();
        for (&a, &b) in row[col_start..col_start + n].iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// `dx += W^T dy`
#[inline]
pub(crate) fn matvec_t_acc<F: Real>(w: &[F], cols: usize, dy: &[F], dx: &mut [F]) {
    debug_assert_eq!(dx.len(), cols);
    for (&d, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if d == F::zero() {
            continue;
        }
        for (x, &a) in dx.iter_mut().zip(row) {
            *x += d * a;
        }
    }
}

/// `dx += W[:, col_start..col_start + dx.len()]^T dy`
#[inline]
pub(crate) fn matvec_cols_t_acc<F: Real>(w: &[F], cols: usize, col_start: usize, dy: &[F], dx: &mut [F]) {
    let n = dx.len();
    for (&d, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if d == F::zero() {
            continue;
        }
        for (x, &a) in dx.iter_mut().zip(&row[col_start..col_start + n]) {
            *x += d * a;
        }
    }
}

/// `dW[:, col_start..col_start + x.len()] += dy x^T`
#[inline]
pub(crate) fn outer_acc<F: Real>(dw: &mut [F], cols: usize, col_start: usize, dy: &[F], x: &[F]) {
    let n = x.len();
    for (&d, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if d == F::zero() {
            continue;
        }
        for (g, &xv) in row[col_start..col_start + n].iter_mut().zip(x) {
            *g += d * xv;
        }
    }
}

#[inline]
pub(crate) fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_with_naive_products() {
        // W = [[1,2,3],[4,5,6]]
        let w = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 2];
        matvec_acc(&w, 3, &[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, [-2.0, -2.0]);
        let mut out = [0.0; 2];
        matvec_cols_acc(&w, 3, 1, &[1.0, 1.0], &mut out);
        assert_eq!(out, [5.0, 11.0]);
        let mut dx = [0.0; 3];
        matvec_t_acc(&w, 3, &[1.0, 1.0], &mut dx);
        assert_eq!(dx, [5.0, 7.0, 9.0]);
        let mut dx = [0.0; 2];
        matvec_cols_t_acc(&w, 3, 1, &[1.0, -1.0], &mut dx);
        assert_eq!(dx, [-3.0, -3.0]);
        let mut dw = [0.0; 6];
        outer_acc(&mut dw, 3, 1, &[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(dw, [0.0, 3.0, 4.0, 0.0, 6.0, 8.0]);
    }

    #[test]
    fn locate_walks_tensors_in_order() {
        let mut p = ParamSet::<f64>::new();
        p.push("a.weight", Tensor::zeros(&[2, 2]));
        p.push("a.bias", Tensor::zeros(&[3]));
        assert_eq!(p.num_elements(), 7);
        assert_eq!(p.locate(3), (0, 3));
        assert_eq!(p.locate(4), (1, 0));
        p.set_flat(6, 2.5);
        assert_eq!(p.flat(6), 2.5);
        assert_eq!(p.get(1).data, vec![0.0, 0.0, 2.5]);
    }

    #[test]
    fn init_leaves_biases_at_zero() {
        let mut p = ParamSet::<f64>::new();
        p.push("w.weight", Tensor::zeros(&[50]));
        p.push("w.bias", Tensor::zeros(&[5]));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        p.init_uniform(0.075, &mut rng);
        assert!(p.get(0).data.iter().all(|v| v.abs() <= 0.075));
        assert!(p.get(0).data.iter().any(|v| *v != 0.0));
        assert!(p.get(1).data.iter().all(|v| *v == 0.0));
        p.add_weight_noise(1.0, &mut rng);
        assert!(p.get(1).data.iter().all(|v| *v == 0.0));
    }

    use rand::SeedableRng;
}
