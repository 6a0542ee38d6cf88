//! Dense n-dimensional f32 tensor, the universal value type for images,
//! parameters, and gradients. Row-major flat storage.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that the buffer length matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::DataLength { expected: numel, got: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f32, hi: f32) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    /// Gaussian samples with the given standard deviation (Box-Muller).
    pub fn randn<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f32) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push((r * theta.cos()) as f32 * std);
            if data.len() < numel {
                data.push((r * theta.sin()) as f32 * std);
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::DataLength { expected: numel, got: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Errors on the first NaN or infinity, naming the flat index.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: format!("{context} (element {i} = {v})") });
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Leading dimension, the batch size for `[N, ...]` tensors.
    pub fn batch_size(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Per-example element count for `[N, ...]` tensors.
    pub fn example_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// View of example `i` of a batched tensor.
    pub fn example(&self, i: usize) -> &[f32] {
        let len = self.example_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Copies example `i` out as a `[1, ...]` tensor.
    pub fn example_tensor(&self, i: usize) -> Tensor {
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor { shape, data: self.example(i).to_vec() }
    }

    /// Row-wise argmax for `[N, c]` tensors; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let n = self.batch_size();
        let c = self.example_len();
        (0..n)
            .map(|i| {
                let row = &self.data[i * c..(i + 1) * c];
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DataLength { expected: 6, got: 5 }));
    }

    #[test]
    fn validate_finite_names_element() {
        let t = Tensor::new(vec![3], vec![1.0, f32::NAN, 2.0]).unwrap();
        let err = t.validate_finite("probe").unwrap_err();
        assert!(err.to_string().contains("element 1"));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(t.argmax_rows(), vec![0, 1]);
    }

    #[test]
    fn randn_is_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&mut a, vec![10], 0.5);
        let y = Tensor::randn(&mut b, vec![10], 0.5);
        assert_eq!(x, y);
    }
}
