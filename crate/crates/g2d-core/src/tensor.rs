//! Dense n-dimensional `f64` arrays in row-major order.
//!
//! `Tensor` is the carrier for images, descriptor grids, embeddings and
//! parameters. There is no broadcasting beyond what individual graph ops
//! define; shapes must match exactly everywhere else.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let len: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        assert_eq!(
            data.len(),
            len,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; len])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; len])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    /// Uniform values in `[-scale, scale)`.
    pub fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        Tensor::new(shape.to_vec(), data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single scalar value; panics unless the tensor has exactly one entry.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape;
        self
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Elementwise in-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// Elementwise in-place `self += k * other`.
    pub fn add_scaled(&mut self, other: &Tensor, k: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += k * b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// FNV-1a hash over the little-endian bit patterns of all entries.
    /// Used for bit-exact freeze checks.
    pub fn bit_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Offset of `[b, c, y, x]` in a `B x C x H x W` tensor.
#[inline]
pub fn idx4(c_dim: usize, h: usize, w: usize, b: usize, c: usize, y: usize, x: usize) -> usize {
    ((b * c_dim + c) * h + y) * w + x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_length_agree() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(t.len(), 24);
        assert_eq!(t.shape(), &[2, 3, 4]);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn mismatched_data_length_panics() {
        Tensor::new(vec![2, 2], vec![1.0; 3]);
    }

    #[test]
    #[should_panic(expected = "positive")]
    fn zero_dimension_panics() {
        Tensor::new(vec![2, 0], vec![]);
    }

    #[test]
    fn bit_hash_detects_single_bit_changes() {
        let a = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
        let mut b = a.clone();
        assert_eq!(a.bit_hash(), b.bit_hash());
        b.data_mut()[1] = 2.0 + f64::EPSILON * 2.0;
        assert_ne!(a.bit_hash(), b.bit_hash());
    }

    #[test]
    fn idx4_is_row_major() {
        // B=1, C=2, H=3, W=4
        assert_eq!(idx4(2, 3, 4, 0, 0, 0, 0), 0);
        assert_eq!(idx4(2, 3, 4, 0, 0, 0, 3), 3);
        assert_eq!(idx4(2, 3, 4, 0, 1, 0, 0), 12);
        assert_eq!(idx4(2, 3, 4, 0, 1, 2, 3), 23);
    }
}
