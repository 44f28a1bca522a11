//! Dense row-major f64 tensors.
//!
//! `Tensor` is a plain value: parameters, embeddings and checkpoint payloads
//! all use it directly. Anything differentiable lives in [`crate::graph`],
//! where each node wraps one of these values.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// A tensor of zeros. Zero-sized dims are allowed (e.g. an empty prompt
    /// block `[0 × d]`).
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Usage(format!(
                "tensor data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Shape `[1]` scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Gaussian init, N(0, std²), from a dedicated ChaCha stream.
    pub fn randn(shape: &[usize], std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::randn_using(shape, std, &mut rng)
    }

    /// Gaussian init drawing from an existing stream.
    pub fn randn_using(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Identity matrix `[n × n]`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// `I + E` with `E ~ N(0, std²)`: a map near the identity. Consumes
    /// exactly `n²` draws, the same as a plain `randn_using` of that shape.
    pub fn eye_plus_noise(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut t = Self::randn_using(&[n, n], std, rng);
        for i in 0..n {
            t.data[i * n + i] += 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows / columns of a 2-D tensor (a 1-D tensor counts as one
    /// row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain (non-graph) cosine similarity between two equal-length vectors.
    /// Errors if either has zero norm.
    pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f64> {
        if a.numel() != b.numel() {
            return Err(Error::ShapeMismatch {
                op: "cosine_sim",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let na = a.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Domain(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let dot: f64 = a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
        Ok(dot / (na * nb))
    }
}

/// Marsaglia polar method; two uniforms per normal, second draw discarded so
/// consumption per call is deterministic in count only, which is all the
/// reproducibility contract needs.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}
