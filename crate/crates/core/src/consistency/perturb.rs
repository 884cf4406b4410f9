use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{standard_normal_vec, stream_rng, Stream};

/// Symmetric idempotent `d×d` matrix confining noise to a subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    dim: usize,
    values: Vec<f64>,
}

impl Projection {
    const TOL: f64 = 1e-10;

    /// Validates `P·P = P` and `Pᵀ = P` entrywise within 1e-10.
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dim * dim || dim == 0 {
            return Err(Error::LengthMismatch {
                expected: dim * dim,
                actual: values.len(),
            });
        }
        for i in 0..dim {
            for j in 0..dim {
                if (values[i * dim + j] - values[j * dim + i]).abs() > Self::TOL {
                    return Err(Error::InvalidArgument("projection is not symmetric".into()));
                }
                let pp: f64 = (0..dim).map(|k| values[i * dim + k] * values[k * dim + j]).sum();
                if (pp - values[i * dim + j]).abs() > Self::TOL {
                    return Err(Error::InvalidArgument("projection is not idempotent".into()));
                }
            }
        }
        Ok(Self { dim, values })
    }

    /// Projector onto the first `rank` coordinate axes.
    pub fn onto_coordinates(dim: usize, rank: usize) -> Result<Self> {
        let mut v = vec![0.0; dim * dim];
        for i in 0..rank.min(dim) {
            v[i * dim + i] = 1.0;
        }
        Self::new(dim, v)
    }

    /// Orthogonal projector onto the span of the given vectors.
    pub fn onto_span(dim: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for v in vectors {
            if v.len() != dim {
                return Err(Error::LengthMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            let mut u = v.clone();
            for b in &basis {
                let d: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
                u.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                u.iter_mut().for_each(|x| *x /= n);
                basis.push(u);
            }
        }
        let mut p = vec![0.0; dim * dim];
        for b in &basis {
            for i in 0..dim {
                for j in 0..dim {
                    p[i * dim + j] += b[i] * b[j];
                }
            }
        }
        Self::new(dim, p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.values
            .chunks(self.dim)
            .map(|row| row.iter().zip(z).map(|(p, z)| p * z).sum())
            .collect()
    }
}

/// Input and weight perturbations for one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerturbationSpec {
    /// Scale `ε` of additive Gaussian input noise `ε·z`.
    pub noise_sigma: f64,
    /// Maximum random shift in pixels; needs `image_shape`.
    pub translate_px: usize,
    /// `(height, width)` of image rows, required for translation.
    pub image_shape: Option<(usize, usize)>,
    pub dropout_rate: f64,
    pub projection: Option<Projection>,
}

impl PerturbationSpec {
    pub fn noise(noise_sigma: f64, dropout_rate: f64) -> Self {
        Self {
            noise_sigma,
            dropout_rate,
            ..Self::default()
        }
    }

    pub fn with_projection(mut self, p: Projection) -> Self {
        self.projection = Some(p);
        self
    }

    pub fn with_translation(mut self, px: usize, height: usize, width: usize) -> Self {
        self.translate_px = px;
        self.image_shape = Some((height, width));
        self
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument("dropout rate outside [0, 1)".into()));
        }
        if let Some(p) = &self.projection {
            if p.dim() != input_dim {
                return Err(Error::LengthMismatch {
                    expected: input_dim,
                    actual: p.dim(),
                });
            }
        }
        if self.translate_px > 0 {
            match self.image_shape {
                Some((h, w)) if h * w == input_dim => {}
                _ => {
                    return Err(Error::InvalidArgument(
                        "translation needs an image shape matching the input width".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Copy without dropout.
    pub fn without_dropout(&self) -> Self {
        Self {
            dropout_rate: 0.0,
            ..self.clone()
        }
    }

    /// Noise direction for one row: `z` or `P·z`.
    pub fn noise_direction<R: Rng + ?Sized>(&self, rng: &mut R, dim: usize) -> Vec<f64> {
        let z = standard_normal_vec(rng, dim);
        match &self.projection {
            Some(p) => p.apply(&z),
            None => z,
        }
    }

    /// Applies translation (image rows) and additive noise to a batch.
    pub fn perturb_inputs(&self, batch: &Tensor, seed: u64) -> Result<Tensor> {
        let (_, dim) = batch.rows_cols();
        self.validate(dim)?;
        let mut x = batch.values().to_vec();
        if self.translate_px > 0 {
            let (h, w) = self.image_shape.expect("validated");
            let mut rng = stream_rng(seed, Stream::Perturb, 1);
            let t = self.translate_px as i64;
            for row in x.chunks_mut(dim) {
                let dy = rng.random_range(-t..=t);
                let dx = rng.random_range(-t..=t);
                translate(row, h, w, dy, dx);
            }
        }
        if self.noise_sigma > 0.0 {
            let mut rng = stream_rng(seed, Stream::Perturb, 0);
            for row in x.chunks_mut(dim) {
                let z = self.noise_direction(&mut rng, dim);
                row.iter_mut().zip(z).for_each(|(v, z)| *v += self.noise_sigma * z);
            }
        }
        Tensor::new(batch.shape().to_vec(), x)
    }
}

/// Shifts an `h×w` image by `(dy, dx)` with zero fill.
fn translate(img: &mut [f64], h: usize, w: usize, dy: i64, dx: i64) {
    let src = img.to_vec();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let (sr, sc) = (r - dy, c - dx);
            img[(r * w as i64 + c) as usize] =
                if (0..h as i64).contains(&sr) && (0..w as i64).contains(&sc) {
                    src[(sr * w as i64 + sc) as usize]
                } else {
                    0.0
                };
        }
    }
}
