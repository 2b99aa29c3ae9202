use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// `K` code vectors of dimension `D` and their moving-average statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `[K, D]`
    pub vectors: Tensor,
    /// Moving-average assignment count per code.
    pub ema_counts: Vec<f64>,
    /// `[K, D]` moving-average sum of assigned encoder outputs.
    pub ema_sums: Tensor,
    pub decay: f64,
    pub epsilon: f64,
}

impl Codebook {
    /// Counts start at 1 and sums at the vectors themselves, so unused codes
    /// keep their value up to smoothing.
    pub fn from_vectors(vectors: Tensor, decay: f64, epsilon: f64) -> Result<Self> {
        let &[k, _] = vectors.dims() else {
            return Err(shape_err!("codebook must be [K, D], got {:?}", vectors.dims()));
        };
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self {
            ema_sums: vectors.clone(),
            ema_counts: vec![1.0; k],
            vectors,
            decay,
            epsilon,
        })
    }

    pub fn random(k: usize, d: usize, decay: f64, epsilon: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        let vectors = Tensor::from_fn(&[k, d], |_| rng.random_range(-bound..bound));
        Self::from_vectors(vectors, decay, epsilon)
    }

    pub fn size(&self) -> usize {
        self.vectors.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.dims()[1]
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[k * d..(k + 1) * d]
    }

    /// Index of the nearest code vector; ties go to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.size() {
            let dist: f64 = self.vector(k).iter().zip(z).map(|(e, v)| (v - e) * (v - e)).sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best.0
    }

    /// `[M, D]` rows gathered for `indices`.
    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor> {
        let (k, d) = (self.size(), self.dim());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= k {
                return Err(Error::Index(format!("code index {i} outside codebook of {k}")));
            }
            data.extend_from_slice(self.vector(i));
        }
        Tensor::new(vec![indices.len().max(1), d], data).map_err(|_| shape_err!("empty lookup"))
    }

    /// One moving-average step from a batch of `[M, D]` encoder outputs and
    /// their assignments, followed by Laplace-smoothed renormalization.
    pub fn ema_update(&mut self, z_e: &[f64], indices: &[usize]) -> Result<()> {
        let (k, d) = (self.size(), self.dim());
        if z_e.len() != indices.len() * d {
            return Err(shape_err!("{} values for {} assignments of dim {d}", z_e.len(), indices.len()));
        }
        let mut counts = vec![0.0; k];
        let mut sums = vec![0.0; k * d];
        for (row, &i) in indices.iter().enumerate() {
            if i >= k {
                return Err(Error::Index(format!("code index {i} outside codebook of {k}")));
            }
            counts[i] += 1.0;
            for (s, v) in sums[i * d..(i + 1) * d].iter_mut().zip(&z_e[row * d..(row + 1) * d]) {
                *s += v;
            }
        }
        let g = self.decay;
        for (n, c) in self.ema_counts.iter_mut().zip(&counts) {
            *n = g * *n + (1.0 - g) * c;
        }
        for (m, s) in self.ema_sums.data_mut().iter_mut().zip(&sums) {
            *m = g * *m + (1.0 - g) * s;
        }
        self.renormalize();
        self.vectors.ensure_finite("codebook update")
    }

    /// `e_k = m_k / N~_k` with `N~_k = (N_k + eps) / (n + K eps) * n`.
    fn renormalize(&mut self) {
        let (k, d) = (self.size(), self.dim());
        let total: f64 = self.ema_counts.iter().sum();
        let eps = self.epsilon;
        for i in 0..k {
            let smoothed = (self.ema_counts[i] + eps) / (total + k as f64 * eps) * total;
            for j in 0..d {
                self.vectors.data_mut()[i * d + j] = self.ema_sums.data()[i * d + j] / smoothed;
            }
        }
    }
}

/// Nearest-code quantization over the last dimension of `z_e`.
pub fn quantize(z_e: &Tensor, codebook: &Codebook) -> Result<(Vec<usize>, Tensor)> {
    if codebook.size() == 0 {
        return Err(Error::Config("empty codebook".into()));
    }
    let d = codebook.dim();
    if z_e.dims().last() != Some(&d) {
        return Err(shape_err!("last dim of {:?} must equal code dim {d}", z_e.dims()));
    }
    let indices: Vec<usize> = z_e.data().chunks(d).map(|z| codebook.nearest(z)).collect();
    let mut data = Vec::with_capacity(z_e.len());
    for &i in &indices {
        data.extend_from_slice(codebook.vector(i));
    }
    Ok((indices, Tensor::new(z_e.dims().to_vec(), data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn book(rows: &[&[f64]], decay: f64) -> Codebook {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::from_vectors(Tensor::new(vec![rows.len(), d], data).unwrap(), decay, 1e-5).unwrap()
    }

    #[test]
    fn two_code_example() {
        let cb = book(&[&[0.0, 0.0], &[1.0, 1.0]], 0.99);
        let z = Tensor::new(vec![1, 2], vec![0.2, 0.1]).unwrap();
        let (idx, zq) = quantize(&z, &cb).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(zq.data(), &[0.0, 0.0]);
    }

    #[test]
    fn exact_code_has_zero_error() {
        let cb = book(&[&[0.5, -1.0], &[2.0, 3.0], &[-4.0, 0.25]], 0.99);
        let z = Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap();
        let (idx, zq) = quantize(&z, &cb).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(zq, z);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let cb = book(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]], 0.99);
        let z = Tensor::new(vec![3, 2], vec![0.9, 0.1, 0.1, 0.9, 0.5, 0.5]).unwrap();
        let (idx, _) = quantize(&z, &cb).unwrap();
        assert_eq!(idx, vec![0, 1, 0]);
    }

    #[test]
    fn wrong_dim_is_rejected() {
        let cb = book(&[&[0.0, 0.0]], 0.99);
        assert!(quantize(&Tensor::zeros(&[2, 3]), &cb).is_err());
    }

    #[test]
    fn zero_decay_gives_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cb = Codebook::random(4, 3, 0.0, 1e-5, &mut rng).unwrap();
        let z = [1.0, 2.0, 3.0, 3.0, 2.0, 1.0, 2.0, 2.0, 5.0];
        cb.ema_update(&z, &[2, 2, 2]).unwrap();
        let mean = [2.0, 2.0, 3.0];
        for (a, b) in cb.vector(2).iter().zip(mean) {
            assert!((a - b).abs() < 1e-4 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn unassigned_codes_only_see_smoothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cb = Codebook::random(3, 2, 0.9, 1e-5, &mut rng).unwrap();
        let before = cb.vector(1).to_vec();
        cb.ema_update(&[0.5, 0.5, 0.7, 0.1], &[0, 2]).unwrap();
        // ratio m/N is preserved for code 1; only the smoothing factor differs
        let ratio = cb.vector(1)[0] / before[0];
        assert!((ratio - cb.vector(1)[1] / before[1]).abs() < 1e-12);
        assert!((ratio - 1.0).abs() < 1e-4);
    }
}
