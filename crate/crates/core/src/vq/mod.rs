//! Vector quantization of 3-dimensional prosody latents.

mod encoder;
mod train;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Section, Tensor};

pub use encoder::{reference_encode, FrozenEncoder, MelNorm, RefEncoder, RefEncoderConfig};
pub use train::{VqExample, VqStepRecord, VqTrainConfig, VqTrainer};

pub const LATENT_DIM: usize = 3;
pub const CODEBOOK_SIZE: usize = 256;
pub const CODEBOOK_SECTION: &str = "codebook";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantized {
    pub index: usize,
    pub codeword: [f64; LATENT_DIM],
    /// Euclidean distance between the latent and the codeword.
    pub distance: f64,
}

/// `K x 3` codeword table; 256 rows in trained models.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codewords: Array2<f64>,
}

fn sq_dist(a: &[f64], b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn new(codewords: Array2<f64>) -> Result<Self> {
        if codewords.ncols() != LATENT_DIM || codewords.nrows() == 0 {
            return Err(Error::Format(format!(
                "codebook must be K x {LATENT_DIM} with K >= 1, got {:?}",
                codewords.shape()
            )));
        }
        if codewords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook has non-finite entries".into()));
        }
        Ok(Self { codewords })
    }

    pub fn size(&self) -> usize {
        self.codewords.nrows()
    }

    pub fn codewords(&self) -> &Array2<f64> {
        &self.codewords
    }

    pub fn codeword(&self, index: usize) -> [f64; LATENT_DIM] {
        let r = self.codewords.row(index);
        [r[0], r[1], r[2]]
    }

    /// Nearest codeword by L2 distance; the lowest index wins ties.
    pub fn quantize(&self, z: &[f64]) -> Quantized {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.codewords.rows().into_iter().enumerate() {
            let d = sq_dist(z, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        Quantized {
            index: best.0,
            codeword: self.codeword(best.0),
            distance: best.1.sqrt(),
        }
    }

    /// Nearest-codeword index of each row.
    pub fn assign(&self, latents: ArrayView2<f64>) -> Vec<usize> {
        latents
            .rows()
            .into_iter()
            .map(|r| self.quantize(r.as_slice().unwrap_or(&r.to_vec())).index)
            .collect()
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new(serde_json::json!({ "size": self.size(), "dim": LATENT_DIM }));
        s.push("codewords", self.codewords.clone().into_dyn());
        s
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        let t: &Tensor = section.require("codewords")?;
        let cw = t
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::Format("codebook tensor is not 2-D".into()))?;
        Self::new(cw)
    }
}

pub fn quantize_latent(z: &[f64; LATENT_DIM], codebook: &Codebook) -> Quantized {
    codebook.quantize(z)
}

/// The two VQ objectives for one latent/codeword pair. Their values
/// coincide; they differ in where the gradient flows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLossTerms {
    /// `||sg(z) - c||^2`, moves the codeword.
    pub codebook_loss: f64,
    /// `||z - sg(c)||^2`, moves the encoder.
    pub commitment_loss: f64,
    pub beta: f64,
}

impl VqLossTerms {
    pub fn total(&self) -> f64 {
        self.codebook_loss + self.beta * self.commitment_loss
    }
}

pub fn vq_loss(z: &[f64], codeword: &[f64], beta: f64) -> VqLossTerms {
    let d: f64 = z.iter().zip(codeword).map(|(a, b)| (a - b) * (a - b)).sum();
    VqLossTerms {
        codebook_loss: d,
        commitment_loss: d,
        beta,
    }
}

/// Gradients of [`VqLossTerms::total`]: `(d/dz, d/dc)`.
pub fn vq_loss_grads(z: &[f64], codeword: &[f64], beta: f64) -> (Vec<f64>, Vec<f64>) {
    let dz = z.iter().zip(codeword).map(|(a, b)| 2.0 * beta * (a - b)).collect();
    let dc = z.iter().zip(codeword).map(|(a, b)| 2.0 * (b - a)).collect();
    (dz, dc)
}

/// Straight-through estimator: the quantized output's gradient is copied to
/// the latent unchanged.
pub fn straight_through(grad_quantized: &[f64]) -> Vec<f64> {
    grad_quantized.to_vec()
}

/// `exp(entropy)` of codeword usage; 0 when nothing was used.
pub fn perplexity(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

/// Lloyd's k-means. Starts from distinct random points; when there are fewer
/// points than clusters, extra centers are jittered copies. Empty clusters
/// keep their previous center.
pub fn kmeans(points: ArrayView2<f64>, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let n = points.nrows();
    if n == 0 || k == 0 {
        return Err(Error::EmptyInput("k-means needs points and k >= 1".into()));
    }
    let d = points.ncols();
    let spread = points.std_axis(Axis(0), 0.0).mean().unwrap_or(0.0).max(1e-6);
    let mut centers = Array2::zeros((k, d));
    let first = sample(rng, n, k.min(n)).into_vec();
    for (c, &i) in first.iter().enumerate() {
        centers.row_mut(c).assign(&points.row(i));
    }
    for c in n..k {
        let src = rng.gen_range(0..n);
        for j in 0..d {
            centers[[c, j]] = points[[src, j]] + rng.gen_range(-1e-2..1e-2) * spread;
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iters {
        let cb = Codebook { codewords: centers.clone() };
        let mut changed = false;
        for (i, row) in points.rows().into_iter().enumerate() {
            let a = cb.quantize(&row.to_vec()).index;
            changed |= a != assign[i];
            assign[i] = a;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            let mut s = sums.row_mut(a);
            s += &points.row(i);
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centers.row_mut(c).assign(&mean);
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn random_book(k: usize, seed: u64) -> Codebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Codebook::new(Array2::from_shape_simple_fn((k, 3), || rng.gen_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn codeword_maps_to_itself() {
        let cb = random_book(CODEBOOK_SIZE, 1);
        let q = quantize_latent(&cb.codeword(42), &cb);
        assert_eq!(q.index, 42);
        assert_eq!(q.distance, 0.0);
        for i in 0..cb.size() {
            assert_eq!(cb.quantize(&cb.codeword(i)).index, i);
        }
    }

    #[test]
    fn two_codeword_example() {
        let cb = Codebook::new(array![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(cb.quantize(&[0.1, 0.0, 0.0]).index, 0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = Codebook::new(array![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(cb.quantize(&[0.0, 0.0, 0.0]).index, 0);
        let cb = Codebook::new(array![[5.0, 5.0, 5.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(cb.quantize(&[0.0, 0.0, 0.0]).index, 1);
    }

    #[test]
    fn loss_examples() {
        let t = vq_loss(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0], 0.25);
        assert_eq!((t.codebook_loss, t.commitment_loss), (1.0, 1.0));
        let t = vq_loss(&[0.3, -0.2, 4.0], &[0.3, -0.2, 4.0], 0.25);
        assert_eq!((t.codebook_loss, t.commitment_loss), (0.0, 0.0));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (z, c, beta) = ([0.4, -1.2, 0.7], [0.1, 0.5, -0.3], 0.25);
        let (dz, dc) = vq_loss_grads(&z, &c, beta);
        let h = 1e-6;
        for i in 0..3 {
            let mut zp = z;
            zp[i] += h;
            let mut zm = z;
            zm[i] -= h;
            // only the commitment term depends on z
            let num = beta
                * (vq_loss(&zp, &c, beta).commitment_loss - vq_loss(&zm, &c, beta).commitment_loss)
                / (2.0 * h);
            assert!((num - dz[i]).abs() < 1e-6);
            let mut cp = c;
            cp[i] += h;
            let mut cm = c;
            cm[i] -= h;
            let num = (vq_loss(&z, &cp, beta).codebook_loss - vq_loss(&z, &cm, beta).codebook_loss)
                / (2.0 * h);
            assert!((num - dc[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn perplexity_bounds() {
        assert_eq!(perplexity(&[0, 0]), 0.0);
        assert!((perplexity(&[5, 0, 0]) - 1.0).abs() < 1e-12);
        assert!((perplexity(&[3; 256]) - 256.0).abs() < 1e-9);
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let pts = array![
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [10.0, 10.0, 10.0],
            [10.1, 10.0, 10.0]
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = kmeans(pts.view(), 2, 50, &mut rng).unwrap();
        let mut xs: Vec<f64> = c.column(0).to_vec();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] - 0.05).abs() < 1e-12 && (xs[1] - 10.05).abs() < 1e-12);
        let many = kmeans(pts.view(), 8, 5, &mut rng).unwrap();
        assert_eq!(many.nrows(), 8);
    }

    #[test]
    fn invalid_codebooks_rejected() {
        assert!(Codebook::new(Array2::zeros((4, 2))).is_err());
        assert!(Codebook::new(array![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    proptest! {
        #[test]
        fn assignment_is_never_beaten(z in prop::array::uniform3(-2.0f64..2.0), seed in 0u64..50) {
            let cb = random_book(64, seed);
            let q = cb.quantize(&z);
            for j in 0..cb.size() {
                let d = sq_dist(&z, cb.codewords().row(j)).sqrt();
                prop_assert!(q.distance <= d);
            }
        }
    }
}
