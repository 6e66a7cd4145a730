//! Triplet embeddings: continuous value embeddings for time and value plus a
//! lookup embedding for the variable code, fused by addition.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{axpy, uniform_vec, Matrix};

/// Length of a shift's input window.
pub const WINDOW_MINUTES: i64 = 720;

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("non-finite embedding input {0}")]
    NonFinite(f64),
    #[error("variable code {code} outside vocabulary of {size}")]
    CodeOutOfRange { code: usize, size: usize },
    #[error("sequence of {n} exceeds position table capacity {capacity}")]
    TooLong { n: usize, capacity: usize },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// One observation: time in `[0, 1]` across the window, variable code,
/// and standardized value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationTriplet {
    pub t: f64,
    pub f: usize,
    pub v: f64,
}

/// Hidden width of the continuous value embedding for dimension `d`.
pub fn cve_hidden(d: usize) -> usize {
    (d as f64).sqrt().ceil() as usize
}

/// Scalar to vector network `W2 tanh(w1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CveParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `d × h`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl CveParams {
    pub fn zeros(d: usize) -> Self {
        let h = cve_hidden(d);
        CveParams {
            w1: vec![0.0; h],
            b1: vec![0.0; h],
            w2: Matrix::zeros(d, h),
            b2: vec![0.0; d],
        }
    }

    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        let h = cve_hidden(d);
        let b2 = 1.0 / (h as f64).sqrt();
        CveParams {
            w1: uniform_vec(h, 1.0, rng),
            b1: uniform_vec(h, 1.0, rng),
            w2: Matrix::uniform(d, h, b2, rng),
            b2: uniform_vec(d, b2, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.b2.len()
    }

    pub fn hidden(&self, x: f64) -> Vec<f64> {
        self.w1
            .iter()
            .zip(&self.b1)
            .map(|(w, b)| (w * x + b).tanh())
            .collect()
    }

    /// Adds the embedding of `x` to `out`, given `hidden = self.hidden(x)`.
    pub fn accumulate(&self, hidden: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            let row = self.w2.row(o);
            *y += self.b2[o] + row.iter().zip(hidden).map(|(w, z)| w * z).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients given the upstream gradient `dy`.
    pub fn backward(&self, x: f64, hidden: &[f64], dy: &[f64], grad: &mut CveParams) {
        let mut dz = vec![0.0; hidden.len()];
        for (o, &g) in dy.iter().enumerate() {
            grad.b2[o] += g;
            axpy(g, hidden, grad.w2.row_mut(o));
            axpy(g, self.w2.row(o), &mut dz);
        }
        for k in 0..hidden.len() {
            let dpre = dz[k] * (1.0 - hidden[k] * hidden[k]);
            grad.w1[k] += dpre * x;
            grad.b1[k] += dpre;
        }
    }
}

pub fn cve_forward(x: f64, params: &CveParams) -> Result<Vec<f64>, EncodingError> {
    if !x.is_finite() {
        return Err(EncodingError::NonFinite(x));
    }
    let mut out = vec![0.0; params.dim()];
    params.accumulate(&params.hidden(x), &mut out);
    Ok(out)
}

/// Fused per-observation embeddings, `n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub e: Matrix,
}

impl EmbeddingSequence {
    pub fn n(&self) -> usize {
        self.e.rows
    }

    pub fn d(&self) -> usize {
        self.e.cols
    }
}

pub fn embed_window(
    window: &[ObservationTriplet],
    cve_t: &CveParams,
    cve_v: &CveParams,
    feature_table: &Matrix,
) -> Result<EmbeddingSequence, EncodingError> {
    let d = feature_table.cols;
    for p in [cve_t, cve_v] {
        if p.dim() != d {
            return Err(EncodingError::Dimension {
                expected: d,
                got: p.dim(),
            });
        }
    }
    let mut e = Matrix::zeros(window.len(), d);
    for (i, obs) in window.iter().enumerate() {
        if obs.f >= feature_table.rows {
            return Err(EncodingError::CodeOutOfRange {
                code: obs.f,
                size: feature_table.rows,
            });
        }
        for x in [obs.t, obs.v] {
            if !x.is_finite() {
                return Err(EncodingError::NonFinite(x));
            }
        }
        let row = e.row_mut(i);
        row.copy_from_slice(feature_table.row(obs.f));
        cve_t.accumulate(&cve_t.hidden(obs.t), row);
        cve_v.accumulate(&cve_v.hidden(obs.v), row);
    }
    Ok(EmbeddingSequence { e })
}

/// Sinusoidal order encodings: `P[i][2k] = sin(i / 10000^(2k/d))`,
/// `P[i][2k+1] = cos(i / 10000^(2k/d))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable {
    pub table: Matrix,
}

impl PositionTable {
    pub fn sinusoidal(capacity: usize, d: usize) -> Self {
        let mut table = Matrix::zeros(capacity, d);
        for i in 0..capacity {
            let row = table.row_mut(i);
            for j in 0..d {
                let k2 = (j - j % 2) as f64;
                let angle = i as f64 / 10000f64.powf(k2 / d as f64);
                row[j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        PositionTable { table }
    }

    pub fn disabled(capacity: usize, d: usize) -> Self {
        PositionTable {
            table: Matrix::zeros(capacity, d),
        }
    }

    pub fn capacity(&self) -> usize {
        self.table.rows
    }
}

pub fn add_order_positions(
    mut sequence: EmbeddingSequence,
    positions: &PositionTable,
) -> Result<EmbeddingSequence, EncodingError> {
    let n = sequence.n();
    if n > positions.capacity() {
        return Err(EncodingError::TooLong {
            n,
            capacity: positions.capacity(),
        });
    }
    if positions.table.cols != sequence.d() {
        return Err(EncodingError::Dimension {
            expected: sequence.d(),
            got: positions.table.cols,
        });
    }
    for i in 0..n {
        let p = positions.table.row(i);
        for (x, y) in sequence.e.row_mut(i).iter_mut().zip(p) {
            *x += y;
        }
    }
    Ok(sequence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64, d: usize) -> (CveParams, CveParams, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = CveParams::init(d, &mut rng);
        let v = CveParams::init(d, &mut rng);
        let f = Matrix::uniform(7, d, 0.5, &mut rng);
        (t, v, f)
    }

    #[test]
    fn zero_params_give_zero() {
        let p = CveParams::zeros(16);
        assert_eq!(cve_forward(3.7, &p).unwrap(), vec![0.0; 16]);
        assert!(cve_forward(f64::NAN, &p).is_err());
    }

    #[test]
    fn zero_input_gives_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = CveParams::init(9, &mut rng);
        p.b1 = vec![0.0; p.b1.len()];
        assert_eq!(cve_forward(0.0, &p).unwrap(), p.b2);
    }

    #[test]
    fn cve_matches_matrix_oracle() {
        let (p, _, _) = params(5, 10);
        let h = cve_hidden(10);
        assert_eq!(h, 4);
        let x = 0.5;
        // Explicit matrix products: z = tanh(W1 x + b1), y = W2 z + b2.
        let z: Vec<f64> = (0..h).map(|k| (p.w1[k] * x + p.b1[k]).tanh()).collect();
        let mut expected = vec![0.0; 10];
        for (o, e) in expected.iter_mut().enumerate() {
            let mut acc = p.b2[o];
            for (k, zk) in z.iter().enumerate() {
                acc += p.w2.data[o * h + k] * zk;
            }
            *e = acc;
        }
        let got = cve_forward(x, &p).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn embed_window_basics() {
        let (t, v, f) = params(2, 8);
        let empty = embed_window(&[], &t, &v, &f).unwrap();
        assert_eq!(empty.n(), 0);
        let obs = ObservationTriplet { t: 0.3, f: 2, v: -1.0 };
        let seq = embed_window(&[obs, obs], &t, &v, &f).unwrap();
        assert_eq!(seq.e.row(0), seq.e.row(1));
        let bad = ObservationTriplet { f: 7, ..obs };
        assert!(matches!(
            embed_window(&[bad], &t, &v, &f),
            Err(EncodingError::CodeOutOfRange { .. })
        ));
        let z = CveParams::zeros(8);
        let seq = embed_window(&[obs], &z, &z, &f).unwrap();
        assert_eq!(seq.e.row(0), f.row(2));
    }

    #[test]
    fn positions() {
        let table = PositionTable::sinusoidal(16, 8);
        assert_eq!(table.table.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(table.table.get(1, 0), 1f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(table.table.get(3, 3), (3.0 / 10000f64.powf(0.25)).cos(), epsilon = 1e-15);
        let (t, v, f) = params(3, 8);
        let w: Vec<_> = (0..4).map(|i| ObservationTriplet { t: i as f64 / 4.0, f: i, v: 0.1 }).collect();
        let seq = embed_window(&w, &t, &v, &f).unwrap();
        let same = add_order_positions(seq.clone(), &PositionTable::disabled(16, 8)).unwrap();
        assert_eq!(same, seq);
        let empty = embed_window(&[], &t, &v, &f).unwrap();
        assert_eq!(add_order_positions(empty.clone(), &table).unwrap(), empty);
        assert!(add_order_positions(seq, &PositionTable::sinusoidal(2, 8)).is_err());
    }

    fn triplets() -> impl Strategy<Value = Vec<ObservationTriplet>> {
        prop::collection::vec((0.0f64..=1.0, 0usize..7, -3.0f64..3.0), 0..12)
            .prop_map(|v| v.into_iter().map(|(t, f, v)| ObservationTriplet { t, f, v }).collect())
    }

    proptest! {
        #[test]
        fn permutation_equivariant(w in triplets(), seed in any::<u64>()) {
            let (t, v, f) = params(11, 8);
            let mut perm: Vec<usize> = (0..w.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let permuted: Vec<_> = perm.iter().map(|&i| w[i]).collect();
            let a = embed_window(&w, &t, &v, &f).unwrap();
            let b = embed_window(&permuted, &t, &v, &f).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(b.e.row(k), a.e.row(i));
            }
        }

        #[test]
        fn linear_in_feature_table(w in triplets(), delta in -1.0f64..1.0) {
            let (t, v, f) = params(12, 8);
            let mut shifted = f.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let dmat = Matrix::uniform(f.rows, f.cols, delta.abs() + 1e-3, &mut rng);
            for (x, y) in shifted.data.iter_mut().zip(&dmat.data) {
                *x += y;
            }
            let a = embed_window(&w, &t, &v, &f).unwrap();
            let b = embed_window(&w, &t, &v, &shifted).unwrap();
            for (i, obs) in w.iter().enumerate() {
                for j in 0..8 {
                    prop_assert!((b.e.get(i, j) - a.e.get(i, j) - dmat.get(obs.f, j)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn cve_is_lipschitz(x in -5.0f64..5.0, eps in 1e-9f64..1e-3) {
            let (p, _, _) = params(13, 16);
            let a = cve_forward(x, &p).unwrap();
            let b = cve_forward(x + eps, &p).unwrap();
            let diff = a.iter().zip(&b).map(|(u, w)| (u - w).powi(2)).sum::<f64>().sqrt();
            let n1 = p.w1.iter().map(|w| w * w).sum::<f64>().sqrt();
            let n2 = p.w2.data.iter().map(|w| w * w).sum::<f64>().sqrt();
            prop_assert!(diff <= n1 * n2 * eps * (1.0 + 1e-9) + 1e-15);
        }
    }
}
