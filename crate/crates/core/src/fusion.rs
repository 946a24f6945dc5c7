//! Compact bilinear pooling of two classification descriptors and the
//! perceptron that scores the fused vector.
//!
//! Each descriptor is projected with its own count sketch; the circular
//! convolution of the two sketches (computed through the FFT) is a
//! count sketch of their outer product, so inner products between fused
//! vectors estimate products of the original inner products.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::Dense;
use crate::tensor::Tensor;

/// Smoothing constant of the signed square root applied after fusion.
pub const SIGNED_SQRT_EPS: f64 = 1e-4;

/// Count sketch projection `R^n -> R^m` with a fixed hash and sign map.
#[derive(Clone, Debug, PartialEq)]
pub struct CountSketch {
    output_dim: usize,
    index: Vec<usize>,
    sign: Vec<f64>,
}

impl CountSketch {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if output_dim == 0 {
            return Err(Error::invalid(
                "count sketch output dimension must be positive",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let index = (0..input_dim)
            .map(|_| rng.gen_range(0..output_dim))
            .collect();
        let sign = (0..input_dim)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Ok(Self {
            output_dim,
            index,
            sign,
        })
    }

    pub fn from_parts(index: Vec<usize>, sign: Vec<f64>, output_dim: usize) -> Result<Self> {
        if index.len() != sign.len() {
            return Err(Error::shape(
                "count_sketch",
                format!("{} indices vs {} signs", index.len(), sign.len()),
            ));
        }
        if let Some(bad) = index.iter().find(|&&h| h >= output_dim) {
            return Err(Error::invalid(format!(
                "sketch index {bad} outside [0, {output_dim})"
            )));
        }
        if sign.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::invalid("sketch signs must be +1 or -1"));
        }
        Ok(Self {
            output_dim,
            index,
            sign,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.index.len()
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }

    pub fn sign(&self) -> &[f64] {
        &self.sign
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.index.len() {
            return Err(Error::shape(
                "count_sketch",
                format!(
                    "input length {} for sketch of dim {}",
                    v.len(),
                    self.index.len()
                ),
            ));
        }
        let mut out = vec![0.0; self.output_dim];
        for ((&h, &s), &x) in self.index.iter().zip(&self.sign).zip(v) {
            out[h] += s * x;
        }
        Ok(out)
    }

    pub(crate) fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        self.index
            .iter()
            .zip(&self.sign)
            .map(|(&h, &s)| s * g[h])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SketchPair {
    pub query: Arc<CountSketch>,
    pub candidate: Arc<CountSketch>,
}

impl SketchPair {
    /// Two sketches drawn from distinct seeds derived from `seed`.
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            query: Arc::new(CountSketch::new(
                input_dim,
                output_dim,
                seed.wrapping_mul(2) + 1,
            )?),
            candidate: Arc::new(CountSketch::new(
                input_dim,
                output_dim,
                seed.wrapping_mul(2) + 2,
            )?),
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            query: Arc::clone(&self.candidate),
            candidate: Arc::clone(&self.query),
        }
    }
}

fn check_pair(u: usize, v: usize, sketches: &SketchPair) -> Result<()> {
    let (pu, pv) = (&sketches.query, &sketches.candidate);
    if pu.output_dim() != pv.output_dim() {
        return Err(Error::shape(
            "cbp_fuse",
            format!("sketch dims {} vs {}", pu.output_dim(), pv.output_dim()),
        ));
    }
    if u != pu.input_dim() || v != pv.input_dim() {
        return Err(Error::shape(
            "cbp_fuse",
            format!(
                "descriptor lengths {u}/{v} for sketches of input dim {}/{}",
                pu.input_dim(),
                pv.input_dim()
            ),
        ));
    }
    Ok(())
}

fn convolve_on_tape(tape: &mut Tape, u: Var, v: Var, sketches: &SketchPair) -> Result<Var> {
    check_pair(tape.value(u).len(), tape.value(v).len(), sketches)?;
    let su = tape.count_sketch(u, &sketches.query)?;
    let sv = tape.count_sketch(v, &sketches.candidate)?;
    tape.circular_convolve(su, sv)
}

/// Fuses two descriptors on the tape: circular convolution of their count
/// sketches, an optional signed square root, then L2 normalization.
pub fn fuse_on_tape(
    tape: &mut Tape,
    u: Var,
    v: Var,
    sketches: &SketchPair,
    signed_sqrt: bool,
) -> Result<Var> {
    let raw = convolve_on_tape(tape, u, v, sketches)?;
    let shaped = if signed_sqrt {
        tape.signed_sqrt(raw, SIGNED_SQRT_EPS)
    } else {
        raw
    };
    Ok(tape.l2_normalize(shaped))
}

/// Circular convolution of the two sketches, before any normalization.
pub fn cbp_raw(u: &[f64], v: &[f64], sketches: &SketchPair) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (u, v) = (
        tape.input(Tensor::vector(u.to_vec())),
        tape.input(Tensor::vector(v.to_vec())),
    );
    let out = convolve_on_tape(&mut tape, u, v, sketches)?;
    Ok(tape.value(out).data().to_vec())
}

pub fn cbp_fuse(
    u: &[f64],
    v: &[f64],
    sketches: &SketchPair,
    signed_sqrt: bool,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (u, v) = (
        tape.input(Tensor::vector(u.to_vec())),
        tape.input(Tensor::vector(v.to_vec())),
    );
    let out = fuse_on_tape(&mut tape, u, v, sketches, signed_sqrt)?;
    Ok(tape.value(out).data().to_vec())
}

/// Three fully connected layers, relu between them, sigmoid on the single output.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub layers: [Dense; 3],
}

impl Classifier {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        input_dim: usize,
        hidden: [usize; 2],
    ) -> Result<Self> {
        Ok(Self {
            layers: [
                Dense::new(store, rng, "classifier.fc0", input_dim, hidden[0])?,
                Dense::new(store, rng, "classifier.fc1", hidden[0], hidden[1])?,
                Dense::new(store, rng, "classifier.fc2", hidden[1], 1)?,
            ],
        })
    }

    /// Returns the similarity score in `(0, 1)` as a one-element variable.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, fused: Var) -> Result<Var> {
        let h = self.layers[0].forward(tape, store, fused)?;
        let h = tape.relu(h)?;
        let h = self.layers[1].forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let logit = self.layers[2].forward(tape, store, h)?;
        tape.sigmoid(logit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_circular(a: &[f64], b: &[f64]) -> Vec<f64> {
        let m = a.len();
        let mut out = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                out[(i + j) % m] += a[i] * b[j];
            }
        }
        out
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn sketch_hand_example() {
        let cs = CountSketch::from_parts(vec![0, 0, 2], vec![1.0, -1.0, 1.0], 4).unwrap();
        assert_eq!(
            cs.apply(&[2.0, 5.0, 7.0]).unwrap(),
            vec![-3.0, 0.0, 7.0, 0.0]
        );
        assert_eq!(cs.apply(&[0.0; 3]).unwrap(), vec![0.0; 4]);
        assert!(cs.apply(&[1.0; 2]).is_err());
    }

    #[test]
    fn sketch_rejects_bad_parts() {
        assert!(CountSketch::from_parts(vec![4], vec![1.0], 4).is_err());
        assert!(CountSketch::from_parts(vec![0], vec![0.5], 4).is_err());
        assert!(CountSketch::from_parts(vec![0, 1], vec![1.0], 4).is_err());
    }

    #[test]
    fn sketch_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cs = CountSketch::new(32, 16, 9).unwrap();
        let (u, w) = (random_vec(&mut rng, 32), random_vec(&mut rng, 32));
        let (a, b) = (1.7, -0.4);
        let mix: Vec<f64> = u.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
        let lhs = cs.apply(&mix).unwrap();
        let (su, sw) = (cs.apply(&u).unwrap(), cs.apply(&w).unwrap());
        for j in 0..16 {
            assert!((lhs[j] - (a * su[j] + b * sw[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_zero_input_is_zero() {
        let sk = SketchPair::new(8, 16, 1).unwrap();
        let u = vec![0.0; 8];
        let v: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert!(cbp_fuse(&u, &v, &sk, true)
            .unwrap()
            .iter()
            .all(|x| *x == 0.0));
        assert!(cbp_fuse(&v, &u, &sk, false)
            .unwrap()
            .iter()
            .all(|x| *x == 0.0));
    }

    #[test]
    fn frequency_fusion_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for m in [1usize, 2, 4, 8, 16, 32, 64] {
            for trial in 0..10 {
                let sk = SketchPair::new(24, m, trial).unwrap();
                let (u, v) = (random_vec(&mut rng, 24), random_vec(&mut rng, 24));
                let fast = cbp_raw(&u, &v, &sk).unwrap();
                let direct = direct_circular(
                    &sk.query.apply(&u).unwrap(),
                    &sk.candidate.apply(&v).unwrap(),
                );
                for (a, b) in fast.iter().zip(&direct) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn swapping_inputs_and_sketch_roles_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sk = SketchPair::new(16, 32, 4).unwrap();
        let (u, v) = (random_vec(&mut rng, 16), random_vec(&mut rng, 16));
        let a = cbp_fuse(&u, &v, &sk, true).unwrap();
        let b = cbp_fuse(&v, &u, &sk.swapped(), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let sk = SketchPair {
            query: Arc::new(CountSketch::new(4, 8, 1).unwrap()),
            candidate: Arc::new(CountSketch::new(4, 16, 2).unwrap()),
        };
        assert!(cbp_fuse(&[1.0; 4], &[1.0; 4], &sk, true).is_err());
        let sk = SketchPair::new(4, 8, 0).unwrap();
        assert!(cbp_fuse(&[1.0; 5], &[1.0; 4], &sk, true).is_err());
    }

    #[test]
    fn sketch_inner_product_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = random_vec(&mut rng, 40);
        let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
        let exact: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let estimates: Vec<f64> = (0..500)
            .map(|seed| {
                let cs = CountSketch::new(40, 16, 1000 + seed).unwrap();
                let (sx, sy) = (cs.apply(&x).unwrap(), cs.apply(&y).unwrap());
                sx.iter().zip(&sy).map(|(a, b)| a * b).sum()
            })
            .collect();
        let mean = estimates.iter().sum::<f64>() / 500.0;
        let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 499.0;
        assert!((mean - exact).abs() < 3.0 * var.sqrt() / 500f64.sqrt());
    }

    #[test]
    fn zero_classifier_scores_one_half() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clf = Classifier::new(&mut store, &mut rng, 8, [4, 3]).unwrap();
        store.iter_mut().for_each(|p| p.value.fill(0.0));
        let mut tape = Tape::new();
        let f = tape.input(Tensor::vector(vec![0.3; 8]));
        let s = clf.forward(&mut tape, &store, f).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
    }
}
