//! Flat parameter collections and their binary container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "CDWT" | version: u32 | tensor count: u32
//! per tensor: rank: u32 | dims: u32 × rank | payload: f64 × product(dims)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CDWT";
const VERSION: u32 = 1;

/// Ordered parameter tensors exchanged between clients and server.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    tensors: Vec<Tensor>,
}

impl ModelWeights {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Whether `other` has the same number of tensors with identical shapes.
    pub fn congruent(&self, other: &ModelWeights) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.same_shape(b))
    }

    pub(crate) fn ensure_congruent(&self, other: &ModelWeights, context: &'static str) -> Result<()> {
        if self.congruent(other) {
            return Ok(());
        }
        let shapes = |w: &ModelWeights| w.tensors.iter().map(Tensor::numel).collect::<Vec<_>>();
        Err(Error::ShapeMismatch {
            context,
            expected: shapes(self),
            actual: shapes(other),
        })
    }

    /// All parameters concatenated in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds weights shaped like `self` from a flat parameter vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ModelWeights> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "flat parameters",
                expected: vec![self.param_count()],
                actual: vec![flat.len()],
            });
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let n = t.numel();
            tensors.push(Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(ModelWeights { tensors })
    }

    pub fn zeros_like(&self) -> ModelWeights {
        ModelWeights {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.param_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing CDWT magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(ModelWeights { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelWeights> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated weight container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// One plain SGD update: `p ← p − lr·g` for every parameter.
pub fn sgd_step(weights: &ModelWeights, grads: &ModelWeights, lr: f64) -> Result<ModelWeights> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    weights.ensure_congruent(grads, "sgd gradients")?;
    let tensors = weights
        .tensors
        .iter()
        .zip(&grads.tensors)
        .map(|(p, g)| {
            let data = p.data().iter().zip(g.data()).map(|(&p, &g)| p - lr * g).collect();
            Tensor::new(p.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelWeights { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_weights(v: f64) -> ModelWeights {
        ModelWeights::new(vec![Tensor::scalar(v)])
    }

    #[test]
    fn sgd_step_arithmetic() {
        let w = sgd_step(&scalar_weights(1.0), &scalar_weights(0.5), 0.1).unwrap();
        assert!((w.tensors()[0].data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_weights_unchanged() {
        let w = ModelWeights::new(vec![
            Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap(),
            Tensor::vector(vec![7.0]).unwrap(),
        ]);
        let out = sgd_step(&w, &w.zeros_like(), 0.3).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn quadratic_descent_converges_monotonically() {
        // loss ½(p−3)², gradient p−3; closed form p_k = 3(1 − 0.9^k)
        let mut p = scalar_weights(0.0);
        let mut prev = 0.0;
        for k in 1..=10 {
            let g = scalar_weights(p.tensors()[0].data()[0] - 3.0);
            p = sgd_step(&p, &g, 0.1).unwrap();
            let v = p.tensors()[0].data()[0];
            assert!(v > prev && v < 3.0);
            assert!((v - 3.0 * (1.0 - 0.9f64.powi(k))).abs() < 1e-12);
            prev = v;
        }
    }

    #[test]
    fn sgd_rejects_bad_inputs() {
        let w = scalar_weights(1.0);
        assert!(sgd_step(&w, &w, 0.0).is_err());
        assert!(sgd_step(&w, &w, -1.0).is_err());
        let other = ModelWeights::new(vec![Tensor::vector(vec![1.0, 2.0]).unwrap()]);
        assert!(matches!(sgd_step(&w, &other, 0.1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn container_header_layout() {
        let w = ModelWeights::new(vec![Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap()]);
        let bytes = w.to_bytes();
        assert_eq!(&bytes[0..4], b"CDWT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn container_rejects_corruption() {
        let w = scalar_weights(2.0);
        let mut bytes = w.to_bytes();
        assert!(ModelWeights::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(ModelWeights::from_bytes(&bytes).is_err());
        let mut bad = w.to_bytes();
        bad[0] = b'X';
        assert!(ModelWeights::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(
            shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 0..5),
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let tensors: Vec<Tensor> = shapes.into_iter().map(|shape| {
                let n = shape.iter().product();
                let data = (0..n).map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits(state >> 2)
                }).collect();
                Tensor::new(shape, data).unwrap()
            }).collect();
            let w = ModelWeights::new(tensors);
            let back = ModelWeights::from_bytes(&w.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), w.to_bytes());
        }
    }
}
