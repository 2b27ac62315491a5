//! Named, ordered parameter blocks: the common currency for model parameters,
//! gradients and GDLS iterates.

use super::tensor::Tensor;
use crate::error::{BlissError, Result};

/// Ordered list of uniquely named tensors. Two vectors are conformant iff
/// names, order and shapes all match; every arithmetic op requires it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    blocks: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new() -> Self {
        ParamVector { blocks: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.blocks.iter().any(|(n, _)| *n == name) {
            return Err(BlissError::Usage(format!("duplicate block name '{name}'")));
        }
        self.blocks.push((name, tensor));
        Ok(())
    }

    pub fn from_blocks(blocks: Vec<(String, Tensor)>) -> Result<Self> {
        let mut pv = ParamVector::new();
        for (n, t) in blocks {
            pv.push(n, t)?;
        }
        Ok(pv)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.blocks.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn block(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.blocks.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn conformant(&self, other: &ParamVector) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    fn require_conformant(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.conformant(other) {
            Ok(())
        } else {
            Err(BlissError::Shape(format!("{what}: non-conformant parameter vectors")))
        }
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            blocks: self
                .blocks
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    /// Flat values in block order, then element order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in &self.blocks {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild from flat values with this vector's layout.
    pub fn with_flat(&self, values: &[f64]) -> Result<ParamVector> {
        if values.len() != self.num_params() {
            return Err(BlissError::Shape(format!(
                "with_flat: {} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut off = 0;
        for (n, t) in &self.blocks {
            let len = t.numel();
            blocks.push((
                n.clone(),
                Tensor::new(t.shape().to_vec(), values[off..off + len].to_vec()),
            ));
            off += len;
        }
        Ok(ParamVector { blocks })
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|(_, t)| t.all_finite())
    }

    /// Name of the first block holding a non-finite value.
    pub fn first_nonfinite_block(&self) -> Option<&str> {
        self.blocks.iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n.as_str())
    }

    /// Round every value through f32, matching checkpoint precision.
    pub fn quantize_f32(&self) -> ParamVector {
        ParamVector {
            blocks: self
                .blocks
                .iter()
                .map(|(n, t)| {
                    let data = t.data().iter().map(|&x| x as f32 as f64).collect();
                    (n.clone(), Tensor::new(t.shape().to_vec(), data))
                })
                .collect(),
        }
    }
}

impl Default for ParamVector {
    fn default() -> Self {
        Self::new()
    }
}

/// Inner product with deterministic block-then-element summation order.
pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.require_conformant(b, "dot")?;
    let mut acc = 0.0;
    for ((_, ta), (_, tb)) in a.blocks.iter().zip(&b.blocks) {
        for (x, y) in ta.data().iter().zip(tb.data()) {
            acc += x * y;
        }
    }
    Ok(acc)
}

/// y + alpha * x, elementwise in block order.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    x.require_conformant(y, "axpy")?;
    let blocks = x
        .blocks
        .iter()
        .zip(&y.blocks)
        .map(|((n, tx), (_, ty))| {
            let data = tx
                .data()
                .iter()
                .zip(ty.data())
                .map(|(xv, yv)| yv + alpha * xv)
                .collect();
            (n.clone(), Tensor::new(tx.shape().to_vec(), data))
        })
        .collect();
    Ok(ParamVector { blocks })
}

pub fn scale(alpha: f64, x: &ParamVector) -> ParamVector {
    ParamVector {
        blocks: x
            .blocks
            .iter()
            .map(|(n, t)| {
                let data = t.data().iter().map(|v| alpha * v).collect();
                (n.clone(), Tensor::new(t.shape().to_vec(), data))
            })
            .collect(),
    }
}

pub fn add(a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
    axpy(1.0, a, b)
}

pub fn sub(a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
    // a - b
    axpy(-1.0, b, a)
}

pub fn norm(a: &ParamVector) -> f64 {
    dot(a, a).expect("self-dot is always conformant").sqrt()
}
