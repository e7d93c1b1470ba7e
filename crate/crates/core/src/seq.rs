//! Real-valued observation sequences shared by the model families.

use crate::error::{Error, Result};

/// `len x dim` row-major frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    dim: usize,
    values: Vec<f64>,
}

impl Sequence {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form frames of width {dim}",
                values.len()
            )));
        }
        Ok(Self { dim, values })
    }

    pub fn from_frames<I, F>(dim: usize, frames: I) -> Result<Self>
    where
        I: IntoIterator<Item = F>,
        F: AsRef<[f64]>,
    {
        let mut values = Vec::new();
        for f in frames {
            let f = f.as_ref();
            if f.len() != dim {
                return Err(Error::Shape(format!("frame of width {} in a width-{dim} sequence", f.len())));
            }
            values.extend_from_slice(f);
        }
        Self::new(dim, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.dim)
    }

    /// Same frames in reverse time order.
    pub fn reversed(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for t in (0..self.len()).rev() {
            values.extend_from_slice(self.frame(t));
        }
        Self { dim: self.dim, values }
    }
}

/// Checks a batch of sequences share width and length; returns both.
pub fn batch_shape(seqs: &[&Sequence]) -> Result<(usize, usize)> {
    let first = seqs.first().ok_or_else(|| Error::Shape("empty batch of sequences".into()))?;
    let (dim, len) = (first.dim(), first.len());
    if seqs.iter().any(|s| s.dim() != dim || s.len() != len) {
        return Err(Error::Shape("sequences in a batch must share width and length".into()));
    }
    Ok((dim, len))
}

/// Stacks frame `t` of every sequence into a `batch x dim` block.
pub fn gather_frames(seqs: &[&Sequence], t: usize, out: &mut Vec<f64>) {
    out.clear();
    for s in seqs {
        out.extend_from_slice(s.frame(t));
    }
}
