//! `SeriesBatch`: the rank-3 value array `[batch, time, variates]` that every
//! module exchanges.

use crate::error::{Error, Result};

/// A batch of multivariate series, row-major `[batch, len, vars]`, all
/// entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesBatch {
    batch: usize,
    len: usize,
    vars: usize,
    data: Vec<f64>,
}

impl SeriesBatch {
    pub fn new(batch: usize, len: usize, vars: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * len * vars {
            return Err(Error::ShapeMismatch {
                op: "SeriesBatch::new",
                lhs: vec![batch, len, vars],
                rhs: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                ctx: "SeriesBatch::new",
            });
        }
        Ok(Self {
            batch,
            len,
            vars,
            data,
        })
    }

    pub fn zeros(batch: usize, len: usize, vars: usize) -> Self {
        Self {
            batch,
            len,
            vars,
            data: vec![0.0; batch * len * vars],
        }
    }

    /// Stack single-window batches (each `[1, len, vars]`) into one batch.
    pub fn stack(windows: &[&SeriesBatch]) -> Result<Self> {
        let first = windows.first().ok_or(Error::EmptySeries)?;
        let (len, vars) = (first.len, first.vars);
        let mut data = Vec::with_capacity(windows.len() * len * vars);
        for w in windows {
            if w.len != len || w.vars != vars || w.batch != 1 {
                return Err(Error::ShapeMismatch {
                    op: "SeriesBatch::stack",
                    lhs: vec![1, len, vars],
                    rhs: w.shape().to_vec(),
                });
            }
            data.extend_from_slice(&w.data);
        }
        SeriesBatch::new(windows.len(), len, vars, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.len, self.vars]
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

    #[inline]
    pub fn at(&self, b: usize, t: usize, n: usize) -> f64 {
        self.data[(b * self.len + t) * self.vars + n]
    }

    #[inline]
    pub fn set(&mut self, b: usize, t: usize, n: usize, v: f64) {
        self.data[(b * self.len + t) * self.vars + n] = v;
    }

    /// Extract one batch element as a `[1, len, vars] `batch.
    pub fn slice_batch(&self, b: usize) -> SeriesBatch {
        let stride = self.len * self.vars;
        SeriesBatch {
            batch: 1,
            len: self.len,
            vars: self.vars,
            data: self.data[b * stride..(b + 1) * stride].to_vec(),
        }
    }

    /// Reorder variate columns: output column `j` is input column `perm[j]`.
    pub fn permute_vars(&self, perm: &[usize]) -> Result<SeriesBatch> {
        if perm.len() != self.vars {
            return Err(Error::ShapeMismatch {
                op: "permute_vars",
                lhs: vec![self.vars],
                rhs: vec![perm.len()],
            });
        }
        let mut out = self.clone();
        for b in 0..self.batch {
            for t in 0..self.len {
                for (j, &src) in perm.iter().enumerate() {
                    out.set(b, t, j, self.at(b, t, src));
                }
            }
        }
        Ok(out)
    }
}
