use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rvq::TokenGrid;
use crate::tensor::Tensor;

/// Per-level token tables (not shared across levels) plus the text table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub levels: Vec<Tensor>,
    pub text: Tensor,
}

impl EmbeddingTables {
    pub fn new(levels: Vec<Tensor>, text: Tensor) -> Result<Self> {
        let h = text.cols;
        if levels.is_empty() || levels.iter().any(|t| t.cols != h || t.rows == 0) {
            return Err(Error::Config("embedding tables must be non-empty and share one width".into()));
        }
        Ok(Self { levels, text })
    }

    pub fn width(&self) -> usize {
        self.text.cols
    }
}

/// Feed-forward re-encoding of summed multi-level embeddings.
#[derive(Debug, Clone, PartialEq)]
pub enum PreBuffer {
    Identity,
    /// `gelu(x·w1 + b1)·w2 + b2`
    Ffn { w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor },
}

impl PreBuffer {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            PreBuffer::Identity => x.clone(),
            PreBuffer::Ffn { w1, b1, w2, b2 } => {
                let mut h = x.matmul(w1);
                for r in 0..h.rows {
                    for (v, b) in h.row_mut(r).iter_mut().zip(&b1.data) {
                        *v = math::gelu(*v + b);
                    }
                }
                let mut y = h.matmul(w2);
                for r in 0..y.rows {
                    for (v, b) in y.row_mut(r).iter_mut().zip(&b2.data) {
                        *v += b;
                    }
                }
                y
            }
        }
    }
}

/// Row `p` is `pre_buffer(Σ_l E[l][idx[p][l]])`.
pub fn embed_multilevel(grid: &TokenGrid, tables: &EmbeddingTables, pre_buffer: &PreBuffer) -> Result<Tensor> {
    if grid.n_levels() != tables.levels.len() {
        return Err(Error::Config(alloc::format!(
            "grid has {} levels, tables have {}",
            grid.n_levels(),
            tables.levels.len()
        )));
    }
    let sizes: Vec<usize> = tables.levels.iter().map(|t| t.rows).collect();
    grid.validate(&sizes)?;
    let mut sum = Tensor::zeros(grid.n_positions(), tables.width());
    for p in 0..grid.n_positions() {
        for (l, table) in tables.levels.iter().enumerate() {
            let e = table.row(grid.get(p, l) as usize);
            for (o, v) in sum.row_mut(p).iter_mut().zip(e) {
                *o += v;
            }
        }
    }
    Ok(pre_buffer.apply(&sum))
}
