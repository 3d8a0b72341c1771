//! Video token sequences and the layouts the sublayers operate on.
//!
//! Tokens are stored for a batch of `B` videos with `n_f` frames of
//! `s = n_h·n_w` patches each:
//!
//! - `Full`: `[B, n_f·s, D]`, spatial-first order (raster within frame, frames concatenated)
//! - `Spatial`: `[B·n_f, s, D]`, one row per frame
//! - `Temporal`: `[B·s, n_f, D]`, one row per patch position
//!
//! `Full` and `Spatial` share memory order; `Temporal` is a transpose of the
//! frame and position axes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Spatial,
    Temporal,
    Full,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Spatial => "spatial",
            Layout::Temporal => "temporal",
            Layout::Full => "full",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Axes {
    pub batch: usize,
    pub n_f: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub d: usize,
}

impl Axes {
    /// Patches per frame.
    pub fn s(&self) -> usize {
        self.n_h * self.n_w
    }

    /// Tokens per video.
    pub fn tokens(&self) -> usize {
        self.n_f * self.s()
    }

    pub fn shape(&self, layout: Layout) -> [usize; 3] {
        match layout {
            Layout::Full => [self.batch, self.tokens(), self.d],
            Layout::Spatial => [self.batch * self.n_f, self.s(), self.d],
            Layout::Temporal => [self.batch * self.s(), self.n_f, self.d],
        }
    }
}

/// Position of patch `(f, h, w)` in the spatial-first sequence.
pub fn spatial_first_index(f: usize, h: usize, w: usize, n_h: usize, n_w: usize) -> usize {
    f * n_h * n_w + h * n_w + w
}

/// Tokens on a graph, tagged with their layout. An optional condition token
/// `[B, D]` rides alongside in conditional-token mode.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub data: Var,
    pub layout: Layout,
    pub axes: Axes,
    pub cond: Option<Var>,
}

impl TokenSequence {
    pub fn new<T: Real>(g: &Graph<T>, data: Var, layout: Layout, axes: Axes) -> Result<Self> {
        if g.shape(data) != axes.shape(layout) {
            return Err(shape_err!(
                "{layout} tokens for {axes:?} need shape {:?}, got {:?}",
                axes.shape(layout),
                g.shape(data)
            ));
        }
        Ok(Self {
            data,
            layout,
            axes,
            cond: None,
        })
    }

    pub fn expect(&self, layout: Layout) -> Result<()> {
        if self.layout != layout {
            return Err(Error::Layout {
                expected: layout.to_string(),
                got: self.layout.to_string(),
            });
        }
        Ok(())
    }

    /// Same bookkeeping, new data in the same layout.
    pub fn with_data(&self, data: Var) -> Self {
        Self { data, ..*self }
    }

    /// Number of video tokens (condition token excluded).
    pub fn count(&self) -> usize {
        self.axes.batch * self.axes.tokens()
    }
}

/// Pure permutation of the tokens into `target` layout.
pub fn relayout<T: Real>(g: &mut Graph<T>, ts: &TokenSequence, target: Layout) -> Result<TokenSequence> {
    if ts.layout == target {
        return Ok(*ts);
    }
    let a = ts.axes;
    let (b, nf, s, d) = (a.batch, a.n_f, a.s(), a.d);
    let data = match (ts.layout, target) {
        (Layout::Full, Layout::Spatial) | (Layout::Spatial, Layout::Full) => g.reshape(ts.data, &a.shape(target))?,
        (_, Layout::Temporal) => {
            let x = g.reshape(ts.data, &[b, nf, s, d])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &a.shape(target))?
        }
        (Layout::Temporal, _) => {
            let x = g.reshape(ts.data, &[b, s, nf, d])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &a.shape(target))?
        }
        _ => unreachable!(),
    };
    Ok(TokenSequence {
        data,
        layout: target,
        ..*ts
    })
}

/// Flattens to the full spatial-first sequence.
pub fn spatial_first_order<T: Real>(g: &mut Graph<T>, ts: &TokenSequence) -> Result<TokenSequence> {
    relayout(g, ts, Layout::Full)
}

/// Prepends `cond: [B, D]` to every row of `x: [rows, len, D]`, where
/// consecutive blocks of `rows / B` rows belong to one sample.
pub fn prepend_cond<T: Real>(g: &mut Graph<T>, x: Var, cond: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let [rows, len, d] = xs[..] else {
        return Err(shape_err!("prepend_cond: expected rank 3, got {xs:?}"));
    };
    let batch = g.shape(cond)[0];
    if g.shape(cond) != [batch, d] || rows % batch != 0 {
        return Err(shape_err!("prepend_cond: tokens {xs:?}, condition {:?}", g.shape(cond)));
    }
    let per = rows / batch;
    let flat = g.reshape(x, &[rows * len, d])?;
    let both = g.concat0(&[flat, cond])?;
    let mut idx = Vec::with_capacity(rows * (len + 1));
    for r in 0..rows {
        idx.push(rows * len + r / per);
        idx.extend((0..len).map(|l| r * len + l));
    }
    g.gather_rows(both, &idx, &[rows, len + 1, d])
}

/// Inverse of [`prepend_cond`]: strips the leading token of each row and
/// averages those tokens back to one per sample.
pub fn split_cond<T: Real>(g: &mut Graph<T>, y: Var, batch: usize) -> Result<(Var, Var)> {
    let ys = g.shape(y).to_vec();
    let [rows, len1, d] = ys[..] else {
        return Err(shape_err!("split_cond: expected rank 3, got {ys:?}"));
    };
    if len1 < 2 || rows % batch != 0 {
        return Err(shape_err!("split_cond: {ys:?} with batch {batch}"));
    }
    let len = len1 - 1;
    let tok_idx: Vec<usize> = (0..rows).flat_map(|r| (1..len1).map(move |l| r * len1 + l)).collect();
    let tokens = g.gather_rows(y, &tok_idx, &[rows, len, d])?;
    let per = rows / batch;
    let cond_idx: Vec<usize> = (0..rows).map(|r| r * len1).collect();
    let c = g.gather_rows(y, &cond_idx, &[batch, per, d])?;
    let c = g.mean_axis(c, 1)?;
    Ok((tokens, c))
}
