//! Multi-head attention: full, dynamic-aware query selection and
//! ProbSparse query selection.
//!
//! The two sparse variants attend only a subset of query rows. Rows that
//! are not selected receive the mean of the value rows, or the running
//! mean up to that row under a causal mask.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

/// Added to masked logits; large enough that `exp` underflows to zero.
const MASKED: f64 = -1e30;

/// How the change-magnitude terms of the importance score are floored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceFloor {
    /// `ln(clamp(v - mean, 0, 1) + e^-6)`, bounded below by -6.
    #[default]
    Epsilon,
    /// `ln(1 + clamp(v - mean, 0, 1))`, bounded below by 0.
    Log1p,
}

/// Which end of the window gets index 0 in the positional importance term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexOrigin {
    /// Index 0 is the most recent step, so recent steps score higher.
    #[default]
    Latest,
    /// Index 0 is the oldest step.
    Earliest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub c_factor: f64,
    pub d_constant: f64,
    /// Per-head (w_s, w_c); empty means the default split.
    pub head_weights: Vec<(f64, f64)>,
    pub floor: ImportanceFloor,
    pub index_origin: IndexOrigin,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            n_heads: 8,
            c_factor: 3.0,
            d_constant: std::f64::consts::E,
            head_weights: Vec::new(),
            floor: ImportanceFloor::Epsilon,
            index_origin: IndexOrigin::Latest,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.n_heads == 0 || d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {d_model} not divisible by {} heads", self.n_heads)));
        }
        if !(self.c_factor >= 1.0) {
            return Err(Error::Config(format!("c_factor {} must be >= 1", self.c_factor)));
        }
        if !(self.d_constant >= std::f64::consts::E) {
            return Err(Error::Config("d_constant must be at least e".into()));
        }
        if !self.head_weights.is_empty() && self.head_weights.len() != self.n_heads {
            return Err(Error::Config("head_weights must list one pair per head".into()));
        }
        Ok(())
    }

    /// Heads split in thirds: recency only, speed, course; leftovers use both.
    pub fn weights(&self) -> Vec<(f64, f64)> {
        if !self.head_weights.is_empty() {
            return self.head_weights.clone();
        }
        let third = self.n_heads / 3;
        (0..self.n_heads)
            .map(|h| match h / third.max(1) {
                _ if third == 0 => (1.0, 1.0),
                0 => (0.0, 0.0),
                1 => (1.0, 0.0),
                2 => (0.0, 1.0),
                _ => (1.0, 1.0),
            })
            .collect()
    }
}

/// Number of queries kept: `min(L, ceil(c * ln L))`.
pub fn query_count(len: usize, c: f64) -> usize {
    if len <= 1 {
        return len;
    }
    let m = (c * (len as f64).ln()).ceil();
    if m >= len as f64 {
        len
    } else {
        m.max(0.0) as usize
    }
}

fn floor_term(v: f64, floor: ImportanceFloor) -> f64 {
    let x = v.clamp(0.0, 1.0);
    match floor {
        ImportanceFloor::Epsilon => (x + (-6.0f64).exp()).ln(),
        ImportanceFloor::Log1p => x.ln_1p(),
    }
}

/// Per-step importance from recency and the size of speed/course changes.
pub fn importance_scores(
    d_sog: &[f64],
    d_cog: &[f64],
    w_s: f64,
    w_c: f64,
    d_constant: f64,
    floor: ImportanceFloor,
    origin: IndexOrigin,
) -> Vec<f64> {
    assert_eq!(d_sog.len(), d_cog.len(), "importance inputs differ in length");
    let n = d_sog.len();
    if n == 0 {
        return Vec::new();
    }
    let abs_s: Vec<f64> = d_sog.iter().map(|v| v.abs()).collect();
    let abs_c: Vec<f64> = d_cog.iter().map(|v| v.abs()).collect();
    let mean_s = abs_s.iter().sum::<f64>() / n as f64;
    let mean_c = abs_c.iter().sum::<f64>() / n as f64;
    (0..n)
        .map(|i| {
            let ind = match origin {
                IndexOrigin::Latest => n - 1 - i,
                IndexOrigin::Earliest => i,
            };
            1.0 / (ind as f64 + d_constant).ln()
                + w_s * floor_term(abs_s[i] - mean_s, floor)
                + w_c * floor_term(abs_c[i] - mean_c, floor)
        })
        .collect()
}

/// The `m` highest-scoring indices, ascending. Ties go to the later index.
pub fn top_indices(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    order.truncate(m);
    order.sort_unstable();
    order
}

pub fn select_queries(scores: &[f64], c: f64) -> Vec<usize> {
    top_indices(scores, query_count(scores.len(), c))
}

/// How a layer chooses which query rows to attend.
#[derive(Debug)]
pub enum QuerySelection<'a> {
    All,
    /// Precomputed score per head.
    Scores(&'a [Vec<f64>], f64),
    /// Top queries by max-minus-mean over a random key sample.
    ProbSparse { c: f64, rng: &'a mut ChaCha8Rng },
    /// Fixed index set for every head.
    Fixed(&'a [usize]),
}

/// Projections of one multi-head attention layer.
#[derive(Debug, Clone, Copy)]
pub struct MultiHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl MultiHead {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, rng),
            n_heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, mut sel: QuerySelection, causal: bool) -> Var {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let d_model = g.shape(q).1;
        let dk = d_model / self.n_heads;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dk, dk);
            let kh = g.slice_cols(k, h * dk, dk);
            let vh = g.slice_cols(v, h * dk, dk);
            let lq = g.shape(qh).0;
            let idx: Option<Vec<usize>> = match &mut sel {
                QuerySelection::All => None,
                QuerySelection::Scores(scores, c) => Some(select_queries(&scores[h], *c)),
                QuerySelection::ProbSparse { c, rng } => {
                    Some(probsparse_select(g.value(qh), g.value(kh), *c, rng))
                }
                QuerySelection::Fixed(idx) => Some(idx.to_vec()),
            };
            heads.push(attend_rows(g, qh, kh, vh, idx.as_deref(), causal, lq));
        }
        let cat = g.concat_cols(&heads);
        self.o.forward(g, cat)
    }
}

/// Scaled dot-product attention for the selected query rows; other rows get
/// the (running) mean of `v`.
fn attend_rows(g: &mut Graph, q: Var, k: Var, v: Var, idx: Option<&[usize]>, causal: bool, lq: usize) -> Var {
    let dk = g.shape(q).1;
    let lk = g.shape(k).0;
    let all: Vec<usize>;
    let rows = match idx {
        Some(i) => i,
        None => {
            all = (0..lq).collect();
            &all
        }
    };
    let full = rows.len() == lq;
    let qs = if full { q } else { g.gather_rows(q, rows) };
    let logits = g.matmul_t(qs, k);
    let mut logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
    if causal {
        let mask = Mat::from_shape_fn((rows.len(), lk), |(r, c)| if c > rows[r] { MASKED } else { 0.0 });
        logits = g.shift(logits, &mask);
    }
    let attn = g.softmax_rows(logits);
    let out = g.matmul(attn, v);
    if full {
        return out;
    }
    let fill = if causal {
        g.cum_mean_rows(v)
    } else {
        let m = g.mean_rows(v);
        g.broadcast_rows(m, lq)
    };
    if rows.is_empty() {
        return fill;
    }
    g.scatter_rows(fill, out, rows)
}

/// Query rows kept by the max-minus-mean sparsity measure.
pub fn probsparse_select(q: &Mat, k: &Mat, c: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (lq, lk) = (q.nrows(), k.nrows());
    let u = query_count(lk, c);
    let mut keys = sample(rng, lk, u).into_vec();
    keys.sort_unstable();
    let ks = k.select(ndarray::Axis(0), &keys);
    let dots = q.dot(&ks.t());
    let scores: Vec<f64> = dots
        .rows()
        .into_iter()
        .map(|r| {
            let max = r.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            max - r.sum() / r.len() as f64
        })
        .collect();
    top_indices(&scores, query_count(lq, c))
}
