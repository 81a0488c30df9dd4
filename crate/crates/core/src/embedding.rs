//! Input embeddings: token convolution, fixed positional encoding and
//! learned calendar tables.

use chrono::{DateTime, Datelike, Timelike, Utc};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::CircularConv1d;

/// Sinusoidal encoding; even columns take the sine, odd columns the cosine,
/// both at angle `pos / 10000^(2k/d_model)` for column pair `k`.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Mat {
    Mat::from_shape_fn((seq_len, d_model), |(pos, col)| {
        let k = (col / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * k / d_model as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Calendar indices of each step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TimeFeatures {
    pub minute: Vec<usize>,
    pub hour: Vec<usize>,
    /// Day of month, 1 to 31.
    pub day: Vec<usize>,
    /// Monday = 0.
    pub weekday: Vec<usize>,
    /// 1 to 12.
    pub month: Vec<usize>,
}

const TABLE_ROWS: [usize; 5] = [60, 24, 32, 7, 13];

impl TimeFeatures {
    pub fn from_times(times: &[DateTime<Utc>]) -> Self {
        let mut tf = TimeFeatures::default();
        for t in times {
            tf.minute.push(t.minute() as usize);
            tf.hour.push(t.hour() as usize);
            tf.day.push(t.day() as usize);
            tf.weekday.push(t.weekday().num_days_from_monday() as usize);
            tf.month.push(t.month() as usize);
        }
        tf
    }

    pub fn len(&self) -> usize {
        self.minute.len()
    }

    pub fn is_empty(&self) -> bool {
        self.minute.is_empty()
    }

    fn columns(&self) -> [&[usize]; 5] {
        [&self.minute, &self.hour, &self.day, &self.weekday, &self.month]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let names = ["minute", "hour", "day", "weekday", "month"];
        let lows = [0, 0, 1, 0, 1];
        for (i, col) in self.columns().iter().enumerate() {
            if col.len() != n {
                return Err(Error::Shape(format!("time feature {} has {} steps, expected {n}", names[i], col.len())));
            }
            if let Some(v) = col.iter().find(|&&v| v < lows[i] || v >= TABLE_ROWS[i]) {
                return Err(Error::Domain(format!("{} index {v} out of range", names[i])));
            }
        }
        Ok(())
    }
}

/// Five learned lookup tables, initialised with the sinusoidal encoding.
#[derive(Debug, Clone, Copy)]
pub struct TimeEmbedding {
    pub tables: [ParamId; 5],
}

impl TimeEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize) -> Self {
        let names = ["minute", "hour", "day", "weekday", "month"];
        let tables = std::array::from_fn(|i| store.add(format!("{name}.{}", names[i]), positional_encoding(TABLE_ROWS[i], d_model)));
        Self { tables }
    }

    pub fn forward(&self, g: &mut Graph, tf: &TimeFeatures) -> Result<Var> {
        tf.validate()?;
        let mut acc: Option<Var> = None;
        for (table, idx) in self.tables.iter().zip(tf.columns()) {
            let t = g.param(*table);
            let rows = g.gather_rows(t, idx);
            acc = Some(match acc {
                Some(a) => g.add(a, rows),
                None => rows,
            });
        }
        Ok(acc.expect("five tables"))
    }
}

/// Bias-free width-3 circular convolution from the 2 delta channels.
#[derive(Debug, Clone, Copy)]
pub struct TokenEmbedding {
    pub conv: CircularConv1d,
}

impl TokenEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { conv: CircularConv1d::new(store, name, 3, 2, d_model, false, rng) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x).1 != 2 {
            return Err(Error::Shape(format!("token input must have 2 channels, got {}", g.shape(x).1)));
        }
        Ok(self.conv.forward(g, x))
    }
}

/// `alpha * token(x) + PE + TE`.
pub fn feed(g: &mut Graph, token: &TokenEmbedding, time: &TimeEmbedding, x: Var, tf: &TimeFeatures, alpha: f64) -> Result<Var> {
    let (l, _) = g.shape(x);
    if tf.len() != l {
        return Err(Error::Shape(format!("{} time steps for {l} tokens", tf.len())));
    }
    let tok = token.forward(g, x)?;
    let tok = g.scale(tok, alpha);
    let d_model = g.shape(tok).1;
    let with_pe = g.shift(tok, &positional_encoding(l, d_model));
    let te = time.forward(g, tf)?;
    Ok(g.add(with_pe, te))
}
