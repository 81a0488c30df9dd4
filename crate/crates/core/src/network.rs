//! The full forecaster: ATM feature extractor, encoder with distilling and
//! the one-layer generative decoder.

use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atm::{sample_atm_stacks, select_atm_steps, AtmConfig};
use crate::attention::{importance_scores, AttentionConfig, MultiHead, QuerySelection};
use crate::autodiff::{pool3d_out_dims, Conv3dGeom, Graph, Mat, ParamStore, Var};
use crate::embedding::{feed, TimeEmbedding, TimeFeatures, TokenEmbedding};
use crate::error::{Error, Result};
use crate::nn::{dropout, CircularConv1d, FeedForward, LayerNorm, Linear};
use crate::preprocess::{DatasetSpec, Sample};

/// Smallest ATM stack the extractor accepts.
pub const MIN_STACK_DEPTH: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub e_layers: usize,
    pub d_layers: usize,
    pub enc_len: usize,
    pub label_len: usize,
    pub pred_len: usize,
    pub dropout: f64,
    pub alpha: f64,
    pub attention: AttentionConfig,
    pub atm: AtmConfig,
    pub use_cnn: bool,
    pub use_dynamic_attention: bool,
    pub use_knowledge_loss: bool,
    pub loss_correction: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            d_ff: 2048,
            e_layers: 2,
            d_layers: 1,
            enc_len: 72,
            label_len: 48,
            pred_len: 24,
            dropout: 0.05,
            alpha: 1.0,
            attention: AttentionConfig::default(),
            atm: AtmConfig::default(),
            use_cnn: true,
            use_dynamic_attention: true,
            use_knowledge_loss: true,
            loss_correction: true,
        }
    }
}

impl ModelConfig {
    /// Small model used for laptop-scale runs and tests.
    pub fn desk() -> Self {
        Self { d_model: 64, d_ff: 128, ..Self::default() }
    }

    pub fn dec_len(&self) -> usize {
        self.label_len + self.pred_len
    }

    pub fn with_spec(mut self, spec: &DatasetSpec) -> Self {
        self.enc_len = spec.enc_len;
        self.label_len = spec.label_len;
        self.pred_len = spec.pred_len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate(self.d_model)?;
        self.atm.validate()?;
        if self.e_layers == 0 {
            return Err(Error::Config("e_layers must be at least 1".into()));
        }
        if self.d_layers != 1 {
            return Err(Error::Config(format!("d_layers must be 1, got {}", self.d_layers)));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if self.label_len == 0 || self.label_len > self.enc_len || self.pred_len == 0 {
            return Err(Error::Config(format!(
                "need 0 < label_len <= enc_len and pred_len > 0, got {}/{}/{}",
                self.enc_len, self.label_len, self.pred_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let mut len = self.enc_len;
        for _ in 1..self.e_layers {
            len = distil_len(len);
            if len == 0 {
                return Err(Error::Config("too many encoder layers for enc_len".into()));
            }
        }
        if self.use_cnn {
            for depth in [self.enc_stack_depth(), self.dec_stack_depth()] {
                cnn_shape_trace(depth, self.atm.size, 1)?;
            }
        }
        Ok(())
    }

    pub fn enc_stack_depth(&self) -> usize {
        select_atm_steps(self.enc_len, self.atm.proportion).len()
    }

    pub fn dec_stack_depth(&self) -> usize {
        select_atm_steps(self.label_len, self.atm.proportion).len()
    }
}

fn distil_len(len: usize) -> usize {
    (len + 2 - 3) / 2 + 1
}

/// One stage of the extractor's shape arithmetic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeStep {
    pub stage: &'static str,
    pub dims: [usize; 3],
    pub channels: usize,
}

const CNN_STAGES: [([usize; 3], [usize; 3], [usize; 3]); 3] = [
    // (conv kernel, conv pad, pool kernel)
    ([1, 3, 3], [0, 0, 0], [1, 2, 2]),
    ([3, 3, 3], [1, 0, 0], [3, 2, 2]),
    ([3, 3, 3], [0, 0, 0], [1, 2, 2]),
];

/// Traces volume dims through the three conv/pool blocks.
pub fn cnn_shape_trace(depth: usize, size: usize, target_len: usize) -> Result<Vec<ShapeStep>> {
    if depth < MIN_STACK_DEPTH {
        return Err(Error::StackTooShallow { depth, min: MIN_STACK_DEPTH });
    }
    let channels = [1, 1, 16, target_len];
    let mut dims = [depth, size, size];
    let mut out = vec![ShapeStep { stage: "input", dims, channels: 1 }];
    for (i, (kernel, pad, pool)) in CNN_STAGES.iter().enumerate() {
        let geom = Conv3dGeom { in_dims: dims, channels: channels[i], kernel: *kernel, pad: *pad };
        dims = geom
            .out_dims()
            .ok_or_else(|| Error::Shape(format!("ATM volume {dims:?} too small for conv block {}", i + 1)))?;
        out.push(ShapeStep { stage: ["conv1", "conv2", "conv3"][i], dims, channels: channels[i + 1] });
        dims = pool3d_out_dims(dims, *pool);
        if dims[0] == 0 {
            return Err(Error::StackTooShallow { depth, min: MIN_STACK_DEPTH });
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("ATM size {size} too small for pool block {}", i + 1)));
        }
        out.push(ShapeStep { stage: ["pool1", "pool2", "pool3"][i], dims, channels: channels[i + 1] });
    }
    Ok(out)
}

/// Three conv/ReLU/pool blocks over an ATM stack, then a linear map of the
/// remaining volume to `d_model` for each of `target_len` output rows.
#[derive(Debug, Clone)]
pub struct Cnn3d {
    convs: [Linear; 3],
    proj: Linear,
    depth: usize,
    size: usize,
    target_len: usize,
}

impl Cnn3d {
    pub fn new(store: &mut ParamStore, name: &str, depth: usize, size: usize, target_len: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let trace = cnn_shape_trace(depth, size, target_len)?;
        let channels = [1, 1, 16, target_len];
        let convs = std::array::from_fn(|i| {
            let patch = CNN_STAGES[i].0.iter().product::<usize>() * channels[i];
            Linear::new(store, &format!("{name}.conv{}", i + 1), patch, channels[i + 1], true, rng)
        });
        let last = trace.last().expect("trace is nonempty").dims;
        let volume = last.iter().product();
        let proj = Linear::new(store, &format!("{name}.proj"), volume, d_model, true, rng);
        Ok(Self { convs, proj, depth, size, target_len })
    }

    pub fn forward(&self, g: &mut Graph, stack: &Array3<f64>) -> Result<Var> {
        let (d, h, w) = stack.dim();
        if d != self.depth || h != self.size || w != self.size {
            return Err(Error::Shape(format!(
                "ATM stack {d}x{h}x{w}, extractor expects {}x{}x{}",
                self.depth, self.size, self.size
            )));
        }
        let flat = stack.as_standard_layout().into_owned().into_shape_with_order((d * h * w, 1)).expect("contiguous");
        let mut x = g.constant(flat);
        let mut dims = [d, h, w];
        let channels = [1, 1, 16, self.target_len];
        for (i, (kernel, pad, pool)) in CNN_STAGES.iter().enumerate() {
            let geom = Conv3dGeom { in_dims: dims, channels: channels[i], kernel: *kernel, pad: *pad };
            let cols = g.im2col_3d(x, geom);
            let y = self.convs[i].forward(g, cols);
            let y = g.relu(y);
            dims = geom.out_dims().expect("checked at construction");
            x = g.max_pool_3d(y, dims, *pool);
            dims = pool3d_out_dims(dims, *pool);
        }
        let t = g.transpose(x);
        Ok(self.proj.forward(g, t))
    }
}

/// Per-row inputs the model sees for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub x_enc: Mat,
    pub x_dec: Mat,
    pub enc_time: TimeFeatures,
    pub dec_time: TimeFeatures,
    /// Raw deltas for the importance scores; decoder placeholders are zero.
    pub enc_raw: Mat,
    pub dec_raw: Mat,
    pub enc_atm: Option<Array3<f64>>,
    pub dec_atm: Option<Array3<f64>>,
}

impl ModelInput {
    /// Reads only the observed part of the window.
    pub fn from_sample(sample: &Sample, cfg: &ModelConfig) -> Self {
        let (enc, label) = (cfg.enc_len, cfg.label_len);
        let enc_raw = sample.raw_deltas.slice(s![..enc, ..]).to_owned();
        let mut dec_raw = Mat::zeros((cfg.dec_len(), 2));
        dec_raw.slice_mut(s![..label, ..]).assign(&enc_raw.slice(s![enc - label.., ..]));
        let (enc_atm, dec_atm) = if cfg.use_cnn {
            let (a, b) = sample_atm_stacks(sample, &cfg.atm);
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        Self {
            x_enc: sample.x_enc.clone(),
            x_dec: sample.x_dec.clone(),
            enc_time: TimeFeatures::from_times(&sample.enc_times()),
            dec_time: TimeFeatures::from_times(&sample.dec_times()),
            enc_raw,
            dec_raw,
            enc_atm,
            dec_atm,
        }
    }
}

/// Random state for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    /// Key sampling for the ProbSparse layers.
    pub sampler: ChaCha8Rng,
    /// Dropout masks; `None` in evaluation.
    pub dropout: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval(seed: u64) -> Self {
        Self { sampler: ChaCha8Rng::seed_from_u64(seed), dropout: None }
    }

    pub fn train(seed: u64) -> Self {
        let mut dropout = ChaCha8Rng::seed_from_u64(seed);
        dropout.set_stream(1);
        Self { sampler: ChaCha8Rng::seed_from_u64(seed), dropout: Some(dropout) }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHead,
    norm_a: LayerNorm,
    cnn: Option<Cnn3d>,
    norm_c: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Distil {
    conv1: CircularConv1d,
    conv2: CircularConv1d,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHead,
    norm_a: LayerNorm,
    cnn: Option<Cnn3d>,
    norm_c: LayerNorm,
    cross: MultiHead,
    norm_d: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct OutputHead {
    conv1: CircularConv1d,
    conv2: CircularConv1d,
    out: Linear,
}

/// Parameter handles of the whole network. Values live in a `ParamStore`.
#[derive(Debug, Clone)]
pub struct Mstformer {
    pub cfg: ModelConfig,
    enc_token: TokenEmbedding,
    dec_token: TokenEmbedding,
    time: TimeEmbedding,
    enc_layers: Vec<EncoderLayer>,
    distils: Vec<Distil>,
    enc_norm: LayerNorm,
    decoder: DecoderLayer,
    dec_norm: LayerNorm,
    head: OutputHead,
}

impl Mstformer {
    /// Builds the network and its initial parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::build(cfg, &mut store, &mut rng)?;
        Ok((net, store))
    }

    /// Rebuilds the handles for an existing parameter set, checking names and shapes.
    pub fn attach(cfg: ModelConfig, params: &ParamStore) -> Result<Self> {
        let (net, fresh) = Self::new(cfg, 0)?;
        if fresh.names() != params.names() {
            return Err(Error::Format("parameter names do not match the model config".into()));
        }
        for (i, (a, b)) in fresh.values().iter().zip(params.values()).enumerate() {
            if a.dim() != b.dim() {
                return Err(Error::Format(format!("parameter {} has shape {:?}, expected {:?}", fresh.names()[i], b.dim(), a.dim())));
            }
        }
        Ok(net)
    }

    fn build(cfg: ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        let heads = cfg.attention.n_heads;
        let enc_token = TokenEmbedding::new(store, "enc.token", d, rng);
        let dec_token = TokenEmbedding::new(store, "dec.token", d, rng);
        let time = TimeEmbedding::new(store, "time", d);

        let mut enc_layers = Vec::new();
        let mut distils = Vec::new();
        let mut len = cfg.enc_len;
        for l in 0..cfg.e_layers {
            let name = format!("enc.{l}");
            let cnn = if l == 0 && cfg.use_cnn {
                Some(Cnn3d::new(store, &format!("{name}.cnn"), cfg.enc_stack_depth(), cfg.atm.size, len, d, rng)?)
            } else {
                None
            };
            enc_layers.push(EncoderLayer {
                attn: MultiHead::new(store, &format!("{name}.attn"), d, heads, rng),
                norm_a: LayerNorm::new(store, &format!("{name}.norm_a"), d),
                cnn,
                norm_c: LayerNorm::new(store, &format!("{name}.norm_c"), d),
                ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.d_ff, rng),
            });
            if l + 1 < cfg.e_layers {
                distils.push(Distil {
                    conv1: CircularConv1d::new(store, &format!("{name}.distil1"), 3, d, d, true, rng),
                    conv2: CircularConv1d::new(store, &format!("{name}.distil2"), 3, d, d, true, rng),
                });
                len = distil_len(len);
            }
        }
        let enc_norm = LayerNorm::new(store, "enc.norm", d);

        let cnn = if cfg.use_cnn {
            Some(Cnn3d::new(store, "dec.cnn", cfg.dec_stack_depth(), cfg.atm.size, cfg.dec_len(), d, rng)?)
        } else {
            None
        };
        let decoder = DecoderLayer {
            self_attn: MultiHead::new(store, "dec.self_attn", d, heads, rng),
            norm_a: LayerNorm::new(store, "dec.norm_a", d),
            cnn,
            norm_c: LayerNorm::new(store, "dec.norm_c", d),
            cross: MultiHead::new(store, "dec.cross", d, heads, rng),
            norm_d: LayerNorm::new(store, "dec.norm_d", d),
            ffn: FeedForward::new(store, "dec.ffn", d, cfg.d_ff, rng),
        };
        let dec_norm = LayerNorm::new(store, "dec.norm", d);
        let head = OutputHead {
            conv1: CircularConv1d::new(store, "head.conv1", 3, d, d, true, rng),
            conv2: CircularConv1d::new(store, "head.conv2", 3, d, d, true, rng),
            out: Linear::new(store, "head.out", d, 2, true, rng),
        };
        Ok(Self { cfg, enc_token, dec_token, time, enc_layers, distils, enc_norm, decoder, dec_norm, head })
    }

    fn head_scores(&self, raw: &Mat) -> Vec<Vec<f64>> {
        let a = &self.cfg.attention;
        let ds = raw.column(0).to_vec();
        let dc = raw.column(1).to_vec();
        a.weights()
            .iter()
            .map(|&(ws, wc)| importance_scores(&ds, &dc, ws, wc, a.d_constant, a.floor, a.index_origin))
            .collect()
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let cfg = &self.cfg;
        let expect = [
            ("x_enc", input.x_enc.dim(), (cfg.enc_len, 2)),
            ("x_dec", input.x_dec.dim(), (cfg.dec_len(), 2)),
            ("enc_raw", input.enc_raw.dim(), (cfg.enc_len, 2)),
            ("dec_raw", input.dec_raw.dim(), (cfg.dec_len(), 2)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Shape(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        if cfg.use_cnn && (input.enc_atm.is_none() || input.dec_atm.is_none()) {
            return Err(Error::Shape("model uses the ATM extractor but the input has no stacks".into()));
        }
        Ok(())
    }

    /// Encoder memory, `enc_len / 2^(e_layers-1)` rows.
    pub fn encode(&self, g: &mut Graph, input: &ModelInput, ctx: &mut ForwardCtx) -> Result<Var> {
        let cfg = &self.cfg;
        let c = cfg.attention.c_factor;
        let xe = g.constant(input.x_enc.clone());
        let mut x = feed(g, &self.enc_token, &self.time, xe, &input.enc_time, cfg.alpha)?;
        let scores = cfg.use_dynamic_attention.then(|| self.head_scores(&input.enc_raw));
        for (l, layer) in self.enc_layers.iter().enumerate() {
            let sel = match (&scores, l) {
                (Some(s), 0) => QuerySelection::Scores(s, c),
                _ => QuerySelection::ProbSparse { c, rng: &mut ctx.sampler },
            };
            let att = layer.attn.forward(g, x, x, sel, false);
            let att = dropout(g, att, cfg.dropout, ctx.dropout.as_mut());
            let r = g.add(x, att);
            let a = layer.norm_a.forward(g, r);
            let pre_c = match (&layer.cnn, &input.enc_atm) {
                (Some(cnn), Some(stack)) => {
                    let f = cnn.forward(g, stack)?;
                    g.add(a, f)
                }
                _ => a,
            };
            let cc = layer.norm_c.forward(g, pre_c);
            x = layer.ffn.forward(g, cc, cfg.dropout, ctx.dropout.as_mut());
            if let Some(d) = self.distils.get(l) {
                let h = d.conv1.forward(g, x);
                let h = g.relu(h);
                let h = d.conv2.forward(g, h);
                x = g.max_pool_rows(h, 3, 2, 1);
            }
        }
        Ok(self.enc_norm.forward(g, x))
    }

    /// Normalized `pred_len x 2` delta predictions.
    pub fn decode(&self, g: &mut Graph, memory: Var, input: &ModelInput, ctx: &mut ForwardCtx) -> Result<Var> {
        let cfg = &self.cfg;
        let c = cfg.attention.c_factor;
        let dec = &self.decoder;
        let xd = g.constant(input.x_dec.clone());
        let x = feed(g, &self.dec_token, &self.time, xd, &input.dec_time, cfg.alpha)?;
        let scores;
        let sel = if cfg.use_dynamic_attention {
            scores = self.head_scores(&input.dec_raw);
            QuerySelection::Scores(&scores, c)
        } else {
            QuerySelection::ProbSparse { c, rng: &mut ctx.sampler }
        };
        let att = dec.self_attn.forward(g, x, x, sel, true);
        let att = dropout(g, att, cfg.dropout, ctx.dropout.as_mut());
        let r = g.add(x, att);
        let a = dec.norm_a.forward(g, r);
        let pre_c = match (&dec.cnn, &input.dec_atm) {
            (Some(cnn), Some(stack)) => {
                let f = cnn.forward(g, stack)?;
                g.add(a, f)
            }
            _ => a,
        };
        let cc = dec.norm_c.forward(g, pre_c);
        let cross = dec.cross.forward(g, cc, memory, QuerySelection::All, false);
        let cross = dropout(g, cross, cfg.dropout, ctx.dropout.as_mut());
        let r = g.add(cc, cross);
        let dd = dec.norm_d.forward(g, r);
        let h = dec.ffn.forward(g, dd, cfg.dropout, ctx.dropout.as_mut());
        let h = self.dec_norm.forward(g, h);
        let h = self.head.conv1.forward(g, h);
        let h = g.relu(h);
        let h = self.head.conv2.forward(g, h);
        let out = self.head.out.forward(g, h);
        Ok(g.slice_rows(out, cfg.label_len, cfg.pred_len))
    }

    pub fn forward(&self, g: &mut Graph, input: &ModelInput, ctx: &mut ForwardCtx) -> Result<Var> {
        self.check_input(input)?;
        let memory = self.encode(g, input, ctx)?;
        self.decode(g, memory, input, ctx)
    }

    /// Evaluation-mode prediction without building gradients.
    pub fn predict(&self, params: &ParamStore, input: &ModelInput, seed: u64) -> Result<Mat> {
        let mut g = Graph::new(params);
        let mut ctx = ForwardCtx::eval(seed);
        let out = self.forward(&mut g, input, &mut ctx)?;
        let v = g.value(out).clone();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("network produced a non-finite output".into()));
        }
        Ok(v)
    }
}
