//! A small pre-norm decoder-only transformer with a hand-written backward
//! pass, Adam, a training loop, perplexity evaluation and sampling.
//!
//! The model is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for gradient checking. Parameters are a flat list
//! of named [`Tensor`]s in a fixed declaration order:
//!
//! ```text
//! wte [V, d]  wpe [block, d]
//! per layer l: h{l}.ln1.g  h{l}.ln1.b  h{l}.attn.qkv.w [d, 3d]  h{l}.attn.qkv.b
//!              h{l}.attn.proj.w [d, d]  h{l}.attn.proj.b  h{l}.ln2.g  h{l}.ln2.b
//!              h{l}.mlp.fc.w [d, 4d]  h{l}.mlp.fc.b  h{l}.mlp.proj.w [4d, d]  h{l}.mlp.proj.b
//! lnf.g  lnf.b  head.w [d, V]
//! ```
//!
//! The output head is never tied to `wte`, so freezing the input embedding
//! leaves the output distribution learnable.

use std::fmt::{Debug, Display};
use std::str::FromStr;
use std::time::Instant;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binfmt::{ByteReader, ByteWriter, FormatError};
use crate::univoc::{TokenId, PAD_ID};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BVVC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const PER_LAYER: usize = 12;

#[derive(Debug, Error)]
pub enum NanoError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("sequence of {len} tokens exceeds block size {block}")]
    SequenceTooLong { len: usize, block: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("targets do not match inputs ({inputs} inputs, {targets} targets)")]
    TargetMismatch { inputs: usize, targets: usize },
    #[error("every target position is padding")]
    AllPadded,
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("corpus has {len} tokens, need at least {needed}")]
    CorpusTooShort { len: usize, needed: usize },
    #[error("evaluation set needs at least two tokens")]
    EmptyEvalSet,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("temperature must be finite and non-negative, got {0}")]
    InvalidTemperature(f64),
    #[error("embedding matrix is {found_rows}x{found_dim}, model expects {rows}x{dim}")]
    EmbeddingShape {
        rows: usize,
        dim: usize,
        found_rows: usize,
        found_dim: usize,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Floating point type the model can run in.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    fn erf(self) -> Self;
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// How the token embedding is initialised and whether it trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    FrozenVisual,
    FrozenRandom,
    Trainable,
}

impl EmbeddingMode {
    pub const ALL: [EmbeddingMode; 3] = [
        EmbeddingMode::Trainable,
        EmbeddingMode::FrozenVisual,
        EmbeddingMode::FrozenRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingMode::FrozenVisual => "frozen_visual",
            EmbeddingMode::FrozenRandom => "frozen_random",
            EmbeddingMode::Trainable => "trainable",
        }
    }

    pub fn is_frozen(self) -> bool {
        self != EmbeddingMode::Trainable
    }

    fn code(self) -> u8 {
        match self {
            EmbeddingMode::FrozenVisual => 0,
            EmbeddingMode::FrozenRandom => 1,
            EmbeddingMode::Trainable => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EmbeddingMode::FrozenVisual),
            1 => Some(EmbeddingMode::FrozenRandom),
            2 => Some(EmbeddingMode::Trainable),
            _ => None,
        }
    }
}

impl Display for EmbeddingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbeddingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "frozen_visual" | "visual" => Ok(EmbeddingMode::FrozenVisual),
            "frozen_random" | "random" => Ok(EmbeddingMode::FrozenRandom),
            "trainable" => Ok(EmbeddingMode::Trainable),
            other => Err(format!(
                "unknown embedding mode {other:?} (expected frozen_visual, frozen_random or trainable)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub block_size: usize,
    pub embedding_mode: EmbeddingMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NanoError> {
        let bad = |m: String| Err(NanoError::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad(format!("all sizes must be positive: {self:?}"));
        }
        if self.block_size == 0 {
            return bad("block_size must be at least 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size > u32::MAX as usize {
            return bad(format!("vocab_size {} exceeds u32", self.vocab_size));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Shapes of every parameter tensor in declaration order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, t) = (self.vocab_size, self.d_model, self.block_size);
        let mut specs = vec![("wte".to_string(), vec![v, d]), ("wpe".to_string(), vec![t, d])];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            specs.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.qkv.w"), vec![d, 3 * d]),
                (p("attn.qkv.b"), vec![3 * d]),
                (p("attn.proj.w"), vec![d, d]),
                (p("attn.proj.b"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.fc.w"), vec![d, 4 * d]),
                (p("mlp.fc.b"), vec![4 * d]),
                (p("mlp.proj.w"), vec![4 * d, d]),
                (p("mlp.proj.b"), vec![d]),
            ]);
        }
        specs.push(("lnf.g".into(), vec![d]));
        specs.push(("lnf.b".into(), vec![d]));
        specs.push(("head.w".into(), vec![d, v]));
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<R>,
    pub trainable: bool,
}

impl<R: Real> Tensor<R> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

// Fixed tensor positions.
const WTE: usize = 0;
const WPE: usize = 1;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const QKV_W: usize = 2;
const QKV_B: usize = 3;
const PROJ_W: usize = 4;
const PROJ_B: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const FC_W: usize = 8;
const FC_B: usize = 9;
const FC2_W: usize = 10;
const FC2_B: usize = 11;

fn layer_tensor(layer: usize, offset: usize) -> usize {
    2 + layer * PER_LAYER + offset
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<R> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<R>>,
}

impl<R: Real> Model<R> {
    /// Standard initialisation: normal(0, 0.02), residual output projections
    /// scaled by 1/sqrt(2 * n_layers), unit layer-norm gains, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NanoError> {
        Self::with_init_std(config, seed, INIT_STD)
    }

    pub fn with_init_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self, NanoError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| NanoError::InvalidConfig(e.to_string()))?;
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let tensors = config
            .tensor_specs()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<R> = if name.ends_with(".g") {
                    vec![R::one(); n]
                } else if name.ends_with(".b") {
                    vec![R::zero(); n]
                } else {
                    let scale = if name.ends_with("attn.proj.w") || name.ends_with("mlp.proj.w") {
                        resid_scale
                    } else {
                        1.0
                    };
                    (0..n)
                        .map(|_| R::of(normal.sample(&mut rng) * scale))
                        .collect()
                };
                let trainable = !(name == "wte" && config.embedding_mode.is_frozen());
                Tensor {
                    name,
                    shape,
                    data,
                    trainable,
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Every parameter zero, including layer-norm gains.
    pub fn zeroed(config: ModelConfig) -> Result<Self, NanoError> {
        let mut model = Self::new(config, 0)?;
        for t in &mut model.tensors {
            t.data.iter_mut().for_each(|x| *x = R::zero());
        }
        Ok(model)
    }

    /// Replace the token embedding with a precomputed `V x d` matrix.
    pub fn set_token_embedding(&mut self, rows: &[f32], n_rows: usize, dim: usize) -> Result<(), NanoError> {
        let c = &self.config;
        if n_rows != c.vocab_size || dim != c.d_model || rows.len() != n_rows * dim {
            return Err(NanoError::EmbeddingShape {
                rows: c.vocab_size,
                dim: c.d_model,
                found_rows: n_rows,
                found_dim: dim,
            });
        }
        self.tensors[WTE].data = rows.iter().map(|&x| R::of(x as f64)).collect();
        Ok(())
    }

    pub fn token_embedding(&self) -> &Tensor<R> {
        &self.tensors[WTE]
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<R>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&x| S::of(x.as_f64())).collect(),
                    trainable: t.trainable,
                })
                .collect(),
        }
    }

    fn w(&self, idx: usize) -> &[R] {
        &self.tensors[idx].data
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), NanoError> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(NanoError::EmptySequence);
        }
        if tokens.len() > c.block_size {
            return Err(NanoError::SequenceTooLong {
                len: tokens.len(),
                block: c.block_size,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(NanoError::TokenOutOfRange {
                id,
                vocab: c.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits (`T x V`, row-major) plus the activations needed by
    /// [`Model::backward`].
    pub fn forward(&self, tokens: &[TokenId]) -> Result<(Vec<R>, ForwardCache<R>), NanoError> {
        self.check_tokens(tokens)?;
        let c = self.config;
        let (t_len, d) = (tokens.len(), c.d_model);
        let wte = self.w(WTE);
        let wpe = self.w(WPE);
        let mut x = vec![R::zero(); t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = &wte[tok as usize * d..(tok as usize + 1) * d];
            let p = &wpe[t * d..(t + 1) * d];
            for ((o, &a), &b) in x[t * d..(t + 1) * d].iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let li = |o| layer_tensor(l, o);
            let x_in = x;
            let ln1 = layer_norm(&x_in, t_len, d, self.w(li(LN1_G)), self.w(li(LN1_B)));
            let qkv = linear(&ln1.out, t_len, d, self.w(li(QKV_W)), Some(self.w(li(QKV_B))), 3 * d);
            let (y, att) = attention(&qkv, t_len, d, c.n_heads);
            let a = linear(&y, t_len, d, self.w(li(PROJ_W)), Some(self.w(li(PROJ_B))), d);
            let x_mid: Vec<R> = x_in.iter().zip(&a).map(|(&p, &q)| p + q).collect();
            let ln2 = layer_norm(&x_mid, t_len, d, self.w(li(LN2_G)), self.w(li(LN2_B)));
            let f = linear(&ln2.out, t_len, d, self.w(li(FC_W)), Some(self.w(li(FC_B))), 4 * d);
            let g: Vec<R> = f.iter().map(|&v| gelu(v)).collect();
            let m = linear(&g, t_len, 4 * d, self.w(li(FC2_W)), Some(self.w(li(FC2_B))), d);
            x = x_mid.iter().zip(&m).map(|(&p, &q)| p + q).collect();
            layers.push(LayerCache {
                ln1,
                qkv,
                att,
                y,
                ln2,
                f,
                g,
            });
        }

        let n = self.tensors.len();
        let lnf = layer_norm(&x, t_len, d, self.w(n - 3), self.w(n - 2));
        let logits = linear(&lnf.out, t_len, d, self.w(n - 1), None, c.vocab_size);
        Ok((
            logits,
            ForwardCache {
                tokens: tokens.to_vec(),
                layers,
                lnf,
            },
        ))
    }

    /// Accumulate parameter gradients for one sequence into `grads`.
    pub fn backward(&self, cache: &ForwardCache<R>, dlogits: &[R], grads: &mut Gradients<R>) {
        let c = self.config;
        let (t_len, d, v) = (cache.tokens.len(), c.d_model, c.vocab_size);
        let n = self.tensors.len();

        let mut dhf = vec![R::zero(); t_len * d];
        linear_backward(
            &cache.lnf.out,
            t_len,
            d,
            self.w(n - 1),
            v,
            dlogits,
            &mut dhf,
            grads.tensors[n - 1].as_deref_mut(),
            None,
        );
        let mut dx = vec![R::zero(); t_len * d];
        {
            let (g_part, b_part) = grads.pair_mut(n - 3, n - 2);
            layer_norm_backward(&cache.lnf, t_len, d, self.w(n - 3), &dhf, &mut dx, g_part, b_part);
        }

        for l in (0..c.n_layers).rev() {
            let li = |o| layer_tensor(l, o);
            let lc = &cache.layers[l];

            // MLP branch: dx is the gradient wrt the block output (= x_mid + m).
            let mut dg = vec![R::zero(); t_len * 4 * d];
            {
                let (w, b) = grads.pair_mut(li(FC2_W), li(FC2_B));
                linear_backward(&lc.g, t_len, 4 * d, self.w(li(FC2_W)), d, &dx, &mut dg, w, b);
            }
            let df: Vec<R> = dg
                .iter()
                .zip(&lc.f)
                .map(|(&g, &f)| g * gelu_grad(f))
                .collect();
            let mut dh2 = vec![R::zero(); t_len * d];
            {
                let (w, b) = grads.pair_mut(li(FC_W), li(FC_B));
                linear_backward(&lc.ln2.out, t_len, d, self.w(li(FC_W)), 4 * d, &df, &mut dh2, w, b);
            }
            let mut dx_mid = dx;
            {
                let (g, b) = grads.pair_mut(li(LN2_G), li(LN2_B));
                layer_norm_backward(&lc.ln2, t_len, d, self.w(li(LN2_G)), &dh2, &mut dx_mid, g, b);
            }

            // Attention branch.
            let mut dy = vec![R::zero(); t_len * d];
            {
                let (w, b) = grads.pair_mut(li(PROJ_W), li(PROJ_B));
                linear_backward(&lc.y, t_len, d, self.w(li(PROJ_W)), d, &dx_mid, &mut dy, w, b);
            }
            let dqkv = attention_backward(&lc.qkv, &lc.att, &dy, t_len, d, c.n_heads);
            let mut dh1 = vec![R::zero(); t_len * d];
            {
                let (w, b) = grads.pair_mut(li(QKV_W), li(QKV_B));
                linear_backward(&lc.ln1.out, t_len, d, self.w(li(QKV_W)), 3 * d, &dqkv, &mut dh1, w, b);
            }
            let mut dx_in = dx_mid;
            {
                let (g, b) = grads.pair_mut(li(LN1_G), li(LN1_B));
                layer_norm_backward(&lc.ln1, t_len, d, self.w(li(LN1_G)), &dh1, &mut dx_in, g, b);
            }
            dx = dx_in;
        }

        if let Some(dwte) = grads.tensors[WTE].as_deref_mut() {
            for (t, &tok) in cache.tokens.iter().enumerate() {
                let row = &mut dwte[tok as usize * d..(tok as usize + 1) * d];
                for (g, &v) in row.iter_mut().zip(&dx[t * d..(t + 1) * d]) {
                    *g = *g + v;
                }
            }
        }
        if let Some(dwpe) = grads.tensors[WPE].as_deref_mut() {
            for (g, &v) in dwpe[..t_len * d].iter_mut().zip(&dx) {
                *g = *g + v;
            }
        }
    }

    /// Mean cross-entropy over all non-PAD targets of a batch of
    /// `(inputs, targets)` pairs, with gradients for every trainable tensor.
    pub fn loss_and_grads(&self, batch: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<(f64, Gradients<R>), NanoError> {
        let mut grads = Gradients::zeros(self);
        let loss = self.accumulate_grads(batch, &mut grads, 1)?;
        Ok((loss, grads))
    }

    /// Like [`Model::loss_and_grads`] but adds into `grads`, scaled so that
    /// `parts` equally sized calls sum to the mean over all of them.
    fn accumulate_grads(
        &self,
        batch: &[(Vec<TokenId>, Vec<TokenId>)],
        grads: &mut Gradients<R>,
        parts: usize,
    ) -> Result<f64, NanoError> {
        let included: usize = batch
            .iter()
            .map(|(_, tg)| tg.iter().filter(|&&t| t != PAD_ID).count())
            .sum();
        if included == 0 {
            return Err(NanoError::AllPadded);
        }
        let scale = 1.0 / (included * parts) as f64;
        let mut nll = 0.0;
        for (inputs, targets) in batch {
            if inputs.len() != targets.len() {
                return Err(NanoError::TargetMismatch {
                    inputs: inputs.len(),
                    targets: targets.len(),
                });
            }
            let (logits, cache) = self.forward(inputs)?;
            let (sum, _, dlogits) = softmax_xent(&logits, targets, self.config.vocab_size, scale)?;
            nll += sum;
            self.backward(&cache, &dlogits, grads);
        }
        Ok(nll / included as f64)
    }

    /// Sum of token NLLs and number of scored (non-PAD) targets.
    pub fn nll(&self, inputs: &[TokenId], targets: &[TokenId]) -> Result<(f64, usize), NanoError> {
        let (logits, _) = self.forward(inputs)?;
        let (sum, count, _) = softmax_xent(&logits, targets, self.config.vocab_size, 0.0)?;
        Ok((sum, count))
    }
}

struct LnCache<R> {
    out: Vec<R>,
    xhat: Vec<R>,
    rstd: Vec<R>,
}

struct LayerCache<R> {
    ln1: LnCache<R>,
    qkv: Vec<R>,
    att: Vec<R>,
    y: Vec<R>,
    ln2: LnCache<R>,
    f: Vec<R>,
    g: Vec<R>,
}

/// Activations saved by the forward pass.
pub struct ForwardCache<R> {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache<R>>,
    lnf: LnCache<R>,
}

impl<R: Real> ForwardCache<R> {
    /// Attention probabilities of one layer, `n_heads x T x T`, zero above the diagonal.
    pub fn attention_probs(&self, layer: usize) -> &[R] {
        &self.layers[layer].att
    }
}

/// Per-tensor gradients; `None` for tensors that do not train.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<R> {
    pub tensors: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn zeros(model: &Model<R>) -> Self {
        Self {
            tensors: model
                .tensors
                .iter()
                .map(|t| t.trainable.then(|| vec![R::zero(); t.numel()]))
                .collect(),
        }
    }

    fn pair_mut(&mut self, a: usize, b: usize) -> (Option<&mut [R]>, Option<&mut [R]>) {
        debug_assert!(a < b);
        let (lo, hi) = self.tensors.split_at_mut(b);
        (lo[a].as_deref_mut(), hi[0].as_deref_mut())
    }

    pub fn first_non_finite(&self, model: &Model<R>) -> Option<String> {
        self.tensors.iter().zip(&model.tensors).find_map(|(g, t)| {
            g.as_ref()
                .filter(|g| g.iter().any(|x| !x.is_finite()))
                .map(|_| t.name.clone())
        })
    }
}

fn linear<R: Real>(inp: &[R], rows: usize, k: usize, w: &[R], bias: Option<&[R]>, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); rows * n];
    for t in 0..rows {
        let o = &mut out[t * n..(t + 1) * n];
        if let Some(b) = bias {
            o.copy_from_slice(b);
        }
        for (kk, &xv) in inp[t * k..(t + 1) * k].iter().enumerate() {
            for (ov, &wv) in o.iter_mut().zip(&w[kk * n..(kk + 1) * n]) {
                *ov = *ov + xv * wv;
            }
        }
    }
    out
}

/// `dinp += dout * w^T`, `dw += inp^T * dout`, `db += sum(dout)`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<R: Real>(
    inp: &[R],
    rows: usize,
    k: usize,
    w: &[R],
    n: usize,
    dout: &[R],
    dinp: &mut [R],
    dw: Option<&mut [R]>,
    db: Option<&mut [R]>,
) {
    let mut wt = vec![R::zero(); k * n];
    for kk in 0..k {
        for j in 0..n {
            wt[j * k + kk] = w[kk * n + j];
        }
    }
    for t in 0..rows {
        let di = &mut dinp[t * k..(t + 1) * k];
        for (j, &g) in dout[t * n..(t + 1) * n].iter().enumerate() {
            for (dv, &wv) in di.iter_mut().zip(&wt[j * k..(j + 1) * k]) {
                *dv = *dv + g * wv;
            }
        }
    }
    if let Some(dw) = dw {
        for t in 0..rows {
            let go = &dout[t * n..(t + 1) * n];
            for (kk, &xv) in inp[t * k..(t + 1) * k].iter().enumerate() {
                for (dv, &g) in dw[kk * n..(kk + 1) * n].iter_mut().zip(go) {
                    *dv = *dv + xv * g;
                }
            }
        }
    }
    if let Some(db) = db {
        for t in 0..rows {
            for (dv, &g) in db.iter_mut().zip(&dout[t * n..(t + 1) * n]) {
                *dv = *dv + g;
            }
        }
    }
}

fn layer_norm<R: Real>(x: &[R], rows: usize, d: usize, g: &[R], b: &[R]) -> LnCache<R> {
    let mut out = vec![R::zero(); rows * d];
    let mut xhat = vec![R::zero(); rows * d];
    let mut rstd = vec![R::zero(); rows];
    let inv_d = R::of(1.0 / d as f64);
    for t in 0..rows {
        let xr = &x[t * d..(t + 1) * d];
        let mean = xr.iter().fold(R::zero(), |a, &v| a + v) * inv_d;
        let var = xr.iter().fold(R::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let rs = R::one() / (var + R::of(LN_EPS)).sqrt();
        rstd[t] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[t * d + i] = h;
            out[t * d + i] = h * g[i] + b[i];
        }
    }
    LnCache { out, xhat, rstd }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<R: Real>(
    cache: &LnCache<R>,
    rows: usize,
    d: usize,
    g: &[R],
    dout: &[R],
    dx: &mut [R],
    dg: Option<&mut [R]>,
    db: Option<&mut [R]>,
) {
    let inv_d = R::of(1.0 / d as f64);
    for t in 0..rows {
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let go = &dout[t * d..(t + 1) * d];
        let mut mean_dxh = R::zero();
        let mut mean_dxh_xh = R::zero();
        for i in 0..d {
            let dxh = go[i] * g[i];
            mean_dxh = mean_dxh + dxh;
            mean_dxh_xh = mean_dxh_xh + dxh * xh[i];
        }
        mean_dxh = mean_dxh * inv_d;
        mean_dxh_xh = mean_dxh_xh * inv_d;
        let rs = cache.rstd[t];
        for i in 0..d {
            let dxh = go[i] * g[i];
            dx[t * d + i] = dx[t * d + i] + rs * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
    if let Some(dg) = dg {
        for t in 0..rows {
            for i in 0..d {
                dg[i] = dg[i] + dout[t * d + i] * cache.xhat[t * d + i];
            }
        }
    }
    if let Some(db) = db {
        for t in 0..rows {
            for i in 0..d {
                db[i] = db[i] + dout[t * d + i];
            }
        }
    }
}

fn gelu<R: Real>(x: R) -> R {
    x * R::of(0.5) * (R::one() + (x * R::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<R: Real>(x: R) -> R {
    let cdf = R::of(0.5) * (R::one() + (x * R::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * R::of(0.5)).exp() * R::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Causal multi-head attention over a packed `[q | k | v]` projection.
/// Returns the concatenated head outputs and the probabilities.
fn attention<R: Real>(qkv: &[R], t_len: usize, d: usize, n_heads: usize) -> (Vec<R>, Vec<R>) {
    let dh = d / n_heads;
    let scale = R::of(1.0 / (dh as f64).sqrt());
    let stride = 3 * d;
    let mut y = vec![R::zero(); t_len * d];
    let mut att = vec![R::zero(); n_heads * t_len * t_len];
    for h in 0..n_heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for t in 0..t_len {
            let q = &qkv[t * stride + qo..t * stride + qo + dh];
            let row = &mut att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let mut max = R::neg_infinity();
            for u in 0..=t {
                let k = &qkv[u * stride + ko..u * stride + ko + dh];
                let s = q.iter().zip(k).fold(R::zero(), |a, (&x, &y)| a + x * y) * scale;
                row[u] = s;
                max = max.max(s);
            }
            let mut sum = R::zero();
            for p in row[..=t].iter_mut() {
                *p = (*p - max).exp();
                sum = sum + *p;
            }
            for p in row[..=t].iter_mut() {
                *p = *p / sum;
            }
            let out = &mut y[t * d + h * dh..t * d + (h + 1) * dh];
            for u in 0..=t {
                let p = row[u];
                let vv = &qkv[u * stride + vo..u * stride + vo + dh];
                for (o, &x) in out.iter_mut().zip(vv) {
                    *o = *o + p * x;
                }
            }
        }
    }
    (y, att)
}

fn attention_backward<R: Real>(qkv: &[R], att: &[R], dy: &[R], t_len: usize, d: usize, n_heads: usize) -> Vec<R> {
    let dh = d / n_heads;
    let scale = R::of(1.0 / (dh as f64).sqrt());
    let stride = 3 * d;
    let mut dqkv = vec![R::zero(); t_len * stride];
    let mut datt = vec![R::zero(); t_len];
    for h in 0..n_heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for t in 0..t_len {
            let row = &att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let g = &dy[t * d + h * dh..t * d + (h + 1) * dh];
            let mut dot = R::zero();
            for u in 0..=t {
                let vv = &qkv[u * stride + vo..u * stride + vo + dh];
                datt[u] = g.iter().zip(vv).fold(R::zero(), |a, (&x, &y)| a + x * y);
                dot = dot + row[u] * datt[u];
                let dv = &mut dqkv[u * stride + vo..u * stride + vo + dh];
                for (o, &x) in dv.iter_mut().zip(g) {
                    *o = *o + row[u] * x;
                }
            }
            for u in 0..=t {
                let ds = row[u] * (datt[u] - dot) * scale;
                if ds == R::zero() {
                    continue;
                }
                for i in 0..dh {
                    let q = qkv[t * stride + qo + i];
                    let k = qkv[u * stride + ko + i];
                    dqkv[t * stride + qo + i] = dqkv[t * stride + qo + i] + ds * k;
                    dqkv[u * stride + ko + i] = dqkv[u * stride + ko + i] + ds * q;
                }
            }
        }
    }
    dqkv
}

/// Row-wise stable log-softmax cross-entropy. Returns the NLL sum over
/// non-PAD targets, their count, and `scale * (softmax - onehot)` with
/// zero rows at PAD positions.
fn softmax_xent<R: Real>(logits: &[R], targets: &[TokenId], v: usize, scale: f64) -> Result<(f64, usize, Vec<R>), NanoError> {
    if logits.len() != targets.len() * v {
        return Err(NanoError::TargetMismatch {
            inputs: logits.len() / v.max(1),
            targets: targets.len(),
        });
    }
    let mut dlogits = vec![R::zero(); logits.len()];
    let mut sum = 0.0;
    let mut count = 0;
    for (t, &target) in targets.iter().enumerate() {
        if target as usize >= v {
            return Err(NanoError::TokenOutOfRange { id: target, vocab: v });
        }
        if target == PAD_ID {
            continue;
        }
        let row = &logits[t * v..(t + 1) * v];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
        let z: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
        let lse = max + z.ln();
        sum += lse - row[target as usize].as_f64();
        count += 1;
        if scale != 0.0 {
            let out = &mut dlogits[t * v..(t + 1) * v];
            for (o, &x) in out.iter_mut().zip(row) {
                *o = R::of((x.as_f64() - lse).exp() * scale);
            }
            out[target as usize] = out[target as usize] - R::of(scale);
        }
    }
    Ok((sum, count, dlogits))
}

/// Output of [`cross_entropy`].
#[derive(Debug, Clone)]
pub struct CrossEntropy<R> {
    /// Mean NLL over non-PAD positions.
    pub loss: f64,
    pub included: usize,
    /// `(softmax - onehot) / included`, zero at PAD positions.
    pub dlogits: Vec<R>,
}

/// Mean cross-entropy of `T x V` logits against `T` targets, excluding PAD.
pub fn cross_entropy<R: Real>(logits: &[R], targets: &[TokenId], vocab_size: usize) -> Result<CrossEntropy<R>, NanoError> {
    let included = targets.iter().filter(|&&t| t != PAD_ID).count();
    if included == 0 {
        return Err(NanoError::AllPadded);
    }
    let (sum, _, dlogits) = softmax_xent(logits, targets, vocab_size, 1.0 / included as f64)?;
    Ok(CrossEntropy {
        loss: sum / included as f64,
        included,
        dlogits,
    })
}

/// Softmax of one row, computed with max subtraction.
pub fn softmax<R: Real>(row: &[R]) -> Vec<R> {
    let max = row.iter().fold(R::neg_infinity(), |m, &x| m.max(x));
    let e: Vec<R> = row.iter().map(|&x| (x - max).exp()).collect();
    let s = e.iter().fold(R::zero(), |a, &x| a + x);
    e.into_iter().map(|x| x / s).collect()
}

/// Adam moment buffers; present only for trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub step: u64,
    pub m: Vec<Option<Vec<R>>>,
    pub v: Vec<Option<Vec<R>>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(model: &Model<R>) -> Self {
        let zeros = || {
            model
                .tensors
                .iter()
                .map(|t| t.trainable.then(|| vec![R::zero(); t.numel()]))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of a single buffer at 1-based step `t`.
pub fn adam_update<R: Real>(param: &mut [R], grad: &[R], m: &mut [R], v: &mut [R], t: u64, lr: f64) {
    let (b1, b2) = (R::of(ADAM_BETA1), R::of(ADAM_BETA2));
    let c1 = R::of(1.0 / (1.0 - ADAM_BETA1.powf(t as f64)));
    let c2 = R::of(1.0 / (1.0 - ADAM_BETA2.powf(t as f64)));
    let (lr, eps) = (R::of(lr), R::of(ADAM_EPS));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (R::one() - b1) * g;
        v[i] = b2 * v[i] + (R::one() - b2) * g * g;
        let mh = m[i] * c1;
        let vh = v[i] * c2;
        param[i] = param[i] - lr * mh / (vh.sqrt() + eps);
    }
}

/// Apply one Adam step to every trainable tensor. Frozen tensors are not
/// touched. A non-finite gradient aborts the step before any update.
pub fn adam_step<R: Real>(model: &mut Model<R>, state: &mut AdamState<R>, grads: &Gradients<R>, lr: f64) -> Result<(), NanoError> {
    if let Some(tensor) = grads.first_non_finite(model) {
        return Err(NanoError::NonFiniteGradient { tensor });
    }
    let t = state.step + 1;
    for (i, tensor) in model.tensors.iter_mut().enumerate() {
        if !tensor.trainable {
            continue;
        }
        let (Some(g), Some(m), Some(v)) = (&grads.tensors[i], &mut state.m[i], &mut state.v[i]) else {
            continue;
        };
        adam_update(&mut tensor.data, g, m, v, t, lr);
    }
    state.step = t;
    Ok(())
}

/// Learning rate after linear warmup.
pub fn lr_at(base: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub accum: usize,
    pub seed: u64,
    pub eval_every: u64,
    pub warmup: u64,
    /// Fraction of the corpus tail held out for validation.
    pub val_fraction: f64,
    /// Cap on validation blocks scored at each evaluation (0 = all).
    pub eval_blocks: usize,
    /// Record zero wall time so histories compare bitwise.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch: 8,
            steps: 2000,
            accum: 1,
            seed: 1234,
            eval_every: 200,
            warmup: 100,
            val_fraction: 0.1,
            eval_blocks: 64,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NanoError> {
        let bad = |m: &str| Err(NanoError::InvalidTrainConfig(m.into()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch == 0 || self.accum == 0 {
            return bad("batch and accum must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

/// Loss history as CSV with columns `step,train_loss,val_loss,seconds`.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,train_loss,val_loss,seconds\n");
    for r in history {
        let val = r.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{:.6},{},{:.3}\n", r.step, r.train_loss, val, r.seconds));
    }
    out
}

/// Trailing moving average of the training loss over `window` steps.
pub fn smoothed_losses(history: &[LossRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(history.len());
    let mut sum = 0.0;
    for (i, r) in history.iter().enumerate() {
        sum += r.train_loss;
        if i >= window {
            sum -= history[i - window].train_loss;
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// First step whose smoothed training loss falls below `threshold`.
pub fn steps_to_threshold(history: &[LossRecord], threshold: f64, window: usize) -> Option<u64> {
    smoothed_losses(history, window)
        .iter()
        .zip(history)
        .find(|(&s, _)| s < threshold)
        .map(|(_, r)| r.step)
}

/// Split a token stream into train and validation parts (validation is the tail).
pub fn split_tokens(tokens: &[TokenId], val_fraction: f64) -> (&[TokenId], &[TokenId]) {
    let n_val = (tokens.len() as f64 * val_fraction).ceil() as usize;
    tokens.split_at(tokens.len() - n_val.min(tokens.len()))
}

/// Mean NLL over consecutive non-overlapping blocks; the last block may be short.
pub fn mean_nll<R: Real>(model: &Model<R>, tokens: &[TokenId], max_blocks: Option<usize>) -> Result<f64, NanoError> {
    if tokens.len() < 2 {
        return Err(NanoError::EmptyEvalSet);
    }
    let t = model.config.block_size;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    let mut blocks = 0;
    while start + 1 < tokens.len() && max_blocks.is_none_or(|m| blocks < m) {
        let end = (start + t).min(tokens.len() - 1);
        let (s, c) = model.nll(&tokens[start..end], &tokens[start + 1..end + 1])?;
        sum += s;
        count += c;
        start = end;
        blocks += 1;
    }
    if count == 0 {
        return Err(NanoError::AllPadded);
    }
    Ok(sum / count as f64)
}

/// `exp` of the mean token NLL over non-overlapping blocks.
pub fn perplexity<R: Real>(model: &Model<R>, tokens: &[TokenId]) -> Result<f64, NanoError> {
    mean_nll(model, tokens, None).map(f64::exp)
}

/// Sample `n` tokens after `prompt`. Temperature 0 means greedy argmax.
pub fn generate<R: Real>(
    model: &Model<R>,
    prompt: &[TokenId],
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<TokenId>, NanoError> {
    if prompt.is_empty() {
        return Err(NanoError::EmptyPrompt);
    }
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(NanoError::InvalidTemperature(temperature));
    }
    let v = model.config.vocab_size;
    if let Some(&id) = prompt.iter().find(|&&id| id as usize >= v) {
        return Err(NanoError::TokenOutOfRange { id, vocab: v });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let ctx = &seq[seq.len().saturating_sub(model.config.block_size)..];
        let (logits, _) = model.forward(ctx)?;
        let last = &logits[(ctx.len() - 1) * v..];
        let next = if temperature == 0.0 {
            argmax(last)
        } else {
            let scaled: Vec<f64> = last.iter().map(|&x| x.as_f64() / temperature).collect();
            sample(&softmax(&scaled), rng.random::<f64>())
        };
        seq.push(next as TokenId);
        out.push(next as TokenId);
    }
    Ok(out)
}

fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn sample(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Training loop state for an `f32` model over a fixed token stream.
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pub history: Vec<LossRecord>,
    /// Steps whose update was skipped because of a non-finite gradient.
    pub skipped: Vec<u64>,
    train: Vec<TokenId>,
    val: Vec<TokenId>,
    started: Instant,
    elapsed_before: f64,
}

impl Trainer {
    pub fn new(model: Model<f32>, tokens: &[TokenId], config: TrainConfig) -> Result<Self, NanoError> {
        let adam = AdamState::new(&model);
        Self::assemble(model, adam, tokens, config, Vec::new(), Vec::new())
    }

    /// Continue from a checkpoint; `steps` may be raised to train further.
    pub fn resume(ckpt: Checkpoint, tokens: &[TokenId], steps: Option<u64>) -> Result<Self, NanoError> {
        let mut config = ckpt.train;
        if let Some(s) = steps {
            config.steps = s;
        }
        Self::assemble(ckpt.model, ckpt.adam, tokens, config, ckpt.history, ckpt.skipped)
    }

    fn assemble(
        model: Model<f32>,
        adam: AdamState<f32>,
        tokens: &[TokenId],
        config: TrainConfig,
        history: Vec<LossRecord>,
        skipped: Vec<u64>,
    ) -> Result<Self, NanoError> {
        config.validate()?;
        let block = model.config.block_size;
        let v = model.config.vocab_size;
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= v) {
            return Err(NanoError::TokenOutOfRange { id, vocab: v });
        }
        let (train, val) = split_tokens(tokens, config.val_fraction);
        if train.len() < block + 1 {
            return Err(NanoError::CorpusTooShort {
                len: tokens.len(),
                needed: ((block + 1) as f64 / (1.0 - config.val_fraction)).ceil() as usize,
            });
        }
        let elapsed_before = history.last().map_or(0.0, |r| r.seconds);
        Ok(Self {
            model,
            adam,
            config,
            history,
            skipped,
            train: train.to_vec(),
            val: val.to_vec(),
            started: Instant::now(),
            elapsed_before,
        })
    }

    /// Completed optimizer steps (including skipped ones).
    pub fn step_count(&self) -> u64 {
        self.history.len() as u64
    }

    pub fn is_done(&self) -> bool {
        self.step_count() >= self.config.steps
    }

    /// Input/target windows for micro-batch `micro` of 0-based step `step`.
    /// Offsets come from a ChaCha8 stream keyed by the step, so a resumed
    /// run draws exactly the batches the uninterrupted run would.
    pub fn batch(&self, step: u64, micro: usize) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
        let t = self.model.config.block_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step * self.config.accum as u64 + micro as u64);
        let max_off = self.train.len() - t - 1;
        (0..self.config.batch)
            .map(|_| {
                let o = rng.random_range(0..=max_off);
                (self.train[o..o + t].to_vec(), self.train[o + 1..o + t + 1].to_vec())
            })
            .collect()
    }

    /// Run one optimizer step; returns the mean training loss.
    pub fn step(&mut self) -> Result<f64, NanoError> {
        let step = self.step_count();
        let mut grads = Gradients::zeros(&self.model);
        let mut loss = 0.0;
        for micro in 0..self.config.accum {
            let batch = self.batch(step, micro);
            loss += self.model.accumulate_grads(&batch, &mut grads, self.config.accum)?;
        }
        loss /= self.config.accum as f64;
        let lr = lr_at(self.config.lr, self.config.warmup, step);
        match adam_step(&mut self.model, &mut self.adam, &grads, lr) {
            Ok(()) => {}
            Err(NanoError::NonFiniteGradient { tensor }) => {
                log::warn!("step {}: non-finite gradient in {tensor}, update skipped", step + 1);
                self.skipped.push(step + 1);
            }
            Err(e) => return Err(e),
        }
        let done = step + 1;
        let val_loss = if done % self.config.eval_every == 0 || done == self.config.steps {
            Some(self.validation_loss()?)
        } else {
            None
        };
        let seconds = if self.config.deterministic {
            0.0
        } else {
            self.elapsed_before + self.started.elapsed().as_secs_f64()
        };
        self.history.push(LossRecord {
            step: done,
            train_loss: loss,
            val_loss,
            seconds,
        });
        Ok(loss)
    }

    /// Train until `config.steps`, calling `on_eval` after every step that
    /// recorded a validation loss.
    pub fn run<F>(&mut self, mut on_eval: F) -> Result<(), NanoError>
    where
        F: FnMut(&Trainer) -> Result<(), NanoError>,
    {
        while !self.is_done() {
            self.step()?;
            if self.history.last().is_some_and(|r| r.val_loss.is_some()) {
                on_eval(self)?;
            }
        }
        Ok(())
    }

    pub fn validation_loss(&self) -> Result<f64, NanoError> {
        let max = (self.config.eval_blocks > 0).then_some(self.config.eval_blocks);
        if self.val.len() >= 2 {
            mean_nll(&self.model, &self.val, max)
        } else {
            mean_nll(&self.model, &self.train, max)
        }
    }

    pub fn validation_perplexity(&self) -> Result<f64, NanoError> {
        self.validation_loss().map(f64::exp)
    }

    pub fn validation_tokens(&self) -> &[TokenId] {
        &self.val
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            train: self.config,
            history: self.history.clone(),
            skipped: self.skipped.clone(),
        }
    }
}

/// Everything needed to resume training bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub train: TrainConfig,
    pub history: Vec<LossRecord>,
    pub skipped: Vec<u64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.model.config;
        let t = &self.train;
        let mut w = ByteWriter::new();
        w.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.u64(c.vocab_size as u64);
        w.u32(c.d_model as u32);
        w.u32(c.n_layers as u32);
        w.u32(c.n_heads as u32);
        w.u32(c.block_size as u32);
        w.u8(c.embedding_mode.code());
        w.u64(self.adam.step);
        w.u64(t.seed);
        w.f64(t.lr);
        w.u32(t.batch as u32);
        w.u32(t.accum as u32);
        w.u64(t.steps);
        w.u64(t.eval_every);
        w.u64(t.warmup);
        w.f64(t.val_fraction);
        w.u32(t.eval_blocks as u32);
        w.u8(t.deterministic as u8);

        w.u32(self.model.tensors.len() as u32);
        for tensor in &self.model.tensors {
            w.u16(tensor.name.len() as u16);
            w.bytes(tensor.name.as_bytes());
            w.u8(tensor.shape.len() as u8);
            for &s in &tensor.shape {
                w.u64(s as u64);
            }
            w.u8(tensor.trainable as u8);
            w.f32s(&tensor.data);
        }
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            match (m, v) {
                (Some(m), Some(v)) => {
                    w.u8(1);
                    w.f32s(m);
                    w.f32s(v);
                }
                _ => w.u8(0),
            }
        }
        w.u64(self.history.len() as u64);
        for r in &self.history {
            w.u64(r.step);
            w.f64(r.train_loss);
            w.f64(r.val_loss.unwrap_or(f64::NAN));
            w.f64(r.seconds);
        }
        w.u64(self.skipped.len() as u64);
        for &s in &self.skipped {
            w.u64(s);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NanoError> {
        let corrupt = |m: String| NanoError::Format(FormatError::Corrupt(m));
        let mut r = ByteReader::new(bytes);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let vocab_size = usize::try_from(r.u64()?).map_err(|_| corrupt("vocab size overflows".into()))?;
        let d_model = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let n_heads = r.u32()? as usize;
        let block_size = r.u32()? as usize;
        let mode = r.u8()?;
        let embedding_mode =
            EmbeddingMode::from_code(mode).ok_or_else(|| corrupt(format!("unknown embedding mode {mode}")))?;
        let config = ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            block_size,
            embedding_mode,
        };
        config.validate().map_err(|e| corrupt(e.to_string()))?;
        let adam_step_count = r.u64()?;
        let train = TrainConfig {
            seed: r.u64()?,
            lr: r.f64()?,
            batch: r.u32()? as usize,
            accum: r.u32()? as usize,
            steps: r.u64()?,
            eval_every: r.u64()?,
            warmup: r.u64()?,
            val_fraction: r.f64()?,
            eval_blocks: r.u32()? as usize,
            deterministic: r.u8()? != 0,
        };

        let specs = config.tensor_specs();
        let n_tensors = r.u32()? as usize;
        if n_tensors != specs.len() {
            return Err(corrupt(format!("expected {} tensors, found {n_tensors}", specs.len())));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for (name, shape) in specs {
            let len = r.u16()? as usize;
            let found = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("tensor name is not UTF-8".into()))?;
            if found != name {
                return Err(corrupt(format!("expected tensor {name}, found {found}")));
            }
            let ndim = r.u8()? as usize;
            let mut found_shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                found_shape.push(r.u64()? as usize);
            }
            if found_shape != shape {
                return Err(corrupt(format!("tensor {name} has shape {found_shape:?}, expected {shape:?}")));
            }
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(corrupt(format!("bad trainable flag {other}"))),
            };
            let data = r.f32_vec(shape.iter().product())?;
            tensors.push(Tensor {
                name,
                shape,
                data,
                trainable,
            });
        }
        let mut m = Vec::with_capacity(n_tensors);
        let mut v = Vec::with_capacity(n_tensors);
        for t in &tensors {
            match r.u8()? {
                0 if !t.trainable => {
                    m.push(None);
                    v.push(None);
                }
                1 if t.trainable => {
                    m.push(Some(r.f32_vec(t.numel())?));
                    v.push(Some(r.f32_vec(t.numel())?));
                }
                flag => {
                    return Err(corrupt(format!(
                        "moment flag {flag} inconsistent with trainable={} for {}",
                        t.trainable, t.name
                    )))
                }
            }
        }
        let n_hist = r.u64()? as usize;
        if n_hist > r.remaining() / 32 {
            return Err(corrupt(format!("history length {n_hist} exceeds file")));
        }
        let mut history = Vec::with_capacity(n_hist);
        for _ in 0..n_hist {
            let step = r.u64()?;
            let train_loss = r.f64()?;
            let val = r.f64()?;
            let seconds = r.f64()?;
            history.push(LossRecord {
                step,
                train_loss,
                val_loss: (!val.is_nan()).then_some(val),
                seconds,
            });
        }
        let n_skip = r.u64()? as usize;
        if n_skip > r.remaining() / 8 {
            return Err(corrupt(format!("skip list length {n_skip} exceeds file")));
        }
        let skipped = (0..n_skip).map(|_| r.u64()).collect::<Result<_, _>>()?;
        r.finish()?;
        Ok(Self {
            model: Model { config, tensors },
            adam: AdamState {
                step: adam_step_count,
                m,
                v,
            },
            train,
            history,
            skipped,
        })
    }

    pub fn save<W: std::io::Write>(&self, mut out: W) -> Result<(), NanoError> {
        out.write_all(&self.to_bytes()).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load<R: std::io::Read>(mut source: R) -> Result<Self, NanoError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes).map_err(FormatError::from)?;
        Self::from_bytes(&bytes)
    }
}

/// Result of comparing analytic and central-difference gradients for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub tensor: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compare [`Model::loss_and_grads`] against central finite differences on
/// up to `samples` randomly chosen entries of every trainable tensor (all
/// entries when the tensor is smaller). Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    model: &Model<f64>,
    batch: &[(Vec<TokenId>, Vec<TokenId>)],
    samples: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> Result<Vec<GradCheck>, NanoError> {
    let (_, grads) = model.loss_and_grads(batch)?;
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss_of = |m: &Model<f64>| -> Result<f64, NanoError> {
        let mut sum = 0.0;
        let mut count = 0;
        for (x, y) in batch {
            let (s, c) = m.nll(x, y)?;
            sum += s;
            count += c;
        }
        Ok(sum / count as f64)
    };
    let mut out = Vec::new();
    for (ti, g) in grads.tensors.iter().enumerate() {
        let Some(g) = g else { continue };
        let n = g.len();
        let idx: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, samples).into_vec()
        };
        let mut max_rel: f64 = 0.0;
        for &i in &idx {
            let orig = probe.tensors[ti].data[i];
            probe.tensors[ti].data[i] = orig + step;
            let up = loss_of(&probe)?;
            probe.tensors[ti].data[i] = orig - step;
            let down = loss_of(&probe)?;
            probe.tensors[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = g[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max(rel);
        }
        out.push(GradCheck {
            tensor: model.tensors[ti].name.clone(),
            checked: idx.len(),
            max_rel_error: max_rel,
        });
    }
    Ok(out)
}
