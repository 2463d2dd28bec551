//! A small pre-norm transformer encoder-decoder with hand-written
//! backpropagation.
//!
//! All parameters live in one flat buffer described by a [`Layout`];
//! gradients use the same layout, which keeps the optimizer, finite
//! differences and checkpointing oblivious to the architecture.
//!
//! The decoder is fed `BOS t_1 .. t_{m-1}` and row `c` of its output is the
//! distribution of `t_c` given `t_{1:c-1}` and the source.

mod checkpoint;
pub mod linalg;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::BOS;
use linalg::{add_assign, axpy, col_sum_acc, dot, log_softmax_in_place, matmul_bias, matmul_nt_acc, matmul_tn_acc};

pub use checkpoint::{
    load_checkpoint, read_meta, save_checkpoint, Checkpoint, CheckpointMeta, ManifestEntry, NamedTensor, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

/// Floating point type the model can run in.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    const PRECISION: Precision;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    pub fn dtype(self) -> &'static str {
        match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 2,
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_ffn: 128,
            max_len: 64,
            dropout: 0.1,
            vocab_size: 0,
            precision: Precision::Single,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers_enc == 0 || self.n_layers_dec == 0 || self.d_ffn == 0 || self.max_len == 0 {
            return bad("layer counts, d_ffn and max_len must be positive".into());
        }
        if self.vocab_size < 8 {
            return bad(format!("vocab_size {} is below the minimum of 8", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ffn, self.vocab_size);
        let norm = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let enc = norm + attn + norm + ffn;
        let dec = norm + attn + norm + attn + norm + ffn;
        v * d + self.n_layers_enc * enc + norm + self.n_layers_dec * dec + norm + d * v + v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Embedding,
    Weight,
    Bias,
    NormGain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
    #[serde(skip, default = "default_init")]
    pub init: InitKind,
}

fn default_init() -> InitKind {
    InitKind::Weight
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
    din: usize,
    dout: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Lin,
    down: Lin,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ffn: Ffn,
}

#[derive(Clone, Copy, Debug)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ffn: Ffn,
}

/// Names, shapes and offsets of every tensor in the flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
    emb: usize,
    enc: Vec<EncLayer>,
    enc_norm: Norm,
    dec: Vec<DecLayer>,
    dec_norm: Norm,
    lm: Lin,
}

struct LayoutBuilder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: InitKind) -> usize {
        let offset = self.total;
        let info = TensorInfo {
            name,
            shape,
            offset,
            init,
        };
        self.total += info.len();
        self.tensors.push(info);
        offset
    }

    fn lin(&mut self, name: &str, din: usize, dout: usize) -> Lin {
        let w = self.push(format!("{name}.weight"), vec![din, dout], InitKind::Weight);
        let b = self.push(format!("{name}.bias"), vec![dout], InitKind::Bias);
        Lin { w, b, din, dout }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let g = self.push(format!("{name}.gain"), vec![d], InitKind::NormGain);
        let b = self.push(format!("{name}.bias"), vec![d], InitKind::Bias);
        Norm { g, b }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.lin(&format!("{name}.q"), d, d),
            k: self.lin(&format!("{name}.k"), d, d),
            v: self.lin(&format!("{name}.v"), d, d),
            o: self.lin(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> Ffn {
        Ffn {
            up: self.lin(&format!("{name}.up"), d, f),
            down: self.lin(&format!("{name}.down"), f, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size);
        let mut b = LayoutBuilder {
            tensors: Vec::new(),
            total: 0,
        };
        let emb = b.push("embed.tokens".into(), vec![v, d], InitKind::Embedding);
        let enc = (0..cfg.n_layers_enc)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncLayer {
                    ln1: b.norm(&format!("{p}.norm1"), d),
                    attn: b.attn(&format!("{p}.self_attn"), d),
                    ln2: b.norm(&format!("{p}.norm2"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, f),
                }
            })
            .collect();
        let enc_norm = b.norm("encoder.norm", d);
        let dec = (0..cfg.n_layers_dec)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecLayer {
                    ln1: b.norm(&format!("{p}.norm1"), d),
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    ln2: b.norm(&format!("{p}.norm2"), d),
                    cross: b.attn(&format!("{p}.cross_attn"), d),
                    ln3: b.norm(&format!("{p}.norm3"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, f),
                }
            })
            .collect();
        let dec_norm = b.norm("decoder.norm", d);
        let lm = b.lin("lm_head", d, v);
        Layout {
            tensors: b.tensors,
            total: b.total,
            emb,
            enc,
            enc_norm,
            dec,
            dec_norm,
            lm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Xavier-uniform weights, unit-variance embeddings, unit norm gains.
    Random,
    /// Every weight, gain and bias is zero.
    Zero,
}

/// Dropout state for one training forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask<F: Real>(&mut self, len: usize) -> Option<Vec<F>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = F::c(1.0 / (1.0 - self.rate));
        Some(
            (0..len)
                .map(|_| if self.rng.gen_bool(self.rate) { F::zero() } else { keep })
                .collect(),
        )
    }
}

fn apply_mask<F: Real>(x: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        for (xi, &mi) in x.iter_mut().zip(m) {
            *xi *= mi;
        }
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let (c, a, half) = (F::c(GELU_C), F::c(GELU_A), F::c(0.5));
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let (c, a, half) = (F::c(GELU_C), F::c(GELU_A), F::c(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::c(3.0) * a * x * x)
}

struct NormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

struct AttnCache<F> {
    /// Normalized query-side input.
    xq: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
}

struct FfnCache<F> {
    x: Vec<F>,
    pre: Vec<F>,
    act: Vec<F>,
}

struct EncLayerTrace<F> {
    ln1: NormCache<F>,
    attn: AttnCache<F>,
    drop1: Option<Vec<F>>,
    ln2: NormCache<F>,
    ffn: FfnCache<F>,
    drop2: Option<Vec<F>>,
}

/// Encoder activations for one source sequence, plus the cross-attention
/// keys and values every decoder layer reads.
pub struct EncoderState<F> {
    ids: Vec<u32>,
    emb_drop: Option<Vec<F>>,
    layers: Vec<EncLayerTrace<F>>,
    norm: NormCache<F>,
    /// Final encoder hidden states, `len × d_model`.
    pub hidden: Vec<F>,
    cross_kv: Vec<(Vec<F>, Vec<F>)>,
}

impl<F> EncoderState<F> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

struct DecLayerTrace<F> {
    ln1: NormCache<F>,
    self_attn: AttnCache<F>,
    drop1: Option<Vec<F>>,
    ln2: NormCache<F>,
    cross: AttnCache<F>,
    drop2: Option<Vec<F>>,
    ln3: NormCache<F>,
    ffn: FfnCache<F>,
    drop3: Option<Vec<F>>,
}

/// Decoder activations for one decoder input sequence.
pub struct DecoderState<F> {
    ids: Vec<u32>,
    emb_drop: Option<Vec<F>>,
    layers: Vec<DecLayerTrace<F>>,
    norm: NormCache<F>,
    /// Final decoder hidden states, `len × d_model`.
    pub hidden: Vec<F>,
}

impl<F> DecoderState<F> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-position log-distributions, `rows × vocab`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbs<F> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<F>,
}

impl<F: Real> LogProbs<F> {
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.vocab..(r + 1) * self.vocab]
    }
}

/// Model parameters with their configuration.
#[derive(Clone, Debug)]
pub struct Model<F> {
    config: ModelConfig,
    layout: Arc<Layout>,
    pe: Arc<Vec<F>>,
    pub params: Vec<F>,
}

fn positional_table<F: Real>(max_len: usize, d: usize) -> Vec<F> {
    let mut pe = vec![F::zero(); max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = F::c(angle.sin());
            pe[pos * d + 2 * i + 1] = F::c(angle.cos());
        }
        if d % 2 == 1 {
            pe[pos * d + d - 1] = F::c((pos as f64 / 10000f64.powf((d - 1) as f64 / d as f64)).sin());
        }
    }
    pe
}

impl<F: Real> Model<F> {
    pub fn init(config: ModelConfig, seed: u64, mode: InitMode) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![F::zero(); layout.total];
        if mode == InitMode::Random {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in &layout.tensors {
                let slot = &mut params[t.offset..t.offset + t.len()];
                match t.init {
                    InitKind::Embedding => {
                        let a = 3f64.sqrt();
                        slot.iter_mut().for_each(|x| *x = F::c(rng.gen_range(-a..a)));
                    }
                    InitKind::Weight => {
                        let a = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
                        slot.iter_mut().for_each(|x| *x = F::c(rng.gen_range(-a..a)));
                    }
                    InitKind::NormGain => slot.iter_mut().for_each(|x| *x = F::one()),
                    InitKind::Bias => {}
                }
            }
        }
        Ok(Self::from_parts(config, layout, params))
    }

    fn from_parts(config: ModelConfig, layout: Layout, params: Vec<F>) -> Self {
        let pe = positional_table(config.max_len, config.d_model);
        Model {
            config,
            layout: Arc::new(layout),
            pe: Arc::new(pe),
            params,
        }
    }

    /// Wrap an existing parameter buffer; its length must match the config.
    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::ModelConfig(format!(
                "parameter buffer has {} values, config needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self::from_parts(config, layout, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grads(&self) -> Vec<F> {
        vec![F::zero(); self.params.len()]
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn check_ids(&self, ids: &[u32], what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::ModelInput(format!("{what} sequence is empty")));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::ModelInput(format!(
                "{what} length {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::ModelInput(format!(
                "{what} token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, ids: &[u32], drop: &mut Option<&mut Dropout>) -> (Vec<F>, Option<Vec<F>>) {
        let d = self.config.d_model;
        let emb = &self.params[self.layout.emb..];
        let mut x = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            let row = &emb[id as usize * d..(id as usize + 1) * d];
            let pe = &self.pe[pos * d..(pos + 1) * d];
            x.extend(row.iter().zip(pe).map(|(&a, &b)| a + b));
        }
        let mask = drop.as_mut().and_then(|dr| dr.mask(x.len()));
        apply_mask(&mut x, &mask);
        (x, mask)
    }

    fn embed_backward(&self, ids: &[u32], mask: &Option<Vec<F>>, dx: &[F], g: &mut [F]) {
        let d = self.config.d_model;
        let mut dx = dx.to_vec();
        apply_mask(&mut dx, mask);
        for (pos, &id) in ids.iter().enumerate() {
            let off = self.layout.emb + id as usize * d;
            add_assign(&mut g[off..off + d], &dx[pos * d..(pos + 1) * d]);
        }
    }

    fn lin(&self, l: Lin, x: &[F], rows: usize) -> Vec<F> {
        let p = &self.params;
        matmul_bias(x, &p[l.w..l.w + l.din * l.dout], &p[l.b..l.b + l.dout], rows, l.din, l.dout)
    }

    /// Accumulates weight grads and adds the input gradient into `dx`.
    fn lin_backward(&self, l: Lin, x: &[F], dy: &[F], rows: usize, g: &mut [F], dx: &mut [F]) {
        matmul_tn_acc(x, dy, &mut g[l.w..l.w + l.din * l.dout], rows, l.din, l.dout);
        col_sum_acc(dy, &mut g[l.b..l.b + l.dout], rows, l.dout);
        matmul_nt_acc(dy, &self.params[l.w..l.w + l.din * l.dout], dx, rows, l.dout, l.din);
    }

    fn norm(&self, n: Norm, x: &[F], rows: usize) -> (Vec<F>, NormCache<F>) {
        let d = self.config.d_model;
        let gain = &self.params[n.g..n.g + d];
        let bias = &self.params[n.b..n.b + d];
        let inv_d = F::c(1.0 / d as f64);
        let eps = F::c(LN_EPS);
        let mut y = vec![F::zero(); rows * d];
        let mut xhat = vec![F::zero(); rows * d];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<F>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (xr[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = gain[j] * h + bias[j];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    fn norm_backward(&self, n: Norm, c: &NormCache<F>, dy: &[F], rows: usize, g: &mut [F], dx: &mut [F]) {
        let d = self.config.d_model;
        let inv_d = F::c(1.0 / d as f64);
        let gain = &self.params[n.g..n.g + d];
        let mut dxhat = vec![F::zero(); d];
        for r in 0..rows {
            let dyr = &dy[r * d..(r + 1) * d];
            let xh = &c.xhat[r * d..(r + 1) * d];
            for j in 0..d {
                g[n.g + j] += dyr[j] * xh[j];
                g[n.b + j] += dyr[j];
                dxhat[j] = dyr[j] * gain[j];
            }
            let mean_d = dxhat.iter().copied().sum::<F>() * inv_d;
            let mean_dx = dot(&dxhat, xh) * inv_d;
            let is = c.inv_std[r];
            for j in 0..d {
                dx[r * d + j] += is * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
    }

    /// Scaled dot-product attention over projected queries, keys and values.
    fn attend(&self, q: &[F], k: &[F], v: &[F], tq: usize, tk: usize, causal: bool) -> (Vec<F>, Vec<F>) {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let mut probs = vec![F::zero(); h * tq * tk];
        let mut ctx = vec![F::zero(); tq * d];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..tq {
                let qi = &q[i * d + cols.start..i * d + cols.end];
                let limit = if causal { (i + 1).min(tk) } else { tk };
                let row = &mut probs[(head * tq + i) * tk..(head * tq + i + 1) * tk];
                let mut max = F::neg_infinity();
                for j in 0..limit {
                    let s = dot(qi, &k[j * d + cols.start..j * d + cols.end]) * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = F::zero();
                for p in row[..limit].iter_mut() {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                let inv = F::one() / sum;
                for p in row[..limit].iter_mut() {
                    *p *= inv;
                }
                let ci = &mut ctx[i * d + cols.start..i * d + cols.end];
                for j in 0..limit {
                    axpy(row[j], &v[j * d + cols.start..j * d + cols.end], ci);
                }
            }
        }
        (ctx, probs)
    }

    /// Gradients of [`Model::attend`] with respect to q, k and v.
    #[allow(clippy::too_many_arguments)]
    fn attend_backward(
        &self,
        c: &AttnCache<F>,
        dctx: &[F],
        tq: usize,
        tk: usize,
        causal: bool,
        dq: &mut [F],
        dk: &mut [F],
        dv: &mut [F],
    ) {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let mut dp = vec![F::zero(); tk];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..tq {
                let limit = if causal { (i + 1).min(tk) } else { tk };
                let p = &c.probs[(head * tq + i) * tk..(head * tq + i) * tk + limit];
                let dci = &dctx[i * d + cols.start..i * d + cols.end];
                let mut weighted = F::zero();
                for j in 0..limit {
                    dp[j] = dot(dci, &c.v[j * d + cols.start..j * d + cols.end]);
                    weighted += p[j] * dp[j];
                    axpy(p[j], dci, &mut dv[j * d + cols.start..j * d + cols.end]);
                }
                let qi = &c.q[i * d + cols.start..i * d + cols.end];
                for j in 0..limit {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds != F::zero() {
                        axpy(ds, &c.k[j * d + cols.start..j * d + cols.end], &mut dq[i * d + cols.start..i * d + cols.end]);
                        axpy(ds, qi, &mut dk[j * d + cols.start..j * d + cols.end]);
                    }
                }
            }
        }
    }

    fn self_attention(&self, a: Attn, x: Vec<F>, t: usize, causal: bool) -> (Vec<F>, AttnCache<F>) {
        let q = self.lin(a.q, &x, t);
        let k = self.lin(a.k, &x, t);
        let v = self.lin(a.v, &x, t);
        let (ctx, probs) = self.attend(&q, &k, &v, t, t, causal);
        let out = self.lin(a.o, &ctx, t);
        (out, AttnCache { xq: x, q, k, v, probs, ctx })
    }

    fn self_attention_backward(&self, a: Attn, c: &AttnCache<F>, dout: &[F], t: usize, causal: bool, g: &mut [F]) -> Vec<F> {
        let d = self.config.d_model;
        let mut dctx = vec![F::zero(); t * d];
        self.lin_backward(a.o, &c.ctx, dout, t, g, &mut dctx);
        let (mut dq, mut dk, mut dv) = (vec![F::zero(); t * d], vec![F::zero(); t * d], vec![F::zero(); t * d]);
        self.attend_backward(c, &dctx, t, t, causal, &mut dq, &mut dk, &mut dv);
        let mut dx = vec![F::zero(); t * d];
        self.lin_backward(a.q, &c.xq, &dq, t, g, &mut dx);
        self.lin_backward(a.k, &c.xq, &dk, t, g, &mut dx);
        self.lin_backward(a.v, &c.xq, &dv, t, g, &mut dx);
        dx
    }

    fn ffn(&self, f: Ffn, x: Vec<F>, t: usize) -> (Vec<F>, FfnCache<F>) {
        let pre = self.lin(f.up, &x, t);
        let act: Vec<F> = pre.iter().map(|&z| gelu(z)).collect();
        let out = self.lin(f.down, &act, t);
        (out, FfnCache { x, pre, act })
    }

    fn ffn_backward(&self, f: Ffn, c: &FfnCache<F>, dout: &[F], t: usize, g: &mut [F]) -> Vec<F> {
        let mut dact = vec![F::zero(); t * self.config.d_ffn];
        self.lin_backward(f.down, &c.act, dout, t, g, &mut dact);
        for (da, &z) in dact.iter_mut().zip(&c.pre) {
            *da *= gelu_grad(z);
        }
        let mut dx = vec![F::zero(); t * self.config.d_model];
        self.lin_backward(f.up, &c.x, &dact, t, g, &mut dx);
        dx
    }

    /// Run the encoder, keeping activations for backpropagation.
    pub fn encode(&self, src: &[u32], mut drop: Option<&mut Dropout>) -> Result<EncoderState<F>> {
        self.check_ids(src, "source")?;
        let t = src.len();
        let (mut x, emb_drop) = self.embed(src, &mut drop);
        let mut layers = Vec::with_capacity(self.layout.enc.len());
        for layer in &self.layout.enc {
            let (a, ln1) = self.norm(layer.ln1, &x, t);
            let (mut o, attn) = self.self_attention(layer.attn, a, t, false);
            let drop1 = drop.as_mut().and_then(|dr| dr.mask(o.len()));
            apply_mask(&mut o, &drop1);
            add_assign(&mut x, &o);
            let (b, ln2) = self.norm(layer.ln2, &x, t);
            let (mut f, ffn) = self.ffn(layer.ffn, b, t);
            let drop2 = drop.as_mut().and_then(|dr| dr.mask(f.len()));
            apply_mask(&mut f, &drop2);
            add_assign(&mut x, &f);
            layers.push(EncLayerTrace { ln1, attn, drop1, ln2, ffn, drop2 });
        }
        let (hidden, norm) = self.norm(self.layout.enc_norm, &x, t);
        let cross_kv = self
            .layout
            .dec
            .iter()
            .map(|l| (self.lin(l.cross.k, &hidden, t), self.lin(l.cross.v, &hidden, t)))
            .collect();
        Ok(EncoderState {
            ids: src.to_vec(),
            emb_drop,
            layers,
            norm,
            hidden,
            cross_kv,
        })
    }

    /// Run the decoder over `dec_in` attending to `enc`.
    pub fn decode(&self, enc: &EncoderState<F>, dec_in: &[u32], mut drop: Option<&mut Dropout>) -> Result<DecoderState<F>> {
        self.check_ids(dec_in, "decoder input")?;
        let t = dec_in.len();
        let s = enc.len();
        let (mut y, emb_drop) = self.embed(dec_in, &mut drop);
        let mut layers = Vec::with_capacity(self.layout.dec.len());
        for (li, layer) in self.layout.dec.iter().enumerate() {
            let (a, ln1) = self.norm(layer.ln1, &y, t);
            let (mut o, self_attn) = self.self_attention(layer.self_attn, a, t, true);
            let drop1 = drop.as_mut().and_then(|dr| dr.mask(o.len()));
            apply_mask(&mut o, &drop1);
            add_assign(&mut y, &o);

            let (b, ln2) = self.norm(layer.ln2, &y, t);
            let q = self.lin(layer.cross.q, &b, t);
            let (k, v) = &enc.cross_kv[li];
            let (ctx, probs) = self.attend(&q, k, v, t, s, false);
            let mut c_out = self.lin(layer.cross.o, &ctx, t);
            let drop2 = drop.as_mut().and_then(|dr| dr.mask(c_out.len()));
            apply_mask(&mut c_out, &drop2);
            add_assign(&mut y, &c_out);
            let cross = AttnCache {
                xq: b,
                q,
                // Keys and values stay with the encoder state.
                k: Vec::new(),
                v: Vec::new(),
                probs,
                ctx,
            };

            let (c, ln3) = self.norm(layer.ln3, &y, t);
            let (mut f, ffn) = self.ffn(layer.ffn, c, t);
            let drop3 = drop.as_mut().and_then(|dr| dr.mask(f.len()));
            apply_mask(&mut f, &drop3);
            add_assign(&mut y, &f);
            layers.push(DecLayerTrace {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross,
                drop2,
                ln3,
                ffn,
                drop3,
            });
        }
        let (hidden, norm) = self.norm(self.layout.dec_norm, &y, t);
        Ok(DecoderState {
            ids: dec_in.to_vec(),
            emb_drop,
            layers,
            norm,
            hidden,
        })
    }

    /// Backpropagate `d_hidden` (gradient w.r.t. the decoder's final hidden
    /// states) through decoder and encoder, accumulating into `g`.
    pub fn backward(&self, enc: &EncoderState<F>, dec: &DecoderState<F>, d_hidden: &[F], g: &mut [F]) {
        let d = self.config.d_model;
        let t = dec.len();
        let s = enc.len();
        let mut dy = vec![F::zero(); t * d];
        self.norm_backward(self.layout.dec_norm, &dec.norm, d_hidden, t, g, &mut dy);

        let mut d_enc = vec![F::zero(); s * d];
        for (li, (layer, tr)) in self.layout.dec.iter().zip(&dec.layers).enumerate().rev() {
            // Feed-forward sublayer.
            let mut df = dy.clone();
            apply_mask(&mut df, &tr.drop3);
            let dc = self.ffn_backward(layer.ffn, &tr.ffn, &df, t, g);
            self.norm_backward(layer.ln3, &tr.ln3, &dc, t, g, &mut dy);

            // Cross-attention sublayer.
            let mut dco = dy.clone();
            apply_mask(&mut dco, &tr.drop2);
            let mut dctx = vec![F::zero(); t * d];
            self.lin_backward(layer.cross.o, &tr.cross.ctx, &dco, t, g, &mut dctx);
            let (k, v) = &enc.cross_kv[li];
            let view = AttnCache {
                xq: Vec::new(),
                q: tr.cross.q.clone(),
                k: k.clone(),
                v: v.clone(),
                probs: tr.cross.probs.clone(),
                ctx: Vec::new(),
            };
            let (mut dq, mut dk, mut dv) = (vec![F::zero(); t * d], vec![F::zero(); s * d], vec![F::zero(); s * d]);
            self.attend_backward(&view, &dctx, t, s, false, &mut dq, &mut dk, &mut dv);
            let mut db = vec![F::zero(); t * d];
            self.lin_backward(layer.cross.q, &tr.cross.xq, &dq, t, g, &mut db);
            self.lin_backward(layer.cross.k, &enc.hidden, &dk, s, g, &mut d_enc);
            self.lin_backward(layer.cross.v, &enc.hidden, &dv, s, g, &mut d_enc);
            self.norm_backward(layer.ln2, &tr.ln2, &db, t, g, &mut dy);

            // Causal self-attention sublayer.
            let mut dso = dy.clone();
            apply_mask(&mut dso, &tr.drop1);
            let da = self.self_attention_backward(layer.self_attn, &tr.self_attn, &dso, t, true, g);
            self.norm_backward(layer.ln1, &tr.ln1, &da, t, g, &mut dy);
        }
        self.embed_backward(&dec.ids, &dec.emb_drop, &dy, g);

        let mut dx = vec![F::zero(); s * d];
        self.norm_backward(self.layout.enc_norm, &enc.norm, &d_enc, s, g, &mut dx);
        for (layer, tr) in self.layout.enc.iter().zip(&enc.layers).rev() {
            let mut df = dx.clone();
            apply_mask(&mut df, &tr.drop2);
            let db = self.ffn_backward(layer.ffn, &tr.ffn, &df, s, g);
            self.norm_backward(layer.ln2, &tr.ln2, &db, s, g, &mut dx);

            let mut dao = dx.clone();
            apply_mask(&mut dao, &tr.drop1);
            let da = self.self_attention_backward(layer.attn, &tr.attn, &dao, s, false, g);
            self.norm_backward(layer.ln1, &tr.ln1, &da, s, g, &mut dx);
        }
        self.embed_backward(&enc.ids, &enc.emb_drop, &dx, g);
    }

    /// Output projection `hidden · W_lm + b_lm` for every row.
    pub fn lm_logits(&self, hidden: &[F]) -> Vec<F> {
        let rows = hidden.len() / self.config.d_model;
        self.lin(self.layout.lm, hidden, rows)
    }

    /// Output projection for a single row.
    pub fn lm_logits_row(&self, hidden: &[F], row: usize) -> Vec<F> {
        let d = self.config.d_model;
        self.lin(self.layout.lm, &hidden[row * d..(row + 1) * d], 1)
    }

    /// Backward through the output projection; returns the hidden gradient.
    pub fn lm_backward(&self, hidden: &[F], dlogits: &[F], g: &mut [F]) -> Vec<F> {
        let rows = hidden.len() / self.config.d_model;
        let mut dh = vec![F::zero(); hidden.len()];
        self.lin_backward(self.layout.lm, hidden, dlogits, rows, g, &mut dh);
        dh
    }

    /// Backward through the output projection for logits of a single row.
    pub fn lm_backward_row(&self, hidden: &[F], row: usize, dlogits: &[F], g: &mut [F]) -> Vec<F> {
        let d = self.config.d_model;
        let mut dh = vec![F::zero(); hidden.len()];
        self.lin_backward(self.layout.lm, &hidden[row * d..(row + 1) * d], dlogits, 1, g, &mut dh[row * d..(row + 1) * d]);
        dh
    }

    /// `log P(· | prefix_{1:c-1}, source)` for each of the `prefix.len() + 1`
    /// positions; the decoder input is `BOS` followed by `prefix`.
    pub fn forward_logprobs(&self, source: &[u32], prefix: &[u32]) -> Result<LogProbs<F>> {
        let enc = self.encode(source, None)?;
        self.logprobs_with(&enc, prefix)
    }

    pub fn logprobs_with(&self, enc: &EncoderState<F>, prefix: &[u32]) -> Result<LogProbs<F>> {
        let dec_in = decoder_input(prefix);
        let dec = self.decode(enc, &dec_in, None)?;
        let mut logits = self.lm_logits(&dec.hidden);
        let v = self.config.vocab_size;
        for row in logits.chunks_mut(v) {
            log_softmax_in_place(row);
        }
        Ok(LogProbs {
            rows: dec_in.len(),
            vocab: v,
            data: logits,
        })
    }

    /// Summed log-probability of `target` given an encoded source.
    pub fn target_logprob(&self, enc: &EncoderState<F>, target: &[u32]) -> Result<F> {
        if target.is_empty() {
            return Err(Error::ModelInput("target sequence is empty".into()));
        }
        let lp = self.logprobs_with(enc, &target[..target.len() - 1])?;
        Ok(target
            .iter()
            .enumerate()
            .map(|(c, &tok)| lp.row(c)[tok as usize])
            .fold(F::zero(), |acc, x| acc + x))
    }

    /// Teacher-forced cross-entropy `-Σ_c log P(t_c | t_{1:c-1}, X)` for one
    /// pair, accumulating its gradient into `g`.
    pub fn pair_loss_grad(&self, source: &[u32], target: &[u32], g: &mut [F], mut drop: Option<&mut Dropout>) -> Result<F> {
        if target.is_empty() {
            return Err(Error::ModelInput("target sequence is empty".into()));
        }
        let enc = self.encode(source, drop.as_deref_mut())?;
        let dec_in = decoder_input(&target[..target.len() - 1]);
        let dec = self.decode(&enc, &dec_in, drop)?;
        let v = self.config.vocab_size;
        let mut logits = self.lm_logits(&dec.hidden);
        let mut loss = F::zero();
        for (c, row) in logits.chunks_mut(v).enumerate() {
            log_softmax_in_place(row);
            let tok = target[c] as usize;
            loss -= row[tok];
            // Turn the row into d(loss)/d(logits) = softmax - onehot.
            for x in row.iter_mut() {
                *x = x.exp();
            }
            row[tok] -= F::one();
        }
        let dh = self.lm_backward(&dec.hidden, &logits, g);
        self.backward(&enc, &dec, &dh, g);
        Ok(loss)
    }

    /// Sum of pair losses and their summed gradient.
    pub fn loss_and_grad(&self, batch: &[(&[u32], &[u32])]) -> Result<(F, Vec<F>)> {
        if batch.is_empty() {
            return Err(Error::ModelInput("empty batch".into()));
        }
        let mut g = self.zero_grads();
        let mut loss = F::zero();
        for (src, tgt) in batch {
            loss += self.pair_loss_grad(src, tgt, &mut g, None)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss: loss.f64(),
                epoch: 0,
                step: 0,
            });
        }
        Ok((loss, g))
    }

    /// Named view of one tensor.
    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.offset..t.offset + t.len()])
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }
}

/// `BOS` followed by `prefix`.
pub fn decoder_input(prefix: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(prefix.len() + 1);
    v.push(BOS);
    v.extend_from_slice(prefix);
    v
}
