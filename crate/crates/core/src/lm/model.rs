//! Pre-LayerNorm decoder-only transformer in `f64` with a hand-written
//! backward pass.
//!
//! All parameters live in one flat buffer described by a [`Layout`]; the
//! buffer order is the checkpoint order and the order gradient checks
//! enumerate coordinates in.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub context_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            context_window: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_mlp == 0 {
            return Err(Error::InvalidInput("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidInput(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_window == 0 {
            return Err(Error::InvalidInput("context_window must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Position of one tensor inside the flat parameter buffer. Vectors have
/// `rows == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug)]
pub struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub w_qkv: Slot,
    pub b_qkv: Slot,
    pub w_o: Slot,
    pub b_o: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w_in: Slot,
    pub b_in: Slot,
    pub w_out: Slot,
    pub b_out: Slot,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub w_u: Slot,
    pub b_u: Slot,
    named: Vec<(String, Slot)>,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig, vocab_size: usize) -> Layout {
        let mut named = Vec::new();
        let mut offset = 0;
        let mut slot = |name: String, rows: usize, cols: usize| {
            let s = Slot { offset, rows, cols };
            offset += rows * cols;
            named.push((name, s));
            s
        };
        let d = cfg.d_model;
        let tok_emb = slot("tok_emb".into(), vocab_size, d);
        let pos_emb = slot("pos_emb".into(), cfg.context_window, d);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerSlots {
                ln1_g: slot(format!("layers.{l}.ln1.g"), 1, d),
                ln1_b: slot(format!("layers.{l}.ln1.b"), 1, d),
                w_qkv: slot(format!("layers.{l}.attn.w_qkv"), d, 3 * d),
                b_qkv: slot(format!("layers.{l}.attn.b_qkv"), 1, 3 * d),
                w_o: slot(format!("layers.{l}.attn.w_o"), d, d),
                b_o: slot(format!("layers.{l}.attn.b_o"), 1, d),
                ln2_g: slot(format!("layers.{l}.ln2.g"), 1, d),
                ln2_b: slot(format!("layers.{l}.ln2.b"), 1, d),
                w_in: slot(format!("layers.{l}.mlp.w_in"), d, cfg.d_mlp),
                b_in: slot(format!("layers.{l}.mlp.b_in"), 1, cfg.d_mlp),
                w_out: slot(format!("layers.{l}.mlp.w_out"), cfg.d_mlp, d),
                b_out: slot(format!("layers.{l}.mlp.b_out"), 1, d),
            })
            .collect();
        let lnf_g = slot("ln_f.g".into(), 1, d);
        let lnf_b = slot("ln_f.b".into(), 1, d);
        let w_u = slot("unembed.w".into(), d, vocab_size);
        let b_u = slot("unembed.b".into(), 1, vocab_size);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_u,
            b_u,
            named,
            total: offset,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Tensors in buffer order.
    pub fn named(&self) -> &[(String, Slot)] {
        &self.named
    }
}

pub(crate) fn mat<'a>(buf: &'a [f64], s: Slot) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &buf[s.range()]).expect("slot shape")
}

pub(crate) fn vec_<'a>(buf: &'a [f64], s: Slot) -> ArrayView1<'a, f64> {
    ArrayView1::from(&buf[s.range()])
}

fn mat_mut<'a>(buf: &'a mut [f64], s: Slot) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut buf[s.range()]).expect("slot shape")
}

fn vec_mut<'a>(buf: &'a mut [f64], s: Slot) -> ArrayViewMut1<'a, f64> {
    ArrayViewMut1::from(&mut buf[s.range()])
}

/// Transforms the residual stream at a layer boundary. Boundary `l` is the
/// stream entering layer `l`; boundary `n_layers` is the stream after the
/// last layer.
pub trait ResidualHook {
    fn boundary(&self) -> usize;
    fn apply(&self, residual: &mut Array2<f64>) -> Result<()>;
}

/// Next-token probabilities at the last position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
    pub temperature: f64,
}

impl TokenDistribution {
    /// Softmax of `logits / temperature`; temperature 0 is a one-hot argmax
    /// with ties resolved toward the lower id.
    pub fn from_logits(logits: ArrayView1<f64>, temperature: f64) -> Result<Self> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::out_of_range("temperature", temperature, ">= 0"));
        }
        let n = logits.len();
        let mut probs = vec![0.0; n];
        if temperature == 0.0 {
            let mut best = 0;
            for i in 1..n {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            probs[best] = 1.0;
        } else {
            let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for (p, &l) in probs.iter_mut().zip(logits.iter()) {
                *p = ((l - max) / temperature).exp();
                sum += *p;
            }
            for p in &mut probs {
                *p /= sum;
            }
        }
        Ok(TokenDistribution { probs, temperature })
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs[id.index()]
    }

    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }
}

/// Per-boundary residuals (`n_layers + 1` matrices of `len × d_model`) and
/// logits for every position.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub residuals: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    z: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

struct Trace {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
}

fn layer_norm(x: ArrayView2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    mut dg: ArrayViewMut1<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    db += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * &g;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let mean_d = row.sum() / d;
        let mean_dx = row.dot(&xh) / d;
        for (v, &x) in row.iter_mut().zip(xh.iter()) {
            *v = r * (*v - mean_d - x * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

pub(crate) fn softmax_row_inplace(mut row: ndarray::ArrayViewMut1<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut sum = 0.0;
    row.mapv_inplace(|x| {
        let e = (x - max).exp();
        sum += e;
        e
    });
    row.mapv_inplace(|x| x / sum);
}

/// Small decoder-only transformer over a closed vocabulary.
#[derive(Clone, Debug)]
pub struct ToyLm {
    config: ModelConfig,
    vocab: Vocabulary,
    layout: Layout,
    params: Vec<f64>,
}

impl ToyLm {
    /// GPT-2 style initialisation: N(0, init_std) weights, residual output
    /// projections scaled by 1/sqrt(2·n_layers), unit LayerNorm gains.
    pub fn initialized(config: ModelConfig, vocab: Vocabulary, init_std: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        let mut params = vec![0.0; layout.total()];
        let mut rng = rng::stream(seed, 0);
        let proj_std = init_std / (2.0 * config.n_layers as f64).sqrt();
        let mut fill = |s: Slot, std: f64, rng: &mut rng::StreamRng| {
            for p in &mut params[s.range()] {
                let z: f64 = rng.sample(StandardNormal);
                *p = z * std;
            }
        };
        fill(layout.tok_emb, init_std, &mut rng);
        fill(layout.pos_emb, init_std, &mut rng);
        for l in &layout.layers {
            fill(l.w_qkv, init_std, &mut rng);
            fill(l.w_o, proj_std, &mut rng);
            fill(l.w_in, init_std, &mut rng);
            fill(l.w_out, proj_std, &mut rng);
        }
        fill(layout.w_u, init_std, &mut rng);
        for s in layout
            .layers
            .iter()
            .flat_map(|l| [l.ln1_g, l.ln2_g])
            .chain([layout.lnf_g])
        {
            params[s.range()].fill(1.0);
        }
        Ok(ToyLm {
            config,
            vocab,
            layout,
            params,
        })
    }

    /// Rebuilds a model from a parameter buffer in layout order.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        if params.len() != layout.total() {
            return Err(Error::DimensionMismatch {
                context: "model parameters",
                expected: layout.total(),
                got: params.len(),
            });
        }
        Ok(ToyLm {
            config,
            vocab,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Residual boundary entering the final layer.
    pub fn final_layer_boundary(&self) -> usize {
        self.config.n_layers - 1
    }

    pub(crate) fn p(&self) -> &[f64] {
        &self.params
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_window {
            return Err(Error::ContextOverflow {
                needed: tokens.len(),
                window: self.config.context_window,
            });
        }
        if let Some(bad) = tokens.iter().find(|t| !self.vocab.contains(**t)) {
            return Err(Error::UnknownToken(bad.0));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[TokenId]) -> Result<ForwardOutput> {
        self.forward_hooked(tokens, None)
    }

    pub fn forward_hooked(&self, tokens: &[TokenId], hook: Option<&dyn ResidualHook>) -> Result<ForwardOutput> {
        let (residuals, logits, _) = self.run(tokens, hook, false)?;
        Ok(ForwardOutput { residuals, logits })
    }

    /// Residual stream at one boundary, without computing later layers.
    pub fn residual_at(&self, tokens: &[TokenId], boundary: usize) -> Result<Array2<f64>> {
        if boundary > self.config.n_layers {
            return Err(Error::out_of_range("boundary", boundary, format!("0..={}", self.config.n_layers)));
        }
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        for l in 0..boundary {
            x = self.layer_forward(l, x, None);
        }
        Ok(x)
    }

    pub fn next_token_distribution(
        &self,
        tokens: &[TokenId],
        temperature: f64,
        hook: Option<&dyn ResidualHook>,
    ) -> Result<TokenDistribution> {
        let logits = self.last_logits(tokens, hook)?;
        TokenDistribution::from_logits(logits.view(), temperature)
    }

    /// Logits at the final position. Layers run over every position but the
    /// unembedding only touches the last row.
    pub fn last_logits(&self, tokens: &[TokenId], hook: Option<&dyn ResidualHook>) -> Result<Array1<f64>> {
        self.check_tokens(tokens)?;
        let n_layers = self.config.n_layers;
        if let Some(h) = hook {
            if h.boundary() > n_layers {
                return Err(Error::out_of_range("hook boundary", h.boundary(), format!("0..={n_layers}")));
            }
        }
        let mut x = self.embed(tokens);
        for l in 0..n_layers {
            if let Some(h) = hook.filter(|h| h.boundary() == l) {
                h.apply(&mut x)?;
            }
            x = self.layer_forward(l, x, None);
        }
        if let Some(h) = hook.filter(|h| h.boundary() == n_layers) {
            h.apply(&mut x)?;
        }
        let last = x.slice(s![x.nrows() - 1..x.nrows(), ..]);
        let (hf, _) = layer_norm(last, vec_(&self.params, self.layout.lnf_g), vec_(&self.params, self.layout.lnf_b));
        let logits = hf.dot(&mat(&self.params, self.layout.w_u)) + vec_(&self.params, self.layout.b_u);
        Ok(logits.row(0).to_owned())
    }

    fn embed(&self, tokens: &[TokenId]) -> Array2<f64> {
        let d = self.config.d_model;
        let te = mat(&self.params, self.layout.tok_emb);
        let pe = mat(&self.params, self.layout.pos_emb);
        let mut x = Array2::zeros((tokens.len(), d));
        for (t, (mut row, tok)) in x.rows_mut().into_iter().zip(tokens).enumerate() {
            row.assign(&te.row(tok.index()));
            row += &pe.row(t);
        }
        x
    }

    fn layer_forward(&self, l: usize, x: Array2<f64>, cache: Option<&mut Vec<LayerCache>>) -> Array2<f64> {
        let p = &self.params;
        let ls = &self.layout.layers[l];
        let t_len = x.nrows();
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let (h1, ln1) = layer_norm(x.view(), vec_(p, ls.ln1_g), vec_(p, ls.ln1_b));
        let qkv = h1.dot(&mat(p, ls.w_qkv)) + vec_(p, ls.b_qkv);
        let mut z = Array2::zeros((t_len, d));
        let mut probs = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut a = q.dot(&k.t());
            for (i, mut row) in a.rows_mut().into_iter().enumerate() {
                for (j, e) in row.iter_mut().enumerate() {
                    *e = if j <= i { *e * scale } else { f64::NEG_INFINITY };
                }
                softmax_row_inplace(row);
            }
            z.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&a.dot(&v));
            probs.push(a);
        }
        let attn_out = z.dot(&mat(p, ls.w_o)) + vec_(p, ls.b_o);
        let x_mid = x + attn_out;
        let (h2, ln2) = layer_norm(x_mid.view(), vec_(p, ls.ln2_g), vec_(p, ls.ln2_b));
        let pre = h2.dot(&mat(p, ls.w_in)) + vec_(p, ls.b_in);
        let act = pre.mapv(gelu);
        let mlp_out = act.dot(&mat(p, ls.w_out)) + vec_(p, ls.b_out);
        let out = x_mid + mlp_out;
        if let Some(c) = cache {
            c.push(LayerCache {
                ln1,
                h1,
                qkv,
                probs,
                z,
                ln2,
                h2,
                pre,
                act,
            });
        }
        out
    }

    fn run(
        &self,
        tokens: &[TokenId],
        hook: Option<&dyn ResidualHook>,
        keep_trace: bool,
    ) -> Result<(Vec<Array2<f64>>, Array2<f64>, Option<Trace>)> {
        self.check_tokens(tokens)?;
        let n_layers = self.config.n_layers;
        if let Some(h) = hook {
            if h.boundary() > n_layers {
                return Err(Error::out_of_range("hook boundary", h.boundary(), format!("0..={n_layers}")));
            }
        }
        let mut caches = keep_trace.then(Vec::new);
        let mut residuals = Vec::with_capacity(n_layers + 1);
        let mut x = self.embed(tokens);
        for l in 0..n_layers {
            if let Some(h) = hook.filter(|h| h.boundary() == l) {
                h.apply(&mut x)?;
            }
            residuals.push(x.clone());
            x = self.layer_forward(l, x, caches.as_mut());
        }
        if let Some(h) = hook.filter(|h| h.boundary() == n_layers) {
            h.apply(&mut x)?;
        }
        let (hf, lnf) = layer_norm(x.view(), vec_(&self.params, self.layout.lnf_g), vec_(&self.params, self.layout.lnf_b));
        residuals.push(x);
        let logits = hf.dot(&mat(&self.params, self.layout.w_u)) + vec_(&self.params, self.layout.b_u);
        let trace = caches.map(|layers| Trace { layers, lnf, hf });
        Ok((residuals, logits, trace))
    }

    /// Summed cross-entropy of `seq[t+1]` given `seq[..=t]` over the
    /// positions where `weight[t]` is set; the gradient of that sum is added
    /// into `grad` (layout order). Returns `(loss_sum, counted_targets)`.
    pub fn accumulate_gradient(&self, seq: &[TokenId], weight: &[bool], grad: &mut [f64]) -> Result<(f64, usize)> {
        if seq.len() < 2 {
            return Err(Error::InvalidInput("training sequence needs at least two tokens".into()));
        }
        let inputs = &seq[..seq.len() - 1];
        if weight.len() != inputs.len() {
            return Err(Error::DimensionMismatch {
                context: "loss weights",
                expected: inputs.len(),
                got: weight.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                context: "gradient buffer",
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        if let Some(bad) = seq.iter().find(|t| !self.vocab.contains(**t)) {
            return Err(Error::UnknownToken(bad.0));
        }
        let (residuals, logits, trace) = self.run(inputs, None, true)?;
        let trace = trace.expect("trace requested");
        let mut dlogits = logits;
        let mut loss = 0.0;
        let mut count = 0;
        for (t, mut row) in dlogits.rows_mut().into_iter().enumerate() {
            if !weight[t] {
                row.fill(0.0);
                continue;
            }
            let target = seq[t + 1].index();
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[target];
            count += 1;
            row.mapv_inplace(|x| (x - lse).exp());
            row[target] -= 1.0;
        }
        self.backward(inputs, &residuals, &trace, &dlogits, grad);
        Ok((loss, count))
    }

    /// Summed cross-entropy over weighted positions, without a gradient.
    /// Returns `(loss_sum, counted_targets)`.
    pub fn sequence_loss(&self, seq: &[TokenId], weight: &[bool]) -> Result<(f64, usize)> {
        let inputs = &seq[..seq.len().saturating_sub(1)];
        if weight.len() != inputs.len() {
            return Err(Error::DimensionMismatch {
                context: "loss weights",
                expected: inputs.len(),
                got: weight.len(),
            });
        }
        let out = self.forward(inputs)?;
        let mut loss = 0.0;
        let mut count = 0;
        for (t, row) in out.logits.rows().into_iter().enumerate() {
            if !weight[t] {
                continue;
            }
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[seq[t + 1].index()];
            count += 1;
        }
        Ok((loss, count))
    }

    fn backward(&self, tokens: &[TokenId], residuals: &[Array2<f64>], trace: &Trace, dlogits: &Array2<f64>, grad: &mut [f64]) {
        let p = &self.params;
        let lay = &self.layout;
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        general_mat_mul(1.0, &trace.hf.t(), dlogits, 1.0, &mut mat_mut(grad, lay.w_u));
        vec_mut(grad, lay.b_u).scaled_add(1.0, &dlogits.sum_axis(Axis(0)));
        let dhf = dlogits.dot(&mat(p, lay.w_u).t());
        let mut dx = {
            let (gs, rest) = split2(grad, lay.lnf_g, lay.lnf_b);
            layer_norm_backward(&dhf, &trace.lnf, vec_(p, lay.lnf_g), gs, rest)
        };

        for l in (0..self.config.n_layers).rev() {
            let ls = &lay.layers[l];
            let c = &trace.layers[l];

            // MLP
            general_mat_mul(1.0, &c.act.t(), &dx, 1.0, &mut mat_mut(grad, ls.w_out));
            vec_mut(grad, ls.b_out).scaled_add(1.0, &dx.sum_axis(Axis(0)));
            let mut dpre = dx.dot(&mat(p, ls.w_out).t());
            ndarray::Zip::from(&mut dpre).and(&c.pre).for_each(|g, &u| *g *= gelu_grad(u));
            general_mat_mul(1.0, &c.h2.t(), &dpre, 1.0, &mut mat_mut(grad, ls.w_in));
            vec_mut(grad, ls.b_in).scaled_add(1.0, &dpre.sum_axis(Axis(0)));
            let dh2 = dpre.dot(&mat(p, ls.w_in).t());
            let dln2 = {
                let (gs, bs) = split2(grad, ls.ln2_g, ls.ln2_b);
                layer_norm_backward(&dh2, &c.ln2, vec_(p, ls.ln2_g), gs, bs)
            };
            let dx_mid = dx + dln2;

            // attention
            general_mat_mul(1.0, &c.z.t(), &dx_mid, 1.0, &mut mat_mut(grad, ls.w_o));
            vec_mut(grad, ls.b_o).scaled_add(1.0, &dx_mid.sum_axis(Axis(0)));
            let dz = dx_mid.dot(&mat(p, ls.w_o).t());
            let mut dqkv = Array2::zeros(c.qkv.raw_dim());
            for h in 0..self.config.n_heads {
                let (qs, ks, vs) = (h * dh, d + h * dh, 2 * d + h * dh);
                let q = c.qkv.slice(s![.., qs..qs + dh]);
                let k = c.qkv.slice(s![.., ks..ks + dh]);
                let v = c.qkv.slice(s![.., vs..vs + dh]);
                let a = &c.probs[h];
                let dz_h = dz.slice(s![.., h * dh..(h + 1) * dh]);
                let mut da = dz_h.dot(&v.t());
                dqkv.slice_mut(s![.., vs..vs + dh]).assign(&a.t().dot(&dz_h));
                for (mut drow, arow) in da.rows_mut().into_iter().zip(a.rows()) {
                    let inner = drow.dot(&arow);
                    ndarray::Zip::from(&mut drow).and(&arow).for_each(|g, &pa| *g = pa * (*g - inner) * scale);
                }
                dqkv.slice_mut(s![.., qs..qs + dh]).assign(&da.dot(&k));
                dqkv.slice_mut(s![.., ks..ks + dh]).assign(&da.t().dot(&q));
            }
            general_mat_mul(1.0, &c.h1.t(), &dqkv, 1.0, &mut mat_mut(grad, ls.w_qkv));
            vec_mut(grad, ls.b_qkv).scaled_add(1.0, &dqkv.sum_axis(Axis(0)));
            let dh1 = dqkv.dot(&mat(p, ls.w_qkv).t());
            let dln1 = {
                let (gs, bs) = split2(grad, ls.ln1_g, ls.ln1_b);
                layer_norm_backward(&dh1, &c.ln1, vec_(p, ls.ln1_g), gs, bs)
            };
            dx = dx_mid + dln1;
        }
        let _ = residuals;

        for (t, (row, tok)) in dx.rows().into_iter().zip(tokens).enumerate() {
            let te = lay.tok_emb.offset + tok.index() * d;
            let pe = lay.pos_emb.offset + t * d;
            for (i, &g) in row.iter().enumerate() {
                grad[te + i] += g;
                grad[pe + i] += g;
            }
        }
    }
}

/// Two disjoint mutable vector views into the gradient buffer; `a` must
/// precede `b`.
fn split2(buf: &mut [f64], a: Slot, b: Slot) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
    debug_assert!(a.offset + a.len() <= b.offset);
    let (lo, hi) = buf.split_at_mut(b.offset);
    (
        ArrayViewMut1::from(&mut lo[a.range()]),
        ArrayViewMut1::from(&mut hi[..b.len()]),
    )
}
