//! Sparse autoencoder over residual-stream activations, its training loop,
//! and the per-feature dashboards (activation density, top contexts).

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{TokenId, ToyLm, Transcript};
use crate::rng;

/// Activations at or below this are treated as inactive.
pub const ACTIVE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SaeModel {
    /// `d_latent × d_in`
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    /// `d_in × d_latent`; columns are the feature directions.
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub lambda_l1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaeLoss {
    pub total: f64,
    pub l2: f64,
    pub l1: f64,
}

/// Gradient of the batch-mean loss, shaped like the parameters.
#[derive(Clone, Debug)]
pub struct SaeGrad {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

impl SaeModel {
    pub fn new(w_enc: Array2<f64>, b_enc: Array1<f64>, w_dec: Array2<f64>, b_dec: Array1<f64>, lambda_l1: f64) -> Result<Self> {
        let (l, d) = w_enc.dim();
        let check = |context, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { context, expected, got })
            }
        };
        check("b_enc", l, b_enc.len())?;
        check("w_dec rows", d, w_dec.nrows())?;
        check("w_dec cols", l, w_dec.ncols())?;
        check("b_dec", d, b_dec.len())?;
        if !(lambda_l1 >= 0.0) {
            return Err(Error::out_of_range("lambda_l1", lambda_l1, ">= 0"));
        }
        Ok(SaeModel {
            w_enc: w_enc.as_standard_layout().into_owned(),
            b_enc,
            w_dec: w_dec.as_standard_layout().into_owned(),
            b_dec,
            lambda_l1,
        })
    }

    /// Unit-norm random decoder, encoder initialised to its transpose scaled
    /// by `min(1, 2·d_in/d_latent)`, and `b_dec` at the data mean. About half
    /// the latents fire on a random input, so the scale starts the
    /// reconstruction near the identity.
    pub fn initialized(d_in: usize, d_latent: usize, lambda_l1: f64, data_mean: ArrayView1<f64>, seed: u64) -> Result<Self> {
        if d_in == 0 || d_latent == 0 {
            return Err(Error::InvalidInput("SAE dimensions must be positive".into()));
        }
        let mut r = rng::stream(seed, 0);
        let mut w_dec = Array2::from_shape_simple_fn((d_in, d_latent), || r.sample::<f64, _>(StandardNormal));
        normalize_columns(&mut w_dec);
        let scale = (2.0 * d_in as f64 / d_latent as f64).min(1.0);
        let w_enc = w_dec.t().mapv(|v| v * scale);
        SaeModel::new(w_enc, Array1::zeros(d_latent), w_dec, data_mean.to_owned(), lambda_l1)
    }

    pub fn d_in(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn d_latent(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn decoder_column(&self, feature: usize) -> Result<ArrayView1<'_, f64>> {
        if feature >= self.d_latent() {
            return Err(Error::out_of_range("feature_id", feature, format!("< {}", self.d_latent())));
        }
        Ok(self.w_dec.column(feature))
    }

    pub fn encode(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(x.len())?;
        Ok((self.w_enc.dot(&(&x - &self.b_dec)) + &self.b_enc).mapv(relu))
    }

    pub fn decode(&self, f: ArrayView1<f64>) -> Result<Array1<f64>> {
        if f.len() != self.d_latent() {
            return Err(Error::DimensionMismatch {
                context: "SAE latent",
                expected: self.d_latent(),
                got: f.len(),
            });
        }
        Ok(self.w_dec.dot(&f) + &self.b_dec)
    }

    /// Rows of `x` encoded; `n × d_latent`.
    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let pre = (&x - &self.b_dec).dot(&self.w_enc.t()) + &self.b_enc;
        Ok(pre.mapv(relu))
    }

    pub fn decode_batch(&self, f: ArrayView2<f64>) -> Array2<f64> {
        f.dot(&self.w_dec.t()) + &self.b_dec
    }

    /// `‖x − x̂‖² + λ‖f‖₁` for one vector.
    pub fn loss(&self, x: ArrayView1<f64>) -> Result<SaeLoss> {
        let f = self.encode(x)?;
        let r = self.decode(f.view())? - x;
        let l2 = r.dot(&r);
        let l1 = self.lambda_l1 * f.sum();
        Ok(SaeLoss { total: l2 + l1, l2, l1 })
    }

    /// Mean loss over the rows of `x` and its gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>) -> Result<(SaeLoss, SaeGrad)> {
        self.check_input(x.ncols())?;
        let n = x.nrows().max(1) as f64;
        let c = &x - &self.b_dec;
        let pre = c.dot(&self.w_enc.t()) + &self.b_enc;
        let f = pre.mapv(relu);
        let r = f.dot(&self.w_dec.t()) + &self.b_dec - x;
        let l2 = r.iter().map(|v| v * v).sum::<f64>() / n;
        let l1 = self.lambda_l1 * f.sum() / n;
        let g = r * (2.0 / n);
        let w_dec = g.t().dot(&f);
        let mut df = g.dot(&self.w_dec);
        let lam = self.lambda_l1 / n;
        ndarray::Zip::from(&mut df).and(&pre).for_each(|d, &p| {
            *d = if p > 0.0 { *d + lam } else { 0.0 };
        });
        let w_enc = df.t().dot(&c);
        let b_enc = df.sum_axis(Axis(0));
        let dc = df.dot(&self.w_enc);
        let b_dec = g.sum_axis(Axis(0)) - dc.sum_axis(Axis(0));
        Ok((
            SaeLoss { total: l2 + l1, l2, l1 },
            SaeGrad {
                w_enc,
                b_enc,
                w_dec,
                b_dec,
            },
        ))
    }

    pub fn normalize_decoder(&mut self) {
        normalize_columns(&mut self.w_dec);
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> [(&'static str, &[f64], [usize; 2]); 4] {
        let (l, d) = self.w_enc.dim();
        [
            ("w_enc", self.w_enc.as_slice().expect("standard layout"), [l, d]),
            ("b_enc", self.b_enc.as_slice().expect("contiguous"), [l, 1]),
            ("w_dec", self.w_dec.as_slice().expect("standard layout"), [d, l]),
            ("b_dec", self.b_dec.as_slice().expect("contiguous"), [d, 1]),
        ]
    }

    fn check_input(&self, got: usize) -> Result<()> {
        if got != self.d_in() {
            return Err(Error::DimensionMismatch {
                context: "SAE input",
                expected: self.d_in(),
                got,
            });
        }
        Ok(())
    }
}

fn normalize_columns(w: &mut Array2<f64>) {
    for mut col in w.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        }
    }
}

/// Residual vectors at one boundary over a set of transcripts, with the
/// token and location of each row.
#[derive(Clone, Debug)]
pub struct HookCorpus {
    pub boundary: usize,
    pub activations: Array2<f64>,
    pub sequences: Vec<Vec<TokenId>>,
    /// `(sequence, position)` of each activation row.
    pub origin: Vec<(u32, u32)>,
}

impl HookCorpus {
    /// Runs the model over the prompt part of each transcript (everything
    /// but the final action token).
    pub fn collect(model: &ToyLm, transcripts: &[Transcript], boundary: usize) -> Result<HookCorpus> {
        let sequences: Vec<Vec<TokenId>> = transcripts
            .iter()
            .map(|t| t.tokens[..t.tokens.len() - 1].to_vec())
            .collect();
        Self::from_sequences(model, sequences, boundary)
    }

    pub fn from_sequences(model: &ToyLm, sequences: Vec<Vec<TokenId>>, boundary: usize) -> Result<HookCorpus> {
        let blocks = sequences
            .par_iter()
            .map(|s| model.residual_at(s, boundary))
            .collect::<Result<Vec<_>>>()?;
        let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
        let d = model.d_model();
        let mut activations = Array2::zeros((rows, d));
        let mut origin = Vec::with_capacity(rows);
        let mut at = 0;
        for (i, b) in blocks.iter().enumerate() {
            activations.slice_mut(s![at..at + b.nrows(), ..]).assign(b);
            origin.extend((0..b.nrows()).map(|p| (i as u32, p as u32)));
            at += b.nrows();
        }
        Ok(HookCorpus {
            boundary,
            activations,
            sequences,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.activations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.nrows() == 0
    }

    pub fn token(&self, row: usize) -> TokenId {
        let (s, p) = self.origin[row];
        self.sequences[s as usize][p as usize]
    }

    /// Splits by sequence: rows of the last `fraction` of sequences are held out.
    pub fn split_rows(&self, fraction: f64) -> (usize, usize) {
        let n_seq = self.sequences.len();
        let held = ((n_seq as f64) * fraction).round() as usize;
        let first_held = (n_seq - held.min(n_seq)) as u32;
        let boundary = self.origin.partition_point(|&(s, _)| s < first_held);
        (boundary, self.len() - boundary)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeTrainConfig {
    /// `d_latent = expansion · d_in`.
    pub expansion: usize,
    pub lambda_l1: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final fraction of steps over which the learning rate falls linearly
    /// to zero.
    pub decay_fraction: f64,
    pub held_out_fraction: f64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            expansion: 8,
            lambda_l1: 3e-2,
            steps: 3000,
            batch_size: 256,
            learning_rate: 2e-3,
            decay_fraction: 0.3,
            held_out_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeEval {
    pub step: usize,
    /// Mean `‖x − x̂‖²`.
    pub reconstruction: f64,
    pub mean_active: f64,
}

#[derive(Clone, Debug)]
pub struct SaeTrainOutcome {
    pub sae: SaeModel,
    pub initial: SaeEval,
    pub last: SaeEval,
    pub trace: Vec<(usize, SaeLoss)>,
}

pub fn evaluate_sae(sae: &SaeModel, x: ArrayView2<f64>, step: usize) -> Result<SaeEval> {
    let f = sae.encode_batch(x)?;
    let r = sae.decode_batch(f.view()) - x;
    let n = x.nrows().max(1) as f64;
    Ok(SaeEval {
        step,
        reconstruction: r.iter().map(|v| v * v).sum::<f64>() / n,
        mean_active: f.iter().filter(|&&v| v > ACTIVE_EPS).count() as f64 / n,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn update(&mut self, p: &mut [f64], g: &[f64], lr: f64, t: i32) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        let (c1, c2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
        for i in 0..p.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

const SAE_INIT_SALT: u64 = 0x5AE0;
const SAE_BATCH_SALT: u64 = 0x5AE1;

/// Adam on minibatches drawn with replacement from the training rows, with
/// the decoder columns renormalised after every step.
pub fn train_sae(data: &HookCorpus, cfg: &SaeTrainConfig, seed: u64) -> Result<SaeTrainOutcome> {
    let (n_train, _) = data.split_rows(cfg.held_out_fraction);
    if n_train == 0 {
        return Err(Error::InvalidInput("no training activations".into()));
    }
    let train = data.activations.slice(s![..n_train, ..]);
    let held = data.activations.slice(s![n_train.., ..]);
    let held = if held.nrows() == 0 { train } else { held };
    train_sae_on(train, held, cfg, seed)
}

fn decay_factor(step: usize, steps: usize, fraction: f64) -> f64 {
    let tail = (steps as f64 * fraction.clamp(0.0, 1.0)).round();
    let left = (steps - step) as f64;
    if tail <= 0.0 || left > tail {
        1.0
    } else {
        left / tail
    }
}

pub fn train_sae_on(train: ArrayView2<f64>, held: ArrayView2<f64>, cfg: &SaeTrainConfig, seed: u64) -> Result<SaeTrainOutcome> {
    if train.nrows() == 0 || cfg.batch_size == 0 || cfg.expansion == 0 {
        return Err(Error::InvalidInput("empty SAE training set or zero batch/expansion".into()));
    }
    let d = train.ncols();
    let mean = train.mean_axis(Axis(0)).expect("non-empty");
    let mut sae = SaeModel::initialized(d, cfg.expansion * d, cfg.lambda_l1, mean.view(), rng::derive_seed(seed, SAE_INIT_SALT))?;
    let initial = evaluate_sae(&sae, held, 0)?;
    let mut opt = [
        Adam::new(sae.w_enc.len()),
        Adam::new(sae.b_enc.len()),
        Adam::new(sae.w_dec.len()),
        Adam::new(sae.b_dec.len()),
    ];
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut batch = Array2::<f64>::zeros((cfg.batch_size, d));
    let batch_seed = rng::derive_seed(seed, SAE_BATCH_SALT);
    for step in 0..cfg.steps {
        let mut r = rng::stream(batch_seed, step as u64);
        for mut row in batch.rows_mut() {
            row.assign(&train.row(r.random_range(0..train.nrows())));
        }
        let (loss, g) = sae.loss_and_grad(batch.view())?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("SAE loss {}", loss.total),
            });
        }
        let t = (step + 1) as i32;
        let lr = cfg.learning_rate * decay_factor(step, cfg.steps, cfg.decay_fraction);
        let slice = |a: &Array2<f64>| a.as_slice().expect("standard layout").to_vec();
        opt[0].update(sae.w_enc.as_slice_mut().expect("layout"), &slice(&g.w_enc), lr, t);
        opt[1].update(sae.b_enc.as_slice_mut().expect("layout"), g.b_enc.as_slice().expect("layout"), lr, t);
        opt[2].update(sae.w_dec.as_slice_mut().expect("layout"), &slice(&g.w_dec), lr, t);
        opt[3].update(sae.b_dec.as_slice_mut().expect("layout"), g.b_dec.as_slice().expect("layout"), lr, t);
        sae.normalize_decoder();
        trace.push((step, loss));
    }
    let last = evaluate_sae(&sae, held, cfg.steps)?;
    Ok(SaeTrainOutcome { sae, initial, last, trace })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityClass {
    FlatTail,
    TailCluster,
}

/// Thresholds of the tail-cluster classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    pub bins: usize,
    /// The second mode must lie above this quantile of positive activations.
    pub tail_quantile: f64,
    /// Required dip between the modes, relative to the main mode's height.
    pub min_dip: f64,
    pub kde_points: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            bins: 40,
            tail_quantile: 0.9,
            min_dip: 0.2,
            kde_points: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationDensity {
    pub feature_id: usize,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub positive: usize,
    pub total: usize,
    pub nonzero_fraction: f64,
    /// `None` for a feature that never activates.
    pub class: Option<DensityClass>,
}

impl ActivationDensity {
    pub fn is_dead(&self) -> bool {
        self.positive == 0
    }
}

/// One feature's activation over every row of the corpus.
pub fn feature_activations(sae: &SaeModel, feature: usize, data: ArrayView2<f64>) -> Result<Array1<f64>> {
    sae.decoder_column(feature)?;
    if data.ncols() != sae.d_in() {
        return Err(Error::DimensionMismatch {
            context: "SAE input",
            expected: sae.d_in(),
            got: data.ncols(),
        });
    }
    let w = sae.w_enc.row(feature);
    let shift = w.dot(&sae.b_dec) - sae.b_enc[feature];
    Ok(data.dot(&w).mapv(|v| relu(v - shift)))
}

pub fn activation_density(sae: &SaeModel, feature: usize, data: ArrayView2<f64>, cfg: &DensityConfig) -> Result<ActivationDensity> {
    let acts = feature_activations(sae, feature, data)?;
    Ok(density_from_values(feature, acts.as_slice().expect("contiguous"), cfg))
}

pub fn density_from_values(feature: usize, acts: &[f64], cfg: &DensityConfig) -> ActivationDensity {
    let mut positive: Vec<f64> = acts.iter().copied().filter(|&v| v > 0.0).collect();
    positive.sort_by(f64::total_cmp);
    let bins = cfg.bins.max(1);
    let max = positive.last().copied().unwrap_or(0.0);
    let bin_edges: Vec<f64> = (0..=bins).map(|i| max * i as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in &positive {
        let b = ((v / max) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let class = if positive.is_empty() { None } else { Some(classify_tail(&positive, cfg)) };
    ActivationDensity {
        feature_id: feature,
        bin_edges,
        counts,
        positive: positive.len(),
        total: acts.len(),
        nonzero_fraction: if acts.is_empty() { 0.0 } else { positive.len() as f64 / acts.len() as f64 },
        class,
    }
}

/// Gaussian KDE of log-activations (Silverman bandwidth). A tail cluster is
/// a local maximum above the tail quantile, separated from the nearest
/// maximum to its left by a dip of at least `min_dip` times the global mode.
fn classify_tail(sorted_positive: &[f64], cfg: &DensityConfig) -> DensityClass {
    let logs: Vec<f64> = sorted_positive.iter().map(|v| v.ln()).collect();
    let n = logs.len();
    if n < 3 {
        return DensityClass::FlatTail;
    }
    let (lo, hi) = (logs[0], logs[n - 1]);
    if hi - lo < 1e-12 {
        return DensityClass::FlatTail;
    }
    let mean = logs.iter().sum::<f64>() / n as f64;
    let sd = (logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let iqr = quantile(&logs, 0.75) - quantile(&logs, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bw = (0.9 * spread * (n as f64).powf(-0.2)).max((hi - lo) * 1e-3);
    let m = cfg.kde_points.max(8);
    let grid: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
    let dens: Vec<f64> = grid
        .iter()
        .map(|&g| {
            // only samples within 6 bandwidths contribute meaningfully
            let from = logs.partition_point(|&x| x < g - 6.0 * bw);
            let to = logs.partition_point(|&x| x <= g + 6.0 * bw);
            logs[from..to].iter().map(|&x| (-0.5 * ((g - x) / bw).powi(2)).exp()).sum::<f64>()
        })
        .collect();
    let mode = dens.iter().copied().fold(0.0, f64::max);
    let threshold = quantile(&logs, cfg.tail_quantile);
    let is_max = |i: usize| {
        let left = if i == 0 { f64::NEG_INFINITY } else { dens[i - 1] };
        let right = if i + 1 == m { f64::NEG_INFINITY } else { dens[i + 1] };
        dens[i] > left && dens[i] >= right
    };
    let maxima: Vec<usize> = (0..m).filter(|&i| is_max(i)).collect();
    for w in maxima.windows(2) {
        let (a, b) = (w[0], w[1]);
        if grid[b] < threshold {
            continue;
        }
        let valley = dens[a..=b].iter().copied().fold(f64::INFINITY, f64::min);
        if dens[a].min(dens[b]) - valley >= cfg.min_dip * mode {
            return DensityClass::TailCluster;
        }
    }
    DensityClass::FlatTail
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub activation: f64,
    pub sequence: usize,
    pub position: usize,
    pub token: String,
    /// Tokens up to and including the activating one.
    pub context: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDossier {
    pub feature_id: usize,
    pub top_contexts: Vec<ActivationRecord>,
    /// Fewer than `k` positive activations were found.
    pub truncated: bool,
    pub density: ActivationDensity,
    pub label: Option<String>,
}

/// The `k` largest positive activations, ties broken by corpus row.
pub fn top_activation_rows(acts: &[f64], k: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..acts.len()).filter(|&i| acts[i] > 0.0).collect();
    rows.sort_by(|&a, &b| acts[b].total_cmp(&acts[a]).then(a.cmp(&b)));
    rows.truncate(k);
    rows
}

pub fn top_activations(
    sae: &SaeModel,
    feature: usize,
    corpus: &HookCorpus,
    vocab: &crate::lm::Vocabulary,
    k: usize,
    context_len: usize,
    density_cfg: &DensityConfig,
) -> Result<FeatureDossier> {
    if k == 0 {
        return Err(Error::out_of_range("k", 0, ">= 1"));
    }
    let acts = feature_activations(sae, feature, corpus.activations.view())?;
    let acts = acts.as_slice().expect("contiguous");
    let rows = top_activation_rows(acts, k);
    let top_contexts = rows
        .iter()
        .map(|&row| {
            let (s, p) = corpus.origin[row];
            let (s, p) = (s as usize, p as usize);
            let seq = &corpus.sequences[s];
            let from = (p + 1).saturating_sub(context_len.max(1));
            ActivationRecord {
                activation: acts[row],
                sequence: s,
                position: p,
                token: vocab.token(seq[p]).unwrap_or("?").to_string(),
                context: vocab.decode(&seq[from..=p]),
            }
        })
        .collect::<Vec<_>>();
    Ok(FeatureDossier {
        feature_id: feature,
        truncated: top_contexts.len() < k,
        top_contexts,
        density: density_from_values(feature, acts, density_cfg),
        label: None,
    })
}

/// Features with no positive activation anywhere in `data`.
pub fn dead_features(sae: &SaeModel, data: ArrayView2<f64>) -> Result<Vec<usize>> {
    let f = sae.encode_batch(data)?;
    Ok((0..sae.d_latent())
        .filter(|&j| f.column(j).iter().all(|&v| v <= 0.0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tiny(seed: u64) -> SaeModel {
        let mut r = rng::stream(seed, 1);
        let mut g = |rows, cols| Array2::from_shape_simple_fn((rows, cols), || r.sample::<f64, _>(StandardNormal) * 0.5);
        let w_enc = g(8, 4);
        let w_dec = g(4, 8);
        let b_enc = g(8, 1).column(0).to_owned();
        let b_dec = g(4, 1).column(0).to_owned();
        SaeModel::new(w_enc, b_enc, w_dec, b_dec, 0.1).unwrap()
    }

    #[test]
    fn encode_matches_explicit_loops() {
        let sae = tiny(0);
        let x = array![0.3, -1.2, 0.5, 2.0];
        let f = sae.encode(x.view()).unwrap();
        for j in 0..8 {
            let mut acc = sae.b_enc[j];
            for i in 0..4 {
                acc += sae.w_enc[[j, i]] * (x[i] - sae.b_dec[i]);
            }
            assert_abs_diff_eq!(f[j], acc.max(0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_latent_decodes_to_bias() {
        let sae = tiny(2);
        let z = Array1::zeros(8);
        assert_eq!(sae.decode(z.view()).unwrap(), sae.b_dec);
        let mut at_bias = sae.clone();
        at_bias.b_enc.fill(0.0);
        let f = at_bias.encode(at_bias.b_dec.view()).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_loss_is_mean_of_single_losses() {
        let sae = tiny(3);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
        let (batch, _) = sae.loss_and_grad(x.view()).unwrap();
        let single: f64 = x.rows().into_iter().map(|r| sae.loss(r).unwrap().total).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(batch.total, single, epsilon = 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let sae = tiny(4);
        assert!(sae.encode(array![1.0, 2.0].view()).is_err());
        assert!(sae.decode(array![1.0].view()).is_err());
        assert!(sae.decoder_column(8).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_abs_diff_eq!(quantile(&v, 0.5), 2.5);
    }

    #[test]
    fn bimodal_values_are_a_tail_cluster() {
        let mut r = rng::stream(7, 0);
        let mut v: Vec<f64> = (0..2000).map(|_| (r.random::<f64>() * 0.05).max(1e-4)).collect();
        v.extend((0..150).map(|_| 5.0 + r.random::<f64>() * 0.2));
        let d = density_from_values(0, &v, &DensityConfig::default());
        assert_eq!(d.class, Some(DensityClass::TailCluster));
        assert_eq!(d.counts.iter().sum::<usize>(), d.positive);

        let flat: Vec<f64> = (0..2000).map(|_| -(r.random::<f64>()).ln()).collect();
        let d = density_from_values(0, &flat, &DensityConfig::default());
        assert_eq!(d.class, Some(DensityClass::FlatTail));
    }

    #[test]
    fn dead_feature_has_no_class() {
        let d = density_from_values(3, &[0.0, 0.0, 0.0], &DensityConfig::default());
        assert!(d.is_dead());
        assert_eq!(d.class, None);
    }
}
