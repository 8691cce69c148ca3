//! The frozen toy vision-language model: prompt-conditioned text
//! embeddings, image embeddings, the temperature softmax over a class
//! support, and hand-derived prompt gradients for every training loss.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numeric;

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows x cols` matrix of `N(0, scale^2)` draws, filled row by row.
pub(crate) fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    let values: Vec<f64> = (0..rows * cols)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

/// Softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::OutOfRange(format!("temperature {value} must be positive")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(0.05)
    }
}

/// Full label set `0..C` with its base/new partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSpace {
    all: Vec<usize>,
    base: Vec<usize>,
    new: Vec<usize>,
}

impl ClassSpace {
    /// Builds the space from the base ids; every other id in `0..num_classes` is new.
    pub fn new(num_classes: usize, base: &[usize]) -> Result<Self> {
        let mut is_base = vec![false; num_classes];
        for &c in base {
            if c >= num_classes {
                return Err(Error::UnknownClass(c));
            }
            if is_base[c] {
                return Err(Error::InvalidClassSpace(format!("duplicate base class {c}")));
            }
            is_base[c] = true;
        }
        let base: Vec<usize> = (0..num_classes).filter(|&c| is_base[c]).collect();
        let new: Vec<usize> = (0..num_classes).filter(|&c| !is_base[c]).collect();
        if base.is_empty() || new.is_empty() {
            return Err(Error::InvalidClassSpace("base and new sets must both be nonempty".into()));
        }
        Ok(Self { all: (0..num_classes).collect(), base, new })
    }

    pub fn all(&self) -> &[usize] {
        &self.all
    }

    pub fn base(&self) -> &[usize] {
        &self.base
    }

    pub fn new_classes(&self) -> &[usize] {
        &self.new
    }

    pub fn num_classes(&self) -> usize {
        self.all.len()
    }

    pub fn is_base(&self, class: usize) -> bool {
        self.base.binary_search(&class).is_ok()
    }
}

/// Probabilities over an ordered list of class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityDistribution {
    support: Vec<usize>,
    probs: Vec<f64>,
}

impl ProbabilityDistribution {
    pub fn new(support: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::EmptySupport);
        }
        if support.len() != probs.len() {
            return Err(Error::DimensionMismatch { expected: support.len(), got: probs.len() });
        }
        let mut seen = support.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != support.len() {
            return Err(Error::InvalidClassSpace("duplicate class in support".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::OutOfRange("probability outside [0, 1]".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::OutOfRange(format!("probabilities sum to {total}")));
        }
        Ok(Self { support, probs })
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of `class`, or zero when it is outside the support.
    pub fn prob_of(&self, class: usize) -> f64 {
        self.support
            .iter()
            .position(|&c| c == class)
            .map_or(0.0, |i| self.probs[i])
    }

    /// Most probable class; the earliest support entry wins ties.
    pub fn argmax(&self) -> usize {
        self.support[numeric::argmax(&self.probs).expect("support is nonempty")]
    }

    /// Largest probability among `classes`.
    pub fn max_over(&self, classes: &[usize]) -> f64 {
        classes.iter().map(|&c| self.prob_of(c)).fold(0.0, f64::max)
    }

    /// Total probability of `classes`.
    pub fn mass_of(&self, classes: &[usize]) -> f64 {
        classes.iter().map(|&c| self.prob_of(c)).sum()
    }
}

/// The learnable prompt: `m` token vectors of width `d_tok`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVector {
    tokens: DMatrix<f64>,
}

impl PromptVector {
    pub fn new(tokens: DMatrix<f64>) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::InvalidConfig("prompt needs at least one token".into()));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow);
        }
        Ok(Self { tokens })
    }

    pub fn zeros(len: usize, token_dim: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(len, token_dim))
    }

    /// Entries drawn from `N(0, scale^2)` with a dedicated seed.
    pub fn gaussian(len: usize, token_dim: usize, scale: f64, seed: u64) -> Result<Self> {
        Self::new(gaussian_matrix(&mut seeded_rng(seed), len, token_dim, scale))
    }

    pub fn tokens(&self) -> &DMatrix<f64> {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// In-place `p -= step * grad`; rejects a non-finite result.
    pub(crate) fn descend(&mut self, step: f64, grad: &DMatrix<f64>) -> Result<()> {
        self.tokens -= grad * step;
        if self.tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow);
        }
        Ok(())
    }
}

/// Shape of the toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub token_dim: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

/// How class tokens are tied to the class prototypes of a dataset.
///
/// Each class gets a text pre-activation target `a_c = saturation * sign(W_V u_c)`;
/// along every embedding axis `blank_pairs` positive and `blank_pairs` negative
/// classes have that coordinate set to zero instead. Class tokens are then solved
/// so that a zero prompt reproduces `a_c` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedWorld {
    pub saturation: f64,
    pub text_scale: f64,
    pub blank_pairs: usize,
    pub prompt_len: usize,
}

impl Default for AlignedWorld {
    fn default() -> Self {
        Self { saturation: 3.0, text_scale: 60.0, blank_pairs: 3, prompt_len: 16 }
    }
}

/// Frozen text and image encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    text_map: DMatrix<f64>,
    image_map: DMatrix<f64>,
    class_tokens: Vec<DVector<f64>>,
    seed: u64,
}

/// Intermediate values of one text embedding, kept for backpropagation.
struct TextForward {
    activation: DVector<f64>,
    norm: f64,
    weight: DVector<f64>,
}

impl FrozenEncoder {
    /// Independent Gaussian weights and class tokens, entries scaled by `1/sqrt(fan_in)`.
    pub fn random(shape: EncoderShape, seed: u64) -> Result<Self> {
        check_shape(shape)?;
        let mut rng = seeded_rng(seed);
        let tok_scale = 1.0 / (shape.token_dim as f64).sqrt();
        let text_map = gaussian_matrix(&mut rng, shape.embed_dim, shape.token_dim, tok_scale);
        let image_map = gaussian_matrix(
            &mut rng,
            shape.embed_dim,
            shape.feature_dim,
            1.0 / (shape.feature_dim as f64).sqrt(),
        );
        let class_tokens = (0..shape.num_classes)
            .map(|_| gaussian_matrix(&mut rng, shape.token_dim, 1, tok_scale).column(0).into_owned())
            .collect();
        Self::from_parts(text_map, image_map, class_tokens, seed)
    }

    /// Encoder whose zero-shot geometry follows `prototypes` (one row per class).
    ///
    /// Requires `token_dim >= embed_dim` so the class tokens can be solved for.
    pub fn aligned(
        prototypes: &[Vec<f64>],
        token_dim: usize,
        embed_dim: usize,
        world: AlignedWorld,
        seed: u64,
    ) -> Result<Self> {
        let feature_dim = prototypes.first().map_or(0, Vec::len);
        check_shape(EncoderShape { token_dim, embed_dim, feature_dim, num_classes: prototypes.len() })?;
        if token_dim < embed_dim {
            return Err(Error::InvalidConfig(format!(
                "aligned encoder needs token_dim >= embed_dim, got {token_dim} < {embed_dim}"
            )));
        }
        if world.prompt_len == 0 || !(world.saturation > 0.0) || !(world.text_scale > 0.0) {
            return Err(Error::InvalidConfig("invalid aligned world parameters".into()));
        }
        if prototypes.iter().any(|u| u.len() != feature_dim) {
            return Err(Error::DimensionMismatch { expected: feature_dim, got: 0 });
        }
        let mut rng = seeded_rng(seed);
        let base_map = gaussian_matrix(&mut rng, embed_dim, token_dim, 1.0 / (token_dim as f64).sqrt());
        let lift = gaussian_matrix(&mut rng, token_dim, feature_dim, 1.0 / (feature_dim as f64).sqrt());
        let image_map = &base_map * &lift;
        let text_map = &base_map * world.text_scale;

        let num_classes = prototypes.len();
        let projected: Vec<DVector<f64>> = prototypes
            .iter()
            .map(|u| &image_map * DVector::from_column_slice(u))
            .collect();
        let mut targets: Vec<DVector<f64>> = projected
            .iter()
            .map(|v| v.map(|x| if x > 0.0 { world.saturation } else { -world.saturation }))
            .collect();
        for k in 0..embed_dim {
            let mut pos: Vec<usize> = (0..num_classes).filter(|&c| projected[c][k] > 0.0).collect();
            let mut neg: Vec<usize> = (0..num_classes).filter(|&c| projected[c][k] <= 0.0).collect();
            let q = world.blank_pairs.min(pos.len()).min(neg.len());
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            for &c in pos[..q].iter().chain(&neg[..q]) {
                targets[c][k] = 0.0;
            }
        }

        // minimum-norm solution of W_T h = a, scaled back up by the pooling width
        let gram = &text_map * text_map.transpose();
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::InvalidConfig("text map is rank deficient".into()))?;
        let pool = (world.prompt_len + 1) as f64;
        let class_tokens = targets
            .iter()
            .map(|a| text_map.transpose() * chol.solve(a) * pool)
            .collect();
        Self::from_parts(text_map, image_map, class_tokens, seed)
    }

    /// Assembles an encoder from explicit weights.
    pub fn from_parts(
        text_map: DMatrix<f64>,
        image_map: DMatrix<f64>,
        class_tokens: Vec<DVector<f64>>,
        seed: u64,
    ) -> Result<Self> {
        if text_map.nrows() != image_map.nrows() {
            return Err(Error::DimensionMismatch { expected: text_map.nrows(), got: image_map.nrows() });
        }
        if let Some(bad) = class_tokens.iter().find(|t| t.len() != text_map.ncols()) {
            return Err(Error::DimensionMismatch { expected: text_map.ncols(), got: bad.len() });
        }
        let finite = text_map.iter().chain(image_map.iter()).all(|v| v.is_finite())
            && class_tokens.iter().all(|t| t.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NumericalOverflow);
        }
        Ok(Self { text_map, image_map, class_tokens, seed })
    }

    pub fn token_dim(&self) -> usize {
        self.text_map.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.text_map.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.image_map.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn text_map(&self) -> &DMatrix<f64> {
        &self.text_map
    }

    pub fn image_map(&self) -> &DMatrix<f64> {
        &self.image_map
    }

    pub fn class_tokens(&self) -> &[DVector<f64>] {
        &self.class_tokens
    }

    fn check_prompt(&self, prompt: &PromptVector) -> Result<()> {
        if prompt.token_dim() != self.token_dim() {
            return Err(Error::DimensionMismatch { expected: self.token_dim(), got: prompt.token_dim() });
        }
        Ok(())
    }

    fn prompt_sum(prompt: &PromptVector) -> DVector<f64> {
        prompt.tokens.row_sum().transpose()
    }

    fn text_forward(&self, prompt_sum: &DVector<f64>, prompt_len: usize, class_id: usize) -> Result<TextForward> {
        let token = self.class_tokens.get(class_id).ok_or(Error::UnknownClass(class_id))?;
        let pooled = (prompt_sum + token) / (prompt_len + 1) as f64;
        let activation = (&self.text_map * pooled).map(f64::tanh);
        let norm = activation.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNormEmbedding);
        }
        let weight = &activation / norm;
        Ok(TextForward { activation, norm, weight })
    }

    /// Unit-norm text embedding `w_c(p)` of class `class_id` under `prompt`.
    pub fn text_embedding(&self, prompt: &PromptVector, class_id: usize) -> Result<DVector<f64>> {
        self.check_prompt(prompt)?;
        let sum = Self::prompt_sum(prompt);
        Ok(self.text_forward(&sum, prompt.len(), class_id)?.weight)
    }

    /// Unit-norm image embedding of a raw feature vector.
    pub fn image_embedding(&self, feature: &[f64]) -> Result<DVector<f64>> {
        if feature.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch { expected: self.feature_dim(), got: feature.len() });
        }
        let z = &self.image_map * DVector::from_column_slice(feature);
        let norm = z.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNormEmbedding);
        }
        Ok(z / norm)
    }
}

fn check_shape(shape: EncoderShape) -> Result<()> {
    if shape.token_dim == 0 || shape.embed_dim == 0 || shape.feature_dim == 0 || shape.num_classes == 0 {
        return Err(Error::InvalidConfig(format!("all encoder dimensions must be positive: {shape:?}")));
    }
    Ok(())
}

/// Text embeddings of every class for one fixed prompt (or prompt ensemble).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<DVector<f64>>,
}

impl ClassWeights {
    pub fn from_prompt(enc: &FrozenEncoder, prompt: &PromptVector) -> Result<Self> {
        let weights = (0..enc.num_classes())
            .map(|c| enc.text_embedding(prompt, c))
            .collect::<Result<_>>()?;
        Ok(Self { weights })
    }

    /// Per-class mean of the prompts' embeddings, renormalized to unit length.
    pub fn averaged(enc: &FrozenEncoder, prompts: &[PromptVector]) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InvalidConfig("at least one prompt is required".into()));
        }
        let members = prompts
            .iter()
            .map(|p| Self::from_prompt(enc, p))
            .collect::<Result<Vec<_>>>()?;
        let weights = (0..enc.num_classes())
            .map(|c| {
                let mut acc = DVector::zeros(enc.embed_dim());
                for m in &members {
                    acc += &m.weights[c];
                }
                let norm = acc.norm();
                if norm > 0.0 && norm.is_finite() {
                    Ok(acc / norm)
                } else {
                    Err(Error::ZeroNormEmbedding)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { weights })
    }

    pub fn weight(&self, class_id: usize) -> Result<&DVector<f64>> {
        self.weights.get(class_id).ok_or(Error::UnknownClass(class_id))
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    /// Log-probabilities of [`ClassWeights::classify`], computed stably.
    pub fn log_probs(&self, support: &[usize], temp: Temperature, z: &DVector<f64>) -> Result<Vec<f64>> {
        if support.is_empty() {
            return Err(Error::EmptySupport);
        }
        let logits = support
            .iter()
            .map(|&c| Ok(self.weight(c)?.dot(z) / temp.value()))
            .collect::<Result<Vec<f64>>>()?;
        numeric::log_softmax(&logits).ok_or(Error::NumericalOverflow)
    }

    /// Temperature softmax of cosine similarities over `support`.
    pub fn classify(&self, support: &[usize], temp: Temperature, z: &DVector<f64>) -> Result<ProbabilityDistribution> {
        let weights = support.iter().map(|&c| self.weight(c)).collect::<Result<Vec<_>>>()?;
        softmax_over(support, &weights, temp, z)
    }
}

fn softmax_over(
    support: &[usize],
    weights: &[&DVector<f64>],
    temp: Temperature,
    z: &DVector<f64>,
) -> Result<ProbabilityDistribution> {
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    if let Some(w) = weights.first() {
        if w.len() != z.len() {
            return Err(Error::DimensionMismatch { expected: w.len(), got: z.len() });
        }
    }
    let logits: Vec<f64> = weights.iter().map(|w| w.dot(z) / temp.value()).collect();
    let probs = numeric::softmax(&logits).ok_or(Error::NumericalOverflow)?;
    Ok(ProbabilityDistribution { support: support.to_vec(), probs })
}

/// Class probabilities for image embedding `z` over `support` under `prompt`.
pub fn classify(
    enc: &FrozenEncoder,
    prompt: &PromptVector,
    support: &[usize],
    temp: Temperature,
    z: &DVector<f64>,
) -> Result<ProbabilityDistribution> {
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let weights = support
        .iter()
        .map(|&c| enc.text_embedding(prompt, c))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DVector<f64>> = weights.iter().collect();
    softmax_over(support, &refs, temp, z)
}

/// The training objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// Mean cross-entropy over the batch.
    CrossEntropy,
    /// Mean prediction entropy over the batch.
    Entropy,
    /// Mean cross-entropy over the simulated-base items plus
    /// `max(0, gamma + mean entropy(base items) - mean entropy(new items))`.
    EntropyMargin { gamma: f64 },
    /// Summed cross-entropy over labelled items plus summed
    /// `KL(model || reference)` over reference items.
    CrossEntropyKl,
}

/// How one batch item enters the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ItemRole<'a> {
    /// Ordinary labelled item (simulated base for the margin loss).
    Labelled,
    /// Simulated-new item of the margin loss.
    SimulatedNew,
    /// Distillation target over the support, for the KL term.
    Reference(&'a [f64]),
}

#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub z: &'a DVector<f64>,
    pub label: usize,
    pub role: ItemRole<'a>,
}

fn entropy(logp: &[f64]) -> f64 {
    -logp.iter().map(|&l| l.exp() * l).sum::<f64>()
}

/// `d H / d logits` for the softmax entropy.
fn entropy_grad(logp: &[f64], h: f64) -> Vec<f64> {
    logp.iter().map(|&l| -l.exp() * (l + h)).collect()
}

/// Loss value and its gradient with respect to every prompt token.
///
/// The encoder is frozen. All probabilities are softmaxes over `support`.
pub fn loss_and_gradient(
    enc: &FrozenEncoder,
    prompt: &PromptVector,
    support: &[usize],
    temp: Temperature,
    batch: &[BatchItem<'_>],
    spec: LossSpec,
) -> Result<(f64, DMatrix<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    enc.check_prompt(prompt)?;
    let position: HashMap<usize, usize> = support.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let sum = FrozenEncoder::prompt_sum(prompt);
    let forwards = support
        .iter()
        .map(|&c| enc.text_forward(&sum, prompt.len(), c))
        .collect::<Result<Vec<_>>>()?;

    let tau = temp.value();
    let mut log_probs = Vec::with_capacity(batch.len());
    for item in batch {
        if item.z.len() != enc.embed_dim() {
            return Err(Error::DimensionMismatch { expected: enc.embed_dim(), got: item.z.len() });
        }
        let logits: Vec<f64> = forwards.iter().map(|f| f.weight.dot(item.z) / tau).collect();
        log_probs.push(numeric::log_softmax(&logits).ok_or(Error::NumericalOverflow)?);
    }
    let label_pos = |item: &BatchItem<'_>| position.get(&item.label).copied().ok_or(Error::UnknownClass(item.label));

    // dL/dlogits, one row per batch item
    let s = support.len();
    let mut dlogits = vec![vec![0.0; s]; batch.len()];
    let n = batch.len() as f64;
    let loss = match spec {
        LossSpec::CrossEntropy => {
            let mut total = 0.0;
            for (i, item) in batch.iter().enumerate() {
                let y = label_pos(item)?;
                total -= log_probs[i][y];
                for (j, g) in dlogits[i].iter_mut().enumerate() {
                    *g = (log_probs[i][j].exp() - f64::from(u8::from(j == y))) / n;
                }
            }
            total / n
        }
        LossSpec::Entropy => {
            let mut total = 0.0;
            for (i, lp) in log_probs.iter().enumerate() {
                let h = entropy(lp);
                total += h;
                dlogits[i] = entropy_grad(lp, h).into_iter().map(|g| g / n).collect();
            }
            total / n
        }
        LossSpec::EntropyMargin { gamma } => {
            let is_new: Vec<bool> = batch.iter().map(|b| matches!(b.role, ItemRole::SimulatedNew)).collect();
            let n_new = is_new.iter().filter(|&&x| x).count();
            let n_base = batch.len() - n_new;
            if n_new == 0 || n_base == 0 {
                return Err(Error::EmptyBatch);
            }
            let (nb, nn) = (n_base as f64, n_new as f64);
            let entropies: Vec<f64> = log_probs.iter().map(|lp| entropy(lp)).collect();
            let mut ce = 0.0;
            let (mut h_base, mut h_new) = (0.0, 0.0);
            for (i, item) in batch.iter().enumerate() {
                if is_new[i] {
                    h_new += entropies[i];
                    continue;
                }
                let y = label_pos(item)?;
                ce -= log_probs[i][y];
                h_base += entropies[i];
                for (j, g) in dlogits[i].iter_mut().enumerate() {
                    *g = (log_probs[i][j].exp() - f64::from(u8::from(j == y))) / nb;
                }
            }
            let hinge = gamma + h_base / nb - h_new / nn;
            if hinge > 0.0 {
                for (i, lp) in log_probs.iter().enumerate() {
                    let scale = if is_new[i] { -1.0 / nn } else { 1.0 / nb };
                    for (g, dh) in dlogits[i].iter_mut().zip(entropy_grad(lp, entropies[i])) {
                        *g += scale * dh;
                    }
                }
            }
            ce / nb + hinge.max(0.0)
        }
        LossSpec::CrossEntropyKl => {
            let mut total = 0.0;
            for (i, item) in batch.iter().enumerate() {
                let lp = &log_probs[i];
                match item.role {
                    ItemRole::Reference(q) => {
                        if q.len() != s {
                            return Err(Error::DimensionMismatch { expected: s, got: q.len() });
                        }
                        let mut terms = vec![0.0; s];
                        for j in 0..s {
                            let p = lp[j].exp();
                            if p > 0.0 {
                                terms[j] = lp[j] - q[j].ln();
                            }
                        }
                        let kl: f64 = (0..s).map(|j| lp[j].exp() * terms[j]).sum();
                        total += kl;
                        for j in 0..s {
                            dlogits[i][j] = lp[j].exp() * (terms[j] - kl);
                        }
                    }
                    _ => {
                        let y = label_pos(item)?;
                        total -= lp[y];
                        for (j, g) in dlogits[i].iter_mut().enumerate() {
                            *g = lp[j].exp() - f64::from(u8::from(j == y));
                        }
                    }
                }
            }
            total
        }
    };
    if !loss.is_finite() {
        return Err(Error::NumericalOverflow);
    }

    // back through the cosine logits, normalization, tanh, text map and pooling
    let mut dpooled = DVector::zeros(enc.token_dim());
    for (j, fwd) in forwards.iter().enumerate() {
        let mut dw = DVector::zeros(enc.embed_dim());
        for (i, item) in batch.iter().enumerate() {
            dw.axpy(dlogits[i][j] / tau, item.z, 1.0);
        }
        let du = (&dw - &fwd.weight * fwd.weight.dot(&dw)) / fwd.norm;
        let da = du.component_mul(&fwd.activation.map(|u| 1.0 - u * u));
        dpooled += enc.text_map.tr_mul(&da);
    }
    dpooled /= (prompt.len() + 1) as f64;
    if dpooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow);
    }
    let grad = DMatrix::from_fn(prompt.len(), enc.token_dim(), |_, k| dpooled[k]);
    Ok((loss, grad))
}
