//! Skill-selection policy.
//!
//! The state is `concat(embed(span), mean(retrieved memory embeddings))`. A
//! two-layer tanh MLP maps it to a query vector `h` in the embedding space and
//! each skill is scored by `h · u_i`, where `u_i` is the normalized embedding
//! of its description. Ordered Top-K subsets are drawn with Gumbel-Top-K and
//! scored with the sequential without-replacement probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::skill_bank::SkillBank;

/// Flat parameter vector for the policy MLP (`2D -> H -> D`) and the value
/// MLP (`2D -> H -> 1`). Gradients share the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub embed_dim: usize,
    pub hidden: usize,
    pub data: Vec<f64>,
}

/// Offsets of the eight tensors inside [`ControllerParams::data`].
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub input: usize,
    pub hidden: usize,
    pub out: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub v1: usize,
    pub c1: usize,
    pub v2: usize,
    pub c2: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(embed_dim: usize, hidden: usize) -> Self {
        let input = 2 * embed_dim;
        let out = embed_dim;
        let w1 = 0;
        let b1 = w1 + hidden * input;
        let w2 = b1 + hidden;
        let b2 = w2 + out * hidden;
        let v1 = b2 + out;
        let c1 = v1 + hidden * input;
        let v2 = c1 + hidden;
        let c2 = v2 + hidden;
        Self {
            input,
            hidden,
            out,
            w1,
            b1,
            w2,
            b2,
            v1,
            c1,
            v2,
            c2,
            len: c2 + 1,
        }
    }

    /// `(name, shape, offset)` for each tensor, in storage order.
    pub fn tensors(&self) -> [(&'static str, [usize; 2], usize); 8] {
        [
            ("policy.w1", [self.hidden, self.input], self.w1),
            ("policy.b1", [self.hidden, 1], self.b1),
            ("policy.w2", [self.out, self.hidden], self.w2),
            ("policy.b2", [self.out, 1], self.b2),
            ("value.w1", [self.hidden, self.input], self.v1),
            ("value.b1", [self.hidden, 1], self.c1),
            ("value.w2", [1, self.hidden], self.v2),
            ("value.b2", [1, 1], self.c2),
        ]
    }
}

/// Intermediate activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub policy_hidden: Vec<f64>,
    pub h: Vec<f64>,
    pub value_hidden: Vec<f64>,
    pub value: f64,
}

fn affine_tanh(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(i, bi)| (bi + dot(&w[i * n_in..(i + 1) * n_in], x)).tanh())
        .collect()
}

impl ControllerParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(embed_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("controller dimensions must be positive".into()));
        }
        let l = Layout::new(embed_dim, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; l.len];
        let mut fill = |start: usize, n: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut data[start..start + n] {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(l.w1, l.hidden * l.input, l.input, &mut rng);
        fill(l.w2, l.out * l.hidden, l.hidden, &mut rng);
        fill(l.v1, l.hidden * l.input, l.input, &mut rng);
        fill(l.v2, l.hidden, l.hidden, &mut rng);
        Ok(Self {
            embed_dim,
            hidden,
            data,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.embed_dim, self.hidden)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn forward(&self, state: &[f64]) -> Result<Forward> {
        let l = self.layout();
        if state.len() != l.input {
            return Err(Error::DimensionMismatch {
                left: state.len(),
                right: l.input,
            });
        }
        let d = &self.data;
        let policy_hidden = affine_tanh(&d[l.w1..l.b1], &d[l.b1..l.w2], state);
        let h = (0..l.out)
            .map(|i| d[l.b2 + i] + dot(&d[l.w2 + i * l.hidden..l.w2 + (i + 1) * l.hidden], &policy_hidden))
            .collect();
        let value_hidden = affine_tanh(&d[l.v1..l.c1], &d[l.c1..l.v2], state);
        let value = d[l.c2] + dot(&d[l.v2..l.c2], &value_hidden);
        Ok(Forward {
            policy_hidden,
            h,
            value_hidden,
            value,
        })
    }

    /// Accumulates into `grad` the parameter gradient given `dL/dh` and
    /// `dL/dvalue` at one state.
    pub fn backward(&self, state: &[f64], fwd: &Forward, grad_h: &[f64], grad_value: f64, grad: &mut [f64]) {
        let l = self.layout();
        let d = &self.data;
        // policy head
        let mut grad_hidden = vec![0.0; l.hidden];
        for (i, gh) in grad_h.iter().enumerate() {
            if *gh == 0.0 {
                continue;
            }
            grad[l.b2 + i] += gh;
            let row = l.w2 + i * l.hidden;
            for j in 0..l.hidden {
                grad[row + j] += gh * fwd.policy_hidden[j];
                grad_hidden[j] += gh * d[row + j];
            }
        }
        for j in 0..l.hidden {
            let gpre = grad_hidden[j] * (1.0 - fwd.policy_hidden[j] * fwd.policy_hidden[j]);
            if gpre == 0.0 {
                continue;
            }
            grad[l.b1 + j] += gpre;
            let row = l.w1 + j * l.input;
            for (k, x) in state.iter().enumerate() {
                grad[row + k] += gpre * x;
            }
        }
        // value head
        if grad_value != 0.0 {
            grad[l.c2] += grad_value;
            for j in 0..l.hidden {
                let a = fwd.value_hidden[j];
                grad[l.v2 + j] += grad_value * a;
                let gpre = grad_value * d[l.v2 + j] * (1.0 - a * a);
                grad[l.c1 + j] += gpre;
                let row = l.v1 + j * l.input;
                for (k, x) in state.iter().enumerate() {
                    grad[row + k] += gpre * x;
                }
            }
        }
    }
}

/// `concat(span_embedding, mean(memory_embeddings))`; the memory half is zero
/// when nothing was retrieved.
pub fn state_features(span: &EmbeddingVector, memories: &[&EmbeddingVector]) -> Result<Vec<f64>> {
    let dim = span.dim();
    let mut out = Vec::with_capacity(2 * dim);
    out.extend_from_slice(span.as_slice());
    let mut mean = vec![0.0; dim];
    for m in memories {
        if m.dim() != dim {
            return Err(Error::DimensionMismatch { left: m.dim(), right: dim });
        }
        for (acc, v) in mean.iter_mut().zip(m.as_slice()) {
            *acc += v;
        }
    }
    if !memories.is_empty() {
        let n = memories.len() as f64;
        mean.iter_mut().for_each(|v| *v /= n);
    }
    out.extend(mean);
    Ok(out)
}

/// Skill-description embeddings tagged with the bank version they were
/// computed for.
#[derive(Debug, Clone)]
pub struct SkillEmbeddings {
    pub bank_version: u64,
    pub vectors: Vec<EmbeddingVector>,
}

impl SkillEmbeddings {
    pub fn compute(bank: &SkillBank, embedder: &dyn Embedder) -> Result<Self> {
        let texts: Vec<&str> = bank.skills.iter().map(|s| s.description.as_str()).collect();
        let vectors = embedder
            .embed_batch(&texts)?
            .into_iter()
            .map(EmbeddingVector::normalize)
            .collect();
        Ok(Self {
            bank_version: bank.version,
            vectors,
        })
    }

    /// Recomputes only when the bank version changed.
    pub fn refresh(&mut self, bank: &SkillBank, embedder: &dyn Embedder) -> Result<()> {
        if self.bank_version != bank.version || self.vectors.len() != bank.len() {
            *self = Self::compute(bank, embedder)?;
        }
        Ok(())
    }
}

/// `z_i = h · u_i`.
pub fn score_skills(h: &[f64], skills: &[EmbeddingVector]) -> Result<Vec<f64>> {
    if skills.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty skill bank".into()));
    }
    skills
        .iter()
        .map(|u| {
            if u.dim() != h.len() {
                return Err(Error::DimensionMismatch { left: h.len(), right: u.dim() });
            }
            Ok(dot(h, u.as_slice()))
        })
        .collect()
}

pub fn log_sum_exp(z: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = z.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn check_action(n: usize, action: &[usize]) -> Result<()> {
    if action.is_empty() || action.len() > n {
        return Err(Error::InvalidArgument(format!(
            "action size {} must be in 1..={n}",
            action.len()
        )));
    }
    for (j, a) in action.iter().enumerate() {
        if *a >= n {
            return Err(Error::InvalidArgument(format!("action position {a} out of range {n}")));
        }
        if action[..j].contains(a) {
            return Err(Error::InvalidArgument(format!("duplicate action position {a}")));
        }
    }
    Ok(())
}

/// `Σ_j [ln p(a_j) − ln(1 − Σ_{ℓ<j} p(a_ℓ))]`. The remaining mass is summed
/// over the unselected positions rather than formed as `1 − prefix`.
pub fn joint_log_prob(p: &[f64], action: &[usize]) -> Result<f64> {
    check_action(p.len(), action)?;
    let mut taken = vec![false; p.len()];
    let mut total = 0.0;
    for &a in action {
        if p[a] <= 0.0 {
            return Err(Error::ImpossibleAction(a));
        }
        let remaining: f64 = p.iter().zip(&taken).filter(|(_, t)| !**t).map(|(v, _)| v).sum();
        total += p[a].ln() - remaining.ln();
        taken[a] = true;
    }
    Ok(total)
}

/// Joint log-probability straight from logits:
/// `Σ_j [z_{a_j} − logsumexp(z over positions not yet chosen)]`.
pub fn joint_log_prob_logits(z: &[f64], action: &[usize]) -> Result<f64> {
    check_action(z.len(), action)?;
    let mut taken = vec![false; z.len()];
    let mut total = 0.0;
    for &a in action {
        let lse = log_sum_exp(z.iter().zip(&taken).filter(|(_, t)| !**t).map(|(v, _)| *v));
        total += z[a] - lse;
        taken[a] = true;
    }
    Ok(total)
}

/// Gradient of [`joint_log_prob_logits`] with respect to `z`:
/// `Σ_j (e_{a_j} − q_j)` where `q_j` is the softmax restricted to the
/// positions still available at draw `j`.
pub fn joint_log_prob_grad(z: &[f64], action: &[usize]) -> Vec<f64> {
    let mut g = vec![0.0; z.len()];
    let mut taken = vec![false; z.len()];
    for &a in action {
        let lse = log_sum_exp(z.iter().zip(&taken).filter(|(_, t)| !**t).map(|(v, _)| *v));
        for (k, zk) in z.iter().enumerate() {
            if !taken[k] {
                g[k] -= (zk - lse).exp();
            }
        }
        g[a] += 1.0;
        taken[a] = true;
    }
    g
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

/// Gumbel-Top-K: perturb each logit with i.i.d. standard Gumbel noise and
/// return the K largest positions in descending perturbed order.
pub fn sample_topk<R: Rng + ?Sized>(z: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > z.len() {
        return Err(Error::InvalidArgument(format!("K={k} must be in 1..={}", z.len())));
    }
    let perturbed: Vec<f64> = z.iter().map(|v| v + gumbel(rng)).collect();
    Ok(top_indices(&perturbed, k))
}

/// The K largest logits, ties broken by lower position.
pub fn greedy_topk(z: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > z.len() {
        return Err(Error::InvalidArgument(format!("K={k} must be in 1..={}", z.len())));
    }
    Ok(top_indices(z, k))
}

fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*b].total_cmp(&values[*a]).then(a.cmp(b)));
    idx.truncate(k);
    idx
}

/// Linearly decaying new-skill mass target: `τ0 (1 − t/T)` within the window,
/// zero afterwards.
pub fn exploration_threshold(t_since_evolve: u64, tau0: f64, t_explore: u64) -> f64 {
    if t_explore == 0 || t_since_evolve >= t_explore {
        return 0.0;
    }
    tau0 * (1.0 - t_since_evolve as f64 / t_explore as f64)
}

/// Adds the smallest uniform logit gain to `new_positions` that brings their
/// softmax mass up to `tau`. Returns the adjusted logits and the gain applied.
pub fn apply_new_skill_bias(z: &[f64], new_positions: &[usize], tau: f64) -> Result<(Vec<f64>, f64)> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("exploration threshold {tau} must be in [0, 1)")));
    }
    if tau == 0.0 {
        return Ok((z.to_vec(), 0.0));
    }
    if new_positions.is_empty() {
        return Err(Error::InvalidArgument("positive threshold needs new skills".into()));
    }
    let mut is_new = vec![false; z.len()];
    for &p in new_positions {
        if p >= z.len() {
            return Err(Error::InvalidArgument(format!("new skill position {p} out of range")));
        }
        is_new[p] = true;
    }
    let ln_new = log_sum_exp(z.iter().zip(&is_new).filter(|(_, n)| **n).map(|(v, _)| *v));
    let ln_old = log_sum_exp(z.iter().zip(&is_new).filter(|(_, n)| !**n).map(|(v, _)| *v));
    if ln_old == f64::NEG_INFINITY {
        return Ok((z.to_vec(), 0.0));
    }
    let mass_new = 1.0 / (1.0 + (ln_old - ln_new).exp());
    if mass_new >= tau {
        return Ok((z.to_vec(), 0.0));
    }
    let delta = tau.ln() - (1.0 - tau).ln() + ln_old - ln_new;
    let out = z
        .iter()
        .zip(&is_new)
        .map(|(v, n)| if *n { v + delta } else { *v })
        .collect();
    Ok((out, delta))
}

/// One controller decision, kept for the PPO update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub state_features: Vec<f64>,
    pub h: Vec<f64>,
    pub logits: Vec<f64>,
    /// Per-skill additive offsets (exploration gain) used at sampling time.
    pub logit_offsets: Vec<f64>,
    pub probs: Vec<f64>,
    pub action: Vec<usize>,
    pub joint_log_prob: f64,
    pub value: f64,
    pub skill_bank_version: u64,
    /// Normalized skill-description embeddings the logits were scored
    /// against, one row per skill.
    #[serde(skip)]
    pub skill_vectors: Vec<EmbeddingVector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Gumbel-Top-K sampling.
    Sample,
    /// Deterministic Top-K of the logits.
    Greedy,
    /// Uniformly random ordered subset (ablation baseline).
    Uniform,
}

/// Runs the policy for one state: scores, optional exploration gain, and
/// Top-K selection.
pub fn select<R: Rng + ?Sized>(
    params: &ControllerParams,
    state: Vec<f64>,
    skills: &SkillEmbeddings,
    k: usize,
    mode: SelectionMode,
    exploration: Option<(&[usize], f64)>,
    rng: &mut R,
) -> Result<SelectionStep> {
    let fwd = params.forward(&state)?;
    let logits = score_skills(&fwd.h, &skills.vectors)?;
    let k = k.min(logits.len());
    let (biased, offsets) = match exploration {
        Some((new, tau)) if tau > 0.0 && !new.is_empty() && mode == SelectionMode::Sample => {
            let (b, delta) = apply_new_skill_bias(&logits, new, tau)?;
            let mut off = vec![0.0; logits.len()];
            if delta != 0.0 {
                for &p in new {
                    off[p] = delta;
                }
            }
            (b, off)
        }
        _ => (logits.clone(), vec![0.0; logits.len()]),
    };
    let action = match mode {
        SelectionMode::Sample => sample_topk(&biased, k, rng)?,
        SelectionMode::Greedy => greedy_topk(&biased, k)?,
        SelectionMode::Uniform => sample_topk(&vec![0.0; biased.len()], k, rng)?,
    };
    let joint = joint_log_prob_logits(&biased, &action)?;
    let probs = softmax(&biased);
    Ok(SelectionStep {
        state_features: state,
        h: fwd.h,
        logits,
        logit_offsets: offsets,
        probs,
        action,
        joint_log_prob: joint,
        value: fwd.value,
        skill_bank_version: skills.bank_version,
        skill_vectors: skills.vectors.clone(),
    })
}

/// Serializable ChaCha stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed_hex: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| Error::Config(format!("rng state: {m}"));
        if self.seed_hex.len() != 64 {
            return Err(bad("seed must be 32 bytes of hex"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad("bad hex"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("bad word position"))?);
        Ok(rng)
    }
}
