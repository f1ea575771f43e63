//! PPO over ordered Top-K skill subsets.
//!
//! The policy term uses the joint without-replacement log-probability of the
//! whole ordered subset in place of a single-action log-probability. Entropy
//! is taken over the full categorical distribution over skills. Gradients are
//! backpropagated by hand through the two-layer controller.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{
    entropy, joint_log_prob_grad, joint_log_prob_logits, score_skills, softmax, ControllerParams,
    RngState, SelectionStep,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub epochs_per_batch: usize,
    pub minibatch_size: usize,
    /// Episodes collected per PPO batch.
    pub batch_episodes: usize,
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 3e-4,
            epochs_per_batch: 4,
            minibatch_size: 64,
            batch_episodes: 4,
            normalize_advantages: true,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} must be in (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} must be in [0, 1]", self.lambda));
        }
        if self.clip_eps.is_nan() || self.clip_eps <= 0.0 {
            return bad(format!("clip_eps {} must be > 0", self.clip_eps));
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("value_coef and entropy_coef must be >= 0".into());
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be > 0".into());
        }
        if self.epochs_per_batch == 0 || self.minibatch_size == 0 || self.batch_episodes == 0 {
            return bad("epochs_per_batch, minibatch_size and batch_episodes must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub step: SelectionStep,
    pub reward: f64,
    pub done: bool,
    /// `log π_old(A|s)`, the joint log-probability at collection time.
    pub behavior_log_prob: f64,
}

/// `G_t = r_t + γ G_{t+1}`, with nothing after the last step.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// GAE with a zero bootstrap value after the final step.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::DimensionMismatch {
            left: rewards.len(),
            right: values.len(),
        });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// One training sample with its precomputed advantage and return target.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub step: SelectionStep,
    pub behavior_log_prob: f64,
    pub advantage: f64,
    pub target_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Loss terms for one sample under `params`, shared by the objective and
/// by callers that only need values.
struct SampleEval {
    z: Vec<f64>,
    biased: Vec<f64>,
    log_prob: f64,
    fwd: crate::controller::Forward,
}

fn eval_sample(params: &ControllerParams, s: &PpoSample) -> Result<SampleEval> {
    let fwd = params.forward(&s.step.state_features)?;
    let z = score_skills(&fwd.h, &s.step.skill_vectors)?;
    if s.step.logit_offsets.len() != z.len() {
        return Err(Error::DimensionMismatch {
            left: s.step.logit_offsets.len(),
            right: z.len(),
        });
    }
    let biased: Vec<f64> = z.iter().zip(&s.step.logit_offsets).map(|(a, b)| a + b).collect();
    let log_prob = joint_log_prob_logits(&biased, &s.step.action)?;
    Ok(SampleEval {
        z,
        biased,
        log_prob,
        fwd,
    })
}

/// Clipped-surrogate PPO loss (to minimize) and its analytic gradient:
/// `−mean[min(ρÂ, clip(ρ)Â)] + c_v·mean[(V − G)²] − c_H·mean[H(p)]`.
pub fn ppo_objective(samples: &[PpoSample], params: &ControllerParams, config: &TrainingConfig) -> Result<PpoOutput> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty PPO batch".into()));
    }
    let m = samples.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let (mut policy_loss, mut value_loss, mut ent_total, mut clipped) = (0.0, 0.0, 0.0, 0usize);
    let (lo, hi) = (1.0 - config.clip_eps, 1.0 + config.clip_eps);

    for s in samples {
        let ev = eval_sample(params, s)?;
        let ratio = (ev.log_prob - s.behavior_log_prob).exp();
        let adv = s.advantage;
        let unclipped = ratio * adv;
        let clipped_term = ratio.clamp(lo, hi) * adv;
        let (objective, d_obj_d_logp) = if clipped_term < unclipped {
            clipped += 1;
            (clipped_term, 0.0)
        } else {
            (unclipped, ratio * adv)
        };
        policy_loss -= objective / m;

        let p = softmax(&ev.z);
        let h_ent = entropy(&p);
        ent_total += h_ent / m;

        let diff = ev.fwd.value - s.target_return;
        value_loss += diff * diff / m;

        // dL/dz
        let mut grad_z = vec![0.0; ev.z.len()];
        if d_obj_d_logp != 0.0 {
            let jg = joint_log_prob_grad(&ev.biased, &s.step.action);
            for (g, j) in grad_z.iter_mut().zip(jg) {
                *g -= d_obj_d_logp * j / m;
            }
        }
        if config.entropy_coef != 0.0 {
            for (k, pk) in p.iter().enumerate() {
                let dh = if *pk > 0.0 { -pk * (pk.ln() + h_ent) } else { 0.0 };
                grad_z[k] -= config.entropy_coef * dh / m;
            }
        }
        let mut grad_h = vec![0.0; ev.fwd.h.len()];
        for (gz, u) in grad_z.iter().zip(&s.step.skill_vectors) {
            for (gh, ui) in grad_h.iter_mut().zip(u.as_slice()) {
                *gh += gz * ui;
            }
        }
        let grad_v = config.value_coef * 2.0 * diff / m;
        params.backward(&s.step.state_features, &ev.fwd, &grad_h, grad_v, &mut grad);
    }

    let loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * ent_total;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "PPO batch: loss={loss}, policy={policy_loss}, value={value_loss}, entropy={ent_total}"
        )));
    }
    Ok(PpoOutput {
        loss,
        grad,
        policy_loss,
        value_loss,
        entropy: ent_total,
        clip_fraction: clipped as f64 / m,
    })
}

/// Loss only, through the same forward path. Used by finite-difference checks.
pub fn ppo_loss(samples: &[PpoSample], params: &ControllerParams, config: &TrainingConfig) -> Result<f64> {
    let m = samples.len() as f64;
    let (lo, hi) = (1.0 - config.clip_eps, 1.0 + config.clip_eps);
    let mut total = 0.0;
    for s in samples {
        let ev = eval_sample(params, s)?;
        let ratio = (ev.log_prob - s.behavior_log_prob).exp();
        let obj = (ratio * s.advantage).min(ratio.clamp(lo, hi) * s.advantage);
        let diff = ev.fwd.value - s.target_return;
        total += (-obj + config.value_coef * diff * diff - config.entropy_coef * entropy(&softmax(&ev.z))) / m;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One bias-corrected Adam step, in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub samples: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Turns episodes into PPO samples: per-episode returns and GAE from the
/// values recorded at collection time, then optional batch normalization.
pub fn build_samples(episodes: &[Vec<Transition>], config: &TrainingConfig) -> Result<Vec<PpoSample>> {
    let mut samples = Vec::new();
    for ep in episodes {
        if ep.is_empty() {
            continue;
        }
        let rewards: Vec<f64> = ep.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = ep.iter().map(|t| t.step.value).collect();
        let returns = compute_returns(&rewards, config.gamma);
        let adv = compute_gae(&rewards, &values, config.gamma, config.lambda)?;
        for ((t, a), g) in ep.iter().zip(adv).zip(returns) {
            samples.push(PpoSample {
                step: t.step.clone(),
                behavior_log_prob: t.behavior_log_prob,
                advantage: a,
                target_return: g,
            });
        }
    }
    if config.normalize_advantages && samples.len() > 1 {
        let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
        normalize_advantages(&mut adv);
        for (s, a) in samples.iter_mut().zip(adv) {
            s.advantage = a;
        }
    }
    Ok(samples)
}

/// Optimizer plus shuffling RNG. `θ_old` is the policy that collected the
/// batch; it is refreshed once per batch.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainingConfig,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainingConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e65_7200);
        Ok(Self {
            config,
            adam: Adam::new(n_params),
            rng,
        })
    }

    /// Runs `epochs_per_batch` passes of shuffled minibatches over the
    /// episodes. A non-finite minibatch aborts the batch with an error; the
    /// updates already applied are kept.
    pub fn update(&mut self, params: &mut ControllerParams, episodes: &[Vec<Transition>]) -> Result<UpdateStats> {
        let samples = build_samples(episodes, &self.config)?;
        if samples.is_empty() {
            return Ok(UpdateStats::default());
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut stats = UpdateStats {
            samples: samples.len(),
            ..Default::default()
        };
        let mut n_mb = 0usize;
        for _ in 0..self.config.epochs_per_batch {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.minibatch_size) {
                let mb: Vec<PpoSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                let out = ppo_objective(&mb, params, &self.config)?;
                self.adam.step(&mut params.data, &out.grad, self.config.learning_rate);
                stats.policy_loss += out.policy_loss;
                stats.value_loss += out.value_loss;
                stats.entropy += out.entropy;
                stats.clip_fraction += out.clip_fraction;
                n_mb += 1;
            }
        }
        let n = n_mb as f64;
        stats.policy_loss /= n;
        stats.value_loss /= n;
        stats.entropy /= n;
        stats.clip_fraction /= n;
        Ok(stats)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// JSON checkpoint of the controller, its optimizer and the trainer RNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerCheckpoint {
    pub format: String,
    pub embed_dim: usize,
    pub hidden: usize,
    pub tensors: Vec<Tensor>,
    pub adam: Adam,
    pub rng: RngState,
}

pub const CHECKPOINT_FORMAT: &str = "skillmem-controller/1";

impl ControllerCheckpoint {
    pub fn capture(params: &ControllerParams, trainer: &Trainer) -> Self {
        let tensors = params
            .layout()
            .tensors()
            .iter()
            .map(|(name, shape, off)| Tensor {
                name: name.to_string(),
                shape: *shape,
                data: params.data[*off..*off + shape[0] * shape[1]].to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            embed_dim: params.embed_dim,
            hidden: params.hidden,
            tensors,
            adam: trainer.adam.clone(),
            rng: RngState::capture(&trainer.rng),
        }
    }

    pub fn params(&self) -> Result<ControllerParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", self.format)));
        }
        let layout = crate::controller::Layout::new(self.embed_dim, self.hidden);
        let mut data = vec![0.0; layout.len];
        for (name, shape, off) in layout.tensors() {
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            if t.shape != shape || t.data.len() != shape[0] * shape[1] {
                return Err(Error::Config(format!("tensor {name} has wrong shape")));
            }
            data[off..off + t.data.len()].copy_from_slice(&t.data);
        }
        Ok(ControllerParams {
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::joint_log_prob;
    use crate::embedding::EmbeddingVector;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn returns_examples() {
        let g = compute_returns(&[0.0, 0.0, 1.0], 0.9);
        let expect = [0.81, 0.9, 1.0];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(compute_returns(&[1.0, 2.0, 3.0], 1.0), vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn gae_single_step() {
        assert_eq!(compute_gae(&[0.7], &[0.2], 0.99, 0.95).unwrap(), vec![0.7 - 0.2]);
        assert!(compute_gae(&[0.7], &[], 0.99, 0.95).is_err());
    }

    #[test]
    fn adam_zero_grad_and_descent() {
        let mut adam = Adam::new(1);
        let mut x = vec![1.0];
        adam.step(&mut x, &[0.0], 0.1);
        assert_eq!(x, vec![1.0]);
        let mut adam = Adam::new(1);
        let g = 2.0 * x[0];
        adam.step(&mut x, &[g], 0.1);
        assert!(x[0] * x[0] < 1.0);
    }

    fn tiny_sample(rng: &mut ChaCha8Rng, params: &ControllerParams, n: usize, k: usize) -> PpoSample {
        let d = params.embed_dim;
        let state: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let skills: Vec<EmbeddingVector> = (0..n)
            .map(|_| {
                EmbeddingVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
                    .normalize()
            })
            .collect();
        let fwd = params.forward(&state).unwrap();
        let z = score_skills(&fwd.h, &skills).unwrap();
        let mut action: Vec<usize> = (0..n).collect();
        action.shuffle(rng);
        action.truncate(k);
        let lp = joint_log_prob_logits(&z, &action).unwrap();
        PpoSample {
            step: SelectionStep {
                state_features: state,
                h: fwd.h,
                logits: z.clone(),
                logit_offsets: vec![0.0; n],
                probs: softmax(&z),
                action,
                joint_log_prob: lp,
                value: fwd.value,
                skill_bank_version: 0,
                skill_vectors: skills,
            },
            behavior_log_prob: lp,
            advantage: rng.random_range(-1.0..1.0),
            target_return: rng.random_range(0.0..1.0),
        }
    }

    #[test]
    fn ratio_identity_at_behavior_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ControllerParams::init(3, 4, 2).unwrap();
        let samples: Vec<_> = (0..5).map(|_| tiny_sample(&mut rng, &params, 4, 2)).collect();
        let cfg = TrainingConfig::default();
        let out = ppo_objective(&samples, &params, &cfg).unwrap();
        let mean_adv = samples.iter().map(|s| s.advantage).sum::<f64>() / 5.0;
        assert!((out.policy_loss + mean_adv).abs() < 1e-12);
        assert_eq!(out.clip_fraction, 0.0);
    }

    #[test]
    fn zero_advantage_zero_policy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ControllerParams::init(3, 4, 2).unwrap();
        let mut samples: Vec<_> = (0..4).map(|_| tiny_sample(&mut rng, &params, 4, 2)).collect();
        samples.iter_mut().for_each(|s| s.advantage = 0.0);
        let cfg = TrainingConfig {
            value_coef: 0.0,
            entropy_coef: 0.0,
            ..Default::default()
        };
        let out = ppo_objective(&samples, &params, &cfg).unwrap();
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn positive_advantage_raises_joint_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ControllerParams::init(4, 6, 3).unwrap();
        let mut s = tiny_sample(&mut rng, &params, 5, 2);
        s.advantage = 1.0;
        let before = eval_sample(&params, &s).unwrap().log_prob;
        let cfg = TrainingConfig {
            value_coef: 0.0,
            entropy_coef: 0.0,
            ..Default::default()
        };
        let out = ppo_objective(std::slice::from_ref(&s), &params, &cfg).unwrap();
        for (p, g) in params.data.iter_mut().zip(&out.grad) {
            *p -= 1e-3 * g;
        }
        let after = eval_sample(&params, &s).unwrap().log_prob;
        assert!(after > before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = ControllerParams::init(3, 5, 1).unwrap();
        let trainer = Trainer::new(TrainingConfig::default(), params.len()).unwrap();
        let ck = ControllerCheckpoint::capture(&params, &trainer);
        let json = serde_json::to_string(&ck).unwrap();
        let back: ControllerCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back.params().unwrap(), params);
    }

    proptest! {
        #[test]
        fn clipping_bound(ratio in 0.01f64..5.0, adv in -3f64..3.0, eps in 0.01f64..1.0) {
            let obj = (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv);
            prop_assert!(obj <= (ratio * adv).max(ratio.clamp(1.0 - eps, 1.0 + eps) * adv));
            let wide = (ratio * adv).min(ratio.clamp(1.0 - 1e9, 1.0 + 1e9) * adv);
            prop_assert_eq!(wide, ratio * adv);
        }

        #[test]
        fn joint_from_probs_and_logits_agree(z in proptest::collection::vec(-4f64..4.0, 3..7)) {
            let p = softmax(&z);
            let a = joint_log_prob(&p, &[2, 0, 1]).unwrap();
            let b = joint_log_prob_logits(&z, &[2, 0, 1]).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
