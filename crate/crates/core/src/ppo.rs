//! KL-regularized policy optimization for single-step episodes.
//!
//! Each episode is one `(s, a)` pair, so generalized advantage estimation
//! collapses to `A = R' - V(s)` with `R' = R_theta(s, a) - beta * kl`.
//! [`ppo_update`] ascends the clipped surrogate with a learned value
//! baseline; [`grpo_update`] replaces the baseline with per-state group
//! statistics and moves the KL term into the loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::nn::{Activation, Mlp, Trace};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::policy::{ActionDistribution, Policy, PolicySnapshot};
use crate::reward_model::RewardModel;
use crate::tasks::Task;

/// How the KL penalty enters the per-sample reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KlPenalty {
    /// `log pi(a|s) - log pi_ref(a|s)` at the sampled action; its expectation
    /// is the KL and it varies across actions, so it reaches the gradient.
    #[default]
    SampleLogRatio,
    /// Closed-form `KL(pi(.|s) || pi_ref(.|s))`, identical for every action
    /// in a state.
    Analytic,
}

/// Advantage estimator used by the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Learned value baseline.
    #[default]
    Ppo,
    /// Per-state group statistics over `group_size` actions.
    Grpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub estimator: Estimator,
    pub clip_epsilon: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    pub beta: f64,
    pub whiten_advantages: bool,
    /// Samples collected per update.
    pub batch_size: usize,
    pub kl_penalty: KlPenalty,
    /// Actions per state in GRPO mode.
    pub group_size: usize,
    pub policy_optimizer: OptimizerConfig,
    pub value_optimizer: OptimizerConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            estimator: Estimator::Ppo,
            clip_epsilon: 0.2,
            epochs: 4,
            minibatch_size: 250,
            value_coef: 0.5,
            beta: 0.05,
            whiten_advantages: true,
            batch_size: 1000,
            kl_penalty: KlPenalty::SampleLogRatio,
            group_size: 8,
            policy_optimizer: OptimizerConfig::adamw(3e-4),
            value_optimizer: OptimizerConfig::adamw(1e-3),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_epsilon.is_nan() || self.clip_epsilon <= 0.0 {
            return Err(Error::invalid(format!("clip epsilon must be positive, got {}", self.clip_epsilon)));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::invalid(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs, minibatch_size and batch_size must be positive"));
        }
        Ok(())
    }
}

/// `R' = R_theta - beta * kl`.
pub fn regularized_reward(rm_value: f64, kl: f64, beta: f64) -> f64 {
    rm_value - beta * kl
}

/// Clipped surrogate `min(rho A, clip(rho, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    unclipped.min(clipped)
}

/// `d/d rho` of [`clipped_surrogate`]: `A` where the unclipped branch is
/// active, otherwise 0.
fn clipped_surrogate_slope(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if unclipped <= clipped {
        advantage
    } else {
        0.0
    }
}

/// Scalar state-value network.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    net: Mlp,
}

impl ValueFunction {
    pub fn new(state_dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut dims = vec![state_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(ValueFunction {
            net: Mlp::uniform(&dims, activation, seed)?,
        })
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::DimensionMismatch {
                context: "value output",
                expected: 1,
                got: net.output_dim(),
            });
        }
        Ok(ValueFunction { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.net.forward(state)?[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlBatch<A> {
    /// Features of every state id the task can produce.
    pub state_table: Vec<Vec<f64>>,
    pub states: Vec<usize>,
    pub actions: Vec<A>,
    pub behavior_log_probs: Vec<f64>,
    pub rm_rewards: Vec<f64>,
    pub gold_rewards: Vec<f64>,
    pub kl_penalties: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    /// Consecutive samples sharing a state in GRPO mode.
    pub group_size: Option<usize>,
}

impl<A> RlBatch<A> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn mean(values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / values.len().max(1) as f64
    }
}

fn state_table<T: Task>(task: &T) -> Vec<Vec<f64>> {
    (0..task.n_states()).map(|s| task.state_features(s)).collect()
}

#[allow(clippy::too_many_arguments)]
fn collect_inner<T, P, R>(
    policy: &P,
    rm: &RewardModel,
    kl_ref: &PolicySnapshot<P>,
    task: &T,
    n_states_drawn: usize,
    per_state: usize,
    beta: f64,
    kl_mode: KlPenalty,
    rng: &mut R,
) -> Result<RlBatch<T::Action>>
where
    T: Task,
    P: Policy<Action = T::Action>,
    R: Rng + ?Sized,
{
    let table = state_table(task);
    let dists = table.iter().map(|f| policy.distribution(f)).collect::<Result<Vec<_>>>()?;
    let ref_dists = table.iter().map(|f| kl_ref.distribution(f)).collect::<Result<Vec<_>>>()?;
    let analytic = dists
        .iter()
        .zip(&ref_dists)
        .map(|(p, q)| p.kl(q))
        .collect::<Result<Vec<_>>>()?;
    let n = n_states_drawn * per_state;
    let mut batch = RlBatch {
        state_table: table,
        states: Vec::with_capacity(n),
        actions: Vec::with_capacity(n),
        behavior_log_probs: Vec::with_capacity(n),
        rm_rewards: Vec::with_capacity(n),
        gold_rewards: Vec::with_capacity(n),
        kl_penalties: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
        advantages: Vec::new(),
        value_targets: Vec::new(),
        group_size: (per_state > 1).then_some(per_state),
    };
    for _ in 0..n_states_drawn {
        let s = task.sample_state(rng);
        for _ in 0..per_state {
            let a = dists[s].sample(rng);
            let lp = dists[s].log_prob(&a);
            let kl = match kl_mode {
                KlPenalty::SampleLogRatio => lp - ref_dists[s].log_prob(&a),
                KlPenalty::Analytic => analytic[s],
            };
            let r = rm.score(task, s, &a)?;
            batch.gold_rewards.push(task.gold_reward(s, &a)?);
            batch.rm_rewards.push(r);
            batch.kl_penalties.push(kl);
            batch.rewards.push(regularized_reward(r, kl, beta));
            batch.behavior_log_probs.push(lp);
            batch.states.push(s);
            batch.actions.push(a);
        }
    }
    ensure_finite("batch rewards", &batch.rewards)?;
    Ok(batch)
}

/// On-policy collection of `n` single-step episodes scored by `rm` with the
/// KL penalty taken against `kl_ref`.
#[allow(clippy::too_many_arguments)]
pub fn collect_batch<T, P, R>(
    policy: &P,
    rm: &RewardModel,
    kl_ref: &PolicySnapshot<P>,
    task: &T,
    n: usize,
    beta: f64,
    kl_mode: KlPenalty,
    rng: &mut R,
) -> Result<RlBatch<T::Action>>
where
    T: Task,
    P: Policy<Action = T::Action>,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    collect_inner(policy, rm, kl_ref, task, n, 1, beta, kl_mode, rng)
}

/// Collects `n_groups` states with `group_size` actions each. The reward
/// carries no KL penalty; [`grpo_update`] adds it to the loss instead.
pub fn collect_groups<T, P, R>(
    policy: &P,
    rm: &RewardModel,
    kl_ref: &PolicySnapshot<P>,
    task: &T,
    n_groups: usize,
    group_size: usize,
    rng: &mut R,
) -> Result<RlBatch<T::Action>>
where
    T: Task,
    P: Policy<Action = T::Action>,
    R: Rng + ?Sized,
{
    if group_size < 2 {
        return Err(Error::invalid(format!("GRPO needs at least 2 actions per state, got {group_size}")));
    }
    if n_groups == 0 {
        return Err(Error::invalid("n_groups must be positive"));
    }
    let mut batch = collect_inner(policy, rm, kl_ref, task, n_groups, group_size, 0.0, KlPenalty::SampleLogRatio, rng)?;
    batch.group_size = Some(group_size);
    Ok(batch)
}

/// Subtracts the mean and divides by the (population) standard deviation;
/// with zero spread only the mean is removed.
pub fn whiten(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v -= mean;
        if std > 0.0 {
            *v /= std;
        }
    }
}

/// Fills `advantages = R' - V(s)` (whitened if asked) and `value_targets = R'`.
pub fn compute_advantages<A>(batch: &mut RlBatch<A>, value_fn: &ValueFunction, whiten_advantages: bool) -> Result<()> {
    let values = batch
        .state_table
        .iter()
        .map(|f| value_fn.value(f))
        .collect::<Result<Vec<_>>>()?;
    batch.value_targets = batch.rewards.clone();
    batch.advantages = batch
        .states
        .iter()
        .zip(&batch.rewards)
        .map(|(&s, r)| r - values[s])
        .collect();
    if whiten_advantages {
        whiten(&mut batch.advantages);
    }
    ensure_finite("advantages", &batch.advantages)
}

/// Group-relative advantages: `(R - mean_g) / std_g` per consecutive group,
/// mean-centering only where a group has zero spread.
pub fn grpo_advantages(rewards: &[f64], group_size: usize) -> Result<Vec<f64>> {
    if group_size < 2 {
        return Err(Error::invalid(format!("GRPO needs at least 2 actions per state, got {group_size}")));
    }
    if !rewards.len().is_multiple_of(group_size) {
        return Err(Error::invalid(format!(
            "{} rewards do not split into groups of {group_size}",
            rewards.len()
        )));
    }
    let mut out = rewards.to_vec();
    for group in out.chunks_mut(group_size) {
        whiten(group);
    }
    Ok(out)
}

/// Per-minibatch quantities shared by the loss and its gradient.
struct StateCache<D> {
    dists: Vec<Option<D>>,
    grads: Vec<Vec<f64>>,
}

impl<D: ActionDistribution> StateCache<D> {
    fn build<P: Policy<Dist = D>>(policy: &P, table: &[Vec<f64>], states: impl Iterator<Item = usize>) -> Result<Self> {
        let mut dists: Vec<Option<D>> = vec![None; table.len()];
        for s in states {
            if dists[s].is_none() {
                dists[s] = Some(policy.distribution(&table[s])?);
            }
        }
        let grads = dists
            .iter()
            .map(|d| d.as_ref().map_or_else(Vec::new, |d| vec![0.0; d.num_params()]))
            .collect();
        Ok(StateCache { dists, grads })
    }

    fn dist(&self, s: usize) -> &D {
        self.dists[s].as_ref().expect("state cached")
    }

    fn backprop<P: Policy<Dist = D>>(&self, policy: &P, table: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; policy.num_params()];
        for (s, g) in self.grads.iter().enumerate() {
            if self.dists[s].is_some() {
                policy.accumulate_param_grad(&table[s], g, &mut out)?;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SurrogateStats {
    /// Mean clipped surrogate over the minibatch.
    pub surrogate: f64,
    pub clip_fraction: f64,
}

/// Loss `-mean(clipped surrogate)` over `indices` and its gradient.
pub fn ppo_surrogate_loss_grad<P: Policy>(
    policy: &P,
    batch: &RlBatch<P::Action>,
    indices: &[usize],
    epsilon: f64,
) -> Result<(f64, Vec<f64>, SurrogateStats)> {
    let mut cache = StateCache::build(policy, &batch.state_table, indices.iter().map(|&j| batch.states[j]))?;
    let scale = 1.0 / indices.len() as f64;
    let (mut total, mut clipped) = (0.0, 0usize);
    for &j in indices {
        let s = batch.states[j];
        let dist = cache.dist(s);
        let lp = dist.log_prob(&batch.actions[j]);
        let ratio = (lp - batch.behavior_log_probs[j]).exp();
        let adv = batch.advantages[j];
        total += clipped_surrogate(ratio, adv, epsilon);
        if (ratio - 1.0).abs() > epsilon {
            clipped += 1;
        }
        let slope = clipped_surrogate_slope(ratio, adv, epsilon);
        if slope != 0.0 {
            // d(-rho A)/d theta = -A rho d log pi / d theta
            let coef = -slope * ratio * scale;
            let dist = cache.dists[s].as_ref().expect("cached").clone();
            dist.accumulate_log_prob_grad(&batch.actions[j], coef, &mut cache.grads[s]);
        }
    }
    let grad = cache.backprop(policy, &batch.state_table)?;
    let surrogate = total * scale;
    ensure_finite("surrogate", &[surrogate])?;
    Ok((
        -surrogate,
        grad,
        SurrogateStats {
            surrogate,
            clip_fraction: clipped as f64 * scale,
        },
    ))
}

/// `beta * mean_j KL(pi(.|s_j) || ref(.|s_j))` over `indices` and its gradient.
pub fn kl_loss_grad<P: Policy>(
    policy: &P,
    kl_ref: &P,
    batch: &RlBatch<P::Action>,
    indices: &[usize],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut cache = StateCache::build(policy, &batch.state_table, indices.iter().map(|&j| batch.states[j]))?;
    let scale = beta / indices.len() as f64;
    let mut counts = vec![0usize; batch.state_table.len()];
    for &j in indices {
        counts[batch.states[j]] += 1;
    }
    let mut loss = 0.0;
    for (s, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let reference = kl_ref.distribution(&batch.state_table[s])?;
        let dist = cache.dist(s).clone();
        loss += scale * count as f64 * dist.kl(&reference)?;
        dist.accumulate_kl_grad(&reference, scale * count as f64, &mut cache.grads[s])?;
    }
    Ok((loss, cache.backprop(policy, &batch.state_table)?))
}

/// `value_coef * 0.5 * mean (V(s) - target)^2` over `indices` and its gradient.
pub fn value_loss_grad<A>(
    value_fn: &ValueFunction,
    batch: &RlBatch<A>,
    indices: &[usize],
    value_coef: f64,
) -> Result<(f64, Vec<f64>)> {
    let n_states = batch.state_table.len();
    let mut traces: Vec<Option<Trace>> = vec![None; n_states];
    let mut out_grad = vec![0.0; n_states];
    let scale = value_coef / indices.len() as f64;
    let mut loss = 0.0;
    for &j in indices {
        let s = batch.states[j];
        if traces[s].is_none() {
            traces[s] = Some(value_fn.net.trace(&batch.state_table[s])?);
        }
        let v = traces[s].as_ref().expect("traced").output()[0];
        let diff = v - batch.value_targets[j];
        loss += 0.5 * scale * diff * diff;
        out_grad[s] += scale * diff;
    }
    let mut grad = vec![0.0; value_fn.net.num_params()];
    for (s, trace) in traces.iter_mut().enumerate() {
        if let Some(t) = trace {
            if out_grad[s] != 0.0 {
                value_fn.net.backward_with(t, &[out_grad[s]], 1.0, &mut grad)?;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateStats {
    pub surrogate: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub kl_loss: f64,
}

/// Optimizer state for the policy and, in PPO mode, the value function.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub policy_opt: OptimizerState,
    pub value_opt: OptimizerState,
}

impl Learner {
    pub fn new(cfg: &PpoConfig, policy_params: usize, value_params: usize) -> Self {
        Learner {
            policy_opt: cfg.policy_optimizer.build(policy_params),
            value_opt: cfg.value_optimizer.build(value_params),
        }
    }

    pub fn reset(&mut self) {
        self.policy_opt.reset();
        self.value_opt.reset();
    }
}

fn minibatches<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if size < n {
        order.shuffle(rng);
    }
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Several epochs of minibatch ascent on the clipped surrogate, with the
/// value function regressed onto `R'` alongside. Advantages must already be
/// filled by [`compute_advantages`].
pub fn ppo_update<P, R>(
    policy: &mut P,
    value_fn: &mut ValueFunction,
    learner: &mut Learner,
    batch: &RlBatch<P::Action>,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats>
where
    P: Policy,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if batch.advantages.len() != batch.len() || batch.value_targets.len() != batch.len() {
        return Err(Error::invalid("compute advantages before updating"));
    }
    let mut stats = UpdateStats::default();
    let mut count = 0usize;
    for _ in 0..cfg.epochs {
        for idx in minibatches(batch.len(), cfg.minibatch_size, rng) {
            let (_, pgrad, s) = ppo_surrogate_loss_grad(policy, batch, &idx, cfg.clip_epsilon)?;
            let (vloss, vgrad) = value_loss_grad(value_fn, batch, &idx, cfg.value_coef)?;
            let mut params = policy.params();
            learner.policy_opt.step(&mut params, &pgrad)?;
            policy.set_params(&params)?;
            learner.value_opt.step(value_fn.net.params_mut(), &vgrad)?;
            stats.surrogate += s.surrogate;
            stats.clip_fraction += s.clip_fraction;
            stats.value_loss += vloss;
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    stats.surrogate /= c;
    stats.clip_fraction /= c;
    stats.value_loss /= c;
    Ok(stats)
}

/// Group-relative update: advantages from [`grpo_advantages`], clipped
/// surrogate plus `beta * KL(pi || kl_ref)` as a separate loss term.
pub fn grpo_update<P, R>(
    policy: &mut P,
    policy_opt: &mut OptimizerState,
    batch: &mut RlBatch<P::Action>,
    kl_ref: &PolicySnapshot<P>,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats>
where
    P: Policy,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let group = batch.group_size.unwrap_or(0);
    batch.advantages = grpo_advantages(&batch.rewards, group)?;
    batch.value_targets = batch.rewards.clone();
    let mut stats = UpdateStats::default();
    let mut count = 0usize;
    for _ in 0..cfg.epochs {
        for idx in minibatches(batch.len(), cfg.minibatch_size, rng) {
            let (_, mut grad, s) = ppo_surrogate_loss_grad(policy, batch, &idx, cfg.clip_epsilon)?;
            let (kl_loss, kl_grad) = kl_loss_grad(policy, kl_ref.policy(), batch, &idx, cfg.beta)?;
            grad.iter_mut().zip(&kl_grad).for_each(|(g, k)| *g += k);
            let mut params = policy.params();
            policy_opt.step(&mut params, &grad)?;
            policy.set_params(&params)?;
            stats.surrogate += s.surrogate;
            stats.clip_fraction += s.clip_fraction;
            stats.kl_loss += kl_loss;
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    stats.surrogate /= c;
    stats.clip_fraction /= c;
    stats.kl_loss /= c;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{CategoricalPolicy, GaussianPolicy};
    use crate::tasks::{make_discrete_task, ContinuousTask, DiscreteTask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gold_rm() -> RewardModel {
        // Identity on a single feature: the gold reward itself.
        RewardModel::new(Mlp::from_params(&[1, 1], &[], vec![1.0, 0.0], 0).unwrap()).unwrap()
    }

    /// Discrete task whose RM features are the gold reward.
    struct GoldFeatures(DiscreteTask);

    impl Task for GoldFeatures {
        type Action = usize;
        fn n_states(&self) -> usize {
            self.0.n_states()
        }
        fn state_probs(&self) -> &[f64] {
            self.0.state_probs()
        }
        fn state_features(&self, s: usize) -> Vec<f64> {
            self.0.state_features(s)
        }
        fn gold_reward(&self, s: usize, a: &usize) -> Result<f64> {
            self.0.gold_reward(s, a)
        }
        fn rm_input_dim(&self) -> usize {
            1
        }
        fn rm_features(&self, s: usize, a: &usize) -> Vec<f64> {
            vec![self.0.gold_reward_discrete(s, *a).unwrap()]
        }
    }

    #[test]
    fn regularized_reward_arithmetic() {
        assert_eq!(regularized_reward(1.3, 4.0, 0.0), 1.3);
        assert!((regularized_reward(1.0, 2.0, 0.05) - 0.9).abs() < 1e-15);
        assert_eq!(regularized_reward(0.7, 0.0, 0.05), 0.7);
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_surrogate(1.0, 0.8, 0.2), 0.8);
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn clipped_surrogate_is_a_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let rho: f64 = rng.random_range(0.0..3.0);
            let a: f64 = rng.random_range(-5.0..5.0);
            assert!(clipped_surrogate(rho, a, 0.2) <= rho * a);
        }
    }

    fn discrete_setup() -> (GoldFeatures, CategoricalPolicy) {
        let task = GoldFeatures(make_discrete_task(1, 3, 10, 2).unwrap());
        let logits: Vec<Vec<f64>> = (0..3).map(|s| (0..10).map(|a| ((s * 10 + a) as f64).cos()).collect()).collect();
        (task, CategoricalPolicy::from_logits(&logits).unwrap())
    }

    #[test]
    fn collection_with_gold_rm_and_no_beta() {
        let (task, policy) = discrete_setup();
        let snap = PolicySnapshot::new(&policy);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = collect_batch(&policy, &gold_rm(), &snap, &task, 500, 0.0, KlPenalty::SampleLogRatio, &mut rng).unwrap();
        assert_eq!(batch.rewards, batch.gold_rewards);
        assert!(batch.kl_penalties.iter().all(|&k| k == 0.0));
        for j in 0..batch.len() {
            let lp = policy.log_prob(&batch.state_table[batch.states[j]], &batch.actions[j]).unwrap();
            assert_eq!(lp, batch.behavior_log_probs[j]);
        }
        let analytic = collect_batch(&policy, &gold_rm(), &snap, &task, 50, 0.3, KlPenalty::Analytic, &mut rng).unwrap();
        assert!(analytic.kl_penalties.iter().all(|&k| k == 0.0));
    }

    #[test]
    fn advantages_against_value_extremes() {
        let (task, policy) = discrete_setup();
        let snap = PolicySnapshot::new(&policy);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut batch = collect_batch(&policy, &gold_rm(), &snap, &task, 300, 0.0, KlPenalty::SampleLogRatio, &mut rng).unwrap();
        let mut zero = ValueFunction::new(3, &[], Activation::Identity, 0).unwrap();
        zero.net_mut().params_mut().iter_mut().for_each(|p| *p = 0.0);
        compute_advantages(&mut batch, &zero, false).unwrap();
        assert_eq!(batch.advantages, batch.rewards);

        compute_advantages(&mut batch, &zero, true).unwrap();
        let n = batch.len() as f64;
        let mean = batch.advantages.iter().sum::<f64>() / n;
        let std = (batch.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12);

        // A single-state batch with constant reward: V = R' exactly gives A = 0.
        let one = DiscreteTask::from_tables(vec![vec![0.4, 0.4, 0.4]], vec![1.0], vec![vec![1.0], vec![0.0], vec![-1.0]]).unwrap();
        let task1 = GoldFeatures(one);
        let p = CategoricalPolicy::uniform(1, 3).unwrap();
        let snap1 = PolicySnapshot::new(&p);
        let mut b = collect_batch(&p, &gold_rm(), &snap1, &task1, 20, 0.0, KlPenalty::SampleLogRatio, &mut rng).unwrap();
        let exact = ValueFunction::from_net(Mlp::from_params(&[1, 1], &[], vec![0.0, 0.4], 0).unwrap()).unwrap();
        compute_advantages(&mut b, &exact, false).unwrap();
        assert!(b.advantages.iter().all(|&a| a == 0.0));
        // Zero spread with whitening: only the mean is removed.
        compute_advantages(&mut b, &exact, true).unwrap();
        assert!(b.advantages.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn grpo_group_advantages() {
        assert_eq!(grpo_advantages(&[3.0, 3.0, 3.0], 3).unwrap(), vec![0.0; 3]);
        assert_eq!(grpo_advantages(&[0.0, 1.0], 2).unwrap(), vec![-1.0, 1.0]);
        assert!(grpo_advantages(&[1.0], 1).is_err());
        assert!(grpo_advantages(&[1.0, 2.0, 3.0], 2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<f64> = (0..64).map(|_| rng.random_range(-4.0..4.0)).collect();
        for group in grpo_advantages(&r, 8).unwrap().chunks(8) {
            assert!(group.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    fn fd_check<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        let mut fd = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut p = x.to_vec();
            p[i] += h;
            let fp = f(&p);
            p[i] -= 2.0 * h;
            let fm = f(&p);
            fd[i] = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = fd.iter().zip(analytic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().chain(analytic).map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
    }

    #[test]
    fn surrogate_and_value_gradients_match_finite_differences() {
        let (task, base) = discrete_setup();
        let snap = PolicySnapshot::new(&base);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut batch = collect_batch(&base, &gold_rm(), &snap, &task, 64, 0.1, KlPenalty::SampleLogRatio, &mut rng).unwrap();
        let value = ValueFunction::new(3, &[6], Activation::Tanh, 1).unwrap();
        compute_advantages(&mut batch, &value, true).unwrap();
        let idx: Vec<usize> = (0..batch.len()).collect();
        // Move the policy so ratios differ from 1 without crossing clip edges.
        let mut policy = base.clone();
        let moved: Vec<f64> = policy.params().iter().map(|p| p + rng.random_range(-0.05..0.05)).collect();
        policy.set_params(&moved).unwrap();
        let (_, grad, _) = ppo_surrogate_loss_grad(&policy, &batch, &idx, 0.2).unwrap();
        let loss_at = |x: &[f64]| {
            let mut p = policy.clone();
            p.set_params(x).unwrap();
            ppo_surrogate_loss_grad(&p, &batch, &idx, 0.2).unwrap().0
        };
        fd_check(loss_at, &policy.params(), &grad);

        let (_, vgrad) = value_loss_grad(&value, &batch, &idx, 0.5).unwrap();
        let vloss_at = |x: &[f64]| {
            let mut v = value.clone();
            v.net_mut().set_params(x).unwrap();
            value_loss_grad(&v, &batch, &idx, 0.5).unwrap().0
        };
        fd_check(vloss_at, value.net().params(), &vgrad);

        let (_, kgrad) = kl_loss_grad(&policy, &base, &batch, &idx, 0.3).unwrap();
        let kloss_at = |x: &[f64]| {
            let mut p = policy.clone();
            p.set_params(x).unwrap();
            kl_loss_grad(&p, &base, &batch, &idx, 0.3).unwrap().0
        };
        fd_check(kloss_at, &policy.params(), &kgrad);
    }

    #[test]
    fn zero_value_loss_leaves_value_net() {
        let (task, policy) = discrete_setup();
        let snap = PolicySnapshot::new(&policy);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut batch = collect_batch(&policy, &gold_rm(), &snap, &task, 100, 0.0, KlPenalty::SampleLogRatio, &mut rng).unwrap();
        let mut value = ValueFunction::new(3, &[4], Activation::Tanh, 2).unwrap();
        compute_advantages(&mut batch, &value, true).unwrap();
        // Targets equal to current predictions.
        batch.value_targets = batch.states.iter().map(|&s| value.value(&batch.state_table[s]).unwrap()).collect();
        let before = value.clone();
        let cfg = PpoConfig::default();
        let mut learner = Learner::new(&cfg, policy.num_params(), value.net().num_params());
        let mut p = policy.clone();
        let stats = ppo_update(&mut p, &mut value, &mut learner, &batch, &cfg, &mut rng).unwrap();
        assert_eq!(stats.value_loss, 0.0);
        assert_eq!(value, before);
    }

    #[test]
    fn unit_ratio_surrogate_equals_mean_advantage() {
        let (task, policy) = discrete_setup();
        let snap = PolicySnapshot::new(&policy);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut batch = collect_batch(&policy, &gold_rm(), &snap, &task, 200, 0.0, KlPenalty::SampleLogRatio, &mut rng).unwrap();
        let value = ValueFunction::new(3, &[4], Activation::Tanh, 2).unwrap();
        compute_advantages(&mut batch, &value, false).unwrap();
        let idx: Vec<usize> = (0..batch.len()).collect();
        let (_, _, stats) = ppo_surrogate_loss_grad(&policy, &batch, &idx, 0.2).unwrap();
        let mean_adv = RlBatch::<usize>::mean(&batch.advantages);
        assert!((stats.surrogate - mean_adv).abs() < 1e-12);
        assert_eq!(stats.clip_fraction, 0.0);
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn huge_epsilon_matches_vanilla_policy_gradient() {
        let task = ContinuousTask;
        let policy = GaussianPolicy::network(1, &[16, 16], Activation::Relu, 2, 0.7f64.sqrt(), 3).unwrap();
        let mut policy = policy;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let jitter: Vec<f64> = policy.params().iter().map(|p| p + rng.random_range(-0.1..0.1)).collect();
        policy.set_params(&jitter).unwrap();
        let snap = PolicySnapshot::new(&policy);
        let rm = RewardModel::mlp(2, &[4], Activation::Tanh, 5).unwrap();
        let mut batch = collect_batch(&policy, &rm, &snap, &task, 512, 0.05, KlPenalty::SampleLogRatio, &mut rng).unwrap();
        let mut value = ValueFunction::new(1, &[8], Activation::Relu, 4).unwrap();
        compute_advantages(&mut batch, &value, false).unwrap();

        let mut pg = vec![0.0; policy.num_params()];
        for j in 0..batch.len() {
            let g = policy.log_prob_grad(&batch.state_table[0], &batch.actions[j]).unwrap();
            pg.iter_mut().zip(&g).for_each(|(p, gi)| *p += batch.advantages[j] * gi / batch.len() as f64);
        }
        let cfg = PpoConfig {
            clip_epsilon: 1e6,
            epochs: 1,
            minibatch_size: batch.len(),
            whiten_advantages: false,
            policy_optimizer: OptimizerConfig::sgd(1e-3),
            ..Default::default()
        };
        let mut learner = Learner::new(&cfg, policy.num_params(), value.net().num_params());
        let before = policy.params();
        let mut updated = policy.clone();
        ppo_update(&mut updated, &mut value, &mut learner, &batch, &cfg, &mut rng).unwrap();
        let delta: Vec<f64> = updated.params().iter().zip(&before).map(|(a, b)| a - b).collect();
        assert!(cosine(&delta, &pg) > 0.999);
    }

    #[test]
    fn grpo_requires_groups_and_improves_gold() {
        let (task, policy) = discrete_setup();
        let snap = PolicySnapshot::new(&policy);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(collect_groups(&policy, &gold_rm(), &snap, &task, 10, 1, &mut rng).is_err());
        let cfg = PpoConfig {
            beta: 0.01,
            minibatch_size: 64,
            policy_optimizer: OptimizerConfig::adamw(0.05),
            ..Default::default()
        };
        let mut p = policy.clone();
        let mut opt = cfg.policy_optimizer.build(p.num_params());
        let start = collect_groups(&p, &gold_rm(), &snap, &task, 200, 8, &mut rng).unwrap();
        for _ in 0..30 {
            let mut batch = collect_groups(&p, &gold_rm(), &snap, &task, 32, 8, &mut rng).unwrap();
            grpo_update(&mut p, &mut opt, &mut batch, &snap, &cfg, &mut rng).unwrap();
        }
        let end = collect_groups(&p, &gold_rm(), &snap, &task, 200, 8, &mut rng).unwrap();
        assert!(RlBatch::<usize>::mean(&end.gold_rewards) > RlBatch::<usize>::mean(&start.gold_rewards) + 0.3);
    }

    #[test]
    fn ppo_improves_gold_on_discrete_task() {
        let (task, policy) = discrete_setup();
        let snap = PolicySnapshot::new(&policy);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = PpoConfig {
            beta: 0.01,
            batch_size: 256,
            minibatch_size: 64,
            policy_optimizer: OptimizerConfig::adamw(0.05),
            ..Default::default()
        };
        let mut p = policy.clone();
        let mut value = ValueFunction::new(3, &[8], Activation::Tanh, 0).unwrap();
        let mut learner = Learner::new(&cfg, p.num_params(), value.net().num_params());
        let gold_before = collect_batch(&p, &gold_rm(), &snap, &task, 2000, 0.0, KlPenalty::SampleLogRatio, &mut rng).unwrap();
        for _ in 0..30 {
            let mut batch = collect_batch(&p, &gold_rm(), &snap, &task, cfg.batch_size, cfg.beta, cfg.kl_penalty, &mut rng).unwrap();
            compute_advantages(&mut batch, &value, cfg.whiten_advantages).unwrap();
            ppo_update(&mut p, &mut value, &mut learner, &batch, &cfg, &mut rng).unwrap();
        }
        let gold_after = collect_batch(&p, &gold_rm(), &snap, &task, 2000, 0.0, KlPenalty::SampleLogRatio, &mut rng).unwrap();
        assert!(RlBatch::<usize>::mean(&gold_after.gold_rewards) > RlBatch::<usize>::mean(&gold_before.gold_rewards) + 0.3);
    }
}
