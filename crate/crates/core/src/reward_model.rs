//! Bradley-Terry reward models: pairwise loss, (importance-)weighted
//! training, and ranking accuracy against the gold reward.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointReader, CheckpointWriter};
use crate::error::{ensure_finite, Error, Result};
use crate::nn::{Activation, Mlp, Trace};
use crate::optim::OptimizerConfig;
use crate::policy::{ActionDistribution, Policy};
use crate::preference::{PreferenceDataset, PreferencePair};
use crate::tasks::Task;
use crate::weights::effective_sample_size;

/// `-log sigmoid(x)` computed as `softplus(-x)` without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    let z = -x;
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pair loss as a function of the reward margin `R(a_w) - R(a_l)`.
pub fn bt_loss_from_margin(margin: f64) -> f64 {
    neg_log_sigmoid(margin)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    net: Mlp,
}

impl RewardModel {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::DimensionMismatch {
                context: "reward model output",
                expected: 1,
                got: net.output_dim(),
            });
        }
        Ok(RewardModel { net })
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        RewardModel::new(Mlp::uniform(&dims, activation, seed)?)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn reward(&self, features: &[f64]) -> Result<f64> {
        Ok(self.net.forward(features)?[0])
    }

    pub fn score<T: Task>(&self, task: &T, state: usize, action: &T::Action) -> Result<f64> {
        self.reward(&task.rm_features(state, action))
    }

    pub fn to_text(&self) -> String {
        let mut w = CheckpointWriter::new("reward-model");
        w.mlp("", &self.net);
        w.finish().to_string()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = CheckpointReader::new(text)?;
        r.expect_kind("reward-model")?;
        RewardModel::new(r.mlp("")?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RewardModel::from_text(&text)
    }
}

pub fn bt_loss<T: Task>(rm: &RewardModel, task: &T, pair: &PreferencePair<T::Action>) -> Result<f64> {
    let margin = rm.score(task, pair.state, &pair.action_w)? - rm.score(task, pair.state, &pair.action_l)?;
    Ok(bt_loss_from_margin(margin))
}

/// Gradient of [`bt_loss`] with respect to the reward model parameters.
pub fn bt_loss_grad<T: Task>(rm: &RewardModel, task: &T, pair: &PreferencePair<T::Action>) -> Result<Vec<f64>> {
    let fw = task.rm_features(pair.state, &pair.action_w);
    let fl = task.rm_features(pair.state, &pair.action_l);
    let mut grad = vec![0.0; rm.net.num_params()];
    let mut tw = rm.net.trace(&fw)?;
    let mut tl = rm.net.trace(&fl)?;
    let margin = tw.output()[0] - tl.output()[0];
    let dl_dm = -sigmoid(-margin);
    rm.net.backward_with(&mut tw, &[1.0], dl_dm, &mut grad)?;
    rm.net.backward_with(&mut tl, &[1.0], -dl_dm, &mut grad)?;
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmTrainConfig {
    pub epochs: usize,
    /// Pairs per gradient step; 0 means full batch.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig {
            epochs: 50,
            batch_size: 256,
            optimizer: OptimizerConfig::adamw(1e-2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmTrainReport {
    /// `(1/N) sum_j w_j l_j` over the whole dataset after training.
    pub final_loss: f64,
    pub epochs: usize,
    pub steps: usize,
    pub mean_weight: f64,
    pub max_weight: f64,
    pub ess: f64,
}

/// Minimizes `(1/N) sum_j w_j l_RM(row_j)` with minibatch descent.
/// `weights = None` is the unweighted loss.
pub fn train_rm<T, R>(
    rm: &mut RewardModel,
    task: &T,
    ds: &PreferenceDataset<T::Action>,
    weights: Option<&[f64]>,
    cfg: &RmTrainConfig,
    rng: &mut R,
) -> Result<RmTrainReport>
where
    T: Task,
    R: Rng + ?Sized,
{
    let n = ds.len();
    if n == 0 {
        return Err(Error::invalid("cannot train a reward model on an empty dataset"));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                context: "importance weights",
                expected: n,
                got: w.len(),
            });
        }
        ensure_finite("importance weights", w)?;
        if let Some(i) = w.iter().position(|&x| x < 0.0) {
            return Err(Error::invalid(format!("weight {i} is negative ({})", w[i])));
        }
    }
    let weight = |j: usize| weights.map_or(1.0, |w| w[j]);
    let dim = task.rm_input_dim();
    let mut fw = Vec::with_capacity(n * dim);
    let mut fl = Vec::with_capacity(n * dim);
    for p in &ds.pairs {
        fw.extend(task.rm_features(p.state, &p.action_w));
        fl.extend(task.rm_features(p.state, &p.action_l));
    }
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut opt = cfg.optimizer.build(rm.net.num_params());
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; rm.net.num_params()];
    let (mut tw, mut tl) = (Trace::default(), Trace::default());
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        if batch < n {
            order.shuffle(rng);
        }
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &j in chunk {
                let w = weight(j);
                if w == 0.0 {
                    continue;
                }
                rm.net.forward_into(&fw[j * dim..(j + 1) * dim], &mut tw)?;
                rm.net.forward_into(&fl[j * dim..(j + 1) * dim], &mut tl)?;
                let margin = tw.output()[0] - tl.output()[0];
                let coef = -sigmoid(-margin) * w * scale;
                rm.net.backward_with(&mut tw, &[1.0], coef, &mut grad)?;
                rm.net.backward_with(&mut tl, &[1.0], -coef, &mut grad)?;
            }
            opt.step(rm.net.params_mut(), &grad)?;
            steps += 1;
        }
    }
    let mut total = 0.0;
    for j in 0..n {
        let margin = rm.reward(&fw[j * dim..(j + 1) * dim])? - rm.reward(&fl[j * dim..(j + 1) * dim])?;
        total += weight(j) * bt_loss_from_margin(margin);
    }
    let all: Vec<f64> = (0..n).map(weight).collect();
    Ok(RmTrainReport {
        final_loss: total / n as f64,
        epochs: cfg.epochs,
        steps,
        mean_weight: all.iter().sum::<f64>() / n as f64,
        max_weight: all.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ess: effective_sample_size(&all),
    })
}

/// Agreement of the reward model with the gold reward on the ordering of
/// action pairs drawn i.i.d. from `policy`. Exact model ties count as a fair
/// coin flip; pairs the gold reward cannot order are redrawn.
pub fn rm_accuracy<T, P, R>(rm: &RewardModel, task: &T, policy: &P, n_pairs: usize, rng: &mut R) -> Result<f64>
where
    T: Task,
    P: Policy<Action = T::Action>,
    R: Rng + ?Sized,
{
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be positive"));
    }
    let dists = (0..task.n_states())
        .map(|s| policy.distribution(&task.state_features(s)))
        .collect::<Result<Vec<_>>>()?;
    let mut agree = 0usize;
    let mut done = 0usize;
    let mut attempts = 0usize;
    while done < n_pairs {
        attempts += 1;
        if attempts > 1000 * n_pairs {
            return Err(Error::Concentrated { draws: attempts - 1 });
        }
        let s = task.sample_state(rng);
        let a0 = dists[s].sample(rng);
        let a1 = dists[s].sample(rng);
        let g0 = task.gold_reward(s, &a0)?;
        let g1 = task.gold_reward(s, &a1)?;
        if g0 == g1 {
            continue;
        }
        let r0 = rm.score(task, s, &a0)?;
        let r1 = rm.score(task, s, &a1)?;
        let model_prefers_first = if r0 == r1 { rng.random_bool(0.5) } else { r0 > r1 };
        if model_prefers_first == (g0 > g1) {
            agree += 1;
        }
        done += 1;
    }
    Ok(agree as f64 / n_pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{CategoricalPolicy, GaussianPolicy, PolicySnapshot};
    use crate::preference::generate_dataset;
    use crate::tasks::{ContinuousTask, DiscreteTask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_rm(weights: &[f64], bias: f64) -> RewardModel {
        let mut p = weights.to_vec();
        p.push(bias);
        RewardModel::new(Mlp::from_params(&[weights.len(), 1], &[], p, 0).unwrap()).unwrap()
    }

    fn continuous_pair(w: Vec<f64>, l: Vec<f64>) -> PreferencePair<Vec<f64>> {
        PreferencePair {
            state: 0,
            action_w: w,
            action_l: l,
            logp1_w: 0.0,
            logp1_l: 0.0,
            gold_w: 1.0,
            gold_l: 0.0,
        }
    }

    #[test]
    fn loss_values() {
        assert!((bt_loss_from_margin(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bt_loss_from_margin(3f64.ln()) - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        let big = bt_loss_from_margin(-50.0);
        assert!(big.is_finite() && (big - 50.0).abs() < 1e-12);
        assert!(bt_loss_from_margin(800.0) >= 0.0);
        assert!((bt_loss_from_margin(-800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn equal_rewards_give_ln2() {
        let rm = linear_rm(&[0.0, 0.0], 0.3);
        let pair = continuous_pair(vec![0.1, 0.2], vec![-0.5, 1.0]);
        assert!((bt_loss(&rm, &ContinuousTask, &pair).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rm = RewardModel::mlp(2, &[4], Activation::Tanh, 3).unwrap();
        for _ in 0..50 {
            let pair = continuous_pair(
                vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
                vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
            );
            let base = bt_loss(&rm, &ContinuousTask, &pair).unwrap();
            let mut shifted = rm.clone();
            let n = shifted.net().num_params();
            shifted.net_mut().params_mut()[n - 1] += 7.25;
            let moved = bt_loss(&shifted, &ContinuousTask, &pair).unwrap();
            assert!((base - moved).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let rm = RewardModel::mlp(2, &[4], Activation::Tanh, trial).unwrap();
            let pair = continuous_pair(
                vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
                vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
            );
            let g = bt_loss_grad(&rm, &ContinuousTask, &pair).unwrap();
            let h = 1e-6;
            for i in 0..g.len() {
                let mut p = rm.clone();
                p.net_mut().params_mut()[i] += h;
                let fp = bt_loss(&p, &ContinuousTask, &pair).unwrap();
                p.net_mut().params_mut()[i] -= 2.0 * h;
                let fm = bt_loss(&p, &ContinuousTask, &pair).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "param {i}: {fd} vs {}", g[i]);
            }
        }
    }

    fn small_dataset() -> PreferenceDataset<Vec<f64>> {
        let sft = PolicySnapshot::new(&GaussianPolicy::direct(vec![0.0; 2], vec![0.5 * 0.7f64.ln(); 2]).unwrap());
        generate_dataset(&sft, &ContinuousTask, 400, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn unit_weights_equal_unweighted_training() {
        let ds = small_dataset();
        let cfg = RmTrainConfig {
            epochs: 3,
            batch_size: 64,
            ..Default::default()
        };
        let mut a = RewardModel::mlp(2, &[4], Activation::Tanh, 1).unwrap();
        let mut b = a.clone();
        let ra = train_rm(&mut a, &ContinuousTask, &ds, None, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let ones = vec![1.0; ds.len()];
        let rb = train_rm(&mut b, &ContinuousTask, &ds, Some(&ones), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.ess, ds.len() as f64);
    }

    #[test]
    fn zero_weights_leave_parameters() {
        let ds = small_dataset();
        let mut rm = RewardModel::mlp(2, &[4], Activation::Tanh, 1).unwrap();
        let before = rm.clone();
        let zeros = vec![0.0; ds.len()];
        train_rm(&mut rm, &ContinuousTask, &ds, Some(&zeros), &RmTrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(rm, before);
    }

    #[test]
    fn negative_or_misshaped_weights_rejected() {
        let ds = small_dataset();
        let mut rm = RewardModel::mlp(2, &[4], Activation::Tanh, 1).unwrap();
        let mut w = vec![1.0; ds.len()];
        w[7] = -0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            train_rm(&mut rm, &ContinuousTask, &ds, Some(&w), &RmTrainConfig::default(), &mut rng),
            Err(Error::InvalidArgument(_))
        ));
        assert!(train_rm(&mut rm, &ContinuousTask, &ds, Some(&w[..3]), &RmTrainConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn constant_weights_scale_the_sgd_learning_rate() {
        let ds = small_dataset();
        let c = 2.5;
        let cfg = |lr: f64| RmTrainConfig {
            epochs: 4,
            batch_size: 0,
            optimizer: OptimizerConfig::sgd(lr),
        };
        let mut a = RewardModel::mlp(2, &[4], Activation::Tanh, 8).unwrap();
        let mut b = a.clone();
        let w = vec![c; ds.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_rm(&mut a, &ContinuousTask, &ds, Some(&w), &cfg(0.05), &mut rng).unwrap();
        train_rm(&mut b, &ContinuousTask, &ds, None, &cfg(0.05 * c), &mut rng).unwrap();
        for (x, y) in a.net().params().iter().zip(b.net().params()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_two_action_toy_is_learned() {
        // Two actions, features [1] and [-1]; gold prefers action 0 in both states.
        let task = DiscreteTask::from_tables(
            vec![vec![1.0, -1.0], vec![0.5, -0.5]],
            vec![0.5, 0.5],
            vec![vec![1.0], vec![-1.0]],
        )
        .unwrap();
        let sft = PolicySnapshot::new(&CategoricalPolicy::uniform(2, 2).unwrap());
        let ds = generate_dataset(&sft, &task, 200, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rm = RewardModel::mlp(task.rm_input_dim(), &[4], Activation::Tanh, 2).unwrap();
        let cfg = RmTrainConfig {
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig::adamw(0.05),
        };
        train_rm(&mut rm, &task, &ds, None, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for p in &ds.pairs {
            assert!(rm.score(&task, p.state, &p.action_w).unwrap() > rm.score(&task, p.state, &p.action_l).unwrap());
        }
    }

    struct GoldOnly(DiscreteTask, f64);

    impl Task for GoldOnly {
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
        // Feed the (signed) gold value itself to an identity RM.
        fn rm_features(&self, s: usize, a: &usize) -> Vec<f64> {
            vec![self.1 * self.0.gold_reward_discrete(s, *a).unwrap()]
        }
    }

    #[test]
    fn accuracy_extremes() {
        let base = crate::tasks::make_discrete_task(3, 2, 12, 2).unwrap();
        let policy = CategoricalPolicy::uniform(2, 12).unwrap();
        let identity = linear_rm(&[1.0], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gold = GoldOnly(base.clone(), 1.0);
        assert_eq!(rm_accuracy(&identity, &gold, &policy, 2000, &mut rng).unwrap(), 1.0);
        let negated = GoldOnly(base.clone(), -1.0);
        assert_eq!(rm_accuracy(&identity, &negated, &policy, 2000, &mut rng).unwrap(), 0.0);
        let constant = linear_rm(&[0.0], 1.0);
        let n = 20_000;
        let acc = rm_accuracy(&constant, &gold, &policy, n, &mut rng).unwrap();
        assert!((acc - 0.5).abs() < 3.0 * 0.5 / (n as f64).sqrt(), "{acc}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let rm = RewardModel::mlp(2, &[4], Activation::Tanh, 12).unwrap();
        assert_eq!(RewardModel::from_text(&rm.to_text()).unwrap(), rm);
    }
}
