//! The outer loop: reward model retraining under importance weights, KL
//! reference switches and value/optimizer resets around PPO phases.
//!
//! Iteration `i` of `m`:
//! 1. weight every preference pair by `pi^i / pi^1` (all ones at `i = 1`),
//! 2. fit a fresh reward model on the weighted loss,
//! 3. move the KL reference to a snapshot of `pi^i`,
//! 4. reset the value network and optimizer state,
//! 5. spend `k` policy samples on PPO against `R_i - beta * KL(pi || pi^i)`.
//!
//! The ablation variants skip parts of steps 1-4 at boundaries `i >= 2`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_mlp;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_policy, expected_kl, win_rate, write_csv, MetricsRow, WeightRow};
use crate::nn::Activation;
use crate::policy::{Policy, PolicySnapshot};
use crate::ppo::{
    collect_batch, collect_groups, compute_advantages, grpo_update, ppo_update, Estimator, Learner, PpoConfig,
    RlBatch, UpdateStats, ValueFunction,
};
use crate::preference::PreferenceDataset;
use crate::reward_model::{rm_accuracy, train_rm, RewardModel, RmTrainConfig};
use crate::tasks::Task;
use crate::weights::{dataset_weights, IwConfig};

/// Independent random streams derived from one run seed.
pub mod streams {
    use super::*;

    pub const RM_TRAIN: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const VALUE_INIT: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const TASK: u64 = 6;
    pub const POLICY_INIT: u64 = 7;
    /// Reward model initialization for iteration `i` uses `RM_INIT + i`.
    pub const RM_INIT: u64 = 100;

    pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        r
    }

    pub fn seed(seed: u64, stream: u64) -> u64 {
        rng(seed, stream).next_u64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcrmSchedule {
    /// Outer iterations `m`.
    pub iterations: usize,
    /// Policy samples per iteration `k`.
    pub samples_per_iteration: usize,
    pub iw: IwConfig,
    pub reset_value: bool,
    pub reset_optimizer: bool,
    /// Start each retraining from the previous reward model instead of a
    /// fresh initialization.
    pub warm_start_rm: bool,
}

impl Default for OcrmSchedule {
    fn default() -> Self {
        OcrmSchedule {
            iterations: 3,
            samples_per_iteration: 200_000,
            iw: IwConfig::default(),
            reset_value: true,
            reset_optimizer: true,
            warm_start_rm: false,
        }
    }
}

impl OcrmSchedule {
    pub fn total_samples(&self) -> usize {
        self.iterations * self.samples_per_iteration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub rm_hidden: Vec<usize>,
    pub rm_activation: Activation,
    pub policy_hidden: Vec<usize>,
    pub policy_activation: Activation,
    pub value_hidden: Vec<usize>,
    pub value_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            rm_hidden: vec![4],
            rm_activation: Activation::Tanh,
            policy_hidden: vec![64, 64],
            policy_activation: Activation::Relu,
            value_hidden: vec![64, 64],
            value_activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fill accuracy and win rate every this many updates; 0 only at the
    /// last update of each iteration.
    pub every: usize,
    pub accuracy_pairs: usize,
    pub win_pairs: usize,
    /// Fresh samples for the end-of-run gold estimate.
    pub final_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            every: 10,
            accuracy_pairs: 2000,
            win_pairs: 2000,
            final_samples: 20_000,
        }
    }
}

/// Everything besides the task, the SFT snapshot and the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSetup {
    /// Set from the run seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub schedule: OcrmSchedule,
    pub ppo: PpoConfig,
    pub rm: RmTrainConfig,
    pub models: ModelConfig,
    pub eval: EvalConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.schedule.iw.validate()?;
        if self.schedule.iterations == 0 {
            return Err(Error::invalid("at least one iteration is required"));
        }
        if self.schedule.samples_per_iteration == 0 {
            return Err(Error::invalid("samples_per_iteration must be positive"));
        }
        if self.ppo.estimator == Estimator::Grpo {
            let g = self.ppo.group_size;
            if g < 2 || !self.ppo.batch_size.is_multiple_of(g) || !self.schedule.samples_per_iteration.is_multiple_of(g) {
                return Err(Error::invalid(format!(
                    "GRPO group size {g} must be at least 2 and divide batch_size and samples_per_iteration"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// One reward model, fixed KL reference, no resets.
    #[serde(rename = "ppo")]
    Ppo,
    /// Value and optimizer resets at boundaries only.
    #[serde(rename = "ppo+reset")]
    PpoReset,
    /// Resets plus the KL-reference switch, keeping the first reward model.
    #[serde(rename = "ppo+newkl")]
    PpoNewKl,
    #[serde(rename = "ocrm")]
    Ocrm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ppo, Variant::PpoReset, Variant::PpoNewKl, Variant::Ocrm];

    pub fn retrains_rm(self) -> bool {
        self == Variant::Ocrm
    }

    pub fn switches_kl(self) -> bool {
        matches!(self, Variant::PpoNewKl | Variant::Ocrm)
    }

    pub fn resets(self) -> bool {
        self != Variant::Ppo
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ppo => "ppo",
            Variant::PpoReset => "ppo+reset",
            Variant::PpoNewKl => "ppo+newkl",
            Variant::Ocrm => "ocrm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}; expected ppo, ppo+reset, ppo+newkl or ocrm")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub gold: f64,
    /// Mean score under the reward model of the last iteration.
    pub rm: f64,
    /// Mean score under the first reward model.
    pub initial_rm: f64,
    pub kl_to_sft: f64,
    pub win_rate: f64,
    /// Accuracy of the last reward model on pairs from the final policy; NaN
    /// when the policy gives no gold-distinguishable pairs.
    pub rm_accuracy: f64,
}

/// Live state of a run between updates.
#[derive(Debug, Clone)]
pub struct RunState<P> {
    pub policy: P,
    pub rm: RewardModel,
    pub kl_ref: PolicySnapshot<P>,
    pub value: ValueFunction,
    pub learner: Learner,
    pub iteration: usize,
    pub samples: usize,
    pub updates: usize,
    pub metrics: Vec<MetricsRow>,
    pub weight_reports: Vec<WeightRow>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome<P> {
    pub variant: Variant,
    pub policy: P,
    pub rm: RewardModel,
    pub initial_rm: RewardModel,
    pub kl_ref: PolicySnapshot<P>,
    pub value: ValueFunction,
    pub samples: usize,
    pub metrics: Vec<MetricsRow>,
    pub weight_reports: Vec<WeightRow>,
    pub final_eval: FinalEval,
    /// Boundary checkpoint directories written, in order.
    pub checkpoints: Vec<PathBuf>,
}

fn fresh_value<T: Task>(task: &T, setup: &TrainSetup) -> Result<ValueFunction> {
    let state_dim = task.state_features(0).len();
    ValueFunction::new(
        state_dim,
        &setup.models.value_hidden,
        setup.models.value_activation,
        streams::seed(setup.seed, streams::VALUE_INIT),
    )
}

fn write_checkpoint<P: Policy>(dir: &Path, state: &RunState<P>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    PolicySnapshot::new(&state.policy).save(&dir.join("policy.txt"))?;
    state.kl_ref.save(&dir.join("kl-ref.txt"))?;
    state.rm.save(&dir.join("rm.txt"))?;
    save_mlp(state.value.net(), &dir.join("value.txt"))
}

fn flush_logs<P>(out: &Path, state: &RunState<P>) -> Result<()> {
    write_csv(&state.metrics, &out.join("metrics.csv"))?;
    write_csv(&state.weight_reports, &out.join("weights-report.csv"))
}

/// RM accuracy, or `None` when the policy is so concentrated (for example
/// everything clamped to one corner) that no pair has distinct gold rewards.
fn accuracy_if_defined<T, P>(rm: &RewardModel, task: &T, policy: &P, n: usize, rng: &mut ChaCha8Rng) -> Result<Option<f64>>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    match rm_accuracy(rm, task, policy, n.max(1), rng) {
        Ok(a) => Ok(Some(a)),
        Err(Error::Concentrated { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

struct Evaluator<'a, T, P> {
    task: &'a T,
    sft: &'a PolicySnapshot<P>,
    cfg: EvalConfig,
    rng: ChaCha8Rng,
}

impl<T, P> Evaluator<'_, T, P>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    fn accuracy_and_win(&mut self, policy: &P, rm: &RewardModel) -> Result<(Option<f64>, Option<f64>)> {
        let acc = accuracy_if_defined(rm, self.task, policy, self.cfg.accuracy_pairs, &mut self.rng)?;
        let win = win_rate(policy, self.sft.policy(), self.task, self.cfg.win_pairs.max(1), &mut self.rng)?;
        Ok((acc, Some(win)))
    }
}

/// Runs one variant of the loop for `schedule.iterations` iterations.
///
/// With `out` set, every boundary writes `boundary-<i>/` with the policy,
/// KL reference, reward model and value network, the CSV logs are flushed
/// so an aborted run keeps its history, and `final/` is written at the end.
pub fn run_variant<T, P>(
    variant: Variant,
    task: &T,
    sft: &PolicySnapshot<P>,
    ds: &PreferenceDataset<T::Action>,
    setup: &TrainSetup,
    out: Option<&Path>,
) -> Result<RunOutcome<P>>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    setup.validate()?;
    if ds.snapshot_id != sft.id() {
        return Err(Error::invalid(format!(
            "dataset was generated by snapshot {} but the run starts from {}",
            ds.snapshot_id,
            sft.id()
        )));
    }
    let schedule = &setup.schedule;
    let ppo = &setup.ppo;
    let mut rm_rng = streams::rng(setup.seed, streams::RM_TRAIN);
    let mut rollout = streams::rng(setup.seed, streams::ROLLOUT);
    let mut eval = Evaluator {
        task,
        sft,
        cfg: setup.eval,
        rng: streams::rng(setup.seed, streams::EVAL),
    };

    let policy = sft.policy().clone();
    let value = fresh_value(task, setup)?;
    let learner = Learner::new(ppo, policy.num_params(), value.net().num_params());
    let placeholder = RewardModel::mlp(task.rm_input_dim(), &setup.models.rm_hidden, setup.models.rm_activation, 0)?;
    let mut state = RunState {
        policy,
        rm: placeholder,
        kl_ref: sft.clone(),
        value,
        learner,
        iteration: 0,
        samples: 0,
        updates: 0,
        metrics: Vec::new(),
        weight_reports: Vec::new(),
    };
    let mut initial_rm = None;
    let mut checkpoints = Vec::new();

    for i in 1..=schedule.iterations {
        state.iteration = i;
        let boundary = i > 1;
        if !boundary || variant.retrains_rm() {
            let report = dataset_weights(ds, &state.policy, task, &schedule.iw)?;
            let mut rm = match (&initial_rm, schedule.warm_start_rm) {
                (Some(_), true) => state.rm.clone(),
                _ => RewardModel::mlp(
                    task.rm_input_dim(),
                    &setup.models.rm_hidden,
                    setup.models.rm_activation,
                    streams::seed(setup.seed, streams::RM_INIT + i as u64),
                )?,
            };
            let fit = train_rm(&mut rm, task, ds, Some(&report.weights), &setup.rm, &mut rm_rng)?;
            state.weight_reports.push(WeightRow {
                iteration: i,
                samples: state.samples,
                retrained: true,
                mean_weight: report.mean,
                max_weight: report.max,
                min_weight: report.min,
                ess: report.ess,
                rm_loss: fit.final_loss,
            });
            if initial_rm.is_none() {
                initial_rm = Some(rm.clone());
            }
            state.rm = rm;
        }
        if boundary && variant.switches_kl() {
            state.kl_ref = PolicySnapshot::new(&state.policy);
        }
        if boundary && variant.resets() {
            if schedule.reset_value {
                state.value = fresh_value(task, setup)?;
                state.learner.value_opt.reset();
            }
            if schedule.reset_optimizer {
                state.learner.reset();
            }
        }
        if let Some(dir) = out {
            let path = dir.join(format!("boundary-{i}"));
            write_checkpoint(&path, &state)?;
            flush_logs(dir, &state)?;
            checkpoints.push(path);
        }

        let mut done = 0;
        while done < schedule.samples_per_iteration {
            let n = ppo.batch_size.min(schedule.samples_per_iteration - done);
            let kl_to_sft = expected_kl(&state.policy, sft.policy(), task)?;
            let kl_to_ref = expected_kl(&state.policy, state.kl_ref.policy(), task)?;
            let last_of_iteration = done + n >= schedule.samples_per_iteration;
            let evaluate = last_of_iteration || (setup.eval.every > 0 && (state.updates + 1) % setup.eval.every == 0);
            let (rm_accuracy, win) = if evaluate {
                eval.accuracy_and_win(&state.policy, &state.rm)?
            } else {
                (None, None)
            };
            let (batch, stats) = policy_step(&mut state, task, ppo, n, &mut rollout)?;
            done += batch.len();
            state.samples += batch.len();
            state.updates += 1;
            state.metrics.push(MetricsRow {
                samples: state.samples,
                iteration: i,
                update: state.updates,
                mean_rm: RlBatch::<T::Action>::mean(&batch.rm_rewards),
                mean_gold: RlBatch::<T::Action>::mean(&batch.gold_rewards),
                kl_to_sft,
                kl_to_ref,
                kl_penalty: RlBatch::<T::Action>::mean(&batch.kl_penalties),
                rm_accuracy,
                win_rate: win,
                surrogate: stats.surrogate,
                clip_fraction: stats.clip_fraction,
                value_loss: stats.value_loss,
            });
        }
    }

    let initial_rm = initial_rm.expect("first iteration always fits a reward model");
    let n_final = setup.eval.final_samples.max(1);
    let (gold, rm_score) = evaluate_policy(&state.policy, &state.rm, task, n_final, &mut eval.rng)?;
    let (_, initial_score) = evaluate_policy(&state.policy, &initial_rm, task, n_final, &mut eval.rng)?;
    let final_eval = FinalEval {
        gold,
        rm: rm_score,
        initial_rm: initial_score,
        kl_to_sft: expected_kl(&state.policy, sft.policy(), task)?,
        win_rate: win_rate(&state.policy, sft.policy(), task, setup.eval.win_pairs.max(1), &mut eval.rng)?,
        rm_accuracy: accuracy_if_defined(&state.rm, task, &state.policy, setup.eval.accuracy_pairs, &mut eval.rng)?
            .unwrap_or(f64::NAN),
    };
    if let Some(dir) = out {
        write_checkpoint(&dir.join("final"), &state)?;
        flush_logs(dir, &state)?;
    }
    Ok(RunOutcome {
        variant,
        policy: state.policy,
        rm: state.rm,
        initial_rm,
        kl_ref: state.kl_ref,
        value: state.value,
        samples: state.samples,
        metrics: state.metrics,
        weight_reports: state.weight_reports,
        final_eval,
        checkpoints,
    })
}

fn policy_step<T, P>(
    state: &mut RunState<P>,
    task: &T,
    ppo: &PpoConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(RlBatch<T::Action>, UpdateStats)>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    match ppo.estimator {
        Estimator::Ppo => {
            let mut batch = collect_batch(&state.policy, &state.rm, &state.kl_ref, task, n, ppo.beta, ppo.kl_penalty, rng)?;
            compute_advantages(&mut batch, &state.value, ppo.whiten_advantages)?;
            let stats = ppo_update(&mut state.policy, &mut state.value, &mut state.learner, &batch, ppo, rng)?;
            Ok((batch, stats))
        }
        Estimator::Grpo => {
            let groups = n / ppo.group_size;
            let mut batch = collect_groups(&state.policy, &state.rm, &state.kl_ref, task, groups, ppo.group_size, rng)?;
            let stats = grpo_update(&mut state.policy, &mut state.learner.policy_opt, &mut batch, &state.kl_ref, ppo, rng)?;
            Ok((batch, stats))
        }
    }
}

/// The full method.
pub fn run_ocrm<T, P>(
    task: &T,
    sft: &PolicySnapshot<P>,
    ds: &PreferenceDataset<T::Action>,
    setup: &TrainSetup,
    out: Option<&Path>,
) -> Result<RunOutcome<P>>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    run_variant(Variant::Ocrm, task, sft, ds, setup, out)
}

/// Standard PPO-RLHF: one unweighted reward model and the SFT policy as KL
/// reference for `total_samples` samples.
pub fn run_ppo_baseline<T, P>(
    task: &T,
    sft: &PolicySnapshot<P>,
    ds: &PreferenceDataset<T::Action>,
    total_samples: usize,
    setup: &TrainSetup,
    out: Option<&Path>,
) -> Result<RunOutcome<P>>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    let mut single = setup.clone();
    single.schedule.iterations = 1;
    single.schedule.samples_per_iteration = total_samples;
    run_variant(Variant::Ppo, task, sft, ds, &single, out)
}

pub fn run_ablation<T, P>(
    variant: Variant,
    task: &T,
    sft: &PolicySnapshot<P>,
    ds: &PreferenceDataset<T::Action>,
    setup: &TrainSetup,
    out: Option<&Path>,
) -> Result<RunOutcome<P>>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    run_variant(variant, task, sft, ds, setup, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerConfig;
    use crate::policy::CategoricalPolicy;
    use crate::preference::generate_dataset;
    use crate::tasks::{make_discrete_task, DiscreteTask};

    fn small_setup() -> TrainSetup {
        let mut s = TrainSetup {
            seed: 3,
            ..Default::default()
        };
        s.schedule.iterations = 3;
        s.schedule.samples_per_iteration = 600;
        s.ppo.batch_size = 200;
        s.ppo.minibatch_size = 100;
        s.ppo.epochs = 2;
        s.ppo.policy_optimizer = OptimizerConfig::adamw(0.02);
        s.rm.epochs = 5;
        s.rm.batch_size = 0;
        s.models.value_hidden = vec![8];
        s.eval = EvalConfig {
            every: 2,
            accuracy_pairs: 100,
            win_pairs: 100,
            final_samples: 200,
        };
        s
    }

    fn discrete() -> (DiscreteTask, PolicySnapshot<CategoricalPolicy>, PreferenceDataset<usize>) {
        let task = make_discrete_task(5, 2, 12, 3).unwrap();
        let sft = PolicySnapshot::new(&CategoricalPolicy::uniform(2, 12).unwrap());
        let mut rng = streams::rng(9, streams::DATASET);
        let ds = generate_dataset(&sft, &task, 300, 9, &mut rng).unwrap();
        (task, sft, ds)
    }

    #[test]
    fn sample_count_and_boundaries() {
        let (task, sft, ds) = discrete();
        let setup = small_setup();
        let dir = tempfile::tempdir().unwrap();
        let out = run_ocrm(&task, &sft, &ds, &setup, Some(dir.path())).unwrap();
        assert_eq!(out.samples, setup.schedule.total_samples());
        assert_eq!(out.metrics.last().unwrap().samples, 1800);
        assert!(out.metrics.windows(2).all(|w| w[0].samples < w[1].samples));
        assert_eq!(out.checkpoints.len(), 3);
        assert_eq!(out.weight_reports.len(), 3);
        for i in 1..=3 {
            assert!(dir.path().join(format!("boundary-{i}/policy.txt")).exists());
        }
        assert!(dir.path().join("final/rm.txt").exists());
        // Iteration 1 trains on unit weights.
        let first = &out.weight_reports[0];
        assert_eq!((first.mean_weight, first.min_weight, first.max_weight), (1.0, 1.0, 1.0));
    }

    #[test]
    fn kl_reference_reproduces_pre_boundary_policy() {
        let (task, sft, ds) = discrete();
        let dir = tempfile::tempdir().unwrap();
        run_ocrm(&task, &sft, &ds, &small_setup(), Some(dir.path())).unwrap();
        for i in 2..=3 {
            let kl_ref = PolicySnapshot::<CategoricalPolicy>::load(&dir.path().join(format!("boundary-{i}/kl-ref.txt"))).unwrap();
            let policy = PolicySnapshot::<CategoricalPolicy>::load(&dir.path().join(format!("boundary-{i}/policy.txt"))).unwrap();
            for s in 0..task.n_states() {
                let f = task.state_features(s);
                for a in 0..12 {
                    assert_eq!(kl_ref.log_prob(&f, &a).unwrap(), policy.log_prob(&f, &a).unwrap());
                }
            }
        }
    }

    #[test]
    fn reset_value_is_a_fresh_network() {
        let (task, sft, ds) = discrete();
        let dir = tempfile::tempdir().unwrap();
        let setup = small_setup();
        run_ocrm(&task, &sft, &ds, &setup, Some(dir.path())).unwrap();
        let fresh = fresh_value(&task, &setup).unwrap();
        for i in 1..=3 {
            let v = crate::checkpoint::load_mlp(&dir.path().join(format!("boundary-{i}/value.txt"))).unwrap();
            assert_eq!(&v, fresh.net());
        }
        let end = crate::checkpoint::load_mlp(&dir.path().join("final/value.txt")).unwrap();
        assert_ne!(&end, fresh.net());
    }

    #[test]
    fn single_iteration_matches_baseline() {
        let (task, sft, ds) = discrete();
        let mut setup = small_setup();
        setup.schedule.iterations = 1;
        let a = run_ocrm(&task, &sft, &ds, &setup, None).unwrap();
        let b = run_ppo_baseline(&task, &sft, &ds, setup.schedule.samples_per_iteration, &setup, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.final_eval, b.final_eval);
    }

    #[test]
    fn variants_agree_until_the_first_boundary() {
        let (task, sft, ds) = discrete();
        let setup = small_setup();
        let runs: Vec<_> = Variant::ALL
            .iter()
            .map(|&v| run_ablation(v, &task, &sft, &ds, &setup, None).unwrap())
            .collect();
        let k = setup.schedule.samples_per_iteration;
        let prefix = |r: &RunOutcome<CategoricalPolicy>| -> Vec<MetricsRow> {
            r.metrics.iter().filter(|m| m.samples <= k).cloned().collect()
        };
        for r in &runs[1..] {
            assert_eq!(prefix(r), prefix(&runs[0]));
        }
        // Past the boundary the variants genuinely differ.
        assert_ne!(runs[0].metrics, runs[3].metrics);
        assert_ne!(runs[2].metrics, runs[3].metrics);
        assert_eq!(runs[3].weight_reports.len(), 3);
        assert_eq!(runs[2].weight_reports.len(), 1);
    }

    #[test]
    fn reset_variant_without_boundaries_is_plain_ppo() {
        let (task, sft, ds) = discrete();
        let mut setup = small_setup();
        setup.schedule.iterations = 1;
        let a = run_ablation(Variant::PpoReset, &task, &sft, &ds, &setup, None).unwrap();
        let b = run_ablation(Variant::Ppo, &task, &sft, &ds, &setup, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn grpo_loop_counts_samples() {
        let (task, sft, ds) = discrete();
        let mut setup = small_setup();
        setup.ppo.estimator = Estimator::Grpo;
        setup.ppo.group_size = 4;
        let out = run_ocrm(&task, &sft, &ds, &setup, None).unwrap();
        assert_eq!(out.samples, 1800);
        setup.ppo.group_size = 7;
        assert!(run_ocrm(&task, &sft, &ds, &setup, None).is_err());
    }

    #[test]
    fn foreign_dataset_is_rejected() {
        let (task, _, ds) = discrete();
        let other = PolicySnapshot::new(&CategoricalPolicy::from_logits(&vec![vec![0.5; 12]; 2]).unwrap());
        let mut tweaked = other.policy().clone();
        let mut p = tweaked.params();
        p[0] += 1.0;
        tweaked.set_params(&p).unwrap();
        let other = PolicySnapshot::new(&tweaked);
        assert!(run_ocrm(&task, &other, &ds, &small_setup(), None).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("ppo+foo".parse::<Variant>().is_err());
    }
}
