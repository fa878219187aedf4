//! Experiment dispatch and on-disk artifacts.
//!
//! Every run directory gets the resolved `config.toml`. Training runs add
//! `metrics.csv`, `weights-report.csv`, `plot_data.csv`, `final-eval.csv`,
//! `boundary-<i>/` checkpoints and `final/`. Ablations put one such
//! directory per variant under the run directory and combine the plot data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Experiment, RunConfig, TaskKind};
use crate::consistency::{consistency_sweep, ConsistencyInstance, ConsistencyReport};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_policy, expected_kl, write_csv, MetricsRow};
use crate::ocrm::{run_ppo_baseline, run_variant, streams, FinalEval, RunOutcome, Variant};
use crate::policy::{CategoricalPolicy, GaussianPolicy, Policy, PolicySnapshot};
use crate::preference::{generate_dataset, save_dataset, ActionCodec, PreferenceDataset};
use crate::reward_model::{rm_accuracy, RewardModel};
use crate::tasks::{make_discrete_task, ContinuousTask, DiscreteTask, Task};

/// The SFT policy of the 2-D task: an MLP mean with zeroed output layer, so
/// it starts as `N(0, sft_std^2 I)`.
pub fn didactic_sft(cfg: &RunConfig) -> Result<PolicySnapshot<GaussianPolicy>> {
    let m = &cfg.train.models;
    let policy = GaussianPolicy::network(
        1,
        &m.policy_hidden,
        m.policy_activation,
        2,
        cfg.task.sft_std,
        streams::seed(cfg.seed, streams::POLICY_INIT),
    )?;
    Ok(PolicySnapshot::new(&policy))
}

pub fn discrete_task(cfg: &RunConfig) -> Result<DiscreteTask> {
    let t = &cfg.task;
    make_discrete_task(t.task_seed, t.n_states, t.n_actions, t.feature_dim)
}

/// Uniform tabular SFT policy for the discrete task.
pub fn discrete_sft(task: &DiscreteTask) -> Result<PolicySnapshot<CategoricalPolicy>> {
    Ok(PolicySnapshot::new(&CategoricalPolicy::uniform(task.n_states(), task.n_actions())?))
}

/// `data.n_pairs` pairs from `sft` on the run's dataset stream.
pub fn build_dataset<T, P>(cfg: &RunConfig, task: &T, sft: &PolicySnapshot<P>) -> Result<PreferenceDataset<T::Action>>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    let mut rng = streams::rng(cfg.seed, streams::DATASET);
    generate_dataset(sft, task, cfg.data.n_pairs, cfg.seed, &mut rng)
}

/// One point of a learning curve: gold, RM and KL against samples consumed.
/// The `(kl_to_sft, gold)` columns give the reward/KL trade-off pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub variant: Variant,
    pub samples: usize,
    pub iteration: usize,
    pub gold: f64,
    pub rm: f64,
    pub kl_to_sft: f64,
}

pub fn plot_rows(variant: Variant, metrics: &[MetricsRow]) -> Vec<PlotRow> {
    metrics
        .iter()
        .map(|m| PlotRow {
            variant,
            samples: m.samples,
            iteration: m.iteration,
            gold: m.mean_gold,
            rm: m.mean_rm,
            kl_to_sft: m.kl_to_sft,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub variant: Variant,
    pub samples: usize,
    pub gold: f64,
    pub rm: f64,
    pub initial_rm: f64,
    pub kl_to_sft: f64,
    pub win_rate: f64,
    pub rm_accuracy: f64,
}

impl FinalRow {
    pub fn new(variant: Variant, samples: usize, e: &FinalEval) -> Self {
        FinalRow {
            variant,
            samples,
            gold: e.gold,
            rm: e.rm,
            initial_rm: e.initial_rm,
            kl_to_sft: e.kl_to_sft,
            win_rate: e.win_rate,
            rm_accuracy: e.rm_accuracy,
        }
    }
}

/// What a run produced.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub finals: Vec<FinalRow>,
    pub consistency: Option<ConsistencyReport>,
    pub dataset_rows: Option<usize>,
}

impl RunSummary {
    pub fn text(&self) -> String {
        let mut s = format!("output: {}\n", self.out_dir.display());
        for f in &self.finals {
            s.push_str(&format!(
                "{:<10} samples {:>8}  gold {:.4}  rm {:.4}  kl {:.4}  win {:.3}  rm-acc {:.3}\n",
                f.variant.name(),
                f.samples,
                f.gold,
                f.rm,
                f.kl_to_sft,
                f.win_rate,
                f.rm_accuracy
            ));
        }
        if let Some(r) = &self.consistency {
            s.push_str(&r.summary_text());
        }
        if let Some(n) = self.dataset_rows {
            s.push_str(&format!("dataset rows: {n}\n"));
        }
        s
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Validates, writes `config.toml` and dispatches on the experiment kind.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.train_setup().validate()?;
    if cfg.experiment == Experiment::Ablation && cfg.ablation.variants.is_empty() {
        return Err(Error::Config("ablation.variants must name at least one variant".into()));
    }
    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    let mut summary = RunSummary {
        out_dir: out.clone(),
        ..Default::default()
    };
    match cfg.experiment {
        Experiment::Consistency => {
            let inst = ConsistencyInstance::build(&cfg.consistency)?;
            inst.task.save(&out.join("task.txt"))?;
            let report = consistency_sweep(&inst, &cfg.consistency)?;
            write_text(&out.join("consistency.csv"), &report.cells_csv()?)?;
            write_text(&out.join("consistency-summary.csv"), &report.summary_csv()?)?;
            write_text(&out.join("summary.txt"), &report.summary_text())?;
            summary.consistency = Some(report);
        }
        _ => match cfg.task.kind {
            TaskKind::Continuous => {
                let task = ContinuousTask;
                let sft = didactic_sft(cfg)?;
                run_training(cfg, &task, &sft, &mut summary)?;
            }
            TaskKind::Discrete => {
                let task = discrete_task(cfg)?;
                task.save(&out.join("task.txt"))?;
                let sft = discrete_sft(&task)?;
                run_training(cfg, &task, &sft, &mut summary)?;
            }
        },
    }
    if !summary.finals.is_empty() {
        write_csv(&summary.finals, &out.join("final-eval.csv"))?;
    }
    write_text(&out.join("summary.txt"), &summary.text())?;
    Ok(summary)
}

fn run_training<T, P>(cfg: &RunConfig, task: &T, sft: &PolicySnapshot<P>, summary: &mut RunSummary) -> Result<()>
where
    T: Task,
    T::Action: ActionCodec,
    P: Policy<Action = T::Action>,
{
    let out = &cfg.out_dir;
    let ds = build_dataset(cfg, task, sft)?;
    let setup = cfg.train_setup();
    let record = |summary: &mut RunSummary, o: &RunOutcome<P>, dir: &Path| -> Result<Vec<PlotRow>> {
        let rows = plot_rows(o.variant, &o.metrics);
        write_csv(&rows, &dir.join("plot_data.csv"))?;
        summary.finals.push(FinalRow::new(o.variant, o.samples, &o.final_eval));
        Ok(rows)
    };
    match cfg.experiment {
        Experiment::DatasetGen => {
            sft.save(&out.join("sft.txt"))?;
            save_dataset(&ds, &out.join("dataset.csv"))?;
            summary.dataset_rows = Some(ds.len());
        }
        Experiment::DidacticOcrm => {
            let o = run_variant(Variant::Ocrm, task, sft, &ds, &setup, Some(out))?;
            record(summary, &o, out)?;
        }
        Experiment::DidacticPpo => {
            let total = setup.schedule.total_samples();
            let o = run_ppo_baseline(task, sft, &ds, total, &setup, Some(out))?;
            record(summary, &o, out)?;
        }
        Experiment::Ablation => {
            let mut combined = Vec::new();
            for &v in &cfg.ablation.variants {
                let dir = out.join(v.name());
                create_dir(&dir)?;
                let o = if v == Variant::Ppo {
                    run_ppo_baseline(task, sft, &ds, setup.schedule.total_samples(), &setup, Some(&dir))?
                } else {
                    run_variant(v, task, sft, &ds, &setup, Some(&dir))?
                };
                combined.extend(record(summary, &o, &dir)?);
            }
            write_csv(&combined, &out.join("plot_data.csv"))?;
        }
        Experiment::Consistency => unreachable!("handled by run"),
    }
    Ok(())
}

/// Evaluation of a saved policy against the SFT policy of its config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gold: f64,
    pub rm: Option<f64>,
    pub kl_to_sft: f64,
    pub win_rate: f64,
    pub rm_accuracy: Option<f64>,
}

/// Scores a policy checkpoint of the run configured by `cfg`. The reward
/// model is optional; without it only gold, KL and win rate are reported.
pub fn evaluate_checkpoint(cfg: &RunConfig, policy_path: &Path, rm_path: Option<&Path>) -> Result<EvalReport> {
    let rm = rm_path.map(RewardModel::load).transpose()?;
    match cfg.task.kind {
        TaskKind::Continuous => {
            let policy = PolicySnapshot::<GaussianPolicy>::load(policy_path)?;
            evaluate_with(cfg, &ContinuousTask, &didactic_sft(cfg)?, policy.policy(), rm.as_ref())
        }
        TaskKind::Discrete => {
            let task = discrete_task(cfg)?;
            let policy = PolicySnapshot::<CategoricalPolicy>::load(policy_path)?;
            evaluate_with(cfg, &task, &discrete_sft(&task)?, policy.policy(), rm.as_ref())
        }
    }
}

fn evaluate_with<T, P>(
    cfg: &RunConfig,
    task: &T,
    sft: &PolicySnapshot<P>,
    policy: &P,
    rm: Option<&RewardModel>,
) -> Result<EvalReport>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    let ev = &cfg.train.eval;
    let mut rng = streams::rng(cfg.seed, streams::EVAL);
    let zero = RewardModel::mlp(task.rm_input_dim(), &[], crate::nn::Activation::Tanh, 0)?;
    let (gold, proxy) = evaluate_policy(policy, rm.unwrap_or(&zero), task, ev.final_samples.max(1), &mut rng)?;
    let win_rate = crate::metrics::win_rate(policy, sft.policy(), task, ev.win_pairs.max(1), &mut rng)?;
    let rm_accuracy = match rm {
        Some(rm) => match rm_accuracy(rm, task, policy, ev.accuracy_pairs.max(1), &mut rng) {
            Ok(a) => Some(a),
            Err(Error::Concentrated { .. }) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    Ok(EvalReport {
        gold,
        rm: rm.map(|_| proxy),
        kl_to_sft: expected_kl(policy, sft.policy(), task)?,
        win_rate,
        rm_accuracy,
    })
}
