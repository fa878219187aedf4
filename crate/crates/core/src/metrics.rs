//! Per-update metrics, evaluation helpers and CSV persistence.

use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ActionDistribution, Policy};
use crate::tasks::Task;

/// One row of `metrics.csv`, written after every policy update.
///
/// Rows with no evaluation pass leave `rm_accuracy` and `win_rate` empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Policy samples consumed so far, including this update's batch.
    pub samples: usize,
    /// 1-based iteration of the outer loop.
    pub iteration: usize,
    pub update: usize,
    /// Batch means under the reward model in use and the gold reward.
    pub mean_rm: f64,
    pub mean_gold: f64,
    /// Exact expected KL over the state distribution, before the update.
    pub kl_to_sft: f64,
    pub kl_to_ref: f64,
    /// Mean of the per-sample KL penalty that entered the reward.
    pub kl_penalty: f64,
    pub rm_accuracy: Option<f64>,
    pub win_rate: Option<f64>,
    pub surrogate: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
}

/// One row of `weights-report.csv`, written after every reward model fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub iteration: usize,
    pub samples: usize,
    pub retrained: bool,
    pub mean_weight: f64,
    pub max_weight: f64,
    pub min_weight: f64,
    pub ess: f64,
    pub rm_loss: f64,
}

/// `E_s KL(p(.|s) || q(.|s))` under the task's state distribution.
pub fn expected_kl<T, P>(p: &P, q: &P, task: &T) -> Result<f64>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    let mut total = 0.0;
    for (s, &prob) in task.state_probs().iter().enumerate() {
        if prob > 0.0 {
            let f = task.state_features(s);
            total += prob * p.distribution(&f)?.kl(&q.distribution(&f)?)?;
        }
    }
    Ok(total)
}

/// Fraction of paired draws where the policy's action beats the reference
/// policy's action under the gold reward, counting ties as one half.
pub fn win_rate<T, P, R>(policy: &P, reference: &P, task: &T, n: usize, rng: &mut R) -> Result<f64>
where
    T: Task,
    P: Policy<Action = T::Action>,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(Error::invalid("win rate needs at least one pair"));
    }
    let mut dists = Vec::with_capacity(task.n_states());
    for s in 0..task.n_states() {
        let f = task.state_features(s);
        dists.push((policy.distribution(&f)?, reference.distribution(&f)?));
    }
    let mut score = 0.0;
    for _ in 0..n {
        let s = task.sample_state(rng);
        let a = dists[s].0.sample(rng);
        let b = dists[s].1.sample(rng);
        let (ga, gb) = (task.gold_reward(s, &a)?, task.gold_reward(s, &b)?);
        score += if ga > gb {
            1.0
        } else if ga == gb {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / n as f64)
}

/// Mean gold and reward-model score of `n` fresh samples from `policy`.
pub fn evaluate_policy<T, P, R>(
    policy: &P,
    rm: &crate::reward_model::RewardModel,
    task: &T,
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64)>
where
    T: Task,
    P: Policy<Action = T::Action>,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let dists = (0..task.n_states())
        .map(|s| policy.distribution(&task.state_features(s)))
        .collect::<Result<Vec<_>>>()?;
    let (mut gold, mut proxy) = (0.0, 0.0);
    for _ in 0..n {
        let s = task.sample_state(rng);
        let a = dists[s].sample(rng);
        gold += task.gold_reward(s, &a)?;
        proxy += rm.score(task, s, &a)?;
    }
    Ok((gold / n as f64, proxy / n as f64))
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

pub fn parse_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let text = csv_string(rows)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{CategoricalPolicy, GaussianPolicy};
    use crate::tasks::{make_discrete_task, ContinuousTask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn win_rate_against_itself_is_a_half() {
        let p = GaussianPolicy::direct(vec![0.0, 0.0], vec![0.5 * 0.7f64.ln(); 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let w = win_rate(&p, &p, &ContinuousTask, n, &mut rng).unwrap();
        assert!((w - 0.5).abs() < 3.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn point_mass_at_argmax_wins_except_ties() {
        let task = make_discrete_task(4, 1, 8, 2).unwrap();
        let row = task.gold_row(0).to_vec();
        let best = (0..8).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let mut logits = vec![vec![0.0; 8]];
        logits[0][best] = 60.0;
        let greedy = CategoricalPolicy::from_logits(&logits).unwrap();
        let sft = CategoricalPolicy::uniform(1, 8).unwrap();
        // Against a uniform reference only the draw of `best` itself ties.
        let expected = 1.0 - 0.5 / 8.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40_000;
        let w = win_rate(&greedy, &sft, &task, n, &mut rng).unwrap();
        assert!((w - expected).abs() < 4.0 * (expected * (1.0 - expected) / n as f64).sqrt());
        assert!((0.0..=1.0).contains(&w));
        assert!(win_rate(&greedy, &sft, &task, 0, &mut rng).is_err());
    }

    #[test]
    fn expected_kl_weights_states() {
        let task = make_discrete_task(2, 3, 8, 2).unwrap();
        let u = CategoricalPolicy::uniform(3, 8).unwrap();
        assert_eq!(expected_kl(&u, &u, &task).unwrap(), 0.0);
        let logits: Vec<Vec<f64>> = (0..3).map(|s| (0..8).map(|a| (a * (s + 1)) as f64 * 0.1).collect()).collect();
        let p = CategoricalPolicy::from_logits(&logits).unwrap();
        let mut manual = 0.0;
        for s in 0..3 {
            let f = task.state_features(s);
            manual += task.state_probs()[s] * crate::policy::kl_divergence(&p, &u, &f).unwrap();
        }
        assert!((expected_kl(&p, &u, &task).unwrap() - manual).abs() < 1e-15);
    }

    #[test]
    fn metrics_rows_round_trip_losslessly() {
        let rows = vec![
            MetricsRow {
                samples: 1000,
                iteration: 1,
                update: 1,
                mean_rm: 0.1 + 0.2,
                mean_gold: -1.0 / 3.0,
                kl_to_sft: 1e-17,
                kl_to_ref: 0.0,
                kl_penalty: -2.5e-3,
                rm_accuracy: Some(0.61),
                win_rate: None,
                surrogate: 1.234567890123e-5,
                clip_fraction: 0.0,
                value_loss: std::f64::consts::PI,
            };
            2
        ];
        let text = csv_string(&rows).unwrap();
        assert!(text.starts_with("samples,iteration,update,mean_rm,mean_gold,kl_to_sft,kl_to_ref"));
        let back: Vec<MetricsRow> = parse_csv(&text).unwrap();
        assert_eq!(back, rows);
    }
}
