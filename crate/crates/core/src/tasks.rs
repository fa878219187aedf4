//! Single-step environments with known gold rewards.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{CheckpointReader, CheckpointWriter};
use crate::error::{Error, Result};

/// A single-step task: a state is drawn from `P(s)`, the policy acts once,
/// and the gold reward scores the action.
pub trait Task: Send + Sync {
    type Action: Clone + std::fmt::Debug + PartialEq + Send + Sync;

    fn n_states(&self) -> usize;

    fn state_probs(&self) -> &[f64];

    fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let probs = self.state_probs();
        if probs.len() == 1 {
            return 0;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (s, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return s;
            }
        }
        probs.len() - 1
    }

    /// Input to policy and value networks.
    fn state_features(&self, state: usize) -> Vec<f64>;

    fn gold_reward(&self, state: usize, action: &Self::Action) -> Result<f64>;

    fn rm_input_dim(&self) -> usize;

    /// Input to the reward model for `(state, action)`.
    fn rm_features(&self, state: usize, action: &Self::Action) -> Vec<f64>;
}

pub const ACTION_LOW: f64 = -1.5;
pub const ACTION_HIGH: f64 = 1.5;

/// `| ||a||_2 - 0.7 | + sin(4 pi a0) + sin(6 pi a1)`, defined on `[-1.5, 1.5]^2`.
pub fn gold_reward_continuous(a: &[f64]) -> Result<f64> {
    if a.len() != 2 {
        return Err(Error::DimensionMismatch {
            context: "continuous action",
            expected: 2,
            got: a.len(),
        });
    }
    if a.iter().any(|x| !(ACTION_LOW..=ACTION_HIGH).contains(x)) {
        return Err(Error::OutOfBox {
            action: a.to_vec(),
            lo: ACTION_LOW,
            hi: ACTION_HIGH,
        });
    }
    let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
    Ok((norm - 0.7).abs() + (4.0 * PI * a[0]).sin() + (6.0 * PI * a[1]).sin())
}

pub fn clamp_to_box(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.clamp(ACTION_LOW, ACTION_HIGH)).collect()
}

/// The stateless 2-D task. Actions are clamped to the box before gold
/// scoring; the reward model sees them unclamped.
#[derive(Debug, Clone, Default)]
pub struct ContinuousTask;

impl Task for ContinuousTask {
    type Action = Vec<f64>;

    fn n_states(&self) -> usize {
        1
    }

    fn state_probs(&self) -> &[f64] {
        &[1.0]
    }

    fn state_features(&self, _state: usize) -> Vec<f64> {
        vec![1.0]
    }

    fn gold_reward(&self, _state: usize, action: &Vec<f64>) -> Result<f64> {
        gold_reward_continuous(&clamp_to_box(action))
    }

    fn rm_input_dim(&self) -> usize {
        2
    }

    /// The raw action: only gold scoring clamps.
    fn rm_features(&self, _state: usize, action: &Vec<f64>) -> Vec<f64> {
        action.clone()
    }
}

/// Finite task with an enumerable joint distribution over `(s, a0, a1)`.
///
/// Actions share one feature map `phi: A -> R^d` with `d < |A|`, so a model
/// linear in `phi` cannot represent an arbitrary gold table.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTask {
    seed: u64,
    n_states: usize,
    n_actions: usize,
    feature_dim: usize,
    gold: Vec<f64>,
    state_probs: Vec<f64>,
    features: Vec<f64>,
}

impl DiscreteTask {
    pub fn from_tables(
        gold: Vec<Vec<f64>>,
        state_probs: Vec<f64>,
        features: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n_states = gold.len();
        if n_states == 0 {
            return Err(Error::invalid("discrete task needs at least one state"));
        }
        let n_actions = gold[0].len();
        if n_actions < 2 || gold.iter().any(|row| row.len() != n_actions) {
            return Err(Error::invalid("gold table rows must share a length of at least 2"));
        }
        if state_probs.len() != n_states {
            return Err(Error::DimensionMismatch {
                context: "state_probs",
                expected: n_states,
                got: state_probs.len(),
            });
        }
        let total: f64 = state_probs.iter().sum();
        if state_probs.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("state_probs must be a simplex vector (sum {total})")));
        }
        if features.len() != n_actions {
            return Err(Error::DimensionMismatch {
                context: "feature rows",
                expected: n_actions,
                got: features.len(),
            });
        }
        let feature_dim = features[0].len();
        if feature_dim == 0 || features.iter().any(|f| f.len() != feature_dim) {
            return Err(Error::invalid("feature rows must share a positive length"));
        }
        Ok(DiscreteTask {
            seed: 0,
            n_states,
            n_actions,
            feature_dim,
            gold: gold.concat(),
            state_probs,
            features: features.concat(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn gold_row(&self, state: usize) -> &[f64] {
        &self.gold[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn features(&self, action: usize) -> &[f64] {
        &self.features[action * self.feature_dim..(action + 1) * self.feature_dim]
    }

    /// Row-major `n_actions x feature_dim` feature matrix.
    pub fn feature_matrix(&self) -> &[f64] {
        &self.features
    }

    fn check_indices(&self, state: usize, action: usize) -> Result<()> {
        if state >= self.n_states {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: state,
                size: self.n_states,
            });
        }
        if action >= self.n_actions {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: action,
                size: self.n_actions,
            });
        }
        Ok(())
    }

    pub fn gold_reward_discrete(&self, state: usize, action: usize) -> Result<f64> {
        self.check_indices(state, action)?;
        Ok(self.gold[state * self.n_actions + action])
    }

    pub fn to_text(&self) -> String {
        let mut w = CheckpointWriter::new("discrete-task");
        w.field("seed", self.seed)
            .field("n_states", self.n_states)
            .field("n_actions", self.n_actions)
            .field("feature_dim", self.feature_dim)
            .vector("state_probs", &self.state_probs)
            .vector("gold", &self.gold)
            .vector("features", &self.features);
        w.finish().to_string()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = CheckpointReader::new(text)?;
        r.expect_kind("discrete-task")?;
        let seed: u64 = r.parse_field("seed")?;
        let n_states: usize = r.parse_field("n_states")?;
        let n_actions: usize = r.parse_field("n_actions")?;
        let feature_dim: usize = r.parse_field("feature_dim")?;
        let state_probs = r.vector("state_probs")?;
        let gold = r.vector("gold")?;
        let features = r.vector("features")?;
        if gold.len() != n_states * n_actions || features.len() != n_actions * feature_dim {
            return Err(Error::Parse {
                line: 0,
                message: "table sizes disagree with the declared dimensions".into(),
            });
        }
        let mut task = DiscreteTask::from_tables(
            gold.chunks(n_actions).map(<[f64]>::to_vec).collect(),
            state_probs,
            features.chunks(feature_dim).map(<[f64]>::to_vec).collect(),
        )?;
        task.seed = seed;
        Ok(task)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DiscreteTask::from_text(&text)
    }
}

/// Builds a seeded discrete task with standard-normal gold rewards and a
/// full-column-rank random feature map of width `feature_dim < n_actions`.
pub fn make_discrete_task(seed: u64, n_states: usize, n_actions: usize, feature_dim: usize) -> Result<DiscreteTask> {
    if feature_dim >= n_actions {
        return Err(Error::invalid(format!(
            "feature_dim ({feature_dim}) must be smaller than n_actions ({n_actions}) so the linear model is misspecified"
        )));
    }
    if n_states == 0 || feature_dim == 0 {
        return Err(Error::invalid("n_states and feature_dim must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gold: Vec<Vec<f64>> = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let raw: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let mut state_probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
    // Push the rounding residue into the largest entry so the sum is exact.
    let residue = 1.0 - state_probs.iter().sum::<f64>();
    if let Some(max) = state_probs.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *max += residue;
    }
    let features = loop {
        let f: Vec<Vec<f64>> = (0..n_actions)
            .map(|_| (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        if column_rank(&f.concat(), n_actions, feature_dim) == feature_dim {
            break f;
        }
    };
    let mut task = DiscreteTask::from_tables(gold, state_probs, features)?;
    task.seed = seed;
    Ok(task)
}

/// Column rank of a row-major matrix by modified Gram-Schmidt.
pub fn column_rank(data: &[f64], rows: usize, cols: usize) -> usize {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for c in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|r| data[r * cols + c]).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 * scale * (rows as f64).sqrt() {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis.len()
}

impl Task for DiscreteTask {
    type Action = usize;

    fn n_states(&self) -> usize {
        self.n_states
    }

    fn state_probs(&self) -> &[f64] {
        &self.state_probs
    }

    fn state_features(&self, state: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        v[state] = 1.0;
        v
    }

    fn gold_reward(&self, state: usize, action: &usize) -> Result<f64> {
        self.gold_reward_discrete(state, *action)
    }

    fn rm_input_dim(&self) -> usize {
        self.n_states + self.feature_dim
    }

    fn rm_features(&self, state: usize, action: &usize) -> Vec<f64> {
        let mut v = self.state_features(state);
        v.extend_from_slice(self.features(*action));
        v
    }
}
