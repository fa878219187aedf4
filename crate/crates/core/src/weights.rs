//! Importance weights that move the reward-model loss from the behavior
//! policy's pair distribution to the current policy's.
//!
//! For a stored pair the plain weight is
//! `pi_i(a_w|s) pi_i(a_l|s) / (pi_1(a_w|s) pi_1(a_l|s))`; `P(s)` and the
//! labeling probability cancel. Optionally the ratio is taken against the
//! mixture `alpha P_1 + (1 - alpha) P_i` (relative weights), raised to
//! `eta` (flattening) and clipped, in that order. Everything is computed from
//! log-densities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ActionDistribution, Policy};
use crate::preference::{PreferenceDataset, PreferencePair};
use crate::tasks::Task;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IwConfig {
    /// Flattening exponent in `[0, 1]`.
    pub eta: f64,
    /// Mixture coefficient in `[0, 1]`; 1 gives the plain ratio.
    pub alpha: f64,
    pub clip: Option<f64>,
    /// Divide weights by their mean (diagnostic).
    pub self_normalize: bool,
}

impl Default for IwConfig {
    fn default() -> Self {
        IwConfig {
            eta: 1.0,
            alpha: 1.0,
            clip: None,
            self_normalize: false,
        }
    }
}

impl IwConfig {
    /// The flattened, relative setting used for long token sequences.
    pub fn flattened_relative() -> Self {
        IwConfig {
            eta: 0.001,
            alpha: 0.9,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if let Some(w) = self.clip {
            if w.is_nan() || w <= 0.0 {
                return Err(Error::invalid(format!("clip bound must be positive, got {w}")));
            }
        }
        Ok(())
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Weight for a pair with `log_ratio = log P_i(pair) - log P_1(pair)`.
pub fn weight_from_log_ratio(log_ratio: f64, cfg: &IwConfig) -> f64 {
    if cfg.eta == 0.0 {
        return 1.0;
    }
    let log_rel = if cfg.alpha == 1.0 || log_ratio == 0.0 {
        log_ratio
    } else {
        // log( r / (alpha + (1 - alpha) r) )
        log_ratio - log_add_exp(cfg.alpha.ln(), (1.0 - cfg.alpha).ln() + log_ratio)
    };
    let w = (cfg.eta * log_rel).exp();
    match cfg.clip {
        Some(bound) => w.min(bound),
        None => w,
    }
}

pub fn pair_log_ratio<T, P>(pair: &PreferencePair<T::Action>, current: &P, task: &T) -> Result<f64>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    let dist = current.distribution(&task.state_features(pair.state))?;
    Ok(pair_log_ratio_with(pair, &dist))
}

fn pair_log_ratio_with<D: ActionDistribution>(pair: &PreferencePair<D::Action>, dist: &D) -> f64 {
    (dist.log_prob(&pair.action_w) + dist.log_prob(&pair.action_l)) - (pair.logp1_w + pair.logp1_l)
}

pub fn pair_weight<T, P>(pair: &PreferencePair<T::Action>, current: &P, task: &T, cfg: &IwConfig) -> Result<f64>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    Ok(weight_from_log_ratio(pair_log_ratio(pair, current, task)?, cfg))
}

/// `(sum w)^2 / sum w^2`; 0 when every weight is 0.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let (s, s2) = weights.iter().fold((0.0, 0.0), |(s, s2), w| (s + w, s2 + w * w));
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightReport {
    #[serde(skip)]
    pub weights: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub ess: f64,
}

impl WeightReport {
    pub fn from_weights(weights: Vec<f64>) -> Self {
        let n = weights.len().max(1) as f64;
        let mean = weights.iter().sum::<f64>() / n;
        let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
        let ess = effective_sample_size(&weights);
        WeightReport {
            weights,
            mean,
            max,
            min,
            ess,
        }
    }
}

pub fn dataset_weights<T, P>(
    ds: &PreferenceDataset<T::Action>,
    current: &P,
    task: &T,
    cfg: &IwConfig,
) -> Result<WeightReport>
where
    T: Task,
    P: Policy<Action = T::Action>,
{
    cfg.validate()?;
    let dists = (0..task.n_states())
        .map(|s| current.distribution(&task.state_features(s)))
        .collect::<Result<Vec<_>>>()?;
    let mut weights = Vec::with_capacity(ds.len());
    for pair in &ds.pairs {
        let dist = dists.get(pair.state).ok_or(Error::IndexOutOfRange {
            what: "state",
            index: pair.state,
            size: dists.len(),
        })?;
        weights.push(weight_from_log_ratio(pair_log_ratio_with(pair, dist), cfg));
    }
    if cfg.self_normalize {
        let mean = weights.iter().sum::<f64>() / weights.len().max(1) as f64;
        if mean > 0.0 {
            weights.iter_mut().for_each(|w| *w /= mean);
        }
    }
    Ok(WeightReport::from_weights(weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{CategoricalPolicy, GaussianPolicy, PolicySnapshot};
    use crate::preference::generate_dataset;
    use crate::tasks::{make_discrete_task, ContinuousTask};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sft() -> GaussianPolicy {
        GaussianPolicy::direct(vec![0.0; 2], vec![0.5 * 0.7f64.ln(); 2]).unwrap()
    }

    #[test]
    fn generating_policy_gets_unit_weights() {
        let p = sft();
        let snap = PolicySnapshot::new(&p);
        let ds = generate_dataset(&snap, &ContinuousTask, 500, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for cfg in [IwConfig::default(), IwConfig::flattened_relative(), IwConfig { eta: 0.3, alpha: 0.2, clip: Some(0.5), self_normalize: true }] {
            let report = dataset_weights(&ds, &p, &ContinuousTask, &cfg).unwrap();
            assert!(report.weights.iter().all(|&w| w == 1.0), "{cfg:?}");
            assert_eq!(report.ess, 500.0);
        }
    }

    #[test]
    fn mixture_then_power_by_hand() {
        let cfg = IwConfig {
            eta: 0.5,
            alpha: 0.5,
            ..Default::default()
        };
        let w = weight_from_log_ratio(2f64.ln(), &cfg);
        assert!((w - (4.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert!((w - 1.1547).abs() < 1e-4);
    }

    #[test]
    fn zero_eta_is_exactly_one() {
        let cfg = IwConfig {
            eta: 0.0,
            ..Default::default()
        };
        for lr in [-300.0, -1.0, 0.0, 2.0, 700.0] {
            assert_eq!(weight_from_log_ratio(lr, &cfg), 1.0);
        }
    }

    #[test]
    fn clip_bounds_weights() {
        let p = sft();
        let snap = PolicySnapshot::new(&p);
        let ds = generate_dataset(&snap, &ContinuousTask, 500, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let moved = GaussianPolicy::direct(vec![0.8, -0.3], vec![-1.0, -0.7]).unwrap();
        let cfg = IwConfig {
            clip: Some(1.0),
            ..Default::default()
        };
        let report = dataset_weights(&ds, &moved, &ContinuousTask, &cfg).unwrap();
        assert!(report.max <= 1.0);
        let raw = dataset_weights(&ds, &moved, &ContinuousTask, &IwConfig::default()).unwrap();
        assert!(raw.max > 1.0);
    }

    #[test]
    fn dominant_weight_collapses_ess() {
        let report = WeightReport::from_weights(vec![1e-9, 1e6]);
        assert!((report.ess - 1.0).abs() < 1e-6);
        assert_eq!(WeightReport::from_weights(vec![2.0; 10]).ess, 10.0);
        assert_eq!(effective_sample_size(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn log_space_matches_direct_ratio() {
        let task = make_discrete_task(3, 2, 10, 3).unwrap();
        let p1 = CategoricalPolicy::from_logits(&[vec![0.2; 10], (0..10).map(|i| i as f64 * 0.1).collect()]).unwrap();
        let pi = CategoricalPolicy::from_logits(&[(0..10).map(|i| (i as f64).sin()).collect(), vec![-0.4; 10]]).unwrap();
        let snap = PolicySnapshot::new(&p1);
        let ds = generate_dataset(&snap, &task, 300, 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for pair in &ds.pairs {
            let mut onehot = vec![0.0; 2];
            onehot[pair.state] = 1.0;
            let pw = |p: &CategoricalPolicy, a: usize| p.log_prob(&onehot, &a).unwrap().exp();
            let direct = pw(&pi, pair.action_w) * pw(&pi, pair.action_l) / (pw(&p1, pair.action_w) * pw(&p1, pair.action_l));
            let w = pair_weight(pair, &pi, &task, &IwConfig::default()).unwrap();
            assert!((w - direct).abs() <= 1e-10 * direct.max(1.0));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let ds = generate_dataset(&PolicySnapshot::new(&sft()), &ContinuousTask, 2, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for cfg in [
            IwConfig { eta: 1.5, ..Default::default() },
            IwConfig { alpha: -0.1, ..Default::default() },
            IwConfig { clip: Some(0.0), ..Default::default() },
        ] {
            assert!(dataset_weights(&ds, &sft(), &ContinuousTask, &cfg).is_err());
        }
    }

    proptest! {
        #[test]
        fn flattening_is_monotone_in_eta(lr in -20.0f64..20.0, e1 in 0.0f64..1.0, e2 in 0.0f64..1.0, alpha in 0.0f64..=1.0) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let w = |eta| weight_from_log_ratio(lr, &IwConfig { eta, alpha, ..Default::default() });
            let plain = weight_from_log_ratio(lr, &IwConfig { eta: 1.0, alpha, ..Default::default() });
            if plain > 1.0 {
                prop_assert!(w(lo) <= w(hi) * (1.0 + 1e-12));
            } else if plain < 1.0 {
                prop_assert!(w(lo) * (1.0 + 1e-12) >= w(hi));
            }
        }

        #[test]
        fn relative_weights_are_bounded(lr in -30.0f64..30.0, alpha in 0.0f64..0.95) {
            let w = weight_from_log_ratio(lr, &IwConfig { alpha, ..Default::default() });
            prop_assert!(w >= 0.0 && w <= (1.0 + 1e-9) / (1.0 - alpha));
        }
    }
}
