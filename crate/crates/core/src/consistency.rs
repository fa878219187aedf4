//! Exact population losses and minimizers for a linear reward model on the
//! discrete task, and the sweep comparing unweighted against importance
//! weighted fits as the dataset grows.
//!
//! The hypothesis class is `R(s, a) = theta . phi(a)`. Per-state offsets
//! cancel in every margin, so they are not parameterized. The loss of a
//! labeled pair is `softplus(-theta . (phi(a_w) - phi(a_l)))`, convex in
//! `theta`, which makes "the minimizer" well defined up to its loss value.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::csv_string;
use crate::ocrm::streams;
use crate::policy::{ActionDistribution, CategoricalPolicy, Policy, PolicySnapshot};
use crate::preference::{generate_dataset, PreferenceDataset};
use crate::reward_model::{bt_loss_from_margin, sigmoid};
use crate::tasks::{make_discrete_task, DiscreteTask, Task};
use crate::weights::{dataset_weights, weight_from_log_ratio, IwConfig};

/// Per-state action probabilities `probs[s][a]`.
pub type PolicyTable = Vec<Vec<f64>>;

pub fn policy_table(policy: &CategoricalPolicy, task: &DiscreteTask) -> Result<PolicyTable> {
    (0..task.n_states())
        .map(|s| Ok(policy.distribution(&task.state_features(s))?.probs()))
        .collect()
}

fn check_table(task: &DiscreteTask, probs: &[Vec<f64>]) -> Result<()> {
    if probs.len() != task.n_states() {
        return Err(Error::DimensionMismatch {
            context: "policy table states",
            expected: task.n_states(),
            got: probs.len(),
        });
    }
    for row in probs {
        if row.len() != task.n_actions() {
            return Err(Error::DimensionMismatch {
                context: "policy table actions",
                expected: task.n_actions(),
                got: row.len(),
            });
        }
    }
    Ok(())
}

/// One labeled comparison `phi(winner) - phi(loser)` with its probability
/// mass (population) or sample weight (empirical).
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub diff: Vec<f64>,
    pub weight: f64,
}

/// A weighted sum of pairwise losses, `sum_j weight_j * l(theta . diff_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBtObjective {
    pub dim: usize,
    pub terms: Vec<Term>,
}

fn diff(task: &DiscreteTask, w: usize, l: usize) -> Vec<f64> {
    task.features(w).iter().zip(task.features(l)).map(|(a, b)| a - b).collect()
}

impl LinearBtObjective {
    /// Exact distribution of labeled pairs when states come from the task and
    /// both actions are drawn i.i.d. from `probs`. Identical and tied actions
    /// are excluded and the remaining mass renormalized, which is also what
    /// redrawing tied pairs during data generation produces.
    pub fn population(task: &DiscreteTask, probs: &[Vec<f64>]) -> Result<Self> {
        check_table(task, probs)?;
        let mut terms = Vec::new();
        let mut total = 0.0;
        for (s, &ps) in task.state_probs().iter().enumerate() {
            if ps == 0.0 {
                continue;
            }
            let gold = task.gold_row(s);
            let pi = &probs[s];
            let mut state_mass = 0.0;
            for a0 in 0..task.n_actions() {
                for a1 in 0..task.n_actions() {
                    if a0 == a1 || gold[a0] == gold[a1] {
                        continue;
                    }
                    let mass = ps * pi[a0] * pi[a1];
                    if mass == 0.0 {
                        continue;
                    }
                    state_mass += mass;
                    let (w, l) = if gold[a0] > gold[a1] { (a0, a1) } else { (a1, a0) };
                    terms.push(Term {
                        diff: diff(task, w, l),
                        weight: mass,
                    });
                }
            }
            if state_mass == 0.0 {
                return Err(Error::invalid(format!(
                    "every action pair in state {s} is tied or has no mass; the pairwise loss is undefined"
                )));
            }
            total += state_mass;
        }
        for t in &mut terms {
            t.weight /= total;
        }
        Ok(LinearBtObjective {
            dim: task.feature_dim(),
            terms,
        })
    }

    /// Empirical loss `(1/N) sum_j w_j l_j` over a dataset.
    pub fn empirical(task: &DiscreteTask, ds: &PreferenceDataset<usize>, weights: Option<&[f64]>) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        if let Some(w) = weights {
            if w.len() != ds.len() {
                return Err(Error::DimensionMismatch {
                    context: "pair weights",
                    expected: ds.len(),
                    got: w.len(),
                });
            }
        }
        let n = ds.len() as f64;
        let terms = ds
            .pairs
            .iter()
            .enumerate()
            .map(|(j, p)| Term {
                diff: diff(task, p.action_w, p.action_l),
                weight: weights.map_or(1.0, |w| w[j]) / n,
            })
            .collect();
        Ok(LinearBtObjective {
            dim: task.feature_dim(),
            terms,
        })
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.weight * bt_loss_from_margin(dot(theta, &t.diff))).sum()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for t in &self.terms {
            let c = -t.weight * sigmoid(-dot(theta, &t.diff));
            axpy(c, &t.diff, &mut g);
        }
        g
    }

    fn hessian(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut h = vec![0.0; d * d];
        for t in &self.terms {
            let m = dot(theta, &t.diff);
            let c = t.weight * sigmoid(m) * sigmoid(-m);
            for i in 0..d {
                for j in 0..d {
                    h[i * d + j] += c * t.diff[i] * t.diff[j];
                }
            }
        }
        h
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += c * xi);
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Solves `a x = b` for symmetric positive definite `a` (row-major `d x d`).
fn cholesky_solve(a: &[f64], b: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s.is_nan() || s <= 0.0 {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let s = b[i] - (0..i).map(|k| l[i * d + k] * y[k]).sum::<f64>();
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let s = y[i] - (i + 1..d).map(|k| l[k * d + i] * x[k]).sum::<f64>();
        x[i] = s / l[i * d + i];
    }
    Some(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-8,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimizer {
    pub theta: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Damped Newton with backtracking from `start` until the gradient norm
/// drops below the tolerance. Falls back to a gradient step whenever the
/// Hessian is numerically singular.
pub fn minimize(obj: &LinearBtObjective, start: &[f64], cfg: &SolverConfig) -> Result<Minimizer> {
    if start.len() != obj.dim {
        return Err(Error::DimensionMismatch {
            context: "solver start",
            expected: obj.dim,
            got: start.len(),
        });
    }
    let mut theta = start.to_vec();
    let mut loss = obj.loss(&theta);
    for it in 0..cfg.max_iterations {
        let g = obj.gradient(&theta);
        let gn = norm(&g);
        if gn < cfg.tolerance {
            return Ok(Minimizer {
                theta,
                loss,
                grad_norm: gn,
                iterations: it,
            });
        }
        let h = obj.hessian(&theta);
        let mut step = match cholesky_solve(&h, &g, obj.dim) {
            Some(x) if dot(&x, &g) > 0.0 => x,
            _ => g.clone(),
        };
        step.iter_mut().for_each(|x| *x = -*x);
        let slope = dot(&g, &step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = theta.clone();
            axpy(t, &step, &mut trial);
            let trial_loss = obj.loss(&trial);
            if trial_loss <= loss + 1e-4 * t * slope {
                theta = trial;
                loss = trial_loss;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No representable decrease remains; the iterate is as good as it gets.
            let gn = norm(&obj.gradient(&theta));
            if gn < cfg.tolerance {
                return Ok(Minimizer {
                    theta,
                    loss,
                    grad_norm: gn,
                    iterations: it + 1,
                });
            }
            return Err(Error::NotConverged {
                iterations: it + 1,
                loss,
                grad_norm: gn,
                theta,
            });
        }
    }
    let gn = norm(&obj.gradient(&theta));
    if gn < cfg.tolerance {
        return Ok(Minimizer {
            theta,
            loss,
            grad_norm: gn,
            iterations: cfg.max_iterations,
        });
    }
    Err(Error::NotConverged {
        iterations: cfg.max_iterations,
        loss,
        grad_norm: gn,
        theta,
    })
}

/// Population loss `L^pi(theta)` of the linear model under sampling table `probs`.
pub fn exact_population_loss(task: &DiscreteTask, probs: &[Vec<f64>], theta: &[f64]) -> Result<f64> {
    if theta.len() != task.feature_dim() {
        return Err(Error::DimensionMismatch {
            context: "theta",
            expected: task.feature_dim(),
            got: theta.len(),
        });
    }
    Ok(LinearBtObjective::population(task, probs)?.loss(theta))
}

/// `argmin_theta L^pi(theta)` from `theta = 0`.
pub fn exact_minimizer(task: &DiscreteTask, probs: &[Vec<f64>], cfg: &SolverConfig) -> Result<Minimizer> {
    let obj = LinearBtObjective::population(task, probs)?;
    minimize(&obj, &vec![0.0; obj.dim], cfg)
}

/// Sums of `P_pi1(pair) w(pair) f(pair)` and `P_pi(pair) f(pair)` over every
/// ordered `(s, a0, a1)`, with plain weights built from log-probabilities,
/// plus the largest per-term discrepancy.
pub fn iw_identity<F>(task: &DiscreteTask, pi1: &CategoricalPolicy, pi: &CategoricalPolicy, f: F) -> Result<(f64, f64, f64)>
where
    F: Fn(usize, usize, usize) -> f64,
{
    let plain = IwConfig::default();
    let (mut lhs, mut rhs, mut worst) = (0.0, 0.0, 0.0f64);
    for s in 0..task.n_states() {
        let feats = task.state_features(s);
        let d1 = pi1.distribution(&feats)?;
        let di = pi.distribution(&feats)?;
        let ps = task.state_probs()[s];
        for a0 in 0..task.n_actions() {
            for a1 in 0..task.n_actions() {
                let lp1 = d1.log_prob(&a0) + d1.log_prob(&a1);
                let lpi = di.log_prob(&a0) + di.log_prob(&a1);
                let w = weight_from_log_ratio(lpi - lp1, &plain);
                let v = f(s, a0, a1);
                let left = ps * lp1.exp() * w * v;
                let right = ps * lpi.exp() * v;
                worst = worst.max((left - right).abs());
                lhs += left;
                rhs += right;
            }
        }
    }
    Ok((lhs, rhs, worst))
}

/// Instance and grid for [`consistency_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    pub task_seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub feature_dim: usize,
    /// Standard deviation of the behavior policy's random logits.
    pub sft_logit_scale: f64,
    /// Target policy logits are `sft_logits + shift * gold`.
    pub shift: f64,
    pub n_grid: Vec<usize>,
    pub seeds: usize,
    pub solver: SolverConfig,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            task_seed: 7,
            n_states: 2,
            n_actions: 16,
            feature_dim: 2,
            sft_logit_scale: 0.5,
            shift: 1.0,
            n_grid: vec![100, 1000, 10_000],
            seeds: 20,
            solver: SolverConfig::default(),
        }
    }
}

/// Behavior and shifted target policies of a consistency instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyInstance {
    pub task: DiscreteTask,
    pub pi1: CategoricalPolicy,
    pub pi: CategoricalPolicy,
}

impl ConsistencyInstance {
    pub fn build(cfg: &ConsistencyConfig) -> Result<Self> {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let task = make_discrete_task(cfg.task_seed, cfg.n_states, cfg.n_actions, cfg.feature_dim)?;
        let mut rng = streams::rng(cfg.task_seed, streams::POLICY_INIT);
        let base: Vec<Vec<f64>> = (0..cfg.n_states)
            .map(|_| {
                (0..cfg.n_actions)
                    .map(|_| cfg.sft_logit_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let shifted: Vec<Vec<f64>> = base
            .iter()
            .enumerate()
            .map(|(s, row)| row.iter().zip(task.gold_row(s)).map(|(l, g)| l + cfg.shift * g).collect())
            .collect();
        Ok(ConsistencyInstance {
            pi1: CategoricalPolicy::from_logits(&base)?,
            pi: CategoricalPolicy::from_logits(&shifted)?,
            task,
        })
    }

    /// The same instance with no shift: target equals behavior.
    pub fn without_shift(&self) -> Self {
        ConsistencyInstance {
            task: self.task.clone(),
            pi1: self.pi1.clone(),
            pi: self.pi1.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub n: usize,
    pub seed: usize,
    /// `L^pi(theta_hat)` for the unweighted fit.
    pub loss_hat: f64,
    /// `L^pi(theta_tilde)` for the importance-weighted fit.
    pub loss_tilde: f64,
    pub gap_hat: f64,
    pub gap_tilde: f64,
    /// `L^pi1(theta_hat) - L^pi1(theta_circ)`.
    pub gap_hat_behavior: f64,
    pub ess: f64,
    pub hat_converged: bool,
    pub tilde_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub median_gap_hat: f64,
    pub median_gap_tilde: f64,
    pub median_gap_hat_behavior: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub n_grid: Vec<usize>,
    pub seeds: usize,
    /// `L^pi(theta_star)`, the best achievable target loss.
    pub loss_star: f64,
    /// `L^pi(theta_circ)`, the target loss of the behavior minimizer.
    pub loss_circ: f64,
    /// `L^pi1(theta_circ)`.
    pub behavior_loss_circ: f64,
    pub theta_star: Vec<f64>,
    pub theta_circ: Vec<f64>,
    pub cells: Vec<CellRow>,
    pub summary: Vec<SummaryRow>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn fit(obj: &LinearBtObjective, cfg: &SolverConfig) -> Result<(Vec<f64>, bool)> {
    match minimize(obj, &vec![0.0; obj.dim], cfg) {
        Ok(m) => Ok((m.theta, true)),
        // Separable samples have no finite minimizer; keep the capped iterate.
        Err(Error::NotConverged { theta, .. }) => Ok((theta, false)),
        Err(e) => Err(e),
    }
}

/// For every `(N, seed)`: draw `N` labeled pairs from `pi1`, fit the
/// unweighted and the plainly importance-weighted linear model exactly, and
/// score both under the exact target loss.
pub fn consistency_sweep(inst: &ConsistencyInstance, cfg: &ConsistencyConfig) -> Result<ConsistencyReport> {
    if cfg.n_grid.is_empty() || cfg.seeds == 0 {
        return Err(Error::invalid("the sweep needs a non-empty N grid and at least one seed"));
    }
    let task = &inst.task;
    let table1 = policy_table(&inst.pi1, task)?;
    let table = policy_table(&inst.pi, task)?;
    let target = LinearBtObjective::population(task, &table)?;
    let behavior = LinearBtObjective::population(task, &table1)?;
    let star = minimize(&target, &vec![0.0; target.dim], &cfg.solver)?;
    let circ = minimize(&behavior, &vec![0.0; behavior.dim], &cfg.solver)?;
    let loss_circ = target.loss(&circ.theta);
    let sft = PolicySnapshot::new(&inst.pi1);
    let mut cells = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        for seed in 0..cfg.seeds {
            let stream = 1_000 + (seed as u64) * 64 + ni as u64;
            let mut rng = streams::rng(cfg.task_seed, stream);
            let ds = generate_dataset(&sft, task, n, stream, &mut rng)?;
            let report = dataset_weights(&ds, &inst.pi, task, &IwConfig::default())?;
            let (hat, hat_ok) = fit(&LinearBtObjective::empirical(task, &ds, None)?, &cfg.solver)?;
            let (tilde, tilde_ok) = fit(&LinearBtObjective::empirical(task, &ds, Some(&report.weights))?, &cfg.solver)?;
            let loss_hat = target.loss(&hat);
            let loss_tilde = target.loss(&tilde);
            cells.push(CellRow {
                n,
                seed,
                loss_hat,
                loss_tilde,
                gap_hat: loss_hat - star.loss,
                gap_tilde: loss_tilde - star.loss,
                gap_hat_behavior: behavior.loss(&hat) - circ.loss,
                ess: report.ess,
                hat_converged: hat_ok,
                tilde_converged: tilde_ok,
            });
        }
    }
    let summary = cfg
        .n_grid
        .iter()
        .map(|&n| {
            let col = |f: fn(&CellRow) -> f64| {
                let mut v: Vec<f64> = cells.iter().filter(|c| c.n == n).map(f).collect();
                median(&mut v)
            };
            SummaryRow {
                n,
                median_gap_hat: col(|c| c.gap_hat),
                median_gap_tilde: col(|c| c.gap_tilde),
                median_gap_hat_behavior: col(|c| c.gap_hat_behavior),
            }
        })
        .collect();
    Ok(ConsistencyReport {
        n_grid: cfg.n_grid.clone(),
        seeds: cfg.seeds,
        loss_star: star.loss,
        loss_circ,
        behavior_loss_circ: circ.loss,
        theta_star: star.theta,
        theta_circ: circ.theta,
        cells,
        summary,
    })
}

impl ConsistencyReport {
    pub fn cells_csv(&self) -> Result<String> {
        csv_string(&self.cells)
    }

    pub fn summary_csv(&self) -> Result<String> {
        csv_string(&self.summary)
    }

    /// Ratio of the median gap at the largest N to the one at the smallest N.
    pub fn shrink_ratios(&self) -> (f64, f64, f64) {
        let first = &self.summary[0];
        let last = &self.summary[self.summary.len() - 1];
        (
            last.median_gap_hat / first.median_gap_hat,
            last.median_gap_tilde / first.median_gap_tilde,
            last.median_gap_hat_behavior / first.median_gap_hat_behavior,
        )
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "L_pi(theta_star) = {:.6e}", self.loss_star);
        let _ = writeln!(s, "L_pi(theta_circ) = {:.6e} (floor {:.3e})", self.loss_circ, self.loss_circ - self.loss_star);
        let _ = writeln!(s, "seeds per cell   = {}", self.seeds);
        let _ = writeln!(s, "{:>8} {:>14} {:>14} {:>14}", "N", "gap_hat", "gap_tilde", "gap_hat_pi1");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{:>8} {:>14.6e} {:>14.6e} {:>14.6e}",
                r.n, r.median_gap_hat, r.median_gap_tilde, r.median_gap_hat_behavior
            );
        }
        let (hat, tilde, behavior) = self.shrink_ratios();
        let _ = writeln!(s, "largest/smallest N: hat {hat:.3}, tilde {tilde:.3}, no-shift hat {behavior:.3}");
        s
    }
}
