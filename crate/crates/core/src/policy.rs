//! Stochastic policies with exact log-densities and closed-form KL divergences.
//!
//! A policy maps state features to the parameters of an action distribution.
//! Gradients flow in two stages: the distribution reports the gradient with
//! respect to its own parameters, and the policy backpropagates that through
//! whatever produced them. This lets a batch that revisits the same state run
//! the network once per distinct state.

use std::ops::Deref;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::checkpoint::{CheckpointReader, CheckpointWriter};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, Trace};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub trait ActionDistribution: Clone + Send + Sync {
    type Action;

    fn num_params(&self) -> usize;

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::Action;

    fn log_prob(&self, action: &Self::Action) -> f64;

    /// Adds `scale * d log p(action) / d theta_dist` to `out`.
    fn accumulate_log_prob_grad(&self, action: &Self::Action, scale: f64, out: &mut [f64]);

    /// `KL(self || other)`.
    fn kl(&self, other: &Self) -> Result<f64>;

    /// Adds `scale * d KL(self || other) / d theta_self` to `out`.
    fn accumulate_kl_grad(&self, other: &Self, scale: f64, out: &mut [f64]) -> Result<()>;
}

pub trait Policy: Clone + Send + Sync {
    type Action: Clone + Send + Sync;
    type Dist: ActionDistribution<Action = Self::Action>;

    /// Family tag written into snapshot files.
    const FAMILY: &'static str;

    fn distribution(&self, state: &[f64]) -> Result<Self::Dist>;

    fn num_params(&self) -> usize;

    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// Backpropagates a gradient on the distribution parameters at `state`
    /// into `out` (length [`Policy::num_params`]).
    fn accumulate_param_grad(&self, state: &[f64], dist_grad: &[f64], out: &mut [f64]) -> Result<()>;

    fn write_checkpoint(&self, w: &mut CheckpointWriter);

    fn read_checkpoint(r: &mut CheckpointReader<'_>) -> Result<Self>;

    fn sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Self::Action> {
        Ok(self.distribution(state)?.sample(rng))
    }

    fn log_prob(&self, state: &[f64], action: &Self::Action) -> Result<f64> {
        Ok(self.distribution(state)?.log_prob(action))
    }

    /// Gradient of `log pi(action | state)` with respect to all parameters.
    fn log_prob_grad(&self, state: &[f64], action: &Self::Action) -> Result<Vec<f64>> {
        let dist = self.distribution(state)?;
        let mut dist_grad = vec![0.0; dist.num_params()];
        dist.accumulate_log_prob_grad(action, 1.0, &mut dist_grad);
        let mut out = vec![0.0; self.num_params()];
        self.accumulate_param_grad(state, &dist_grad, &mut out)?;
        Ok(out)
    }
}

/// `KL(p(.|s) || q(.|s))` in closed form.
pub fn kl_divergence<P: Policy>(p: &P, q: &P, state: &[f64]) -> Result<f64> {
    p.distribution(state)?.kl(&q.distribution(state)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianDist {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

impl ActionDistribution for GaussianDist {
    type Action = Vec<f64>;

    fn num_params(&self) -> usize {
        2 * self.mean.len()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let z: f64 = rng.sample(StandardNormal);
                m + ls.exp() * z
            })
            .collect()
    }

    fn log_prob(&self, action: &Vec<f64>) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(action)
            .map(|((m, ls), a)| {
                let z = (a - m) * (-ls).exp();
                -0.5 * z * z - ls - HALF_LN_2PI
            })
            .sum()
    }

    fn accumulate_log_prob_grad(&self, action: &Vec<f64>, scale: f64, out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let inv_var = (-2.0 * self.log_std[i]).exp();
            let diff = action[i] - self.mean[i];
            out[i] += scale * diff * inv_var;
            out[d + i] += scale * (diff * diff * inv_var - 1.0);
        }
    }

    fn kl(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                context: "gaussian kl",
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok((0..self.dim())
            .map(|i| {
                let var_p = (2.0 * self.log_std[i]).exp();
                let var_q = (2.0 * other.log_std[i]).exp();
                let dm = self.mean[i] - other.mean[i];
                other.log_std[i] - self.log_std[i] + (var_p + dm * dm) / (2.0 * var_q) - 0.5
            })
            .sum())
    }

    fn accumulate_kl_grad(&self, other: &Self, scale: f64, out: &mut [f64]) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                context: "gaussian kl",
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let d = self.dim();
        for i in 0..d {
            let var_p = (2.0 * self.log_std[i]).exp();
            let var_q = (2.0 * other.log_std[i]).exp();
            out[i] += scale * (self.mean[i] - other.mean[i]) / var_q;
            out[d + i] += scale * (var_p / var_q - 1.0);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GaussianMean {
    /// Mean given directly as a parameter vector, independent of the state.
    Direct(Vec<f64>),
    /// Mean produced by a network of the state features.
    Network(Mlp),
}

/// Diagonal Gaussian with a state-independent learned `log_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    mean: GaussianMean,
    log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn direct(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() || mean.is_empty() {
            return Err(Error::DimensionMismatch {
                context: "gaussian mean/log_std",
                expected: mean.len(),
                got: log_std.len(),
            });
        }
        Ok(GaussianPolicy {
            mean: GaussianMean::Direct(mean),
            log_std,
        })
    }

    /// Mean network `state_dim -> hidden... -> action_dim` whose output layer
    /// starts at zero, so the initial policy is exactly `N(0, std^2 I)`.
    pub fn network(
        state_dim: usize,
        hidden: &[usize],
        activation: Activation,
        action_dim: usize,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if init_std <= 0.0 || !init_std.is_finite() {
            return Err(Error::invalid(format!("initial std must be positive, got {init_std}")));
        }
        let mut dims = vec![state_dim];
        dims.extend_from_slice(hidden);
        dims.push(action_dim);
        let mut net = Mlp::uniform(&dims, activation, seed)?;
        net.zero_output_layer();
        Ok(GaussianPolicy {
            mean: GaussianMean::Network(net),
            log_std: vec![init_std.ln(); action_dim],
        })
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn mean_model(&self) -> &GaussianMean {
        &self.mean
    }

    fn mean_param_count(&self) -> usize {
        match &self.mean {
            GaussianMean::Direct(m) => m.len(),
            GaussianMean::Network(net) => net.num_params(),
        }
    }
}

impl Policy for GaussianPolicy {
    type Action = Vec<f64>;
    type Dist = GaussianDist;

    const FAMILY: &'static str = "gaussian";

    fn distribution(&self, state: &[f64]) -> Result<GaussianDist> {
        let mean = match &self.mean {
            GaussianMean::Direct(m) => m.clone(),
            GaussianMean::Network(net) => net.forward(state)?,
        };
        Ok(GaussianDist {
            mean,
            log_std: self.log_std.clone(),
        })
    }

    fn num_params(&self) -> usize {
        self.mean_param_count() + self.log_std.len()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = match &self.mean {
            GaussianMean::Direct(m) => m.clone(),
            GaussianMean::Network(net) => net.params().to_vec(),
        };
        p.extend_from_slice(&self.log_std);
        p
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "gaussian policy parameters",
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let split = self.mean_param_count();
        match &mut self.mean {
            GaussianMean::Direct(m) => m.copy_from_slice(&params[..split]),
            GaussianMean::Network(net) => net.set_params(&params[..split])?,
        }
        self.log_std.copy_from_slice(&params[split..]);
        Ok(())
    }

    fn accumulate_param_grad(&self, state: &[f64], dist_grad: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.action_dim();
        if dist_grad.len() != 2 * d {
            return Err(Error::DimensionMismatch {
                context: "gaussian distribution gradient",
                expected: 2 * d,
                got: dist_grad.len(),
            });
        }
        let split = self.mean_param_count();
        match &self.mean {
            GaussianMean::Direct(_) => {
                out[..d].iter_mut().zip(&dist_grad[..d]).for_each(|(o, g)| *o += g);
            }
            GaussianMean::Network(net) => {
                let mut trace: Trace = net.trace(state)?;
                net.backward_with(&mut trace, &dist_grad[..d], 1.0, &mut out[..split])?;
            }
        }
        out[split..].iter_mut().zip(&dist_grad[d..]).for_each(|(o, g)| *o += g);
        Ok(())
    }

    fn write_checkpoint(&self, w: &mut CheckpointWriter) {
        match &self.mean {
            GaussianMean::Direct(m) => {
                w.field("mean", "direct");
                w.vector("mean_params", m);
            }
            GaussianMean::Network(net) => {
                w.field("mean", "network");
                w.mlp("mean_", net);
            }
        }
        w.vector("log_std", &self.log_std);
    }

    fn read_checkpoint(r: &mut CheckpointReader<'_>) -> Result<Self> {
        let mean = match r.field("mean")? {
            "direct" => GaussianMean::Direct(r.vector("mean_params")?),
            "network" => GaussianMean::Network(r.mlp("mean_")?),
            other => {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("unknown gaussian mean kind `{other}`"),
                })
            }
        };
        let log_std = r.vector("log_std")?;
        Ok(GaussianPolicy { mean, log_std })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    logits: Vec<f64>,
    temperature: f64,
    log_probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(logits: Vec<f64>, temperature: f64) -> Self {
        let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let log_probs = scaled.iter().map(|z| z - lse).collect();
        CategoricalDist {
            logits,
            temperature,
            log_probs,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.logits.len()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|lp| lp.exp()).collect()
    }

    fn check_same_support(&self, other: &Self) -> Result<()> {
        if self.n_actions() != other.n_actions() {
            return Err(Error::DimensionMismatch {
                context: "categorical kl",
                expected: self.n_actions(),
                got: other.n_actions(),
            });
        }
        Ok(())
    }
}

impl ActionDistribution for CategoricalDist {
    type Action = usize;

    fn num_params(&self) -> usize {
        self.logits.len()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, lp) in self.log_probs.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                return a;
            }
        }
        self.log_probs.len() - 1
    }

    fn log_prob(&self, action: &usize) -> f64 {
        self.log_probs[*action]
    }

    fn accumulate_log_prob_grad(&self, action: &usize, scale: f64, out: &mut [f64]) {
        let s = scale / self.temperature;
        for (k, lp) in self.log_probs.iter().enumerate() {
            let indicator = if k == *action { 1.0 } else { 0.0 };
            out[k] += s * (indicator - lp.exp());
        }
    }

    fn kl(&self, other: &Self) -> Result<f64> {
        self.check_same_support(other)?;
        Ok(self
            .log_probs
            .iter()
            .zip(&other.log_probs)
            .map(|(lp, lq)| lp.exp() * (lp - lq))
            .sum())
    }

    fn accumulate_kl_grad(&self, other: &Self, scale: f64, out: &mut [f64]) -> Result<()> {
        let kl = self.kl(other)?;
        let s = scale / self.temperature;
        for (k, (lp, lq)) in self.log_probs.iter().zip(&other.log_probs).enumerate() {
            out[k] += s * lp.exp() * ((lp - lq) - kl);
        }
        Ok(())
    }
}

/// Softmax policy over a finite action set, `pi(a|s) = softmax(f(s) / T)_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPolicy {
    logits_net: Mlp,
    temperature: f64,
}

impl CategoricalPolicy {
    pub fn new(logits_net: Mlp, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        Ok(CategoricalPolicy {
            logits_net,
            temperature,
        })
    }

    /// Tabular policy for one-hot state features: `logits[s][a]`.
    pub fn from_logits(logits: &[Vec<f64>]) -> Result<Self> {
        let n_states = logits.len();
        let n_actions = logits.first().map_or(0, Vec::len);
        if n_states == 0 || n_actions == 0 || logits.iter().any(|r| r.len() != n_actions) {
            return Err(Error::invalid("logit table must be a non-empty rectangle"));
        }
        let mut params = vec![0.0; (n_states + 1) * n_actions];
        for (s, row) in logits.iter().enumerate() {
            for (a, z) in row.iter().enumerate() {
                params[a * n_states + s] = *z;
            }
        }
        let net = Mlp::from_params(&[n_states, n_actions], &[], params, 0)?;
        CategoricalPolicy::new(net, 1.0)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Result<Self> {
        CategoricalPolicy::from_logits(&vec![vec![0.0; n_actions]; n_states])
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn net(&self) -> &Mlp {
        &self.logits_net
    }

    pub fn n_actions(&self) -> usize {
        self.logits_net.output_dim()
    }
}

impl Policy for CategoricalPolicy {
    type Action = usize;
    type Dist = CategoricalDist;

    const FAMILY: &'static str = "categorical";

    fn distribution(&self, state: &[f64]) -> Result<CategoricalDist> {
        Ok(CategoricalDist::new(self.logits_net.forward(state)?, self.temperature))
    }

    fn num_params(&self) -> usize {
        self.logits_net.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.logits_net.params().to_vec()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.logits_net.set_params(params)
    }

    fn accumulate_param_grad(&self, state: &[f64], dist_grad: &[f64], out: &mut [f64]) -> Result<()> {
        let mut trace = self.logits_net.trace(state)?;
        self.logits_net.backward_with(&mut trace, dist_grad, 1.0, out)
    }

    fn write_checkpoint(&self, w: &mut CheckpointWriter) {
        w.field("temperature", format!("{:?}", self.temperature));
        w.mlp("logits_", &self.logits_net);
    }

    fn read_checkpoint(r: &mut CheckpointReader<'_>) -> Result<Self> {
        let temperature: f64 = r.parse_field("temperature")?;
        let net = r.mlp("logits_")?;
        CategoricalPolicy::new(net, temperature)
    }
}

/// Frozen deep copy of a policy. Only shared access is exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot<P> {
    policy: P,
    id: String,
}

impl<P: Policy> PolicySnapshot<P> {
    pub fn new(policy: &P) -> Self {
        let id = fingerprint(P::FAMILY, &policy.params());
        PolicySnapshot {
            policy: policy.clone(),
            id,
        }
    }

    /// Short content hash of the family tag and parameters.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }

    pub fn to_text(&self) -> String {
        let mut w = CheckpointWriter::new("policy-snapshot");
        w.field("family", P::FAMILY).field("id", &self.id);
        self.policy.write_checkpoint(&mut w);
        w.finish().to_string()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = CheckpointReader::new(text)?;
        r.expect_kind("policy-snapshot")?;
        let family = r.field("family")?;
        if family != P::FAMILY {
            return Err(Error::FamilyMismatch {
                left: P::FAMILY.to_string(),
                right: family.to_string(),
            });
        }
        let id = r.field("id")?.to_string();
        let policy = P::read_checkpoint(&mut r)?;
        Ok(PolicySnapshot { policy, id })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PolicySnapshot::from_text(&text)
    }
}

impl<P> Deref for PolicySnapshot<P> {
    type Target = P;

    fn deref(&self) -> &P {
        &self.policy
    }
}

pub fn fingerprint(tag: &str, values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    for v in values {
        hasher.update(v.to_bits().to_le_bytes());
    }
    hasher.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}
