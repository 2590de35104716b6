//! Independent PPO: one policy and one value network per agent, nothing
//! shared.
//!
//! A training iteration collects `buffer_length` steps in each of
//! `num_envs` environments. Every step, each agent scores its next
//! observation, broadcasts the score on the bus and reads everyone else's.
//! Once the batch is complete the novelties are relabeled and accumulated,
//! the posterior tables are refreshed, shaped rewards are computed and each
//! agent runs its own PPO update.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bus::NoveltyBus;
use crate::config::{NoveltyKind, ObsEncoding, PosteriorKind, PpoConfig, RunConfig};
use crate::error::{Error, Result};
use crate::grid::{Action, GridEnv, LocalObservation, TaskSpec};
use crate::hindsight::{
    accumulate, log_ratio, pair_channel, relabel, CountPosterior, HindsightWeight, MlpPosterior,
    Posterior, PosteriorSample, Shaping, ZBins,
};
use crate::nn::{log_softmax, softmax, Adam, Head, Network};
use crate::novelty::{NoveltySource, RndEstimator, VisitCountTable};
use crate::rng::{self, StreamRng};

/// Stream tag for minibatch shuffling.
const SHUFFLE: u64 = 0xD4;

/// Network input for one observation.
pub fn encode(obs: &LocalObservation, grid_size: usize, encoding: ObsEncoding) -> Vec<f64> {
    let flags = obs.doors.iter().map(|&d| if d { 1.0 } else { 0.0 });
    match encoding {
        ObsEncoding::Scaled => {
            let scale = (grid_size.max(2) - 1) as f64;
            let mut v = vec![obs.x as f64 / scale, obs.y as f64 / scale];
            v.extend(flags);
            v
        }
        ObsEncoding::OneHot => {
            let mut v = vec![0.0; 2 * grid_size];
            v[obs.x] = 1.0;
            v[grid_size + obs.y] = 1.0;
            v.extend(flags);
            v
        }
    }
}

pub fn encoded_dim(grid_size: usize, num_doors: usize, encoding: ObsEncoding) -> usize {
    match encoding {
        ObsEncoding::Scaled => 2 + num_doors,
        ObsEncoding::OneHot => 2 * grid_size + num_doors,
    }
}

/// Generalized advantage estimation over one env's steps. `dones[t]` marks
/// the last step of an episode; `last_value` bootstraps the step after the
/// final one when it is not terminal.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "gae inputs must be aligned");
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 == n {
            (last_value, 0.0)
        } else {
            (values[t + 1], running)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * carry;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Huber loss and its derivative with respect to the prediction.
pub fn huber(pred: f64, target: f64, delta: f64) -> (f64, f64) {
    let e = target - pred;
    if e.abs() <= delta {
        (0.5 * e * e, -e)
    } else {
        (delta * (e.abs() - 0.5 * delta), -delta * e.signum())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Clipped-surrogate loss with entropy bonus, averaged over rows, and its
/// gradient with respect to the logits.
pub fn policy_loss(
    logits: &Array2<f64>,
    actions: &[usize],
    old_logp: &[f64],
    advantages: &[f64],
    clip: f64,
    entropy_coef: f64,
) -> (PolicyStats, Array2<f64>) {
    let n = logits.nrows();
    let p = softmax(logits);
    let logp = log_softmax(logits);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut stats = PolicyStats::default();
    let inv = 1.0 / n as f64;
    for r in 0..n {
        let a = actions[r];
        let ratio = (logp[[r, a]] - old_logp[r]).exp();
        let adv = advantages[r];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        stats.loss -= unclipped.min(clipped) * inv;
        // d(-surrogate)/d logp_a, zero when the clipped branch is active
        let g_logp = if unclipped <= clipped { -unclipped * inv } else { 0.0 };
        if g_logp == 0.0 && ratio != ratio.clamp(1.0 - clip, 1.0 + clip) {
            stats.clip_fraction += inv;
        }
        let h: f64 = -(0..Action::COUNT).map(|k| p[[r, k]] * logp[[r, k]]).sum::<f64>();
        stats.entropy += h * inv;
        stats.loss -= entropy_coef * h * inv;
        stats.approx_kl += (old_logp[r] - logp[[r, a]]) * inv;
        for k in 0..logits.ncols() {
            let onehot = if k == a { 1.0 } else { 0.0 };
            grad[[r, k]] = g_logp * (onehot - p[[r, k]]) + entropy_coef * inv * p[[r, k]] * (logp[[r, k]] + h);
        }
    }
    (stats, grad)
}

/// Mean Huber value loss and its gradient with respect to the predictions.
pub fn value_loss(pred: &Array2<f64>, returns: &[f64], delta: f64) -> (f64, Array2<f64>) {
    let n = pred.nrows();
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut loss = 0.0;
    for r in 0..n {
        let (l, g) = huber(pred[[r, 0]], returns[r], delta);
        loss += l / n as f64;
        grad[[r, 0]] = g / n as f64;
    }
    (loss, grad)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy: PolicyStats,
    pub value_loss: f64,
}

/// Everything one agent needs for a PPO update, one row per sample.
#[derive(Debug, Clone)]
pub struct AgentBatch {
    pub obs: Array2<f64>,
    pub actions: Vec<usize>,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AgentLearner {
    policy: Network,
    value: Network,
    policy_opt: Adam,
    value_opt: Adam,
    value_norm: Option<ValueNorm>,
    cfg: PpoConfig,
}

/// Debiased exponential running mean and variance of value targets.
#[derive(Debug, Clone)]
pub struct ValueNorm {
    beta: f64,
    mean: f64,
    mean_sq: f64,
    debias: f64,
}

impl Default for ValueNorm {
    fn default() -> Self {
        ValueNorm {
            beta: 0.99999,
            mean: 0.0,
            mean_sq: 0.0,
            debias: 0.0,
        }
    }
}

impl ValueNorm {
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let sq = xs.iter().map(|x| x * x).sum::<f64>() / n;
        let b = self.beta;
        self.mean = b * self.mean + (1.0 - b) * m;
        self.mean_sq = b * self.mean_sq + (1.0 - b) * sq;
        self.debias = b * self.debias + (1.0 - b);
    }

    pub fn mean_std(&self) -> (f64, f64) {
        let d = self.debias.max(1e-5);
        let mean = self.mean / d;
        let var = (self.mean_sq / d - mean * mean).max(1e-2);
        (mean, var.sqrt())
    }

    pub fn normalize(&self, x: f64) -> f64 {
        let (m, s) = self.mean_std();
        (x - m) / s
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        let (m, s) = self.mean_std();
        y * s + m
    }
}

impl AgentLearner {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &PpoConfig, rng: &mut R) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(Action::COUNT);
        let policy = Network::new(&sizes, Head::Softmax, cfg.policy_head_gain, rng);
        *sizes.last_mut().unwrap() = 1;
        let value = Network::new(&sizes, Head::Linear, cfg.value_head_gain, rng);
        let policy_opt = Adam::new(&policy, cfg.actor_lr, cfg.adam_eps, Some(cfg.max_grad_norm));
        let value_opt = Adam::new(&value, cfg.critic_lr, cfg.adam_eps, Some(cfg.max_grad_norm));
        AgentLearner {
            policy,
            value,
            policy_opt,
            value_opt,
            value_norm: cfg.normalize_values.then(ValueNorm::default),
            cfg: cfg.clone(),
        }
    }

    pub fn policy(&self) -> &Network {
        &self.policy
    }

    pub fn value(&self) -> &Network {
        &self.value
    }

    pub fn policy_mut(&mut self) -> &mut Network {
        &mut self.policy
    }

    /// Action probabilities, one row per observation.
    pub fn probs(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.policy.predict(obs)
    }

    pub fn values(&self, obs: ArrayView2<f64>) -> Result<Vec<f64>> {
        let v = self.value.predict(obs)?.column(0).to_vec();
        Ok(match &self.value_norm {
            Some(norm) => v.into_iter().map(|y| norm.denormalize(y)).collect(),
            None => v,
        })
    }

    pub fn greedy(&self, obs: &[f64]) -> Result<usize> {
        let p = self.policy.predict_one(obs)?;
        Ok(argmax(&p))
    }

    /// `epochs` passes of clipped-surrogate and Huber value updates.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &AgentBatch, rng: &mut R) -> Result<UpdateStats> {
        let n = batch.actions.len();
        if n == 0 {
            return Err(Error::Usage("empty PPO batch".into()));
        }
        let mut adv = batch.advantages.clone();
        if self.cfg.normalize_advantages && n > 1 {
            let mean = adv.iter().sum::<f64>() / n as f64;
            let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt() + 1e-8;
            adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
        }
        let minibatches = self.cfg.minibatches.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut stats = UpdateStats::default();
        for _ in 0..self.cfg.epochs {
            if minibatches > 1 {
                order.shuffle(rng);
            }
            for chunk in 0..minibatches {
                let lo = chunk * n / minibatches;
                let hi = (chunk + 1) * n / minibatches;
                let idx = &order[lo..hi];
                stats = if minibatches == 1 {
                    self.step(batch.obs.view(), &batch.actions, &batch.old_logp, &adv, &batch.returns)?
                } else {
                    let obs = batch.obs.select(Axis(0), idx);
                    let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
                    let actions: Vec<usize> = idx.iter().map(|&i| batch.actions[i]).collect();
                    self.step(obs.view(), &actions, &pick(&batch.old_logp), &pick(&adv), &pick(&batch.returns))?
                };
            }
        }
        Ok(stats)
    }

    fn step(&mut self, obs: ArrayView2<f64>, actions: &[usize], old_logp: &[f64], adv: &[f64], returns: &[f64]) -> Result<UpdateStats> {
        let logits = self.policy.forward_logits(obs)?;
        let (pstats, grad) = policy_loss(&logits, actions, old_logp, adv, self.cfg.clip, self.cfg.entropy_coef);
        let pred = self.value.forward(obs)?;
        let targets: Vec<f64> = match &mut self.value_norm {
            Some(norm) => {
                norm.update(returns);
                returns.iter().map(|&r| norm.normalize(r)).collect()
            }
            None => returns.to_vec(),
        };
        let (vloss, vgrad) = value_loss(&pred, &targets, self.cfg.huber_delta);
        if !pstats.loss.is_finite() || !vloss.is_finite() {
            return Err(Error::NonFinite {
                context: "ppo update".into(),
                details: format!(
                    "policy loss {}, value loss {vloss}, entropy {}, kl {}",
                    pstats.loss, pstats.entropy, pstats.approx_kl
                ),
            });
        }
        let pg = self.policy.backward_logits(&grad)?;
        self.policy_opt.step(&mut self.policy, &pg)?;
        let vg = self.value.backward(&vgrad)?;
        self.value_opt.step(&mut self.value, &vg)?;
        Ok(UpdateStats {
            policy: pstats,
            value_loss: vloss,
        })
    }
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
        .0
}

fn sample_action<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

/// One row of a learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: usize,
    pub env_steps: u64,
    /// Mean per-agent extrinsic return over the episodes finished this
    /// iteration.
    pub mean_episode_reward: f64,
    /// Mean per-step novelty reward (after `β`).
    pub mean_r_nov: f64,
    /// Mean per-step hindsight reward (after `β` and `λ`).
    pub mean_r_hin: f64,
    pub success_rate: f64,
}

pub const CURVE_HEADER: &str = "iteration,env_steps,mean_episode_reward,mean_r_nov,mean_r_hin,success_rate";

impl CurveRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.env_steps, self.mean_episode_reward, self.mean_r_nov, self.mean_r_hin, self.success_rate
        )
    }
}

/// Intrinsic reward received by one agent at one cell during one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellSums {
    pub visits: u64,
    pub r_nov: f64,
    pub r_hin: f64,
}

/// Per-iteration, per-agent, per-cell sums keyed by `(iteration, agent, x, y)`.
pub type CellLog = Vec<((usize, usize, usize, usize), CellSums)>;

pub const CELL_HEADER: &str = "iteration,agent,x,y,visits,r_nov_sum,r_hin_sum";

/// Steps of one env for one sampling batch.
#[derive(Debug, Default)]
struct EnvTrace {
    obs: Vec<Vec<LocalObservation>>,
    inputs: Vec<Vec<Vec<f64>>>,
    next_inputs: Vec<Vec<Vec<f64>>>,
    actions: Vec<Vec<usize>>,
    logp: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    r_ext: Vec<f64>,
    dones: Vec<bool>,
    last_values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalResult {
    pub episodes: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    /// Scalars sent on the bus during evaluation; always zero.
    pub messages: u64,
}

/// Training state for one seed.
#[derive(Debug)]
pub struct Trainer {
    cfg: RunConfig,
    spec: TaskSpec,
    shaping: Shaping,
    learners: Vec<AgentLearner>,
    novelty: Vec<NoveltySource>,
    posterior: Option<Box<dyn Posterior>>,
    envs: Vec<GridEnv>,
    bus: NoveltyBus,
    action_rngs: Vec<StreamRng>,
    shuffle_rngs: Vec<StreamRng>,
    iteration: usize,
    env_steps: u64,
    cells: Option<CellLog>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.task_spec()?;
        let shaping = cfg.shaping()?;
        let n = spec.num_agents();
        let size = spec.grid_size();
        let dim = encoded_dim(size, spec.num_doors(), cfg.obs_encoding);
        let learners = (0..n)
            .map(|i| AgentLearner::new(dim, &cfg.ppo, &mut rng::stream(seed, &[rng::INIT, i as u64])))
            .collect();
        let novelty = (0..n)
            .map(|i| match cfg.novelty {
                NoveltyKind::Count => NoveltySource::Count(VisitCountTable::new(size)),
                NoveltyKind::Rnd => NoveltySource::Rnd(RndEstimator::new(
                    dim,
                    &cfg.rnd,
                    &mut rng::stream(seed, &[rng::INIT, i as u64, 1]),
                )),
            })
            .collect();
        let posterior: Option<Box<dyn Posterior>> = if shaping.needs_hindsight() {
            let (channels, scale) = if cfg.mode.is_scalable() {
                (n, (n - 1) as f64)
            } else {
                (n * (n - 1), 1.0)
            };
            let bins = ZBins::new(cfg.z_bins, cfg.gamma, scale)?;
            Some(match cfg.posterior {
                PosteriorKind::Count => Box::new(CountPosterior::new(channels, cfg.window, bins)?),
                PosteriorKind::Mlp => Box::new(MlpPosterior::new(
                    channels,
                    2 + spec.num_doors(),
                    cfg.window,
                    bins,
                    &cfg.mlp_posterior,
                    &mut rng::stream(seed, &[rng::INIT, 0xF0]),
                )?),
            })
        } else {
            None
        };
        let envs = (0..cfg.num_envs).map(|_| GridEnv::new(spec.clone())).collect();
        Ok(Trainer {
            cfg: cfg.clone(),
            shaping,
            learners,
            novelty,
            posterior,
            envs,
            bus: NoveltyBus::new(n),
            action_rngs: (0..n).map(|i| rng::stream(seed, &[rng::ACTIONS, i as u64])).collect(),
            shuffle_rngs: (0..n).map(|i| rng::stream(seed, &[SHUFFLE, i as u64])).collect(),
            iteration: 0,
            env_steps: 0,
            cells: cfg.log_cells.then(Vec::new),
            spec,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn learners(&self) -> &[AgentLearner] {
        &self.learners
    }

    pub fn learners_mut(&mut self) -> &mut [AgentLearner] {
        &mut self.learners
    }

    pub fn bus(&self) -> &NoveltyBus {
        &self.bus
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn novelty(&self) -> &[NoveltySource] {
        &self.novelty
    }

    pub fn cells(&self) -> Option<&CellLog> {
        self.cells.as_ref()
    }

    fn encode(&self, obs: &LocalObservation) -> Vec<f64> {
        encode(obs, self.spec.grid_size(), self.cfg.obs_encoding)
    }

    /// Collect one sampling batch. Every env starts a fresh episode and
    /// auto-resets when one ends.
    fn collect(&mut self) -> Result<(Vec<EnvTrace>, Vec<(f64, bool)>)> {
        let n = self.spec.num_agents();
        let e_count = self.envs.len();
        let horizon = self.cfg.buffer_length;
        let mut traces: Vec<EnvTrace> = (0..e_count).map(|_| EnvTrace::default()).collect();
        let mut episodes = Vec::new();
        let mut current: Vec<Vec<LocalObservation>> = self.envs.iter_mut().map(|env| env.reset(0)).collect();
        let dim = self.learners[0].policy.input_dim();

        for _ in 0..horizon {
            let inputs: Vec<Vec<Vec<f64>>> = current
                .iter()
                .map(|obs| obs.iter().map(|o| self.encode(o)).collect())
                .collect();
            // act: one batched forward per agent
            let mut actions = vec![vec![0usize; n]; e_count];
            let mut logps = vec![vec![0.0; n]; e_count];
            let mut values = vec![vec![0.0; n]; e_count];
            for i in 0..n {
                let mut x = Array2::zeros((e_count, dim));
                for (e, inp) in inputs.iter().enumerate() {
                    x.row_mut(e).assign(&Array1::from(inp[i].clone()));
                }
                let probs = self.learners[i].probs(x.view())?;
                let v = self.learners[i].values(x.view())?;
                for e in 0..e_count {
                    let p = probs.row(e);
                    let a = sample_action(p.as_slice().expect("contiguous row"), &mut self.action_rngs[i]);
                    actions[e][i] = a;
                    logps[e][i] = p[a].ln();
                    values[e][i] = v[e];
                }
            }
            for e in 0..e_count {
                let joint: Vec<Action> = actions[e].iter().map(|&a| Action::from_index(a).unwrap()).collect();
                let tr = self.envs[e].step(&joint)?;
                let mut frame = self.bus.open_frame();
                let mut next_inputs = Vec::with_capacity(n);
                for (i, o) in tr.observations.iter().enumerate() {
                    let input = encode(o, self.spec.grid_size(), self.cfg.obs_encoding);
                    let u = match &mut self.novelty[i] {
                        NoveltySource::Count(table) => table.visit(o.x, o.y)?,
                        NoveltySource::Rnd(est) => est.novelty(&input)?,
                    };
                    frame.broadcast(i, u)?;
                    next_inputs.push(input);
                }
                let sealed = frame.seal()?;
                let received = sealed.collect(0)?.to_vec();

                let trace = &mut traces[e];
                trace.obs.push(std::mem::take(&mut current[e]));
                trace.inputs.push(inputs[e].clone());
                trace.next_inputs.push(next_inputs);
                trace.actions.push(actions[e].clone());
                trace.logp.push(logps[e].clone());
                trace.values.push(values[e].clone());
                trace.u.push(received);
                trace.r_ext.push(tr.reward);
                trace.dones.push(tr.done);
                if tr.done {
                    episodes.push((tr.reward, tr.success));
                    current[e] = self.envs[e].reset(0);
                } else {
                    current[e] = tr.observations;
                }
            }
            self.env_steps += e_count as u64;
        }
        // bootstrap values for unfinished episodes
        for i in 0..n {
            let mut x = Array2::zeros((e_count, dim));
            for (e, obs) in current.iter().enumerate() {
                x.row_mut(e).assign(&Array1::from(self.encode(&obs[i])));
            }
            let v = self.learners[i].values(x.view())?;
            for (e, trace) in traces.iter_mut().enumerate() {
                trace.last_values.push(v[e]);
            }
        }
        Ok((traces, episodes))
    }

    /// `(start, end)` of every episode segment in an env trace.
    fn segments(dones: &[bool]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for (t, &d) in dones.iter().enumerate() {
            if d {
                out.push((start, t + 1));
                start = t + 1;
            }
        }
        if start < dones.len() {
            out.push((start, dones.len()));
        }
        out
    }

    /// One rollout, reward computation and PPO update for every agent.
    pub fn iterate(&mut self) -> Result<CurveRecord> {
        let n = self.spec.num_agents();
        let gamma = self.cfg.gamma;
        let (traces, episodes) = self.collect()?;
        let e_count = traces.len();
        let horizon = self.cfg.buffer_length;

        // pair_terms[e][t][i]: the mode's hindsight sum for agent i
        let mut pair_terms = vec![vec![vec![0.0; n]; horizon]; e_count];
        if let Some(posterior) = self.posterior.as_mut() {
            // relabel each agent's novelties over the whole batch
            let mut z_tilde = vec![vec![vec![0.0; n]; horizon]; e_count];
            let mut z_raw = vec![vec![vec![0.0; n]; horizon]; e_count];
            for j in 0..n {
                let batch: Vec<f64> = traces.iter().flat_map(|tr| tr.u.iter().map(move |u| u[j])).collect();
                let (bins, _) = relabel(&batch)?;
                for (e, tr) in traces.iter().enumerate() {
                    for (s, end) in Self::segments(&tr.dones) {
                        let u: Vec<f64> = (s..end).map(|t| tr.u[t][j]).collect();
                        let labels: Vec<f64> = u.iter().map(|&v| bins.label(v)).collect();
                        for (k, (zt, zr)) in accumulate(&labels, gamma).into_iter().zip(accumulate(&u, gamma)).enumerate() {
                            z_tilde[e][s + k][j] = zt;
                            z_raw[e][s + k][j] = zr;
                        }
                    }
                }
            }
            let scalable = self.cfg.mode.is_scalable();
            let others = |i: usize| (0..n).filter(move |&j| j != i);
            let condition = |z: &[f64], i: usize, j: usize| -> f64 {
                if scalable {
                    others(i).map(|k| z[k]).sum()
                } else {
                    z[j]
                }
            };
            let channel = |i: usize, j: usize| if scalable { i } else { pair_channel(n, i, j) };
            let targets = |i: usize| -> Vec<usize> { if scalable { vec![usize::MAX] } else { others(i).collect() } };

            let mut batch = vec![Vec::new(); posterior.num_channels()];
            for (e, tr) in traces.iter().enumerate() {
                for t in 0..horizon {
                    for i in 0..n {
                        for j in targets(i) {
                            batch[channel(i, j)].push(PosteriorSample {
                                obs: tr.obs[t][i].clone(),
                                action: tr.actions[t][i],
                                z: condition(&z_tilde[e][t], i, j),
                            });
                        }
                    }
                }
            }
            posterior.push_batch(batch)?;

            for (e, tr) in traces.iter().enumerate() {
                for t in 0..horizon {
                    for i in 0..n {
                        let mut sum = 0.0;
                        for j in targets(i) {
                            let zt = condition(&z_tilde[e][t], i, j);
                            let p = posterior.query(channel(i, j), &tr.obs[t][i], zt)?;
                            let lr = log_ratio(p[tr.actions[t][i]], tr.logp[t][i]);
                            let weight = match self.cfg.hindsight_weight {
                                HindsightWeight::Relabeled => zt,
                                HindsightWeight::Raw => condition(&z_raw[e][t], i, j),
                            };
                            sum += self.cfg.mode.pair_term(weight, lr);
                        }
                        pair_terms[e][t][i] = sum;
                    }
                }
            }
        }

        // shaped rewards, GAE and updates
        let mut nov_total = 0.0;
        let mut hin_total = 0.0;
        let mut cell_sums: HashMap<(usize, usize, usize), CellSums> = HashMap::new();
        let mut updates = Vec::with_capacity(n);
        for i in 0..n {
            let rows = e_count * horizon;
            let dim = self.learners[i].policy.input_dim();
            let mut obs = Array2::zeros((rows, dim));
            let mut actions = Vec::with_capacity(rows);
            let mut old_logp = Vec::with_capacity(rows);
            let mut advantages = Vec::with_capacity(rows);
            let mut returns = Vec::with_capacity(rows);
            for (e, tr) in traces.iter().enumerate() {
                let mut rewards = Vec::with_capacity(horizon);
                for t in 0..horizon {
                    let parts = self.shaping.reward(tr.r_ext[t], i, &tr.u[t], &[pair_terms[e][t][i]]);
                    nov_total += parts.nov;
                    hin_total += parts.hin;
                    if self.cells.is_some() {
                        let o = &tr.obs[t][i];
                        let c = cell_sums.entry((i, o.x, o.y)).or_default();
                        c.visits += 1;
                        c.r_nov += parts.nov;
                        c.r_hin += parts.hin;
                    }
                    rewards.push(parts.total);
                    let row = e * horizon + t;
                    obs.row_mut(row).assign(&Array1::from(tr.inputs[t][i].clone()));
                    actions.push(tr.actions[t][i]);
                    old_logp.push(tr.logp[t][i]);
                }
                let values: Vec<f64> = tr.values.iter().map(|v| v[i]).collect();
                let (adv, ret) = gae(&rewards, &values, &tr.dones, tr.last_values[i], gamma, self.cfg.ppo.gae_lambda);
                advantages.extend(adv);
                returns.extend(ret);
            }
            if let NoveltySource::Rnd(est) = &mut self.novelty[i] {
                let next: Vec<f64> = traces
                    .iter()
                    .flat_map(|tr| tr.next_inputs.iter().flat_map(move |x| x[i].iter().copied()))
                    .collect();
                let x = Array2::from_shape_vec((rows, dim), next).expect("rows of equal width");
                for _ in 0..self.cfg.ppo.epochs {
                    est.update(x.view())?;
                }
            }
            let batch = AgentBatch {
                obs,
                actions,
                old_logp,
                advantages,
                returns,
            };
            updates.push(self.learners[i].update(&batch, &mut self.shuffle_rngs[i])?);
        }

        if let Some(log) = self.cells.as_mut() {
            let mut sorted: Vec<_> = cell_sums.into_iter().collect();
            sorted.sort_by_key(|&(k, _)| k);
            log.extend(sorted.into_iter().map(|((i, x, y), s)| ((self.iteration, i, x, y), s)));
        }

        let steps = (e_count * horizon * n) as f64;
        let record = CurveRecord {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_episode_reward: mean(episodes.iter().map(|&(r, _)| r)),
            mean_r_nov: nov_total / steps,
            mean_r_hin: hin_total / steps,
            success_rate: mean(episodes.iter().map(|&(_, s)| if s { 1.0 } else { 0.0 })),
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Greedy rollouts on a fresh environment. The bus is not used.
    pub fn evaluate(&self, episodes: usize) -> Result<EvalResult> {
        let before = self.bus.scalars_sent();
        let mut env = GridEnv::new(self.spec.clone());
        let mut total = 0.0;
        let mut successes = 0;
        for k in 0..episodes {
            let mut obs = env.reset(k as u64);
            loop {
                let joint = obs
                    .iter()
                    .enumerate()
                    .map(|(i, o)| Ok(Action::from_index(self.learners[i].greedy(&self.encode(o))?).unwrap()))
                    .collect::<Result<Vec<_>>>()?;
                let tr = env.step(&joint)?;
                if tr.done {
                    total += tr.reward;
                    successes += tr.success as usize;
                    break;
                }
                obs = tr.observations;
            }
        }
        let denom = episodes.max(1) as f64;
        Ok(EvalResult {
            episodes,
            mean_reward: total / denom,
            success_rate: successes as f64 / denom,
            messages: self.bus.scalars_sent() - before,
        })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Result of a full training run for one seed.
#[derive(Debug)]
pub struct TrainOutput {
    pub curve: Vec<CurveRecord>,
    pub cells: Option<CellLog>,
    pub eval: Option<EvalResult>,
    pub bus_scalars: u64,
    pub env_steps: u64,
    pub learners: Vec<AgentLearner>,
}

/// Train for `cfg.iterations` iterations on `seed`.
pub fn train(cfg: &RunConfig, seed: u64) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg, seed)?;
    let mut curve = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        curve.push(trainer.iterate()?);
    }
    let eval = if cfg.eval_episodes > 0 {
        Some(trainer.evaluate(cfg.eval_episodes)?)
    } else {
        None
    };
    Ok(TrainOutput {
        curve,
        eval,
        bus_scalars: trainer.bus.scalars_sent(),
        env_steps: trainer.env_steps,
        cells: trainer.cells.take(),
        learners: trainer.learners,
    })
}
