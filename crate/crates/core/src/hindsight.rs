//! Accumulated novelty, percentile relabeling, action posteriors and the
//! shaped rewards built from them.
//!
//! After a sampling batch is collected, each agent's novelties are relabeled
//! to `{0.1, 0.3, 0.5, 0.7, 0.9}` by batch percentiles and accumulated
//! backwards within each episode into `z̃`. A posterior `p̂(a | o, bin(z̃))` is
//! estimated from the last `w` batches and the hindsight term for agent `i`
//! with respect to agent `j` is `z̃ʲ · ln(p̂(aⁱ | oⁱ, z̃ʲ) / π(aⁱ | oⁱ))`.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Action, LocalObservation};
use crate::nn::{softmax, Adam, Head, Network};

/// Relabeled values, one per percentile bin.
pub const RELABEL_LABELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Lower bound applied to posterior probabilities before taking the log.
pub const POSTERIOR_FLOOR: f64 = 1e-6;

/// Discounted backward sum `z_t = u_t + γ z_{t+1}` over one episode.
pub fn accumulate(u: &[f64], gamma: f64) -> Vec<f64> {
    let mut z = vec![0.0; u.len()];
    let mut next = 0.0;
    for t in (0..u.len()).rev() {
        next = u[t] + gamma * next;
        z[t] = next;
    }
    z
}

/// Bin edges at the 20th, 40th, 60th and 80th nearest-rank percentiles of a
/// batch. A value equal to an edge belongs to the lower bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelabelBins {
    edges: [f64; 4],
}

impl RelabelBins {
    pub fn fit(batch: &[f64]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Usage("cannot relabel an empty batch".into()));
        }
        if let Some(v) = batch.iter().find(|v| !v.is_finite()) {
            return Err(Error::Usage(format!("non-finite novelty {v} in batch")));
        }
        let mut sorted = batch.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut edges = [0.0; 4];
        for (k, edge) in edges.iter_mut().enumerate() {
            // nearest rank: ceil(p * n), 1-based
            let rank = ((k + 1) * n).div_ceil(5).max(1);
            *edge = sorted[rank - 1];
        }
        Ok(RelabelBins { edges })
    }

    pub fn edges(&self) -> [f64; 4] {
        self.edges
    }

    pub fn bin(&self, u: f64) -> usize {
        self.edges.iter().position(|&e| u <= e).unwrap_or(4)
    }

    pub fn label(&self, u: f64) -> f64 {
        RELABEL_LABELS[self.bin(u)]
    }
}

/// Fit percentile bins on `batch` and relabel every value.
pub fn relabel(batch: &[f64]) -> Result<(RelabelBins, Vec<f64>)> {
    let bins = RelabelBins::fit(batch)?;
    let labels = batch.iter().map(|&u| bins.label(u)).collect();
    Ok((bins, labels))
}

/// Uniform bins over `[0.1, 0.9] · scale / (1 − γ)`, clamped at both ends.
/// `scale` is 1 for a single agent's `z̃` and `N − 1` for the sum over the
/// other agents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZBins {
    k: usize,
    lo: f64,
    hi: f64,
}

impl ZBins {
    pub fn new(k: usize, gamma: f64, scale: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("number of z bins must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1), got {gamma}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("bin scale must be positive, got {scale}")));
        }
        let lo = RELABEL_LABELS[0] * scale / (1.0 - gamma);
        let hi = RELABEL_LABELS[4] * scale / (1.0 - gamma);
        Ok(ZBins { k, lo, hi })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn bin(&self, z: f64) -> usize {
        if self.k == 1 || z <= self.lo {
            return 0;
        }
        let pos = (z - self.lo) / (self.hi - self.lo) * self.k as f64;
        (pos.floor() as usize).min(self.k - 1)
    }

    /// `z` mapped to `[0, 1]` over the bin range, unclamped.
    pub fn normalize(&self, z: f64) -> f64 {
        (z - self.lo) / (self.hi - self.lo)
    }
}

pub fn discretize_z(z: f64, k: usize, gamma: f64) -> Result<usize> {
    Ok(ZBins::new(k, gamma, 1.0)?.bin(z))
}

/// One `(o, a, z̃)` triple for a posterior channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub obs: LocalObservation,
    pub action: usize,
    pub z: f64,
}

/// Estimator of `p̂(a | o, z̃)` over a rolling window of sampling batches.
///
/// A channel is one conditional: the ordered pair `(i, j)` for the pairwise
/// reward, or agent `i` alone for the scalable one. Batches are indexed by
/// channel.
pub trait Posterior: fmt::Debug + Send {
    fn num_channels(&self) -> usize;

    fn push_batch(&mut self, batch: Vec<Vec<PosteriorSample>>) -> Result<()>;

    fn query(&self, channel: usize, obs: &LocalObservation, z: f64) -> Result<[f64; Action::COUNT]>;
}

/// Channel index of the ordered pair `(i, j)`, `i != j`, among `n` agents.
pub fn pair_channel(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i != j && i < n && j < n);
    i * (n - 1) + if j < i { j } else { j - 1 }
}

type CountKey = (u64, usize);

#[derive(Debug, Clone)]
pub struct CountPosterior {
    bins: ZBins,
    window: usize,
    tables: Vec<HashMap<CountKey, [u64; Action::COUNT]>>,
    history: VecDeque<Vec<Vec<(CountKey, usize)>>>,
}

impl CountPosterior {
    pub fn new(channels: usize, window: usize, bins: ZBins) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("posterior window must be at least 1".into()));
        }
        Ok(CountPosterior {
            bins,
            window,
            tables: vec![HashMap::new(); channels],
            history: VecDeque::new(),
        })
    }

    pub fn bins(&self) -> &ZBins {
        &self.bins
    }

    pub fn batches_held(&self) -> usize {
        self.history.len()
    }

    pub fn counts(&self, channel: usize, obs_key: u64, bin: usize) -> [u64; Action::COUNT] {
        self.tables[channel]
            .get(&(obs_key, bin))
            .copied()
            .unwrap_or([0; Action::COUNT])
    }

    /// Empirical `n(a, o, bin) / n(o, bin)`; uniform when `n(o, bin) = 0`.
    pub fn distribution(&self, channel: usize, obs_key: u64, bin: usize) -> [f64; Action::COUNT] {
        let c = self.counts(channel, obs_key, bin);
        let total: u64 = c.iter().sum();
        if total == 0 {
            return [1.0 / Action::COUNT as f64; Action::COUNT];
        }
        c.map(|n| n as f64 / total as f64)
    }

    fn evict_oldest(&mut self) {
        let Some(old) = self.history.pop_front() else { return };
        for (channel, records) in old.into_iter().enumerate() {
            let table = &mut self.tables[channel];
            for (key, a) in records {
                let entry = table.get_mut(&key).expect("evicted record was counted");
                entry[a] -= 1;
                if entry.iter().all(|&n| n == 0) {
                    table.remove(&key);
                }
            }
        }
    }
}

impl Posterior for CountPosterior {
    fn num_channels(&self) -> usize {
        self.tables.len()
    }

    fn push_batch(&mut self, batch: Vec<Vec<PosteriorSample>>) -> Result<()> {
        check_batch(self.tables.len(), &batch)?;
        let mut records = Vec::with_capacity(batch.len());
        for (channel, samples) in batch.into_iter().enumerate() {
            let table = &mut self.tables[channel];
            let mut rec = Vec::with_capacity(samples.len());
            for s in samples {
                let key = (s.obs.key(), self.bins.bin(s.z));
                table.entry(key).or_insert([0; Action::COUNT])[s.action] += 1;
                rec.push((key, s.action));
            }
            records.push(rec);
        }
        self.history.push_back(records);
        while self.history.len() > self.window {
            self.evict_oldest();
        }
        Ok(())
    }

    fn query(&self, channel: usize, obs: &LocalObservation, z: f64) -> Result<[f64; Action::COUNT]> {
        if channel >= self.tables.len() {
            return Err(Error::Usage(format!("posterior channel {channel} out of range")));
        }
        Ok(self.distribution(channel, obs.key(), self.bins.bin(z)))
    }
}

fn check_batch(channels: usize, batch: &[Vec<PosteriorSample>]) -> Result<()> {
    if batch.len() != channels {
        return Err(Error::Shape {
            expected: channels,
            got: batch.len(),
        });
    }
    for s in batch.iter().flatten() {
        if s.action >= Action::COUNT {
            return Err(Error::Usage(format!("action index {} out of range", s.action)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpPosteriorConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub adam_eps: f64,
    pub epochs: usize,
}

impl Default for MlpPosteriorConfig {
    fn default() -> Self {
        MlpPosteriorConfig {
            hidden: vec![64, 64],
            lr: 3e-4,
            adam_eps: 1e-5,
            epochs: 40,
        }
    }
}

/// Posterior fitted by a softmax MLP on `(o, z̃) -> a` with cross-entropy,
/// retrained on the window after every batch.
#[derive(Debug)]
pub struct MlpPosterior {
    bins: ZBins,
    window: usize,
    epochs: usize,
    nets: Vec<(Network, Adam)>,
    history: VecDeque<Vec<Vec<PosteriorSample>>>,
}

impl MlpPosterior {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        obs_dim: usize,
        window: usize,
        bins: ZBins,
        cfg: &MlpPosteriorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("posterior window must be at least 1".into()));
        }
        let mut sizes = vec![obs_dim + 1];
        sizes.extend(&cfg.hidden);
        sizes.push(Action::COUNT);
        let nets = (0..channels)
            .map(|_| {
                let net = Network::new(&sizes, Head::Softmax, 0.01, rng);
                let opt = Adam::new(&net, cfg.lr, cfg.adam_eps, None);
                (net, opt)
            })
            .collect();
        Ok(MlpPosterior {
            bins,
            window,
            epochs: cfg.epochs,
            nets,
            history: VecDeque::new(),
        })
    }

    fn features(&self, obs: &LocalObservation, z: f64) -> Vec<f64> {
        let mut v = obs.to_vec();
        v.push(self.bins.normalize(z));
        v
    }

    fn train_channel(&mut self, channel: usize) -> Result<()> {
        let samples: Vec<&PosteriorSample> = self.history.iter().flat_map(|b| &b[channel]).collect();
        if samples.is_empty() {
            return Ok(());
        }
        let dim = self.nets[channel].0.input_dim();
        let n = samples.len();
        let mut x = Array2::zeros((n, dim));
        for (r, s) in samples.iter().enumerate() {
            for (c, v) in self.features(&s.obs, s.z).into_iter().enumerate() {
                x[[r, c]] = v;
            }
        }
        let (net, opt) = &mut self.nets[channel];
        for _ in 0..self.epochs {
            let logits = net.forward_logits(x.view())?;
            let mut grad = softmax(&logits);
            for (r, s) in samples.iter().enumerate() {
                grad[[r, s.action]] -= 1.0;
            }
            grad /= n as f64;
            let g = net.backward_logits(&grad)?;
            opt.step(net, &g)?;
        }
        Ok(())
    }
}

impl Posterior for MlpPosterior {
    fn num_channels(&self) -> usize {
        self.nets.len()
    }

    fn push_batch(&mut self, batch: Vec<Vec<PosteriorSample>>) -> Result<()> {
        check_batch(self.nets.len(), &batch)?;
        self.history.push_back(batch);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
        for channel in 0..self.nets.len() {
            self.train_channel(channel)?;
        }
        Ok(())
    }

    fn query(&self, channel: usize, obs: &LocalObservation, z: f64) -> Result<[f64; Action::COUNT]> {
        let (net, _) = self
            .nets
            .get(channel)
            .ok_or_else(|| Error::Usage(format!("posterior channel {channel} out of range")))?;
        let p = net.predict_one(&self.features(obs, z))?;
        let mut out = [0.0; Action::COUNT];
        out.copy_from_slice(&p);
        Ok(out)
    }
}

/// `ln(max(p̂, floor)) − ln π`.
pub fn log_ratio(p_hat: f64, log_pi: f64) -> f64 {
    p_hat.max(POSTERIOR_FLOOR).ln() - log_pi
}

/// `z · ln(p̂ / π)` with the posterior floored.
pub fn hindsight_term(z: f64, p_hat: f64, pi: f64) -> f64 {
    z * log_ratio(p_hat, pi.ln())
}

/// Shaped-reward variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Own novelty only.
    Loc,
    /// Sum of all agents' novelties.
    NovSum,
    /// Max of all agents' novelties.
    NovMax,
    /// Own novelty plus the hindsight term.
    Hin,
    /// Summed novelty plus the hindsight term.
    Mace,
    /// Summed novelty plus the log ratio alone.
    MaceMi,
    /// Summed novelty plus the other agents' `z̃` alone.
    MaceZ,
    /// Summed novelty plus the hindsight term against the others' summed `z̃`.
    MaceS,
    /// Own novelty plus the hindsight term against the others' summed `z̃`.
    HinS,
}

impl RewardMode {
    pub const ALL: [RewardMode; 9] = [
        RewardMode::Loc,
        RewardMode::NovSum,
        RewardMode::NovMax,
        RewardMode::Hin,
        RewardMode::Mace,
        RewardMode::MaceMi,
        RewardMode::MaceZ,
        RewardMode::MaceS,
        RewardMode::HinS,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::Loc => "loc",
            RewardMode::NovSum => "nov_sum",
            RewardMode::NovMax => "nov_max",
            RewardMode::Hin => "hin",
            RewardMode::Mace => "mace",
            RewardMode::MaceMi => "mace_mi",
            RewardMode::MaceZ => "mace_z",
            RewardMode::MaceS => "mace_s",
            RewardMode::HinS => "hin_s",
        }
    }

    pub fn uses_hindsight(self) -> bool {
        !matches!(self, RewardMode::Loc | RewardMode::NovSum | RewardMode::NovMax)
    }

    /// Conditions on the sum of the other agents' `z̃` instead of each one.
    pub fn is_scalable(self) -> bool {
        matches!(self, RewardMode::MaceS | RewardMode::HinS)
    }

    /// The novelty part before `β`.
    pub fn novelty_term(self, agent: usize, u: &[f64]) -> f64 {
        match self {
            RewardMode::Loc | RewardMode::Hin | RewardMode::HinS => u[agent],
            RewardMode::NovMax => u.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            _ => u.iter().sum(),
        }
    }

    /// One other-agent term of the hindsight part, given the weight `z` and
    /// `ln(p̂ / π)`.
    pub fn pair_term(self, z: f64, log_ratio: f64) -> f64 {
        match self {
            RewardMode::Hin | RewardMode::Mace | RewardMode::MaceS | RewardMode::HinS => z * log_ratio,
            RewardMode::MaceMi => log_ratio,
            RewardMode::MaceZ => z,
            RewardMode::Loc | RewardMode::NovSum | RewardMode::NovMax => 0.0,
        }
    }
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RewardMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown reward mode {s:?}")))
    }
}

/// Which value weights the log ratio in the hindsight term. The posterior is
/// always conditioned on the relabeled `z̃`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HindsightWeight {
    #[default]
    Relabeled,
    Raw,
}

/// Reward mode with its weights `λ` (hindsight) and `β` (intrinsic scale).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shaping {
    pub mode: RewardMode,
    pub lambda: f64,
    pub beta: f64,
}

/// A shaped reward and its intrinsic components, each already scaled.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardParts {
    pub total: f64,
    pub nov: f64,
    pub hin: f64,
}

impl Shaping {
    pub fn new(mode: RewardMode, lambda: f64, beta: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {beta}")));
        }
        Ok(Shaping { mode, lambda, beta })
    }

    /// Whether hindsight terms contribute at all.
    pub fn needs_hindsight(&self) -> bool {
        self.mode.uses_hindsight() && self.lambda != 0.0
    }

    /// `r_ext + β (novelty + λ Σ pair_terms)`.
    pub fn reward(&self, r_ext: f64, agent: usize, u: &[f64], pair_terms: &[f64]) -> RewardParts {
        let nov = self.mode.novelty_term(agent, u);
        if !self.needs_hindsight() {
            return RewardParts {
                total: r_ext + self.beta * nov,
                nov: self.beta * nov,
                hin: 0.0,
            };
        }
        let hin: f64 = pair_terms.iter().sum();
        RewardParts {
            total: r_ext + self.beta * (nov + self.lambda * hin),
            nov: self.beta * nov,
            hin: self.beta * self.lambda * hin,
        }
    }
}

pub fn shaped_reward(shaping: &Shaping, r_ext: f64, agent: usize, u: &[f64], pair_terms: &[f64]) -> f64 {
    shaping.reward(r_ext, agent, u, pair_terms).total
}
