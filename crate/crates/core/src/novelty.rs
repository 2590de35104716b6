//! Local novelty estimators.
//!
//! Each agent scores its own next observation. On the gridworld a visit
//! count over `(x, y)` is used, `10 / sqrt(n)`; the RND estimator scores
//! novelty as the distance between a trainable predictor and a frozen random
//! target network.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Head, Network};

/// Scale of the count-based novelty, `SCALE / sqrt(n)`.
pub const COUNT_NOVELTY_SCALE: f64 = 10.0;

/// A non-negative novelty value, the one scalar an agent communicates.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LocalNovelty(f64);

impl LocalNovelty {
    pub fn new(value: f64) -> Result<Self> {
        if value >= 0.0 && value.is_finite() {
            Ok(LocalNovelty(value))
        } else {
            Err(Error::Usage(format!("novelty must be finite and >= 0, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Per-agent visit counts over grid coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisitCountTable {
    size: usize,
    counts: Vec<u64>,
}

impl VisitCountTable {
    pub fn new(size: usize) -> Self {
        VisitCountTable {
            size,
            counts: vec![0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn index(&self, x: usize, y: usize) -> Result<usize> {
        if x >= self.size || y >= self.size {
            return Err(Error::Usage(format!(
                "cell ({x}, {y}) outside a {0}x{0} table",
                self.size
            )));
        }
        Ok(y * self.size + x)
    }

    pub fn count(&self, x: usize, y: usize) -> u64 {
        self.index(x, y).map_or(0, |i| self.counts[i])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn record_visit(&mut self, x: usize, y: usize) -> Result<()> {
        let i = self.index(x, y)?;
        self.counts[i] += 1;
        Ok(())
    }

    /// `10 / sqrt(n(x, y))`. The cell must have been recorded first.
    pub fn novelty(&self, x: usize, y: usize) -> Result<LocalNovelty> {
        let n = self.counts[self.index(x, y)?];
        if n == 0 {
            return Err(Error::Usage(format!(
                "novelty queried for unvisited cell ({x}, {y}); record the visit first"
            )));
        }
        LocalNovelty::new(COUNT_NOVELTY_SCALE / (n as f64).sqrt())
    }

    /// Record the visit, then score it.
    pub fn visit(&mut self, x: usize, y: usize) -> Result<LocalNovelty> {
        self.record_visit(x, y)?;
        self.novelty(x, y)
    }

    /// Whitespace-separated matrix, one line per `y`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for row in self.counts.chunks(self.size) {
            let line: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RndConfig {
    pub target_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub output_dim: usize,
    pub lr: f64,
    pub adam_eps: f64,
}

impl Default for RndConfig {
    fn default() -> Self {
        RndConfig {
            target_hidden: vec![64, 64],
            predictor_hidden: vec![64, 64, 64, 64],
            output_dim: 32,
            lr: 3e-4,
            adam_eps: 1e-5,
        }
    }
}

/// Random network distillation: novelty is `|f(o; θ) - f̄(o)|₂`.
#[derive(Debug, Clone)]
pub struct RndEstimator {
    target: Network,
    predictor: Network,
    opt: Adam,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

impl RndEstimator {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &RndConfig, rng: &mut R) -> Self {
        let target = Network::new(
            &sizes(input_dim, &cfg.target_hidden, cfg.output_dim),
            Head::Linear,
            1.0,
            rng,
        );
        let predictor = Network::new(
            &sizes(input_dim, &cfg.predictor_hidden, cfg.output_dim),
            Head::Linear,
            1.0,
            rng,
        );
        let opt = Adam::new(&predictor, cfg.lr, cfg.adam_eps, None);
        RndEstimator {
            target,
            predictor,
            opt,
        }
    }

    /// Build from explicit networks; the output widths must agree.
    pub fn from_networks(target: Network, predictor: Network, lr: f64, adam_eps: f64) -> Result<Self> {
        if target.output_dim() != predictor.output_dim() || target.input_dim() != predictor.input_dim() {
            return Err(Error::Shape {
                expected: target.output_dim(),
                got: predictor.output_dim(),
            });
        }
        let opt = Adam::new(&predictor, lr, adam_eps, None);
        Ok(RndEstimator {
            target,
            predictor,
            opt,
        })
    }

    pub fn target(&self) -> &Network {
        &self.target
    }

    pub fn predictor(&self) -> &Network {
        &self.predictor
    }

    /// Hash of the frozen target parameters.
    pub fn target_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.target.params() {
            p.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Novelty of each row of `obs`.
    pub fn novelty_batch(&self, obs: ArrayView2<f64>) -> Result<Vec<f64>> {
        let t = self.target.predict(obs)?;
        let p = self.predictor.predict(obs)?;
        Ok((&p - &t)
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect())
    }

    pub fn novelty(&self, obs: &[f64]) -> Result<LocalNovelty> {
        let view = ArrayView2::from_shape((1, obs.len()), obs).expect("row vector");
        LocalNovelty::new(self.novelty_batch(view)?[0])
    }

    /// One optimizer step on the mean squared prediction error. Returns the
    /// loss before the step.
    pub fn update(&mut self, obs: ArrayView2<f64>) -> Result<f64> {
        if obs.nrows() == 0 {
            return Err(Error::Usage("RND update with an empty batch".into()));
        }
        let target = self.target.predict(obs)?;
        let pred = self.predictor.forward(obs)?;
        let diff: Array2<f64> = &pred - &target;
        let n = diff.len() as f64;
        let loss = diff.mapv(|d| d * d).sum() / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "RND predictor".into(),
                details: format!("loss {loss}"),
            });
        }
        let grads = self.predictor.backward(&(diff * (2.0 / n)))?;
        self.opt.step(&mut self.predictor, &grads)?;
        Ok(loss)
    }
}

/// The novelty backend an agent uses during training.
#[derive(Debug, Clone)]
pub enum NoveltySource {
    Count(VisitCountTable),
    Rnd(RndEstimator),
}
