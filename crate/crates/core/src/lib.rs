//! Decentralized multi-agent coordinated exploration.
//!
//! Agents learn independently (one PPO learner each, no shared parameters)
//! and exchange exactly one scalar per step during training: their local
//! novelty. From the exchanged values each agent builds two intrinsic
//! rewards:
//!
//! * a novelty reward, the sum of all agents' local novelties, approximating
//!   the novelty of the joint state;
//! * a hindsight reward, `z · log p(a | o, z) / π(a | o)`, which pays an agent
//!   for actions associated with high accumulated novelty of the others.
//!   Averaged over the behaviour policy it is the weighted mutual information
//!   between the agent's action and the others' accumulated novelty.
//!
//! The crate also carries the gridworld tasks the method is studied on
//! ([`grid`]), an exact MI/WMI calculator ([`wmi`]), the small neural network
//! library the learners use ([`nn`]) and the experiment harness ([`harness`]).

pub mod bus;
pub mod config;
pub mod error;
pub mod grid;
pub mod harness;
pub mod hindsight;
pub mod ippo;
pub mod nn;
pub mod novelty;
pub mod rng;
pub mod wmi;

pub use error::{Error, Result};
