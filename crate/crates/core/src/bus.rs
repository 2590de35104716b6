//! The training-time communication channel.
//!
//! Each step, every agent broadcasts exactly one scalar (its local novelty)
//! to all others. The bus counts every scalar it carries; evaluation rollouts
//! never open a frame, so their count stays at zero.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::novelty::LocalNovelty;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: u64,
    pub agent: usize,
    pub u: f64,
}

#[derive(Debug)]
pub struct NoveltyBus {
    num_agents: usize,
    scalars_sent: u64,
    frames: u64,
    trace: Option<Vec<TraceRow>>,
}

impl NoveltyBus {
    pub fn new(num_agents: usize) -> Self {
        NoveltyBus {
            num_agents,
            scalars_sent: 0,
            frames: 0,
            trace: None,
        }
    }

    /// Keep every message for [`NoveltyBus::write_trace`].
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    /// Total scalars broadcast so far.
    pub fn scalars_sent(&self) -> u64 {
        self.scalars_sent
    }

    pub fn frames_opened(&self) -> u64 {
        self.frames
    }

    /// Open the frame for the next timestep. Frames are numbered in opening
    /// order across the whole run.
    pub fn open_frame(&mut self) -> FrameBuilder<'_> {
        let t = self.frames;
        self.frames += 1;
        let slots = vec![None; self.num_agents];
        FrameBuilder { bus: self, t, slots }
    }

    pub fn trace(&self) -> Option<&[TraceRow]> {
        self.trace.as_deref()
    }

    /// CSV with header `t,agent,u`.
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let rows = self
            .trace
            .as_ref()
            .ok_or_else(|| Error::Usage("bus was created without tracing".into()))?;
        let mut out = String::from("t,agent,u\n");
        for r in rows {
            out.push_str(&format!("{},{},{}\n", r.t, r.agent, r.u));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// A frame being filled by the agents. Each agent writes its own slot once.
#[derive(Debug)]
pub struct FrameBuilder<'a> {
    bus: &'a mut NoveltyBus,
    t: u64,
    slots: Vec<Option<f64>>,
}

impl FrameBuilder<'_> {
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn broadcast(&mut self, agent: usize, u: LocalNovelty) -> Result<()> {
        let slot = self.slots.get_mut(agent).ok_or_else(|| {
            Error::Protocol(format!("agent {agent} is not on this bus"))
        })?;
        if slot.is_some() {
            return Err(Error::Protocol(format!(
                "agent {agent} already sent at t={}",
                self.t
            )));
        }
        *slot = Some(u.value());
        self.bus.scalars_sent += 1;
        if let Some(trace) = self.bus.trace.as_mut() {
            trace.push(TraceRow {
                t: self.t,
                agent,
                u: u.value(),
            });
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.slots.iter().all(Option::is_some)
    }

    /// Reading before every agent has sent is a protocol violation.
    pub fn collect(&self, agent: usize) -> Result<Vec<f64>> {
        if !self.is_complete() {
            let missing: Vec<usize> = (0..self.slots.len())
                .filter(|&i| self.slots[i].is_none())
                .collect();
            return Err(Error::Protocol(format!(
                "agent {agent} read frame t={} before agents {missing:?} sent",
                self.t
            )));
        }
        Ok(self.slots.iter().map(|s| s.unwrap()).collect())
    }

    pub fn seal(self) -> Result<BusFrame> {
        let messages = self.collect(0)?;
        Ok(BusFrame {
            t: self.t,
            messages,
        })
    }
}

/// A complete frame: one scalar per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct BusFrame {
    pub t: u64,
    messages: Vec<f64>,
}

impl BusFrame {
    /// All agents' novelties, the reader's own included.
    pub fn collect(&self, agent: usize) -> Result<&[f64]> {
        if agent >= self.messages.len() {
            return Err(Error::Protocol(format!("agent {agent} is not on this bus")));
        }
        Ok(&self.messages)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u(v: f64) -> LocalNovelty {
        LocalNovelty::new(v).unwrap()
    }

    #[test]
    fn broadcast_then_collect() {
        let mut bus = NoveltyBus::new(2);
        let mut f = bus.open_frame();
        f.broadcast(0, u(5.0)).unwrap();
        f.broadcast(1, u(1.0)).unwrap();
        let frame = f.seal().unwrap();
        assert_eq!(frame.collect(0).unwrap(), &[5.0, 1.0]);
        assert_eq!(frame.collect(1).unwrap(), &[5.0, 1.0]);
        assert_eq!(bus.scalars_sent(), 2);
    }

    #[test]
    fn duplicate_send_rejected() {
        let mut bus = NoveltyBus::new(2);
        let mut f = bus.open_frame();
        f.broadcast(0, u(2.5)).unwrap();
        assert!(matches!(f.broadcast(0, u(2.5)), Err(Error::Protocol(_))));
        assert!(matches!(f.broadcast(2, u(2.5)), Err(Error::Protocol(_))));
    }

    #[test]
    fn incomplete_frame_cannot_be_read() {
        let mut bus = NoveltyBus::new(3);
        let mut f = bus.open_frame();
        f.broadcast(0, u(1.0)).unwrap();
        f.broadcast(2, u(1.0)).unwrap();
        assert!(matches!(f.collect(0), Err(Error::Protocol(_))));
        assert!(f.seal().is_err());
    }

    #[test]
    fn three_agents_see_three_values() {
        let mut bus = NoveltyBus::new(3);
        let mut f = bus.open_frame();
        for i in 0..3 {
            f.broadcast(i, u(i as f64)).unwrap();
        }
        assert_eq!(f.seal().unwrap().collect(1).unwrap().len(), 3);
    }

    #[test]
    fn budget_is_agents_times_steps() {
        let (n, steps) = (3, 17);
        let mut bus = NoveltyBus::new(n).with_trace();
        for t in 0..steps {
            let mut f = bus.open_frame();
            assert_eq!(f.t(), t as u64);
            for i in 0..n {
                f.broadcast(i, u(0.5)).unwrap();
            }
            f.seal().unwrap();
        }
        assert_eq!(bus.scalars_sent(), (n * steps) as u64);
        assert_eq!(bus.trace().unwrap().len(), n * steps);
    }

    #[test]
    fn trace_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut bus = NoveltyBus::new(2).with_trace();
        let mut f = bus.open_frame();
        f.broadcast(1, u(0.25)).unwrap();
        f.broadcast(0, u(2.0)).unwrap();
        f.seal().unwrap();
        let path = dir.path().join("bus.csv");
        bus.write_trace(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "t,agent,u\n0,1,0.25\n0,0,2\n");
        assert!(NoveltyBus::new(2).write_trace(&path).is_err());
    }
}
