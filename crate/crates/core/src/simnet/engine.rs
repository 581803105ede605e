//! Event loop shared by both model fidelities.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Delivery, PbSnapshot, ScheduleMode, SimConfig, SimMetrics, Topology};
use crate::chain::Decision;
use crate::error::Result;

/// Effect of a share event on the sharing agent.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ShareEffect {
    pub changed: bool,
    pub closed: bool,
}

/// A simulated agent.
pub(crate) trait Node {
    type Msg: Clone;

    fn share(&mut self, now: f64) -> Result<ShareEffect>;
    /// The chain this agent currently sends.
    fn message(&self) -> Self::Msg;
    /// `None` when the message was dropped by the receive budget.
    fn receive(&mut self, msg: &Self::Msg, sender: u32, now: f64) -> Result<Option<Decision>>;
    fn blocks(&self) -> usize;
    fn pb_members(&self) -> Vec<u32>;
}

#[derive(Clone, Copy, PartialEq)]
struct Event {
    time: f64,
    seq: u64,
    agent: u32,
}

impl Eq for Event {}

impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub(crate) struct Engine<'a, N: Node> {
    cfg: &'a SimConfig,
    topo: &'a Topology,
    nodes: Vec<N>,
    /// Epoch from which each agent takes part; 0 for everyone without a late join.
    join_epoch: Vec<u64>,
    rng: ChaCha8Rng,
    heap: BinaryHeap<Event>,
    seq: u64,
    fires: Vec<u64>,
    inbox: Vec<Vec<(N::Msg, u32)>>,
    metrics: SimMetrics,
    version: u64,
}

impl<'a, N: Node> Engine<'a, N> {
    pub fn new(cfg: &'a SimConfig, topo: &'a Topology, nodes: Vec<N>, join_epoch: Vec<u64>) -> Self {
        let n = nodes.len();
        Self {
            cfg,
            topo,
            nodes,
            join_epoch,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_e7e7),
            heap: BinaryHeap::new(),
            seq: 0,
            fires: vec![0; n],
            inbox: (0..n).map(|_| Vec::new()).collect(),
            metrics: SimMetrics::new(topo),
            version: 0,
        }
    }

    fn push(&mut self, time: f64, agent: u32) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            seq: self.seq,
            agent,
        });
    }

    fn jitter(&mut self) -> f64 {
        if self.cfg.jitter > 0.0 {
            self.rng.gen::<f64>() * self.cfg.jitter * self.cfg.interval_secs
        } else {
            0.0
        }
    }

    pub fn run(mut self) -> Result<(SimMetrics, Vec<N>)> {
        let n = self.nodes.len();
        let t = self.cfg.interval_secs;
        let phases: Vec<f64> = (0..n)
            .map(|_| self.rng.gen::<f64>() * self.cfg.phase_spread * t)
            .collect();
        for i in 0..n {
            let at = phases[i] + self.join_epoch[i] as f64 * t + self.jitter();
            self.push(at, i as u32);
        }

        let mut epoch: u64 = 1;
        let mut fired_this_epoch = vec![false; n];
        let mut fired_count = 0usize;
        let mut active = self.join_epoch.iter().filter(|&&e| e == 0).count();
        let mut epoch_start_version = self.version;
        let mut stalled = 0u32;
        let mut last_close_epoch = 0u64;

        while let Some(ev) = self.heap.pop() {
            let i = ev.agent as usize;
            let now = ev.time;

            if matches!(self.cfg.delivery, Delivery::NextShare) {
                for (msg, from) in std::mem::take(&mut self.inbox[i]) {
                    self.deliver(i as u32, &msg, from, now)?;
                }
            }
            let effect = self.nodes[i].share(now)?;
            self.fires[i] += 1;
            if effect.changed {
                self.version += 1;
            }
            if effect.closed {
                self.metrics.epochs_to_close.push((epoch - last_close_epoch).max(1));
                self.metrics.closing_fire_counts.push(self.fires[i]);
                last_close_epoch = epoch;
                if self.metrics.epochs_to_close.len() >= self.cfg.blocks_to_close {
                    break;
                }
            }
            self.broadcast(ev.agent, now)?;

            let next = match self.cfg.schedule {
                ScheduleMode::Anchored => phases[i] + (self.join_epoch[i] + self.fires[i]) as f64 * t,
                ScheduleMode::Drift => now + t,
            } + self.jitter();
            self.push(next, ev.agent);

            if !fired_this_epoch[i] {
                fired_this_epoch[i] = true;
                fired_count += 1;
            }
            if fired_count >= active {
                // epoch boundary
                let changed = self.version != epoch_start_version;
                if self.cfg.trace_epochs {
                    let partials = self.snapshot();
                    self.metrics.epoch_trace.push(super::EpochSnapshot {
                        epoch,
                        changed,
                        partials,
                    });
                }
                if !changed {
                    stalled += 1;
                    if stalled >= self.cfg.stall_epochs {
                        self.metrics.deadlock_detected = true;
                        self.metrics.deadlock_dump = Some(self.snapshot());
                        break;
                    }
                } else {
                    stalled = 0;
                }
                epoch += 1;
                if epoch > self.cfg.max_epochs {
                    self.metrics.deadlock_detected = true;
                    self.metrics.deadlock_dump = Some(self.snapshot());
                    break;
                }
                epoch_start_version = self.version;
                fired_this_epoch.iter_mut().for_each(|f| *f = false);
                fired_count = 0;
                active = self.join_epoch.iter().filter(|&&e| e < epoch).count();
            }
        }
        self.metrics.epochs_run = epoch;
        self.metrics.final_chains = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| super::ChainSummary {
                agent: i as u32,
                blocks: node.blocks(),
                partial_len: node.pb_members().len(),
            })
            .collect();
        Ok((self.metrics, self.nodes))
    }

    fn snapshot(&self) -> Vec<PbSnapshot> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, node)| PbSnapshot {
                agent: i as u32,
                blocks: node.blocks(),
                members: node.pb_members(),
            })
            .collect()
    }

    fn broadcast(&mut self, from: u32, now: f64) -> Result<()> {
        let mut targets: Vec<u32> = self.topo.neighbors(from).to_vec();
        targets.shuffle(&mut self.rng);
        if let Some(b) = self.cfg.fanout {
            targets.truncate(b);
        }
        let msg = self.nodes[from as usize].message();
        for to in targets {
            self.send(from, to, msg.clone(), now)?;
        }
        Ok(())
    }

    fn send(&mut self, from: u32, to: u32, msg: N::Msg, now: f64) -> Result<()> {
        self.metrics.messages_sent += 1;
        match self.cfg.delivery {
            Delivery::Immediate => self.deliver_cascade(to, msg, from, now),
            Delivery::NextShare => {
                self.inbox[to as usize].push((msg, from));
                Ok(())
            }
        }
    }

    /// Delivers a message, then any direct messages it triggers, in FIFO order.
    fn deliver_cascade(&mut self, to: u32, msg: N::Msg, from: u32, now: f64) -> Result<()> {
        let mut queue = VecDeque::from([(to, msg, from)]);
        while let Some((to, msg, from)) = queue.pop_front() {
            if let Some(targets) = self.deliver(to, &msg, from, now)? {
                let reply = self.nodes[to as usize].message();
                for k in targets {
                    self.metrics.messages_sent += 1;
                    queue.push_back((k, reply.clone(), to));
                }
            }
        }
        Ok(())
    }

    /// Processes one message. Direct-message targets are returned when
    /// delivery is immediate and queued otherwise.
    fn deliver(&mut self, to: u32, msg: &N::Msg, from: u32, now: f64) -> Result<Option<Vec<u32>>> {
        if self.join_epoch[to as usize] > 0 && self.fires[to as usize] == 0 {
            self.metrics.dropped += 1;
            return Ok(None);
        }
        let Some(decision) = self.nodes[to as usize].receive(msg, from, now)? else {
            self.metrics.dropped += 1;
            return Ok(None);
        };
        match decision {
            Decision::ReplaceChain | Decision::ReplaceChainAndAdopt => {
                self.version += 1;
                self.metrics.replacements += 1;
            }
            Decision::Report { sender, .. } => {
                self.metrics.reports += 1;
                self.metrics.reported_agents.insert(sender.0);
            }
            Decision::DirectMessage(targets) => {
                self.metrics.direct_messages += 1;
                let targets: Vec<u32> = targets.into_iter().map(|a| a.0).collect();
                match self.cfg.delivery {
                    Delivery::Immediate => return Ok(Some(targets)),
                    Delivery::NextShare => {
                        let reply = self.nodes[to as usize].message();
                        for k in targets {
                            self.metrics.messages_sent += 1;
                            self.inbox[k as usize].push((reply.clone(), to));
                        }
                    }
                }
            }
            Decision::Discard => {}
        }
        Ok(None)
    }
}
