//! Synthetic control-flow traces and attacks, plus the trace and label file
//! formats.
//!
//! A [`GroundTruthModel`] stands in for an application: a Markov chain over
//! memory regions, where region `r` emits addresses uniformly from
//! `[r*B, (r+1)*B)`. Benign traces are random walks over it, and
//! [`inject_attack`] splices in labelled deviations.
//!
//! Trace files:
//!
//! ```text
//! #ciota-trace v1
//! 0,4096
//! 1,0x1a40
//! ```
//!
//! Label files mark each trace record as benign (`0`) or attack (`1`):
//!
//! ```text
//! #ciota-labels v1
//! 0,0
//! 1,1
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::emm::{MarkovChain, State};
use crate::error::{Error, Result};

pub const TRACE_HEADER: &str = "#ciota-trace v1";
pub const LABELS_HEADER: &str = "#ciota-labels v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub seq: u64,
    pub address: u64,
}

/// Address-emitting Markov chain over memory regions.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthModel {
    pub chain: MarkovChain,
    pub region_size: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub regions: u64,
    /// Successors per region.
    pub out_degree: usize,
    /// Successor weights are drawn uniformly from `[1, 1 + spread]`, so every
    /// probability in a row lies within a factor `1 + spread` of the others.
    pub spread: f64,
    pub region_size: u64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            regions: 24,
            out_degree: 4,
            spread: 0.25,
            region_size: 256,
            seed: 1,
        }
    }
}

impl GroundTruthModel {
    /// Random sparse chain. Every region links to its ring successor, so the
    /// chain is irreducible, plus `out_degree - 1` other random successors.
    /// Weights are drawn per [`GeneratorConfig::spread`].
    pub fn generate(cfg: &GeneratorConfig) -> Result<Self> {
        if cfg.regions < 2 {
            return Err(Error::InvalidParameter("need at least 2 regions".into()));
        }
        if cfg.out_degree == 0 || cfg.out_degree as u64 > cfg.regions {
            return Err(Error::InvalidParameter(format!(
                "out_degree must lie in [1, {}], got {}",
                cfg.regions, cfg.out_degree
            )));
        }
        if !(cfg.spread >= 0.0) {
            return Err(Error::InvalidParameter("spread must be non-negative".into()));
        }
        if cfg.region_size == 0 {
            return Err(Error::InvalidParameter("region size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let all: Vec<State> = (0..cfg.regions).collect();
        let mut probs = Vec::new();
        for i in 0..cfg.regions {
            let ring = (i + 1) % cfg.regions;
            let mut succ = vec![ring];
            let others: Vec<State> = all.iter().copied().filter(|&j| j != ring).collect();
            succ.extend(others.choose_multiple(&mut rng, cfg.out_degree - 1));
            let w: Vec<f64> = succ.iter().map(|_| 1.0 + cfg.spread * rng.gen::<f64>()).collect();
            let total: f64 = w.iter().sum();
            probs.extend(succ.into_iter().zip(w).map(|(j, w)| (i, j, w / total)));
        }
        Ok(Self {
            chain: MarkovChain::from_probs(probs)?,
            region_size: cfg.region_size,
            seed: cfg.seed,
        })
    }

    pub fn from_chain(chain: MarkovChain, region_size: u64, seed: u64) -> Result<Self> {
        if region_size == 0 {
            return Err(Error::InvalidParameter("region size must be positive".into()));
        }
        Ok(Self {
            chain,
            region_size,
            seed,
        })
    }

    pub fn regions(&self) -> &BTreeSet<State> {
        self.chain.states()
    }

    /// Smallest nonzero transition probability.
    pub fn min_prob(&self) -> f64 {
        self.chain.entries().map(|(_, _, p)| p).fold(f64::INFINITY, f64::min)
    }

    pub fn address_in(&self, region: State, rng: &mut impl Rng) -> u64 {
        region * self.region_size + rng.gen_range(0..self.region_size)
    }

    fn sampler(&self) -> Result<BTreeMap<State, (Vec<State>, WeightedIndex<f64>)>> {
        let mut rows: BTreeMap<State, (Vec<State>, Vec<f64>)> = BTreeMap::new();
        for (i, j, p) in self.chain.entries() {
            let row = rows.entry(i).or_default();
            row.0.push(j);
            row.1.push(p);
        }
        rows.into_iter()
            .map(|(i, (succ, w))| {
                let dist = WeightedIndex::new(&w).map_err(|e| Error::Generation(e.to_string()))?;
                Ok((i, (succ, dist)))
            })
            .collect()
    }
}

/// Random walk over the ground truth, one address per step. The walk starts
/// in the lowest region.
pub fn gen_benign_trace(gt: &GroundTruthModel, length: usize, seed: u64) -> Result<Vec<TraceRecord>> {
    Ok(gen_benign_from(gt, length, seed, None)?.0)
}

/// As [`gen_benign_trace`], optionally starting from `start` rather than
/// the lowest region. Also returns the region the walk ended in.
pub fn gen_benign_from(
    gt: &GroundTruthModel,
    length: usize,
    seed: u64,
    start: Option<State>,
) -> Result<(Vec<TraceRecord>, State)> {
    if length == 0 {
        return Err(Error::InvalidInput("trace length must be at least 1".into()));
    }
    let rows = gt.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = match start {
        Some(s) => s,
        None => *gt
            .regions()
            .first()
            .ok_or_else(|| Error::Generation("ground truth has no regions".into()))?,
    };
    let mut out = Vec::with_capacity(length);
    for seq in 0..length as u64 {
        if seq > 0 {
            let (succ, dist) = rows.get(&state).ok_or_else(|| {
                Error::Generation(format!("region {state} has no outgoing transitions"))
            })?;
            state = succ[dist.sample(&mut rng)];
        }
        out.push(TraceRecord {
            seq,
            address: gt.address_in(state, &mut rng),
        });
    }
    Ok((out, state))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    /// Execution inside regions the application never uses. `regions`
    /// defaults to fresh regions just above the highest used one.
    CodeInjection {
        #[serde(default)]
        regions: Vec<State>,
    },
    /// Jumps between legitimate regions in orders the application never takes.
    CodeReuse,
    /// Brief, sparse excursions: `length` single-address detours to the
    /// least likely successor of the current region, separated by `spacing`
    /// benign steps.
    ReplayBlip { spacing: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    #[serde(flatten)]
    pub kind: AttackKind,
    /// Trace index at which the first attack address is inserted.
    pub start_index: usize,
    /// Number of attack addresses inserted.
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Inserts an attack into a benign trace. Returns the new trace, renumbered
/// from 0, and a mask marking the inserted records.
pub fn inject_attack(
    gt: &GroundTruthModel,
    trace: &[TraceRecord],
    spec: &AttackSpec,
) -> Result<(Vec<TraceRecord>, Vec<bool>)> {
    if spec.start_index > trace.len() {
        return Err(Error::InvalidInput(format!(
            "attack start {} beyond trace of length {}",
            spec.start_index,
            trace.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let region = |addr: u64| addr / gt.region_size;
    let mut out: Vec<(u64, bool)> = trace[..spec.start_index].iter().map(|r| (r.address, false)).collect();
    let mut rest = trace[spec.start_index..].iter().map(|r| r.address);

    match &spec.kind {
        _ if spec.length == 0 => {}
        AttackKind::CodeInjection { regions } => {
            let targets: Vec<State> = if regions.is_empty() {
                let top = gt.regions().last().copied().unwrap_or(0);
                (1..=4).filter_map(|d| top.checked_add(d)).collect()
            } else {
                regions.iter().copied().filter(|r| !gt.regions().contains(r)).collect()
            };
            if targets.is_empty() {
                return Err(Error::InvalidInput("no unused region available for code injection".into()));
            }
            for _ in 0..spec.length {
                let r = *targets.choose(&mut rng).expect("non-empty");
                out.push((gt.address_in(r, &mut rng), true));
            }
        }
        AttackKind::CodeReuse => {
            let regions: Vec<State> = gt.regions().iter().copied().collect();
            let mut prev = out.last().map(|&(a, _)| region(a));
            for k in 0..spec.length {
                let next_benign = if k + 1 == spec.length {
                    trace.get(spec.start_index).map(|r| region(r.address))
                } else {
                    None
                };
                let fresh: Vec<State> = regions
                    .iter()
                    .copied()
                    .filter(|&r| prev.map_or(true, |p| gt.chain.prob(p, r) == 0.0))
                    .filter(|&r| next_benign.map_or(true, |n| gt.chain.prob(r, n) == 0.0))
                    .collect();
                let r = *fresh.choose(&mut rng).ok_or_else(|| {
                    Error::InvalidInput("ground truth too dense for an unseen reuse transition".into())
                })?;
                out.push((gt.address_in(r, &mut rng), true));
                prev = Some(r);
            }
        }
        AttackKind::ReplayBlip { spacing } => {
            for k in 0..spec.length {
                if k > 0 {
                    for _ in 0..*spacing {
                        match rest.next() {
                            Some(a) => out.push((a, false)),
                            None => break,
                        }
                    }
                }
                let from = out
                    .last()
                    .map(|&(a, _)| region(a))
                    .ok_or_else(|| Error::InvalidInput("replay blip needs a preceding record".into()))?;
                let rare = gt
                    .chain
                    .row(from)
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                    .map(|(j, _)| j)
                    .ok_or_else(|| Error::Generation(format!("region {from} has no successors")))?;
                out.push((gt.address_in(rare, &mut rng), true));
            }
        }
    }
    out.extend(rest.map(|a| (a, false)));

    let mask = out.iter().map(|&(_, m)| m).collect();
    let trace = out
        .into_iter()
        .enumerate()
        .map(|(i, (address, _))| TraceRecord {
            seq: i as u64,
            address,
        })
        .collect();
    Ok((trace, mask))
}

/// Marks transition `i` (into record `i`) as attack when either endpoint
/// is an attack record. Index 0 has no transition and is benign.
pub fn transition_labels(mask: &[bool]) -> Vec<bool> {
    (0..mask.len())
        .map(|i| i > 0 && (mask[i] || mask[i - 1]))
        .collect()
}

/// Labels for window scores: the score at record `i` is an attack score if
/// any of the last `k` transitions it averages is an attack transition.
pub fn window_labels(mask: &[bool], k: usize) -> Vec<bool> {
    let t = transition_labels(mask);
    let mut out = Vec::with_capacity(t.len());
    let mut last_attack: Option<usize> = None;
    for (i, &a) in t.iter().enumerate() {
        if a {
            last_attack = Some(i);
        }
        out.push(last_attack.is_some_and(|j| i - j < k));
    }
    out
}

fn parse_number(s: &str) -> Option<u64> {
    let s = s.trim();
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)).map_err(|e| Error::io(path, e)))
        .collect()
}

fn check_header(lines: &[(usize, String)], header: &str) -> Result<()> {
    let magic = header.split(' ').next().unwrap_or(header);
    for (n, l) in lines {
        let l = l.trim();
        if l.starts_with(magic) && l != header {
            return Err(Error::Parse {
                line: *n,
                reason: format!("unsupported header {l:?}, expected {header:?}"),
            });
        }
    }
    Ok(())
}

fn data_lines(lines: &[(usize, String)]) -> impl Iterator<Item = (usize, &str)> {
    lines
        .iter()
        .map(|(n, l)| (*n, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn split_pair(n: usize, line: &str) -> Result<(&str, &str)> {
    line.split_once(',').ok_or_else(|| Error::Parse {
        line: n,
        reason: format!("expected `seq,value`, got {line:?}"),
    })
}

fn check_seq(n: usize, seq: u64, prev: Option<u64>) -> Result<()> {
    if prev.is_some_and(|p| seq <= p) {
        return Err(Error::Parse {
            line: n,
            reason: format!("sequence number {seq} is not increasing"),
        });
    }
    Ok(())
}

/// Reads a trace file. Blank lines and `#` comments are ignored; addresses
/// may be decimal or `0x` hex.
pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let lines = read_lines(path.as_ref())?;
    check_header(&lines, TRACE_HEADER)?;
    let mut out: Vec<TraceRecord> = Vec::new();
    for (n, line) in data_lines(&lines) {
        let (seq, addr) = split_pair(n, line)?;
        let bad = |what: &str, v: &str| Error::Parse {
            line: n,
            reason: format!("invalid {what} {v:?}"),
        };
        let seq = parse_number(seq).ok_or_else(|| bad("sequence number", seq))?;
        let address = parse_number(addr).ok_or_else(|| bad("address", addr))?;
        check_seq(n, seq, out.last().map(|r| r.seq))?;
        out.push(TraceRecord { seq, address });
    }
    Ok(out)
}

pub fn write_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{TRACE_HEADER}").map_err(io)?;
    for r in records {
        writeln!(w, "{},{}", r.seq, r.address).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a label file into one flag per record, in file order.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<bool>> {
    let lines = read_lines(path.as_ref())?;
    check_header(&lines, LABELS_HEADER)?;
    let mut out = Vec::new();
    let mut prev = None;
    for (n, line) in data_lines(&lines) {
        let (seq, label) = split_pair(n, line)?;
        let seq = parse_number(seq).ok_or_else(|| Error::Parse {
            line: n,
            reason: format!("invalid sequence number {seq:?}"),
        })?;
        check_seq(n, seq, prev)?;
        prev = Some(seq);
        out.push(match label.trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: n,
                    reason: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        });
    }
    Ok(out)
}

pub fn write_labels(path: impl AsRef<Path>, records: &[TraceRecord], mask: &[bool]) -> Result<()> {
    if records.len() != mask.len() {
        return Err(Error::InvalidInput("label mask and trace differ in length".into()));
    }
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{LABELS_HEADER}").map_err(io)?;
    for (r, &m) in records.iter().zip(mask) {
        writeln!(w, "{},{}", r.seq, u8::from(m)).map_err(io)?;
    }
    w.flush().map_err(io)
}
