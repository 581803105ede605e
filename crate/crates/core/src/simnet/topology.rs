use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected graph over agents `0..n`, stored as sorted adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    adjacency: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub min: usize,
    pub max: usize,
    pub median: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Topology {
    /// Builds a topology from an edge list, rejecting self-loops and
    /// out-of-range endpoints. Duplicate edges are merged.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); n];
        for (a, b) in edges {
            if a == b {
                return Err(Error::Topology(format!("self-loop at {a}")));
            }
            if a as usize >= n || b as usize >= n {
                return Err(Error::Topology(format!("edge ({a}, {b}) outside 0..{n}")));
            }
            sets[a as usize].insert(b);
            sets[b as usize].insert(a);
        }
        Ok(Self {
            adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, i: u32) -> &[u32] {
        &self.adjacency[i as usize]
    }

    pub fn degree(&self, i: u32) -> usize {
        self.adjacency[i as usize].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, a: u32, b: u32) -> bool {
        self.adjacency[a as usize].binary_search(&b).is_ok()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0u32];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for &j in self.neighbors(i) {
                if !seen[j as usize] {
                    seen[j as usize] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == n
    }

    pub fn require_connected(&self) -> Result<()> {
        if self.is_connected() {
            Ok(())
        } else {
            Err(Error::Topology("graph is not a single connected component".into()))
        }
    }

    pub fn degree_stats(&self) -> DegreeStats {
        let mut d: Vec<usize> = self.adjacency.iter().map(Vec::len).collect();
        d.sort_unstable();
        let n = d.len().max(1) as f64;
        let mean = d.iter().sum::<usize>() as f64 / n;
        let var = d.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let median = match d.len() {
            0 => 0.0,
            l if l % 2 == 1 => d[l / 2] as f64,
            l => (d[l / 2 - 1] + d[l / 2]) as f64 / 2.0,
        };
        DegreeStats {
            min: d.first().copied().unwrap_or(0),
            max: d.last().copied().unwrap_or(0),
            median,
            mean,
            std: var.sqrt(),
        }
    }
}

pub fn gen_complete(n: usize) -> Result<Topology> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("complete graph needs n >= 2, got {n}")));
    }
    let adjacency = (0..n as u32)
        .map(|i| (0..n as u32).filter(|&j| j != i).collect())
        .collect();
    Ok(Topology { adjacency })
}

/// How a small-world graph departs from its ring lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallWorld {
    /// Each lattice edge gains a random shortcut with probability `p`; the
    /// lattice is kept, so the graph is always connected and no degree falls
    /// below the lattice degree.
    #[default]
    Shortcuts,
    /// Each lattice edge is rewired to a random endpoint with probability
    /// `p`. Disconnected results are regenerated with the next seed.
    Rewire,
}

/// Small-world graph on a ring lattice where each node links to
/// `ceil(neighbors / 2)` nodes on either side.
pub fn gen_watts_strogatz(
    n: usize,
    neighbors: usize,
    p: f64,
    seed: u64,
    variant: SmallWorld,
) -> Result<Topology> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("p must lie in [0, 1], got {p}")));
    }
    let half = neighbors.div_ceil(2);
    if neighbors == 0 || 2 * half >= n {
        return Err(Error::InvalidParameter(format!(
            "neighbors must lie in [1, n - 1) after rounding to even, got {neighbors} for n = {n}"
        )));
    }
    const MAX_ATTEMPTS: u64 = 1000;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let t = match variant {
            SmallWorld::Shortcuts => newman_watts(n, half, p, &mut rng),
            SmallWorld::Rewire => rewired(n, half, p, &mut rng),
        };
        if t.is_connected() {
            return Ok(t);
        }
        log::debug!("small-world attempt {attempt} disconnected; retrying with next seed");
    }
    Err(Error::Topology(format!(
        "no connected small-world graph after {MAX_ATTEMPTS} attempts"
    )))
}

fn lattice(n: usize, half: usize) -> Vec<BTreeSet<u32>> {
    let mut adj = vec![BTreeSet::new(); n];
    for i in 0..n {
        for d in 1..=half {
            let j = (i + d) % n;
            adj[i].insert(j as u32);
            adj[j].insert(i as u32);
        }
    }
    adj
}

fn from_sets(adj: Vec<BTreeSet<u32>>) -> Topology {
    Topology {
        adjacency: adj.into_iter().map(|s| s.into_iter().collect()).collect(),
    }
}

fn newman_watts(n: usize, half: usize, p: f64, rng: &mut impl Rng) -> Topology {
    let mut adj = lattice(n, half);
    // one shortcut trial per lattice edge
    for _ in 0..half {
        for i in 0..n {
            if rng.gen::<f64>() < p {
                let w = rng.gen_range(0..n) as u32;
                if w as usize != i && !adj[i].contains(&w) {
                    adj[i].insert(w);
                    adj[w as usize].insert(i as u32);
                }
            }
        }
    }
    from_sets(adj)
}

fn rewired(n: usize, half: usize, p: f64, rng: &mut impl Rng) -> Topology {
    let mut adj = lattice(n, half);
    for d in 1..=half {
        for i in 0..n {
            let v = ((i + d) % n) as u32;
            if rng.gen::<f64>() < p && adj[i].contains(&v) {
                let w = rng.gen_range(0..n) as u32;
                if w as usize == i || adj[i].contains(&w) {
                    continue;
                }
                adj[i].remove(&v);
                adj[v as usize].remove(&(i as u32));
                adj[i].insert(w);
                adj[w as usize].insert(i as u32);
            }
        }
    }
    from_sets(adj)
}

/// Preferential attachment: starting from a star on `attachment + 1`
/// nodes, every new node links to `attachment` distinct existing nodes
/// chosen with probability proportional to their degree.
pub fn gen_barabasi_albert(n: usize, attachment: usize, seed: u64) -> Result<Topology> {
    if attachment == 0 || n <= attachment {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= attachment < n, got attachment = {attachment}, n = {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<(u32, u32)> = (1..=attachment as u32).map(|j| (0, j)).collect();
    // every node appears once per incident edge
    let mut repeated: Vec<u32> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    for v in (attachment + 1) as u32..n as u32 {
        let mut targets = BTreeSet::new();
        while targets.len() < attachment {
            targets.insert(*repeated.choose(&mut rng).expect("seed graph has edges"));
        }
        for t in targets {
            edges.push((v, t));
            repeated.extend([v, t]);
        }
    }
    Topology::from_edges(n, edges)
}
