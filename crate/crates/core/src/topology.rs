//! Static broker overlay: brokers, links and client attachments.
//!
//! Routing requires the links to form a tree. [`route_table_check`] verifies
//! that and precomputes the first-hop table used by every broker.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use dire_model::NodeId;
use serde::Deserialize;

pub type BrokerIdx = usize;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("overlay has no brokers")]
    Empty,
    #[error("duplicate broker `{0}`")]
    DuplicateBroker(String),
    #[error("unknown broker `{0}`")]
    UnknownBroker(String),
    #[error("link from `{0}` to itself")]
    SelfLoop(String),
    #[error("overlay is disconnected: `{0}` unreachable from `{1}`")]
    DisconnectedTopology(String, String),
    #[error("overlay contains a cycle through link `{0}`-`{1}`")]
    CycleDetected(String, String),
}

/// Text form of a topology file.
#[derive(Clone, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub brokers: Vec<String>,
    #[serde(default)]
    pub links: Vec<(String, String)>,
    /// Client node id → broker name.
    #[serde(default)]
    pub attach: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlayTopology {
    pub brokers: Vec<String>,
    pub links: Vec<(BrokerIdx, BrokerIdx)>,
    pub attachments: BTreeMap<NodeId, BrokerIdx>,
}

impl OverlayTopology {
    /// Builds a topology from broker names and links. Structure (tree shape)
    /// is checked separately by [`route_table_check`].
    pub fn new(brokers: Vec<String>, links: &[(String, String)]) -> Result<Self, TopologyError> {
        if brokers.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut seen = BTreeSet::new();
        for b in &brokers {
            if !seen.insert(b.as_str()) {
                return Err(TopologyError::DuplicateBroker(b.clone()));
            }
        }
        let mut topo = OverlayTopology {
            brokers,
            links: Vec::new(),
            attachments: BTreeMap::new(),
        };
        for (a, b) in links {
            let (ia, ib) = (topo.index(a)?, topo.index(b)?);
            if ia == ib {
                return Err(TopologyError::SelfLoop(a.clone()));
            }
            topo.links.push((ia, ib));
        }
        Ok(topo)
    }

    pub fn from_spec(spec: &TopologySpec) -> Result<Self, TopologyError> {
        let mut topo = Self::new(spec.brokers.clone(), &spec.links)?;
        for (node, broker) in &spec.attach {
            topo.attach(NodeId::new(node.as_str()), broker)?;
        }
        Ok(topo)
    }

    pub fn index(&self, broker: &str) -> Result<BrokerIdx, TopologyError> {
        self.brokers
            .iter()
            .position(|b| b == broker)
            .ok_or_else(|| TopologyError::UnknownBroker(broker.to_owned()))
    }

    pub fn attach(&mut self, node: NodeId, broker: &str) -> Result<(), TopologyError> {
        let idx = self.index(broker)?;
        self.attachments.insert(node, idx);
        Ok(())
    }

    pub fn broker_of(&self, node: &NodeId) -> Option<BrokerIdx> {
        self.attachments.get(node).copied()
    }

    /// One hub broker `hub` with `leaves` leaf brokers `b1..`.
    pub fn star(leaves: usize) -> Self {
        let mut brokers = vec!["hub".to_owned()];
        let mut links = Vec::new();
        for i in 1..=leaves {
            brokers.push(format!("b{i}"));
            links.push(("hub".to_owned(), format!("b{i}")));
        }
        Self::new(brokers, &links).expect("generated star is well formed")
    }

    /// Complete tree with the given branching factor and depth (depth 0 is
    /// a single broker). Brokers are named `b0, b1, ...` in breadth-first
    /// order.
    pub fn balanced_tree(branching: usize, depth: usize) -> Self {
        let mut brokers = vec!["b0".to_owned()];
        let mut links = Vec::new();
        let mut frontier = vec![0usize];
        for _ in 0..depth {
            let mut next = Vec::new();
            for parent in frontier {
                for _ in 0..branching {
                    let id = brokers.len();
                    brokers.push(format!("b{id}"));
                    links.push((format!("b{parent}"), format!("b{id}")));
                    next.push(id);
                }
            }
            frontier = next;
        }
        Self::new(brokers, &links).expect("generated tree is well formed")
    }

    /// Tree given as a parent list: broker `i` (named `b{i}`) hangs below
    /// `parents[i - 1]`.
    pub fn from_parents(parents: &[usize]) -> Result<Self, TopologyError> {
        let brokers = (0..=parents.len()).map(|i| format!("b{i}")).collect();
        let links: Vec<_> = parents
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("b{p}"), format!("b{}", i + 1)))
            .collect();
        Self::new(brokers, &links)
    }

    /// Brokers with exactly one link.
    pub fn leaves(&self) -> Vec<BrokerIdx> {
        let mut degree = vec![0usize; self.brokers.len()];
        for &(a, b) in &self.links {
            degree[a] += 1;
            degree[b] += 1;
        }
        (0..self.brokers.len()).filter(|&i| degree[i] <= 1).collect()
    }
}

/// Result of a successful structural check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteDiagnostics {
    pub brokers: usize,
    pub links: usize,
    pub diameter: usize,
    /// Attached clients per broker, in broker order.
    pub clients_per_broker: Vec<usize>,
    /// Subscriptions per broker, when a routing table is available.
    pub subscriptions_per_broker: Vec<usize>,
}

/// First-hop and distance tables over a verified tree.
#[derive(Clone, Debug)]
pub struct Tree {
    pub adjacency: Vec<Vec<BrokerIdx>>,
    next_hop: Vec<Vec<BrokerIdx>>,
    dist: Vec<Vec<u32>>,
}

impl Tree {
    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    /// Neighbour of `from` on the path to `to` (`from` itself if equal).
    pub fn next_hop(&self, from: BrokerIdx, to: BrokerIdx) -> BrokerIdx {
        self.next_hop[from][to]
    }

    pub fn distance(&self, a: BrokerIdx, b: BrokerIdx) -> u32 {
        self.dist[a][b]
    }

    /// Brokers on the path from `a` to `b`, both ends included.
    pub fn path(&self, a: BrokerIdx, b: BrokerIdx) -> Vec<BrokerIdx> {
        let mut out = vec![a];
        let mut cur = a;
        while cur != b {
            cur = self.next_hop[cur][b];
            out.push(cur);
        }
        out
    }

    pub fn diameter(&self) -> usize {
        self.dist.iter().flatten().copied().max().unwrap_or(0) as usize
    }
}

/// Verifies that the overlay is a connected acyclic graph and builds its
/// routing tables.
pub fn route_table_check(topo: &OverlayTopology) -> Result<(Tree, RouteDiagnostics), TopologyError> {
    let n = topo.brokers.len();
    if n == 0 {
        return Err(TopologyError::Empty);
    }
    // Union-find catches the first link that closes a cycle.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut adjacency = vec![Vec::new(); n];
    for &(a, b) in &topo.links {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb {
            return Err(TopologyError::CycleDetected(
                topo.brokers[a].clone(),
                topo.brokers[b].clone(),
            ));
        }
        parent[ra] = rb;
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    for adj in &mut adjacency {
        adj.sort_unstable();
    }
    let mut next_hop = vec![vec![usize::MAX; n]; n];
    let mut dist = vec![vec![u32::MAX; n]; n];
    for src in 0..n {
        next_hop[src][src] = src;
        dist[src][src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(cur) = queue.pop_front() {
            for &nb in &adjacency[cur] {
                if dist[src][nb] == u32::MAX {
                    dist[src][nb] = dist[src][cur] + 1;
                    next_hop[src][nb] = if cur == src { nb } else { next_hop[src][cur] };
                    queue.push_back(nb);
                }
            }
        }
        if let Some(missing) = (0..n).find(|&b| dist[src][b] == u32::MAX) {
            return Err(TopologyError::DisconnectedTopology(
                topo.brokers[missing].clone(),
                topo.brokers[src].clone(),
            ));
        }
    }
    let tree = Tree {
        adjacency,
        next_hop,
        dist,
    };
    let mut clients_per_broker = vec![0; n];
    for &b in topo.attachments.values() {
        clients_per_broker[b] += 1;
    }
    let diag = RouteDiagnostics {
        brokers: n,
        links: topo.links.len(),
        diameter: tree.diameter(),
        clients_per_broker,
        subscriptions_per_broker: vec![0; n],
    };
    Ok((tree, diag))
}
