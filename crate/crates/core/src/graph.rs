//! Street graph: panorama nodes joined by undirected edges with per-direction
//! compass bearings, agent action semantics and hop-count distances.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bearings closer than this are considered the same edge selection.
const BEARING_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("self-loop at node {0}")]
    SelfLoop(String),
    #[error("duplicate node record {0}")]
    DuplicateNode(String),
    #[error("duplicate edge record {0}-{1}")]
    DuplicateEdge(String, String),
    #[error("edge {0}-{1} references undeclared node")]
    UnknownEdgeEndpoint(String, String),
    #[error("bearing {bearing} on edge {from}->{to} outside [0, 360)")]
    BadBearing { from: String, to: String, bearing: f64 },
    #[error("node {node} has two exits with bearing {bearing}")]
    AmbiguousBearing { node: String, bearing: f64 },
    #[error("node {0} has no edges")]
    Isolated(String),
    #[error("graph is disconnected: {0} unreachable from {1}")]
    Disconnected(String, String),
    #[error("unknown panorama {0}")]
    UnknownNode(String),
    #[error("heading {heading} is not an exit bearing of {node}")]
    BadHeading { node: String, heading: f64 },
    #[error("{0} and {1} are not connected")]
    Unreachable(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Opaque panorama identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PanoId(pub String);

impl PanoId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PanoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PanoId {
    fn from(s: &str) -> Self {
        PanoId(s.to_string())
    }
}

impl From<String> for PanoId {
    fn from(s: String) -> Self {
        PanoId(s)
    }
}

/// The four navigation actions. The declaration order is also the argmax
/// tie-break order used by the navigator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Left,
    Right,
    Forward,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Left, Action::Right, Action::Forward, Action::Stop];

    pub fn index(self) -> usize {
        match self {
            Action::Left => 0,
            Action::Right => 1,
            Action::Forward => 2,
            Action::Stop => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub node: PanoId,
    pub heading: f64,
}

impl AgentState {
    pub fn new(node: impl Into<PanoId>, heading: f64) -> Self {
        AgentState { node: node.into(), heading }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub route_id: String,
    pub states: Vec<AgentState>,
}

impl Trajectory {
    pub fn new(route_id: impl Into<String>, states: Vec<AgentState>) -> Self {
        Trajectory { route_id: route_id.into(), states }
    }

    pub fn start(&self) -> &AgentState {
        &self.states[0]
    }

    pub fn end(&self) -> &AgentState {
        self.states.last().expect("trajectory is non-empty")
    }

    /// Node sequence with consecutive repeats (rotations) collapsed.
    pub fn node_path(&self) -> Vec<PanoId> {
        let mut out: Vec<PanoId> = Vec::with_capacity(self.states.len());
        for s in &self.states {
            if out.last() != Some(&s.node) {
                out.push(s.node.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Exit {
    to: usize,
    bearing: f64,
}

/// Undirected panorama graph. Immutable after construction; hop distances
/// are computed lazily per source and cached.
#[derive(Debug)]
pub struct NavGraph {
    ids: Vec<PanoId>,
    index: HashMap<PanoId, usize>,
    /// Exits per node, sorted by ascending bearing.
    exits: Vec<Vec<Exit>>,
    hops: Vec<OnceLock<Vec<u32>>>,
}

impl Clone for NavGraph {
    fn clone(&self) -> Self {
        NavGraph {
            ids: self.ids.clone(),
            index: self.index.clone(),
            exits: self.exits.clone(),
            hops: (0..self.ids.len()).map(|_| OnceLock::new()).collect(),
        }
    }
}

/// One undirected edge with the bearing in each direction.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSpec {
    pub a: PanoId,
    pub b: PanoId,
    pub bearing_ab: f64,
    pub bearing_ba: f64,
}

pub fn angular_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

impl NavGraph {
    /// Builds and validates a graph.
    pub fn new(nodes: Vec<PanoId>, edges: Vec<EdgeSpec>) -> Result<Self, GraphError> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(GraphError::DuplicateNode(n.0.clone()));
            }
        }
        let mut exits: Vec<Vec<Exit>> = vec![Vec::new(); nodes.len()];
        let mut seen: HashSet<(usize, usize)> = HashSet::new();
        for e in &edges {
            if e.a == e.b {
                return Err(GraphError::SelfLoop(e.a.0.clone()));
            }
            let (Some(&ia), Some(&ib)) = (index.get(&e.a), index.get(&e.b)) else {
                return Err(GraphError::UnknownEdgeEndpoint(e.a.0.clone(), e.b.0.clone()));
            };
            if !seen.insert((ia.min(ib), ia.max(ib))) {
                return Err(GraphError::DuplicateEdge(e.a.0.clone(), e.b.0.clone()));
            }
            for (from, to, bearing) in [(&e.a, &e.b, e.bearing_ab), (&e.b, &e.a, e.bearing_ba)] {
                if !(0.0..360.0).contains(&bearing) || !bearing.is_finite() {
                    return Err(GraphError::BadBearing {
                        from: from.0.clone(),
                        to: to.0.clone(),
                        bearing,
                    });
                }
            }
            exits[ia].push(Exit { to: ib, bearing: e.bearing_ab });
            exits[ib].push(Exit { to: ia, bearing: e.bearing_ba });
        }
        for (i, ex) in exits.iter_mut().enumerate() {
            if ex.is_empty() {
                return Err(GraphError::Isolated(nodes[i].0.clone()));
            }
            ex.sort_by(|x, y| x.bearing.total_cmp(&y.bearing));
            for w in ex.windows(2) {
                if (w[1].bearing - w[0].bearing).abs() < BEARING_EPS {
                    return Err(GraphError::AmbiguousBearing {
                        node: nodes[i].0.clone(),
                        bearing: w[0].bearing,
                    });
                }
            }
        }
        let n = nodes.len();
        let g = NavGraph {
            ids: nodes,
            index,
            exits,
            hops: (0..n).map(|_| OnceLock::new()).collect(),
        };
        if n > 0 {
            let d = g.hops_from(0);
            if let Some(far) = d.iter().position(|&x| x == u32::MAX) {
                return Err(GraphError::Disconnected(g.ids[far].0.clone(), g.ids[0].0.clone()));
            }
        }
        Ok(g)
    }

    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: &str| GraphError::Parse { line: lineno + 1, msg: msg.to_string() };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["NODE", id] => nodes.push(PanoId::from(*id)),
                ["EDGE", a, b, ab, ba] => {
                    let bearing_ab: f64 = ab.parse().map_err(|_| perr("bad bearing"))?;
                    let bearing_ba: f64 = ba.parse().map_err(|_| perr("bad bearing"))?;
                    edges.push(EdgeSpec { a: PanoId::from(*a), b: PanoId::from(*b), bearing_ab, bearing_ba });
                }
                ["NODE", ..] | ["EDGE", ..] => return Err(perr("wrong field count")),
                _ => return Err(perr("unknown record type")),
            }
        }
        NavGraph::new(nodes, edges)
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path)?;
        NavGraph::parse(&text)
    }

    /// Serializes to the line-oriented graph format. Bearings use the
    /// shortest round-trip representation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for id in &self.ids {
            out.push_str(&format!("NODE {id}\n"));
        }
        for (i, ex) in self.exits.iter().enumerate() {
            for e in ex {
                if e.to > i {
                    let back = self.exits[e.to].iter().find(|x| x.to == i).expect("symmetric");
                    out.push_str(&format!(
                        "EDGE {} {} {:?} {:?}\n",
                        self.ids[i], self.ids[e.to], e.bearing, back.bearing
                    ));
                }
            }
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.exits.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn nodes(&self) -> &[PanoId] {
        &self.ids
    }

    pub fn contains(&self, id: &PanoId) -> bool {
        self.index.contains_key(id)
    }

    pub fn node_index(&self, id: &PanoId) -> Result<usize, GraphError> {
        self.index.get(id).copied().ok_or_else(|| GraphError::UnknownNode(id.0.clone()))
    }

    pub fn id(&self, ix: usize) -> &PanoId {
        &self.ids[ix]
    }

    pub fn degree(&self, id: &PanoId) -> Result<usize, GraphError> {
        Ok(self.exits[self.node_index(id)?].len())
    }

    /// Outgoing bearings of a node in ascending order.
    pub fn bearings(&self, id: &PanoId) -> Result<Vec<f64>, GraphError> {
        Ok(self.exits[self.node_index(id)?].iter().map(|e| e.bearing).collect())
    }

    /// Neighbours of a node in ascending bearing order.
    pub fn neighbors(&self, id: &PanoId) -> Result<Vec<&PanoId>, GraphError> {
        Ok(self.exits[self.node_index(id)?].iter().map(|e| &self.ids[e.to]).collect())
    }

    pub fn bearing(&self, from: &PanoId, to: &PanoId) -> Option<f64> {
        let (i, j) = (self.index.get(from)?, self.index.get(to)?);
        self.exits[*i].iter().find(|e| e.to == *j).map(|e| e.bearing)
    }

    fn exit_slot(&self, node: usize, heading: f64) -> Option<usize> {
        self.exits[node].iter().position(|e| angular_diff(e.bearing, heading) < BEARING_EPS)
    }

    /// Checks a state and snaps its heading to the exact stored bearing.
    pub fn validate_state(&self, state: &AgentState) -> Result<AgentState, GraphError> {
        let node = self.node_index(&state.node)?;
        let slot = self.exit_slot(node, state.heading).ok_or_else(|| GraphError::BadHeading {
            node: state.node.0.clone(),
            heading: state.heading,
        })?;
        Ok(AgentState { node: state.node.clone(), heading: self.exits[node][slot].bearing })
    }

    /// Arrival heading rule: the exit at `node` closest to `arrival`,
    /// ties to the smaller bearing.
    fn continuation(&self, node: usize, arrival: f64) -> f64 {
        let mut best = self.exits[node][0].bearing;
        let mut best_d = angular_diff(best, arrival);
        for e in &self.exits[node][1..] {
            let d = angular_diff(e.bearing, arrival);
            if d < best_d {
                best = e.bearing;
                best_d = d;
            }
        }
        best
    }

    /// Applies one action. `state` must be valid in this graph.
    pub fn step(&self, state: &AgentState, action: Action) -> AgentState {
        let node = self.index[&state.node];
        let exits = &self.exits[node];
        let slot = self
            .exit_slot(node, state.heading)
            .unwrap_or_else(|| panic!("invalid state {} @ {}", state.node, state.heading));
        let k = exits.len();
        match action {
            Action::Left => AgentState { node: state.node.clone(), heading: exits[(slot + k - 1) % k].bearing },
            Action::Right => AgentState { node: state.node.clone(), heading: exits[(slot + 1) % k].bearing },
            Action::Forward => {
                let e = exits[slot];
                AgentState { node: self.ids[e.to].clone(), heading: self.continuation(e.to, e.bearing) }
            }
            Action::Stop => state.clone(),
        }
    }

    /// The single action that moves `from` to `to`, if any. Rotations are
    /// preferred over STOP when headings differ; identical states map to STOP.
    pub fn infer_action(&self, from: &AgentState, to: &AgentState) -> Option<Action> {
        if from.node == to.node && angular_diff(from.heading, to.heading) < BEARING_EPS {
            return Some(Action::Stop);
        }
        [Action::Left, Action::Right, Action::Forward].into_iter().find(|&a| {
            let s = self.step(from, a);
            s.node == to.node && angular_diff(s.heading, to.heading) < BEARING_EPS
        })
    }

    /// Hop distances from one node to all others (u32::MAX when unreachable).
    fn hops_from(&self, src: usize) -> &[u32] {
        self.hops[src].get_or_init(|| {
            let mut dist = vec![u32::MAX; self.ids.len()];
            let mut queue = VecDeque::new();
            dist[src] = 0;
            queue.push_back(src);
            while let Some(u) = queue.pop_front() {
                for e in &self.exits[u] {
                    if dist[e.to] == u32::MAX {
                        dist[e.to] = dist[u] + 1;
                        queue.push_back(e.to);
                    }
                }
            }
            dist
        })
    }

    pub fn hops_ix(&self, a: usize, b: usize) -> u32 {
        self.hops_from(a)[b]
    }

    /// Minimum number of edges between two panoramas.
    pub fn shortest_path_len(&self, a: &PanoId, b: &PanoId) -> Result<u32, GraphError> {
        let (ia, ib) = (self.node_index(a)?, self.node_index(b)?);
        match self.hops_from(ia)[ib] {
            u32::MAX => Err(GraphError::Unreachable(a.0.clone(), b.0.clone())),
            d => Ok(d),
        }
    }

    /// Checks that consecutive states are connected by one action.
    pub fn validate_trajectory(&self, traj: &Trajectory) -> Result<Trajectory, GraphError> {
        let states = traj.states.iter().map(|s| self.validate_state(s)).collect::<Result<Vec<_>, _>>()?;
        if states.is_empty() {
            return Err(GraphError::Parse { line: 0, msg: format!("route {} is empty", traj.route_id) });
        }
        for w in states.windows(2) {
            match self.infer_action(&w[0], &w[1]) {
                Some(Action::Stop) | None => {
                    return Err(GraphError::Parse {
                        line: 0,
                        msg: format!(
                            "route {}: {}@{} -> {}@{} is not a single action",
                            traj.route_id, w[0].node, w[0].heading, w[1].node, w[1].heading
                        ),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(Trajectory { route_id: traj.route_id.clone(), states })
    }

    /// Gold action sequence for a trajectory: one action per state, the
    /// final one being STOP.
    pub fn gold_actions(&self, traj: &Trajectory) -> Option<Vec<Action>> {
        let mut out = Vec::with_capacity(traj.states.len());
        for w in traj.states.windows(2) {
            match self.infer_action(&w[0], &w[1])? {
                Action::Stop => return None,
                a => out.push(a),
            }
        }
        out.push(Action::Stop);
        Some(out)
    }
}

/// Runs `policy` from `start` until it returns STOP or `max_steps` actions
/// have been taken. The returned trajectory includes the start state and has
/// an empty route id.
pub fn rollout<P>(graph: &NavGraph, start: &AgentState, mut policy: P, max_steps: usize) -> Trajectory
where
    P: FnMut(&[AgentState]) -> Action,
{
    assert!(max_steps >= 1, "max_steps must be positive");
    let mut states = vec![start.clone()];
    for _ in 0..max_steps {
        let action = policy(&states);
        if action == Action::Stop {
            break;
        }
        let next = graph.step(states.last().expect("non-empty"), action);
        states.push(next);
    }
    Trajectory::new(String::new(), states)
}

/// Random connected graph: a random spanning tree plus extra edges, with
/// distinct random bearings per node.
pub fn random_connected(n: usize, extra: usize, seed: u64) -> NavGraph {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<PanoId> = (0..n).map(|i| PanoId(format!("p{i}"))).collect();
    let mut pairs: Vec<(usize, usize)> = (1..n).map(|i| (rng.gen_range(0..i), i)).collect();
    for _ in 0..extra {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b && !pairs.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)) {
            pairs.push((a, b));
        }
    }
    // distinct bearings: integer degrees drawn without replacement per node
    let mut used: Vec<HashSet<u32>> = vec![HashSet::new(); n];
    let mut draw = |rng: &mut rand_chacha::ChaCha8Rng, node: usize| loop {
        let b = rng.gen_range(0..360u32);
        if used[node].insert(b) {
            return b as f64;
        }
    };
    let edges = pairs
        .into_iter()
        .map(|(a, b)| {
            let ab = draw(&mut rng, a);
            let ba = draw(&mut rng, b);
            EdgeSpec { a: names[a].clone(), b: names[b].clone(), bearing_ab: ab, bearing_ba: ba }
        })
        .collect();
    NavGraph::new(names, edges).expect("generated graph is valid")
}
