//! Deterministic synthetic worlds: a jittered street grid, goal-directed
//! reference routes, template-grammar instructions with exact tags, and
//! feature maps carrying a planted action signal.
//!
//! Every node belongs to the shortest-path tree of its nearest goal. In the
//! first four rows of a node's feature map, the column facing bearing `b`
//! holds a one-hot code (LEFT, RIGHT, FORWARD, STOP) of the reference action
//! for an agent whose heading is the exit nearest to `b`. Remaining rows are
//! noise.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{DataError, DatasetManifest, FeaturePaths, Split, TrajectoryRecord, write_jsonl};
use crate::features::FeatureStore;
use crate::graph::{angular_diff, Action, AgentState, EdgeSpec, NavGraph, PanoId, Trajectory};
use crate::text::Style;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    /// Grid side length; the world has `grid * grid` panoramas.
    pub grid: usize,
    pub goals: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Amplitude of uniform feature noise.
    pub noise: f64,
    /// Fraction of grid edges removed (connectivity is preserved).
    pub drop_edges: f64,
    pub min_hops: u32,
    pub max_hops: u32,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub style: Style,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            grid: 6,
            goals: 3,
            channels: 4,
            height: 8,
            width: 64,
            noise: 0.5,
            drop_edges: 0.15,
            min_hops: 2,
            max_hops: 5,
            train: 50,
            dev: 20,
            test: 20,
            style: Style::Human,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.grid < 2 {
            return Err(format!("grid side {} is too small", self.grid));
        }
        if self.goals == 0 || self.goals >= self.grid * self.grid {
            return Err(format!("{} goals for {} panoramas", self.goals, self.grid * self.grid));
        }
        if self.channels == 0 || self.height < 4 || self.width < 8 || self.width % 8 != 0 {
            return Err(format!("feature shape {}x{}x{} (need H >= 4, W a multiple of 8)", self.channels, self.height, self.width));
        }
        if !(0.0..1.0).contains(&self.drop_edges) || !(self.noise >= 0.0) {
            return Err("drop_edges must lie in [0, 1) and noise must be non-negative".into());
        }
        if self.min_hops == 0 || self.min_hops > self.max_hops {
            return Err(format!("hop range [{}, {}]", self.min_hops, self.max_hops));
        }
        if self.train + self.dev + self.test == 0 {
            return Err("no episodes requested".into());
        }
        Ok(())
    }
}

const COLORS: &[&str] = &["red", "blue", "green", "yellow", "white", "black", "orange", "brown"];
const OBJECTS: &[&str] = &["awning", "building", "tree", "car", "bank", "deli", "church", "hydrant", "scaffolding", "store"];
const COMPASS: &[&str] = &["north", "northeast", "east", "southeast", "south", "southwest", "west", "northwest"];
const NUMBER_WORDS: &[&str] = &["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

/// Part-of-speech tag of every word the grammar can emit.
fn grammar_tag(word: &str) -> &'static str {
    match word {
        "." => ".",
        "the" | "a" => "DT",
        "go" | "walk" | "keep" | "turn" | "make" | "take" | "stop" | "head" | "continue" => "VB",
        "see" | "reach" => "VBP",
        "going" => "VBG",
        "is" => "VBZ",
        "straight" | "forward" | "ahead" | "left" | "right" => "RB",
        "past" | "until" | "at" | "on" | "toward" | "for" | "onto" | "next" | "when" | "to" => match word {
            "next" => "JJ",
            "when" => "WRB",
            "to" => "TO",
            _ => "IN",
        },
        "you" => "PRP",
        "your" => "PRP$",
        "cross" => "JJ",
        "street" | "block" | "intersection" | "destination" => "NN",
        "blocks" => "NNS",
        "st" | "ave" => "NNP",
        w if COMPASS.contains(&w) => "RB",
        w if COLORS.contains(&w) => "JJ",
        w if OBJECTS.contains(&w) => "NN",
        w if NUMBER_WORDS.contains(&w) || w.chars().all(|c| c.is_ascii_digit()) => "CD",
        _ => "JJ", // ordinals
    }
}

fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (1, r) if r != 11 => "st",
        (2, r) if r != 12 => "nd",
        (3, r) if r != 13 => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

/// A generated world.
#[derive(Debug, Clone)]
pub struct World {
    pub graph: NavGraph,
    pub features: FeatureStore,
    /// Next node towards the goal, `None` at goals.
    pub parent: Vec<Option<usize>>,
    /// Street name tokens per undirected edge `(min, max)`.
    pub streets: HashMap<(usize, usize), Vec<String>>,
    /// `(color, object)` per node.
    pub landmarks: Vec<(&'static str, &'static str)>,
}

fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut q = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                q.push_back(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

impl World {
    pub fn generate(spec: &FixtureSpec, seed: u64) -> Result<World, String> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = spec.grid;
        let n = g * g;
        let pos: Vec<(f64, f64)> = (0..n)
            .map(|i| ((i % g) as f64 + rng.gen_range(-0.2..0.2), (i / g) as f64 + rng.gen_range(-0.2..0.2)))
            .collect();
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for r in 0..g {
            for c in 0..g {
                let i = r * g + c;
                if c + 1 < g {
                    edges.push((i, i + 1));
                }
                if r + 1 < g {
                    edges.push((i, i + g));
                }
            }
        }
        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.shuffle(&mut rng);
        let target_drop = (spec.drop_edges * edges.len() as f64).round() as usize;
        let mut dropped = 0;
        let mut alive = vec![true; edges.len()];
        for k in order {
            if dropped == target_drop {
                break;
            }
            alive[k] = false;
            let rest: Vec<(usize, usize)> = edges.iter().zip(&alive).filter(|(_, a)| **a).map(|(e, _)| *e).collect();
            if connected(n, &rest) {
                dropped += 1;
            } else {
                alive[k] = true;
            }
        }
        let edges: Vec<(usize, usize)> = edges.into_iter().zip(alive).filter(|(_, a)| *a).map(|(e, _)| e).collect();

        let ids: Vec<PanoId> = (0..n).map(|i| PanoId(format!("n{}_{}", i / g, i % g))).collect();
        let bearing = |a: usize, b: usize| {
            let (dx, dy) = (pos[b].0 - pos[a].0, pos[b].1 - pos[a].1);
            let deg = dx.atan2(dy).to_degrees().rem_euclid(360.0);
            ((deg * 10.0).round() / 10.0).rem_euclid(360.0)
        };
        let specs: Vec<EdgeSpec> = edges
            .iter()
            .map(|&(a, b)| EdgeSpec { a: ids[a].clone(), b: ids[b].clone(), bearing_ab: bearing(a, b), bearing_ba: bearing(b, a) })
            .collect();
        let graph = NavGraph::new(ids.clone(), specs).map_err(|e| e.to_string())?;

        let mut streets = HashMap::new();
        for &(a, b) in &edges {
            let name = if b == a + 1 {
                vec![ordinal(a / g + 1), "st".to_string()]
            } else {
                vec![ordinal(a % g + 1), "ave".to_string()]
            };
            streets.insert((a, b), name);
        }

        let mut roots: Vec<usize> = (0..n).collect();
        roots.shuffle(&mut rng);
        roots.truncate(spec.goals);
        roots.sort_unstable();
        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut seen = vec![false; n];
        let mut q = VecDeque::new();
        for &r in &roots {
            seen[r] = true;
            q.push_back(r);
        }
        while let Some(u) = q.pop_front() {
            let mut nb: Vec<usize> = graph.neighbors(&ids[u]).expect("node").iter().map(|p| graph.node_index(p).expect("node")).collect();
            nb.sort_unstable();
            for v in nb {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    q.push_back(v);
                }
            }
        }
        let landmarks = (0..n).map(|_| (*COLORS.choose(&mut rng).unwrap(), *OBJECTS.choose(&mut rng).unwrap())).collect();

        let mut world = World { graph, features: FeatureStore::new(), parent, streets, landmarks };
        for i in 0..n {
            let map = world.feature_map(i, spec, &mut rng);
            world.features.insert(ids[i].clone(), map).map_err(|e| e.to_string())?;
        }
        Ok(world)
    }

    pub fn is_goal(&self, node: usize) -> bool {
        self.parent[node].is_none()
    }

    /// Goal of the tree containing `node`.
    pub fn goal_of(&self, mut node: usize) -> usize {
        while let Some(p) = self.parent[node] {
            node = p;
        }
        node
    }

    pub fn hops_to_goal(&self, mut node: usize) -> u32 {
        let mut h = 0;
        while let Some(p) = self.parent[node] {
            node = p;
            h += 1;
        }
        h
    }

    /// Reference action at `node` when facing the exit with bearing `heading`.
    pub fn reference_action(&self, node: usize, heading: f64) -> Action {
        let Some(p) = self.parent[node] else { return Action::Stop };
        let target = self.graph.bearing(self.graph.id(node), self.graph.id(p)).expect("tree edge");
        if angular_diff(target, heading) < 1e-9 {
            return Action::Forward;
        }
        let exits = self.graph.bearings(self.graph.id(node)).expect("node");
        let d = (target - heading).rem_euclid(360.0);
        // with two exits both rotations coincide; LEFT is the canonical label
        if exits.len() > 2 && d <= 180.0 {
            Action::Right
        } else {
            Action::Left
        }
    }

    fn feature_map(&self, node: usize, spec: &FixtureSpec, rng: &mut ChaCha8Rng) -> Tensor {
        let (c, h, w) = (spec.channels, spec.height, spec.width);
        let exits = self.graph.bearings(self.graph.id(node)).expect("node");
        let col_action: Vec<usize> = (0..w)
            .map(|col| {
                let b = col as f64 * 360.0 / w as f64;
                let nearest = exits
                    .iter()
                    .copied()
                    .min_by(|x, y| angular_diff(*x, b).total_cmp(&angular_diff(*y, b)))
                    .expect("node has exits");
                self.reference_action(node, nearest).index()
            })
            .collect();
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            for row in 0..h {
                for &a in &col_action {
                    let signal = if row < 4 && row == a { 1.0 } else { 0.0 };
                    let v: f64 = signal + if spec.noise > 0.0 { rng.gen_range(-spec.noise..spec.noise) } else { 0.0 };
                    data.push(v as f32 as f64);
                }
            }
        }
        Tensor::new(vec![c, h, w], data).expect("feature shape")
    }

    /// Follows the reference policy from a start state until STOP.
    pub fn reference_route(&self, route_id: &str, start: AgentState) -> (Trajectory, Vec<Action>) {
        let mut states = vec![start];
        let mut actions = Vec::new();
        loop {
            let s = states.last().expect("non-empty");
            let node = self.graph.node_index(&s.node).expect("valid node");
            let a = self.reference_action(node, s.heading);
            actions.push(a);
            if a == Action::Stop {
                break;
            }
            let next = self.graph.step(s, a);
            states.push(next);
        }
        (Trajectory::new(route_id, states), actions)
    }

    fn street(&self, a: usize, b: usize) -> &[String] {
        &self.streets[&(a.min(b), a.max(b))]
    }

    /// Instruction tokens and gold tags describing a reference route.
    pub fn describe(&self, traj: &Trajectory, actions: &[Action], style: Style, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
        let ix = |s: &AgentState| self.graph.node_index(&s.node).expect("valid node");
        let mut words: Vec<String> = Vec::new();
        let mut say = |ws: Vec<String>| {
            words.extend(ws);
            words.push(".".into());
        };
        let s = |x: &str| x.to_string();
        let mut t = 0;
        let mut prev_run = 0usize;
        let mut first = true;
        while t < actions.len() {
            let node = ix(&traj.states[t]);
            match actions[t] {
                Action::Forward => {
                    let start = t;
                    while actions[t] == Action::Forward {
                        t += 1;
                    }
                    let k = t - start;
                    let (a, b) = (node, ix(&traj.states[start + 1]));
                    let end = ix(&traj.states[t]);
                    let (color, object) = self.landmarks[end];
                    match style {
                        Style::Machine | Style::StyleTransferred if first => {
                            let compass = COMPASS[((traj.states[start].heading + 22.5) / 45.0) as usize % 8];
                            let cross: Vec<String> = self
                                .graph
                                .neighbors(self.graph.id(end))
                                .expect("node")
                                .iter()
                                .map(|p| self.street(end, self.graph.node_index(p).expect("node")).to_vec())
                                .find(|st| st.as_slice() != self.street(a, b))
                                .unwrap_or_else(|| self.street(a, b).to_vec());
                            let mut ws = vec![s("head"), s(compass), s("on")];
                            ws.extend(self.street(a, b).iter().cloned());
                            ws.push(s("toward"));
                            ws.extend(cross);
                            say(ws);
                        }
                        Style::Machine | Style::StyleTransferred => {
                            let mut ws = vec![s("continue"), s("on")];
                            ws.extend(self.street(a, b).iter().cloned());
                            ws.extend([s("for"), k.to_string(), s(if k == 1 { "block" } else { "blocks" })]);
                            say(ws);
                        }
                        Style::Human => match rng.gen_range(0..3) {
                            0 => say(vec![s("go"), s("straight"), s("past"), s("the"), s(color), s(object)]),
                            1 => say(vec![s("walk"), s("forward"), s(NUMBER_WORDS[k.min(10)]), s(if k == 1 { "block" } else { "blocks" })]),
                            _ => say(vec![s("keep"), s("going"), s("until"), s("you"), s("see"), s("a"), s(color), s(object)]),
                        },
                    }
                    prev_run = k;
                    first = false;
                }
                Action::Left | Action::Right => {
                    let dir = actions[t];
                    while actions[t] == dir {
                        t += 1;
                    }
                    let d = s(if dir == Action::Left { "left" } else { "right" });
                    let (color, object) = self.landmarks[node];
                    match style {
                        Style::Machine | Style::StyleTransferred => {
                            // the forward move after the turn selects the new street
                            let next = self.graph.step(&traj.states[t], Action::Forward);
                            let onto = self.street(node, self.graph.node_index(&next.node).expect("node")).to_vec();
                            let mut ws = vec![s("turn"), d];
                            if prev_run > 0 {
                                ws.extend([s("at"), s("the"), ordinal(prev_run), s("cross"), s("street")]);
                            }
                            ws.push(s("onto"));
                            ws.extend(onto);
                            say(ws);
                        }
                        Style::Human => match rng.gen_range(0..3) {
                            0 => say(vec![s("turn"), d, s("at"), s("the"), s(color), s(object)]),
                            1 => say(vec![s("make"), s("a"), d, s("at"), s("the"), s(object)]),
                            _ => say(vec![s("take"), s("a"), d, s("at"), s("the"), s("intersection")]),
                        },
                    }
                    prev_run = 0;
                    first = false;
                }
                Action::Stop => {
                    let (color, object) = self.landmarks[node];
                    match style {
                        Style::Machine | Style::StyleTransferred => say(vec![s("your"), s("destination"), s("is"), s("ahead")]),
                        Style::Human => match rng.gen_range(0..2) {
                            0 => say(vec![s("stop"), s("next"), s("to"), s("the"), s(color), s(object)]),
                            _ => say(vec![s("stop"), s("when"), s("you"), s("reach"), s("the"), s(object)]),
                        },
                    }
                    t += 1;
                }
            }
        }
        let tags = words.iter().map(|w| grammar_tag(w).to_string()).collect();
        (words, tags)
    }

    /// Random start states whose goal is `min_hops..=max_hops` edges away.
    pub fn sample_routes(&self, count: usize, prefix: &str, spec: &FixtureSpec, rng: &mut ChaCha8Rng) -> Vec<(Trajectory, Vec<Action>)> {
        let candidates: Vec<usize> = (0..self.graph.node_count())
            .filter(|&i| (spec.min_hops..=spec.max_hops).contains(&self.hops_to_goal(i)))
            .collect();
        if candidates.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|k| {
                let node = *candidates.choose(rng).expect("non-empty");
                let exits = self.graph.bearings(self.graph.id(node)).expect("node");
                let heading = *exits.choose(rng).expect("node has exits");
                self.reference_route(&format!("{prefix}{k:04}"), AgentState::new(self.graph.id(node).clone(), heading))
            })
            .collect()
    }
}

/// Files written for one generated world.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureOutput {
    pub manifests: Vec<(Split, PathBuf)>,
}

/// Writes a world (graph, feature store) and one manifest per non-empty
/// split into `out_dir`.
pub fn gen_fixtures(spec: &FixtureSpec, seed: u64, out_dir: &Path) -> Result<FixtureOutput, DataError> {
    let world = World::generate(spec, seed).map_err(|msg| DataError::Manifest { path: out_dir.display().to_string(), msg })?;
    std::fs::create_dir_all(out_dir).map_err(|source| DataError::Io { path: out_dir.display().to_string(), source })?;
    let graph_path = out_dir.join("graph.txt");
    std::fs::write(&graph_path, world.graph.to_text())
        .map_err(|source| DataError::Io { path: graph_path.display().to_string(), source })?;
    world.features.save(&out_dir.join("features.bin"), &out_dir.join("features.jsonl"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1c7);
    let mut manifests = Vec::new();
    for (split, count) in [(Split::Train, spec.train), (Split::Dev, spec.dev), (Split::Test, spec.test)] {
        if count == 0 {
            continue;
        }
        let routes = world.sample_routes(count, &format!("{}-", split.name()), spec, &mut rng);
        if routes.is_empty() {
            return Err(DataError::Manifest {
                path: out_dir.display().to_string(),
                msg: format!("no start node within {}..={} hops of a goal", spec.min_hops, spec.max_hops),
            });
        }
        let records: Vec<TrajectoryRecord> = routes
            .iter()
            .map(|(traj, actions)| {
                let (words, tags) = world.describe(traj, actions, spec.style, &mut rng);
                let goal = world.graph.id(world.goal_of(world.graph.node_index(&traj.start().node).expect("node")));
                TrajectoryRecord {
                    route_id: traj.route_id.clone(),
                    nodes: traj.states.iter().map(|s| s.node.0.clone()).collect(),
                    headings: traj.states.iter().map(|s| s.heading).collect(),
                    goal: goal.0.clone(),
                    instruction: words.join(" "),
                    tags: Some(tags),
                }
            })
            .collect();
        let traj_name = format!("{}.jsonl", split.name());
        write_jsonl(&out_dir.join(&traj_name), &records)?;
        let manifest = DatasetManifest {
            graph: "graph.txt".into(),
            trajectories: traj_name.into(),
            instructions: None,
            features: FeaturePaths { data: "features.bin".into(), index: "features.jsonl".into() },
            split,
            style: spec.style,
        };
        let path = out_dir.join(format!("manifest_{}.json", split.name()));
        manifest.save(&path)?;
        manifests.push((split, path));
    }
    Ok(FixtureOutput { manifests })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::guiding_signals;
    use crate::text::Signal;

    #[test]
    fn reference_routes_follow_graph_semantics() {
        let spec = FixtureSpec::default();
        for seed in 0..5 {
            let w = World::generate(&spec, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (traj, actions) in w.sample_routes(30, "r", &spec, &mut rng) {
                assert_eq!(w.graph.gold_actions(&traj).unwrap(), actions);
                let end = w.graph.node_index(&traj.end().node).unwrap();
                assert!(w.is_goal(end));
                assert_eq!(traj.node_path().len() as u32, w.hops_to_goal(w.graph.node_index(&traj.start().node).unwrap()) + 1);
            }
        }
    }

    #[test]
    fn instructions_carry_the_route_turns() {
        let spec = FixtureSpec::default();
        let w = World::generate(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (traj, actions) in w.sample_routes(100, "r", &spec, &mut rng) {
            let mut turns = Vec::new();
            for (i, a) in actions.iter().enumerate() {
                let sig = match a {
                    Action::Left => Signal::Left,
                    Action::Right => Signal::Right,
                    _ => continue,
                };
                if i == 0 || actions[i - 1] != *a {
                    turns.push(sig);
                }
            }
            for style in [Style::Human, Style::Machine] {
                let (words, tags) = w.describe(&traj, &actions, style, &mut rng);
                assert_eq!(guiding_signals(&words), turns, "{}", words.join(" "));
                assert_eq!(words.len(), tags.len());
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = FixtureSpec { train: 5, dev: 3, test: 0, ..FixtureSpec::default() };
        let oa = gen_fixtures(&spec, 11, a.path()).unwrap();
        gen_fixtures(&spec, 11, b.path()).unwrap();
        assert_eq!(oa.manifests.len(), 2);
        for name in ["graph.txt", "features.bin", "features.jsonl", "train.jsonl", "dev.jsonl", "manifest_train.json"] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
        }
        let c = tempfile::tempdir().unwrap();
        gen_fixtures(&spec, 12, c.path()).unwrap();
        assert_ne!(std::fs::read(a.path().join("train.jsonl")).unwrap(), std::fs::read(c.path().join("train.jsonl")).unwrap());
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(World::generate(&FixtureSpec { grid: 1, ..FixtureSpec::default() }, 0).is_err());
        assert!(World::generate(&FixtureSpec { width: 60, ..FixtureSpec::default() }, 0).is_err());
        assert!(World::generate(&FixtureSpec { min_hops: 4, max_hops: 2, ..FixtureSpec::default() }, 0).is_err());
        assert!(World::generate(&FixtureSpec { goals: 36, ..FixtureSpec::default() }, 0).is_err());
    }

    #[test]
    fn ordinals() {
        let got: Vec<String> = [1, 2, 3, 4, 11, 12, 13, 21, 22, 101].iter().map(|&n| ordinal(n)).collect();
        assert_eq!(got, ["1st", "2nd", "3rd", "4th", "11th", "12th", "13th", "21st", "22nd", "101st"]);
    }

    /// Multinomial logistic regression on the column a state faces.
    #[test]
    fn planted_signal_is_linearly_decodable() {
        let spec = FixtureSpec::default();
        let w = World::generate(&spec, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
        for (traj, actions) in w.sample_routes(120, "p", &spec, &mut rng) {
            for (s, a) in traj.states.iter().zip(&actions) {
                let map = w.features.get(&s.node).unwrap();
                let col = crate::features::heading_column(s.heading, spec.width);
                let mut x: Vec<f64> = (0..spec.channels * spec.height)
                    .map(|r| map.data()[r * spec.width + col])
                    .collect();
                x.push(1.0);
                rows.push((x, a.index()));
            }
        }
        let (train, test) = rows.split_at(rows.len() * 2 / 3);
        let d = train[0].0.len();
        let mut wt = vec![[0.0f64; 4]; d];
        let scores = |wt: &[[f64; 4]], x: &[f64]| {
            let mut z = [0.0; 4];
            for (xi, wi) in x.iter().zip(wt) {
                for k in 0..4 {
                    z[k] += xi * wi[k];
                }
            }
            z
        };
        for _ in 0..300 {
            let mut g = vec![[0.0f64; 4]; d];
            for (x, y) in train {
                let z = scores(&wt, x);
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for k in 0..4 {
                    let err = e[k] / s - if k == *y { 1.0 } else { 0.0 };
                    for (gi, xi) in g.iter_mut().zip(x) {
                        gi[k] += err * xi;
                    }
                }
            }
            for (wi, gi) in wt.iter_mut().zip(&g) {
                for k in 0..4 {
                    wi[k] -= 0.5 * gi[k] / train.len() as f64;
                }
            }
        }
        let correct = test
            .iter()
            .filter(|(x, y)| {
                let z = scores(&wt, x);
                (0..4).max_by(|a, b| z[*a].total_cmp(&z[*b])).unwrap() == *y
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.9, "probe accuracy {acc}");
    }
}
