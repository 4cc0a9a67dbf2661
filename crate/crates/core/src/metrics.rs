//! Navigation metrics: task completion, shortest-path distance, success
//! weighted edit distance, coverage weighted by length score, normalized DTW
//! and success weighted DTW. All distances are graph hops.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::{GraphError, NavGraph, PanoId, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Success when the final node is within this many hops of the goal.
    pub success_threshold_hops: u32,
    /// Distance scale d_th used by CLS coverage and nDTW.
    pub dtw_distance_scale: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { success_threshold_hops: 1, dtw_distance_scale: 1.0 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.success_threshold_hops == 0 {
            return Err("success_threshold_hops must be positive".into());
        }
        if !(self.dtw_distance_scale > 0.0) {
            return Err("dtw_distance_scale must be positive".into());
        }
        Ok(())
    }
}

/// Per-sample metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub route_id: String,
    pub tc: f64,
    pub spd: f64,
    pub sed: f64,
    pub cls: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

/// Dataset means. `s_spd`/`f_spd` are the mean SPD over successful and
/// failed samples; absent when that subset is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub tc: f64,
    pub spd: f64,
    pub sed: f64,
    pub cls: f64,
    pub ndtw: f64,
    pub sdtw: f64,
    pub s_spd: Option<f64>,
    pub f_spd: Option<f64>,
}

/// Levenshtein distance over arbitrary token sequences (two-row DP).
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Full (unbanded) DTW cost between two sequences under `cost`.
pub fn dtw_cost<F>(n: usize, m: usize, cost: F) -> f64
where
    F: Fn(usize, usize) -> f64,
{
    assert!(n > 0 && m > 0, "DTW needs non-empty sequences");
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![f64::INFINITY; m];
    for i in 0..n {
        for j in 0..m {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = best + cost(i, j);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

fn indices(graph: &NavGraph, path: &[PanoId]) -> Result<Vec<usize>, GraphError> {
    path.iter().map(|p| graph.node_index(p)).collect()
}

fn path_hops(graph: &NavGraph, path: &[usize]) -> f64 {
    path.windows(2).map(|w| graph.hops_ix(w[0], w[1]) as f64).sum()
}

pub fn task_completion(pred: &Trajectory, goal: &PanoId, graph: &NavGraph, cfg: &MetricConfig) -> Result<f64, GraphError> {
    let d = graph.shortest_path_len(&pred.end().node, goal)?;
    Ok(if d <= cfg.success_threshold_hops { 1.0 } else { 0.0 })
}

pub fn spd(pred: &Trajectory, goal: &PanoId, graph: &NavGraph) -> Result<f64, GraphError> {
    Ok(graph.shortest_path_len(&pred.end().node, goal)? as f64)
}

pub fn sed(
    pred: &Trajectory,
    reference: &Trajectory,
    goal: &PanoId,
    graph: &NavGraph,
    cfg: &MetricConfig,
) -> Result<f64, GraphError> {
    if task_completion(pred, goal, graph, cfg)? == 0.0 {
        return Ok(0.0);
    }
    let (p, r) = (pred.node_path(), reference.node_path());
    let dist = edit_distance(&p, &r) as f64;
    Ok(1.0 - dist / p.len().max(r.len()) as f64)
}

pub fn cls(pred: &Trajectory, reference: &Trajectory, graph: &NavGraph, cfg: &MetricConfig) -> Result<f64, GraphError> {
    let p = indices(graph, &pred.node_path())?;
    let r = indices(graph, &reference.node_path())?;
    Ok(cls_ix(graph, &p, &r, cfg))
}

fn cls_ix(graph: &NavGraph, p: &[usize], r: &[usize], cfg: &MetricConfig) -> f64 {
    let coverage = r
        .iter()
        .map(|&ri| {
            let d = p.iter().map(|&pi| graph.hops_ix(ri, pi)).min().expect("non-empty pred");
            (-(d as f64) / cfg.dtw_distance_scale).exp()
        })
        .sum::<f64>()
        / r.len() as f64;
    let epl = coverage * path_hops(graph, r);
    let pl = path_hops(graph, p);
    let denom = epl + (epl - pl).abs();
    let length_score = if denom == 0.0 { 1.0 } else { epl / denom };
    coverage * length_score
}

pub fn ndtw(pred: &Trajectory, reference: &Trajectory, graph: &NavGraph, cfg: &MetricConfig) -> Result<f64, GraphError> {
    let p = indices(graph, &pred.node_path())?;
    let r = indices(graph, &reference.node_path())?;
    Ok(ndtw_ix(graph, &p, &r, cfg))
}

fn ndtw_ix(graph: &NavGraph, p: &[usize], r: &[usize], cfg: &MetricConfig) -> f64 {
    let cost = dtw_cost(p.len(), r.len(), |i, j| graph.hops_ix(p[i], r[j]) as f64);
    (-cost / ((r.len() as f64).sqrt() * cfg.dtw_distance_scale)).exp()
}

pub fn sdtw(
    pred: &Trajectory,
    reference: &Trajectory,
    goal: &PanoId,
    graph: &NavGraph,
    cfg: &MetricConfig,
) -> Result<f64, GraphError> {
    Ok(task_completion(pred, goal, graph, cfg)? * ndtw(pred, reference, graph, cfg)?)
}

/// All six metrics for one prediction.
pub fn evaluate(
    pred: &Trajectory,
    reference: &Trajectory,
    goal: &PanoId,
    graph: &NavGraph,
    cfg: &MetricConfig,
) -> Result<SampleMetrics, GraphError> {
    let tc = task_completion(pred, goal, graph, cfg)?;
    let p_nodes = pred.node_path();
    let r_nodes = reference.node_path();
    let p = indices(graph, &p_nodes)?;
    let r = indices(graph, &r_nodes)?;
    let nd = ndtw_ix(graph, &p, &r, cfg);
    let sed = if tc == 0.0 {
        0.0
    } else {
        1.0 - edit_distance(&p, &r) as f64 / p.len().max(r.len()) as f64
    };
    Ok(SampleMetrics {
        route_id: pred.route_id.clone(),
        tc,
        spd: spd(pred, goal, graph)?,
        sed,
        cls: cls_ix(graph, &p, &r, cfg),
        ndtw: nd,
        sdtw: tc * nd,
    })
}

/// Evaluates many samples in parallel; output order follows input order.
pub fn evaluate_all(
    samples: &[(Trajectory, Trajectory, PanoId)],
    graph: &NavGraph,
    cfg: &MetricConfig,
) -> Result<Vec<SampleMetrics>, GraphError> {
    samples.par_iter().map(|(p, r, g)| evaluate(p, r, g, graph, cfg)).collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(samples: &[SampleMetrics]) -> MetricReport {
    let m = |f: fn(&SampleMetrics) -> f64| mean(samples.iter().map(f)).unwrap_or(0.0);
    MetricReport {
        n: samples.len(),
        tc: m(|s| s.tc),
        spd: m(|s| s.spd),
        sed: m(|s| s.sed),
        cls: m(|s| s.cls),
        ndtw: m(|s| s.ndtw),
        sdtw: m(|s| s.sdtw),
        s_spd: mean(samples.iter().filter(|s| s.tc == 1.0).map(|s| s.spd)),
        f_spd: mean(samples.iter().filter(|s| s.tc == 0.0).map(|s| s.spd)),
    }
}
