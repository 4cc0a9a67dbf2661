//! Dataset manifests, record formats and validated ingestion.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureStore};
use crate::graph::{AgentState, GraphError, NavGraph, PanoId, Trajectory};
use crate::text::{split_and_tokenize, Instruction, Style, TextError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {msg}")]
    Record { path: String, line: usize, msg: String },
    #[error("route {route}: {msg}")]
    Integrity { route: String, msg: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("manifest {path}: {msg}")]
    Manifest { path: String, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturePaths {
    pub data: PathBuf,
    pub index: PathBuf,
}

/// Paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub graph: PathBuf,
    pub trajectories: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructions: Option<PathBuf>,
    pub features: FeaturePaths,
    pub split: Split,
    pub style: Style,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), DataError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| DataError::Manifest { path: path.display().to_string(), msg: e.to_string() })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }
}

/// One line of a trajectory JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub route_id: String,
    pub nodes: Vec<String>,
    pub headings: Vec<f64>,
    pub goal: String,
    #[serde(default)]
    pub instruction: String,
    /// Gold part-of-speech tags, one per token of the tokenized instruction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
}

/// One line of an instruction JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionRecord {
    pub route_id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    pub style: Style,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DataError::Record {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub trajectory: Trajectory,
    pub goal: PanoId,
    pub instruction: Instruction,
}

impl Sample {
    pub fn route_id(&self) -> &str {
        &self.trajectory.route_id
    }

    pub fn tokens(&self) -> Vec<String> {
        self.instruction.lower_tokens()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Exclude trajectories visiting more distinct panoramas than this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_panoramas: Option<usize>,
}

pub const EXCLUDED_TOO_MANY_PANORAMAS: &str = "too_many_panoramas";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub read: usize,
    pub kept: usize,
    /// Excluded record counts by reason.
    pub excluded: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub graph: Arc<NavGraph>,
    pub features: Arc<FeatureStore>,
    pub samples: Vec<Sample>,
    pub report: IngestReport,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn tokenized(route: &str, text: &str, tags: Option<&Vec<String>>, style: Style) -> Result<Instruction, DataError> {
    let integrity = |e: TextError| DataError::Integrity { route: route.to_string(), msg: e.to_string() };
    let instr = split_and_tokenize(text, style).map_err(integrity)?;
    match tags {
        Some(t) => instr.with_tags(t).map_err(integrity),
        None => Ok(instr),
    }
}

/// Loads a manifest and all referenced files, checking referential
/// integrity. Excluded records are counted by reason in the report.
pub fn ingest(manifest_path: &Path, opts: &IngestOptions) -> Result<Dataset, DataError> {
    let (manifest, base) = DatasetManifest::load(manifest_path)?;
    let graph = Arc::new(NavGraph::load(&resolve(&base, &manifest.graph))?);
    let features = Arc::new(FeatureStore::load(
        &resolve(&base, &manifest.features.data),
        &resolve(&base, &manifest.features.index),
    )?);
    ingest_with(manifest, &base, graph, features, opts)
}

/// Ingestion against an already loaded graph and feature store.
pub fn ingest_with(
    manifest: DatasetManifest,
    base: &Path,
    graph: Arc<NavGraph>,
    features: Arc<FeatureStore>,
    opts: &IngestOptions,
) -> Result<Dataset, DataError> {
    let traj_path = resolve(base, &manifest.trajectories);
    let records: Vec<TrajectoryRecord> = read_jsonl(&traj_path)?;
    let mut overrides: HashMap<String, InstructionRecord> = HashMap::new();
    if let Some(p) = &manifest.instructions {
        for rec in read_jsonl::<InstructionRecord>(&resolve(base, p))? {
            if !records.iter().any(|r| r.route_id == rec.route_id) {
                return Err(DataError::Integrity { route: rec.route_id, msg: "orphan instruction".into() });
            }
            let route = rec.route_id.clone();
            if overrides.insert(route.clone(), rec).is_some() {
                return Err(DataError::Integrity { route, msg: "more than one instruction".into() });
            }
        }
    }

    let mut report = IngestReport { read: records.len(), ..IngestReport::default() };
    let mut samples = Vec::with_capacity(records.len());
    let mut seen = std::collections::HashSet::new();
    for rec in &records {
        let bad = |msg: String| DataError::Integrity { route: rec.route_id.clone(), msg };
        if !seen.insert(rec.route_id.clone()) {
            return Err(bad("duplicate route id".into()));
        }
        if rec.nodes.len() != rec.headings.len() || rec.nodes.is_empty() {
            return Err(bad(format!("{} nodes but {} headings", rec.nodes.len(), rec.headings.len())));
        }
        let states: Vec<AgentState> =
            rec.nodes.iter().zip(&rec.headings).map(|(n, h)| AgentState::new(PanoId(n.clone()), *h)).collect();
        for s in &states {
            if !graph.contains(&s.node) {
                return Err(bad(format!("node {} not in graph", s.node)));
            }
            if !features.contains(&s.node) {
                return Err(bad(format!("missing feature record for {}", s.node)));
            }
        }
        let goal = PanoId(rec.goal.clone());
        if !graph.contains(&goal) {
            return Err(bad(format!("goal {goal} not in graph")));
        }
        let traj = graph.validate_trajectory(&Trajectory::new(rec.route_id.clone(), states))?;
        let instruction = match overrides.get(&rec.route_id) {
            Some(o) => tokenized(&rec.route_id, &o.instruction, o.tags.as_ref(), o.style)?,
            None if rec.instruction.trim().is_empty() => return Err(bad("no instruction".into())),
            None => tokenized(&rec.route_id, &rec.instruction, rec.tags.as_ref(), manifest.style)?,
        };
        if let Some(max) = opts.max_panoramas {
            if traj.node_path().len() > max {
                *report.excluded.entry(EXCLUDED_TOO_MANY_PANORAMAS.into()).or_insert(0) += 1;
                continue;
            }
        }
        samples.push(Sample { trajectory: traj, goal, instruction });
    }
    report.kept = samples.len();
    Ok(Dataset { manifest, graph, features, samples, report })
}

impl TrajectoryRecord {
    pub fn from_sample(s: &Sample) -> Self {
        let tags = s.instruction.is_tagged().then(|| s.instruction.tags());
        TrajectoryRecord {
            route_id: s.trajectory.route_id.clone(),
            nodes: s.trajectory.states.iter().map(|st| st.node.0.clone()).collect(),
            headings: s.trajectory.states.iter().map(|st| st.heading).collect(),
            goal: s.goal.0.clone(),
            instruction: s.instruction.normalized_text(),
            tags,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::fixtures::{gen_fixtures, FixtureSpec};
    use crate::graph::EdgeSpec;

    /// A straight street of `n` panoramas heading east.
    fn line_world(dir: &Path, n: usize) -> DatasetManifest {
        let ids: Vec<PanoId> = (0..n).map(|i| PanoId(format!("p{i}"))).collect();
        let edges = (1..n)
            .map(|i| EdgeSpec { a: ids[i - 1].clone(), b: ids[i].clone(), bearing_ab: 90.0, bearing_ba: 270.0 })
            .collect();
        let graph = NavGraph::new(ids.clone(), edges).unwrap();
        std::fs::write(dir.join("graph.txt"), graph.to_text()).unwrap();
        let mut fs = FeatureStore::new();
        for id in &ids {
            fs.insert(id.clone(), Tensor::zeros(&[1, 1, 8])).unwrap();
        }
        fs.save(&dir.join("f.bin"), &dir.join("f.jsonl")).unwrap();
        DatasetManifest {
            graph: "graph.txt".into(),
            trajectories: "t.jsonl".into(),
            instructions: None,
            features: FeaturePaths { data: "f.bin".into(), index: "f.jsonl".into() },
            split: Split::Train,
            style: Style::Human,
        }
    }

    fn walk(route: &str, from: usize, len: usize) -> TrajectoryRecord {
        TrajectoryRecord {
            route_id: route.into(),
            nodes: (from..from + len).map(|i| format!("p{i}")).collect(),
            headings: vec![90.0; len],
            goal: format!("p{}", from + len - 1),
            instruction: "walk east until the end of the block .".into(),
            tags: None,
        }
    }

    #[test]
    fn consistent_records_all_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = line_world(dir.path(), 10);
        write_jsonl(&dir.path().join("t.jsonl"), &[walk("a", 0, 3), walk("b", 2, 5), walk("c", 5, 4)]).unwrap();
        m.save(&dir.path().join("m.json")).unwrap();
        let ds = ingest(&dir.path().join("m.json"), &IngestOptions::default()).unwrap();
        assert_eq!(ds.samples.len(), 3);
        assert_eq!(ds.report, IngestReport { read: 3, kept: 3, excluded: BTreeMap::new() });
        assert_eq!(ds.samples[1].trajectory.node_path().len(), 5);
    }

    #[test]
    fn long_trajectories_are_excluded_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let m = line_world(dir.path(), 60);
        write_jsonl(&dir.path().join("t.jsonl"), &[walk("long", 0, 51), walk("edge", 0, 50), walk("short", 3, 4)]).unwrap();
        m.save(&dir.path().join("m.json")).unwrap();
        let ds = ingest(&dir.path().join("m.json"), &IngestOptions { max_panoramas: Some(50) }).unwrap();
        let kept: Vec<&str> = ds.samples.iter().map(Sample::route_id).collect();
        assert_eq!(kept, ["edge", "short"]);
        assert_eq!(ds.report.excluded.get(EXCLUDED_TOO_MANY_PANORAMAS), Some(&1));
        assert_eq!(ds.report.read, 3);
    }

    #[test]
    fn orphan_instruction_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = line_world(dir.path(), 10);
        write_jsonl(&dir.path().join("t.jsonl"), &[walk("a", 0, 3)]).unwrap();
        let rec = InstructionRecord {
            route_id: "ghost".into(),
            instruction: "go .".into(),
            tags: None,
            style: Style::Human,
            config_hash: None,
            seed: None,
        };
        write_jsonl(&dir.path().join("i.jsonl"), &[rec]).unwrap();
        m.instructions = Some("i.jsonl".into());
        m.save(&dir.path().join("m.json")).unwrap();
        let err = ingest(&dir.path().join("m.json"), &IngestOptions::default()).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }

    #[test]
    fn instruction_file_overrides_inline_text() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = line_world(dir.path(), 10);
        write_jsonl(&dir.path().join("t.jsonl"), &[walk("a", 0, 3)]).unwrap();
        let rec = InstructionRecord {
            route_id: "a".into(),
            instruction: "head east . stop at the bank .".into(),
            tags: None,
            style: Style::StyleTransferred,
            config_hash: Some("abc".into()),
            seed: Some(1),
        };
        write_jsonl(&dir.path().join("i.jsonl"), &[rec]).unwrap();
        m.instructions = Some("i.jsonl".into());
        m.save(&dir.path().join("m.json")).unwrap();
        let ds = ingest(&dir.path().join("m.json"), &IngestOptions::default()).unwrap();
        assert_eq!(ds.samples[0].instruction.style, Style::StyleTransferred);
        assert_eq!(ds.samples[0].instruction.sentences.len(), 2);
    }

    #[test]
    fn missing_feature_and_unknown_node_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = line_world(dir.path(), 10);
        m.save(&dir.path().join("m.json")).unwrap();
        write_jsonl(&dir.path().join("t.jsonl"), &[walk("a", 8, 3)]).unwrap();
        let err = ingest(&dir.path().join("m.json"), &IngestOptions::default()).unwrap_err();
        assert!(err.to_string().contains("p10"), "{err}");

        let mut fs = FeatureStore::new();
        for i in 0..9 {
            fs.insert(PanoId(format!("p{i}")), Tensor::zeros(&[1, 1, 8])).unwrap();
        }
        fs.save(&dir.path().join("f.bin"), &dir.path().join("f.jsonl")).unwrap();
        write_jsonl(&dir.path().join("t.jsonl"), &[walk("a", 7, 3)]).unwrap();
        let err = ingest(&dir.path().join("m.json"), &IngestOptions::default()).unwrap_err();
        assert!(err.to_string().contains("missing feature record for p9"), "{err}");
    }

    #[test]
    fn generated_fixtures_ingest_with_gold_tags() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec { train: 20, dev: 5, test: 5, ..FixtureSpec::default() };
        let out = gen_fixtures(&spec, 2, dir.path()).unwrap();
        for (split, path) in out.manifests {
            let ds = ingest(&path, &IngestOptions::default()).unwrap();
            assert_eq!(ds.manifest.split, split);
            assert!(ds.samples.iter().all(|s| s.instruction.is_tagged()));
            let back = TrajectoryRecord::from_sample(&ds.samples[0]);
            let again = tokenized("x", &back.instruction, back.tags.as_ref(), Style::Human).unwrap();
            assert_eq!(again, ds.samples[0].instruction);
        }
    }
}
