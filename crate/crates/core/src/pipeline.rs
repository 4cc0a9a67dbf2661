//! Training, inference and evaluation loops behind the command line.
//!
//! Randomness is derived from `(seed, purpose, counter)` only: the batch
//! order of epoch `e` and the dropout masks of global step `s` do not depend
//! on anything that happened before, so a run resumed from a checkpoint at
//! step `s` replays the uninterrupted run exactly.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::Dropout;
use crate::autodiff::{AdamConfig, Checkpoint, Precision};
use crate::config::{ExternalArm, RunConfig, Stage, TrainConfig};
use crate::dataset::{Dataset, InstructionRecord, Sample, Split};
use crate::error::ModelError;
use crate::graph::{Action, Trajectory};
use crate::metrics::{aggregate, evaluate, MetricConfig, MetricReport, SampleMetrics};
use crate::navigator::{predict, Episode, Navigator, NavigatorConfig};
use crate::speaker::{Speaker, SpeakerConfig, SpeakerSample};
use crate::text::{mask_instruction, nlg_report, split_and_tokenize, tag_instruction, Instruction, LexiconTagger, MaskMode, MaskPolicy, NlgReport, Style, Vocab};

const SHUFFLE: u64 = 1;
const DROPOUT: u64 = 2;
const PRETRAIN_SHUFFLE: u64 = 3;
const PRETRAIN_DROPOUT: u64 = 4;
const MTST_SHUFFLE: u64 = 5;

fn derived_rng(seed: u64, purpose: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) | (counter & ((1 << 48) - 1)));
    rng
}

/// Permutation of `0..n` used for epoch `epoch`.
pub fn epoch_order(n: usize, seed: u64, purpose: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, purpose, epoch));
    order
}

/// Random streams of one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Train,
}

impl Phase {
    fn streams(self) -> (u64, u64) {
        match self {
            Phase::Pretrain => (PRETRAIN_SHUFFLE, PRETRAIN_DROPOUT),
            Phase::Train => (SHUFFLE, DROPOUT),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub start_step: u64,
    pub end_step: u64,
    /// Mean loss of every batch, in order.
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the last `k` batches.
    pub fn tail_loss(&self, k: usize) -> Option<f64> {
        let tail = &self.losses[self.losses.len().saturating_sub(k)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Mini-batch schedule over `epochs` passes with step decay of the learning
/// rate. Runs global steps `from_step..until` (capped at the schedule end).
pub fn train_navigator(
    nav: &mut Navigator,
    episodes: &[Episode],
    train: &TrainConfig,
    adam: &AdamConfig,
    epochs: usize,
    seed: u64,
    phase: Phase,
    from_step: u64,
    until: Option<u64>,
) -> Result<TrainLog, ModelError> {
    if episodes.is_empty() {
        return Err(ModelError::Input("no training episodes".into()));
    }
    let (shuffle, dropout) = phase.streams();
    let per_epoch = episodes.len().div_ceil(train.batch_size) as u64;
    let total = per_epoch * epochs as u64;
    let end = until.map_or(total, |u| u.min(total));
    let mut log = TrainLog { start_step: from_step, end_step: from_step.max(end), losses: Vec::new() };
    let mut order: Option<(u64, Vec<usize>)> = None;
    for step in from_step..end {
        let epoch = step / per_epoch;
        let b = (step % per_epoch) as usize;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, epoch_order(episodes.len(), seed, shuffle, epoch)));
        }
        let idx = &order.as_ref().expect("set above").1;
        let lo = b * train.batch_size;
        let hi = (lo + train.batch_size).min(episodes.len());
        let batch: Vec<Episode> = idx[lo..hi].iter().map(|&i| episodes[i].clone()).collect();
        let lr_scale = train.lr_decay.powi((epoch / train.decay_every as u64) as i32);
        let mut drop = Dropout::new(nav.cfg.dropout, true, derived_rng(seed, dropout, step).next_u64());
        log.losses.push(nav.train_batch(&batch, adam, lr_scale, &mut drop)?);
    }
    Ok(log)
}

/// Speaker training with a fixed learning rate.
pub fn train_speaker(
    sp: &mut Speaker,
    samples: &[SpeakerSample],
    batch_size: usize,
    adam: &AdamConfig,
    epochs: usize,
    seed: u64,
    from_step: u64,
    until: Option<u64>,
) -> Result<TrainLog, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::Input("no speaker samples".into()));
    }
    let per_epoch = samples.len().div_ceil(batch_size) as u64;
    let total = per_epoch * epochs as u64;
    let end = until.map_or(total, |u| u.min(total));
    let mut log = TrainLog { start_step: from_step, end_step: from_step.max(end), losses: Vec::new() };
    for step in from_step..end {
        let epoch = step / per_epoch;
        let b = (step % per_epoch) as usize;
        let order = epoch_order(samples.len(), seed, MTST_SHUFFLE, epoch);
        let lo = b * batch_size;
        let hi = (lo + batch_size).min(samples.len());
        let batch: Vec<SpeakerSample> = order[lo..hi].iter().map(|&i| samples[i].clone()).collect();
        log.losses.push(sp.train_step(&batch, adam, 1.0)?);
    }
    Ok(log)
}

/// Vocabulary over the instructions of several corpora.
pub fn build_vocab(datasets: &[&Dataset]) -> Vocab {
    Vocab::build(datasets.iter().flat_map(|d| d.samples.iter().map(Sample::tokens)), 1)
}

pub fn nav_episodes(nav: &Navigator, ds: &Dataset) -> Result<Vec<Episode>, ModelError> {
    ds.samples
        .iter()
        .map(|s| nav.episode(&ds.graph, &s.trajectory, &s.tokens(), &ds.features))
        .collect()
}

fn tagged(instr: &Instruction) -> Instruction {
    if instr.is_tagged() {
        instr.clone()
    } else {
        tag_instruction(instr, &LexiconTagger::default())
    }
}

/// Lowercased template tokens of an instruction (tagging it first when it
/// carries no gold tags).
pub fn template_tokens(instr: &Instruction, policy: &MaskPolicy) -> Vec<String> {
    mask_instruction(&tagged(instr), policy).texts().iter().map(|t| t.to_string()).collect()
}

pub fn speaker_samples(ds: &Dataset, mode: MaskMode, with_target: bool) -> Result<Vec<SpeakerSample>, ModelError> {
    let policy = MaskPolicy::new(mode);
    ds.samples
        .iter()
        .map(|s| {
            let target = if with_target { s.tokens() } else { Vec::new() };
            SpeakerSample::from_trajectory(&s.trajectory, &ds.features, template_tokens(&s.instruction, &policy), target)
        })
        .collect()
}

/// Rewrites every instruction of `ds` with the speaker. A generation that
/// comes back empty falls back to the unmasked words of its template.
pub fn infer_style(sp: &Speaker, ds: &Dataset, mode: MaskMode, config_hash: &str, seed: u64) -> Result<Vec<InstructionRecord>, ModelError> {
    let samples = speaker_samples(ds, mode, false)?;
    let texts: Vec<String> = samples
        .par_iter()
        .map(|s| {
            let mut words = sp.generate(s)?;
            if words.is_empty() {
                words = s.template.iter().filter(|t| *t != crate::text::MASK).cloned().collect();
            }
            Ok(words.join(" "))
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(ds
        .samples
        .iter()
        .zip(texts)
        .map(|(s, instruction)| InstructionRecord {
            route_id: s.route_id().to_string(),
            instruction,
            tags: None,
            style: Style::StyleTransferred,
            config_hash: Some(config_hash.to_string()),
            seed: Some(seed),
        })
        .collect())
}

/// Copy of `ds` whose instructions are replaced by `records` (matched by
/// route id).
pub fn with_instructions(ds: &Dataset, records: &[InstructionRecord]) -> Result<Dataset, ModelError> {
    let mut out = ds.clone();
    for s in &mut out.samples {
        let rec = records
            .iter()
            .find(|r| r.route_id == s.route_id())
            .ok_or_else(|| ModelError::Input(format!("no instruction for route {}", s.route_id())))?;
        s.instruction = split_and_tokenize(&rec.instruction, rec.style)
            .map_err(|e| ModelError::Input(format!("route {}: {e}", rec.route_id)))?;
    }
    Ok(out)
}

/// One closed-loop rollout as logged to JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub route_id: String,
    pub nodes: Vec<String>,
    pub headings: Vec<f64>,
    pub actions: Vec<Action>,
    pub logits: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub split: Split,
    pub metrics: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nlg: Option<NlgReport>,
    pub samples: Vec<SampleMetrics>,
}

/// Runs `agent` on every sample (in parallel, output in input order) and
/// scores the resulting trajectories.
pub fn evaluate_agent<F>(ds: &Dataset, metrics: &MetricConfig, agent: F) -> Result<(MetricReport, Vec<SampleMetrics>, Vec<RolloutRecord>), ModelError>
where
    F: Fn(&Sample) -> Result<(Trajectory, Vec<[f64; 4]>), ModelError> + Sync,
{
    let runs: Vec<(Trajectory, Vec<[f64; 4]>)> = ds.samples.par_iter().map(&agent).collect::<Result<_, _>>()?;
    let mut per_sample = Vec::with_capacity(runs.len());
    let mut rollouts = Vec::with_capacity(runs.len());
    for (s, (traj, logits)) in ds.samples.iter().zip(runs) {
        let mut m = evaluate(&traj, &s.trajectory, &s.goal, &ds.graph, metrics)?;
        m.route_id = s.route_id().to_string();
        per_sample.push(m);
        let actions = if logits.is_empty() {
            ds.graph.gold_actions(&traj).unwrap_or_default()
        } else {
            logits.iter().map(|l| predict(l)).collect()
        };
        rollouts.push(RolloutRecord {
            route_id: s.route_id().to_string(),
            nodes: traj.states.iter().map(|st| st.node.0.clone()).collect(),
            headings: traj.states.iter().map(|st| st.heading).collect(),
            actions,
            logits,
        });
    }
    Ok((aggregate(&per_sample), per_sample, rollouts))
}

pub fn evaluate_navigator(nav: &Navigator, ds: &Dataset, metrics: &MetricConfig, max_steps: usize) -> Result<(MetricReport, Vec<SampleMetrics>, Vec<RolloutRecord>), ModelError> {
    evaluate_agent(ds, metrics, |s| nav.navigate(&ds.graph, &ds.features, s.trajectory.start(), &s.tokens(), max_steps))
}

/// NLG metrics of generated instructions against the dataset's own.
pub fn nlg_eval(reference: &Dataset, generated: &[InstructionRecord], mode: MaskMode) -> Result<NlgReport, ModelError> {
    let gen = with_instructions(reference, generated)?;
    let tagger = LexiconTagger::default();
    let pairs: Vec<(Instruction, Instruction)> = gen
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(g, r)| (tag_instruction(&g.instruction, &tagger), tagged(&r.instruction)))
        .collect();
    Ok(nlg_report(&pairs, &MaskPolicy::new(mode)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Navigator,
    Speaker,
}

/// JSON sidecar written next to every checkpoint: everything needed to
/// rebuild the model before restoring its tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    pub stage: Stage,
    pub vocab: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub navigator: Option<NavigatorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<SpeakerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dims: Option<(usize, usize, usize)>,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_meta(checkpoint: &Path, meta: &ModelMeta) -> Result<(), ModelError> {
    let path = sidecar_path(checkpoint);
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&path, text + "\n").map_err(|e| ModelError::Input(format!("{}: {e}", path.display())))
}

pub fn read_meta(checkpoint: &Path) -> Result<ModelMeta, ModelError> {
    let path = sidecar_path(checkpoint);
    let text = std::fs::read_to_string(&path).map_err(|e| ModelError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ModelError::Input(format!("{}: {e}", path.display())))
}

pub fn save_navigator(nav: &Navigator, path: &Path, seed: u64, step: u64, stage: Stage, config_hash: &str) -> Result<(), ModelError> {
    Checkpoint::from_store(&nav.store, seed, step, config_hash, true).save(path, Precision::F64)?;
    write_meta(
        path,
        &ModelMeta {
            kind: ModelKind::Navigator,
            config_hash: config_hash.to_string(),
            seed,
            step,
            stage,
            vocab: nav.vocab.tokens().to_vec(),
            navigator: Some(nav.cfg.clone()),
            speaker: None,
            feature_dims: Some(nav.feature_dims),
        },
    )
}

pub fn save_speaker(sp: &Speaker, path: &Path, seed: u64, step: u64, config_hash: &str) -> Result<(), ModelError> {
    Checkpoint::from_store(&sp.store, seed, step, config_hash, true).save(path, Precision::F64)?;
    write_meta(
        path,
        &ModelMeta {
            kind: ModelKind::Speaker,
            config_hash: config_hash.to_string(),
            seed,
            step,
            stage: Stage::MtstTrain,
            vocab: sp.vocab.tokens().to_vec(),
            navigator: None,
            speaker: Some(sp.cfg.clone()),
            feature_dims: None,
        },
    )
}

fn load_checked(path: &Path, want: ModelKind) -> Result<(Checkpoint, ModelMeta), ModelError> {
    if !path.exists() {
        return Err(ModelError::Input(format!("missing checkpoint {}", path.display())));
    }
    let meta = read_meta(path)?;
    if meta.kind != want {
        return Err(ModelError::Input(format!("{} holds a {:?} model", path.display(), meta.kind)));
    }
    let ckpt = Checkpoint::load(path)?;
    if ckpt.config_hash != meta.config_hash || ckpt.seed != meta.seed || ckpt.step != meta.step {
        return Err(ModelError::Input(format!("{} does not match its sidecar", path.display())));
    }
    Ok((ckpt, meta))
}

/// Rebuilds a navigator (values and optimiser state) from a checkpoint.
pub fn load_navigator(path: &Path) -> Result<(Navigator, ModelMeta), ModelError> {
    let (ckpt, meta) = load_checked(path, ModelKind::Navigator)?;
    let cfg = meta.navigator.clone().ok_or_else(|| ModelError::Input("sidecar lacks navigator config".into()))?;
    let dims = meta.feature_dims.ok_or_else(|| ModelError::Input("sidecar lacks feature dims".into()))?;
    let mut nav = Navigator::new(cfg, Vocab::from_tokens(meta.vocab.clone()), dims, meta.seed)?;
    ckpt.restore_into(&mut nav.store)?;
    Ok((nav, meta))
}

pub fn load_speaker(path: &Path) -> Result<(Speaker, ModelMeta), ModelError> {
    let (ckpt, meta) = load_checked(path, ModelKind::Speaker)?;
    let cfg = meta.speaker.clone().ok_or_else(|| ModelError::Input("sidecar lacks speaker config".into()))?;
    let mut sp = Speaker::new(cfg, Vocab::from_tokens(meta.vocab.clone()), meta.seed)?;
    ckpt.restore_into(&mut sp.store)?;
    Ok((sp, meta))
}

/// Initialises `nav` from a pretrained checkpoint: values only, fresh
/// optimiser. Any missing tensor or shape mismatch is reported by name.
pub fn init_from_pretrained(nav: &mut Navigator, path: &Path) -> Result<ModelMeta, ModelError> {
    let (ckpt, meta) = load_checked(path, ModelKind::Navigator)?;
    if meta.vocab != nav.vocab.tokens() {
        return Err(ModelError::Input(format!("{}: vocabulary differs from the fine-tuning vocabulary", path.display())));
    }
    ckpt.restore_into(&mut nav.store)?;
    nav.store.reset_optimizer();
    Ok(meta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: usize,
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    pub dev: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageReport {
    pub config_hash: String,
    pub seed: u64,
    pub arm: ExternalArm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mtst_final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<StageReport>,
    pub finetune: StageReport,
}

#[derive(Debug, Clone)]
pub struct TwoStageOutput {
    pub navigator: Navigator,
    pub report: TwoStageReport,
    /// Speaker-rewritten external instructions (style arm only).
    pub styled: Option<Vec<InstructionRecord>>,
}

/// Pretrains on external data according to `cfg.arm`, then fine-tunes on
/// the target training split, scoring the dev split after each stage.
///
/// The vocabulary always covers both training corpora, so the arm without
/// external data differs from the others only in the pretraining stage.
pub fn run_two_stage(external: Option<&Dataset>, target: &Dataset, dev: &Dataset, cfg: &RunConfig) -> Result<TwoStageOutput, ModelError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dims = target.features.dims().ok_or_else(|| ModelError::Input("empty feature store".into()))?;
    if let Some(ext) = external {
        if ext.features.dims() != Some(dims) {
            return Err(ModelError::Input(format!("external feature dims {:?} differ from target {dims:?}", ext.features.dims())));
        }
    }
    if cfg.arm == ExternalArm::ExternalStyle && cfg.speaker.d_v != dims.0 * dims.1 {
        return Err(ModelError::Config(format!("speaker.d_v {} must equal channels x height {}", cfg.speaker.d_v, dims.0 * dims.1)));
    }
    let mut corpora = vec![target];
    corpora.extend(external);
    let vocab = build_vocab(&corpora);
    let adam = cfg.adam();

    let mut mtst_final_loss = None;
    let mut styled = None;
    let pre_data: Option<Dataset> = match (cfg.arm, external) {
        (ExternalArm::None, _) | (_, None) if cfg.arm == ExternalArm::None => None,
        (_, None) => return Err(ModelError::Config(format!("arm {:?} needs external data", cfg.arm))),
        (ExternalArm::External, Some(ext)) => Some(ext.clone()),
        (ExternalArm::ExternalStyle, Some(ext)) => {
            let mut sp = Speaker::new(cfg.speaker.clone(), vocab.clone(), cfg.seed)?;
            let samples = speaker_samples(target, cfg.mtst.train_mode, true)?;
            let sp_adam = AdamConfig { lr: cfg.mtst.lr, ..AdamConfig::default() };
            let log = train_speaker(&mut sp, &samples, cfg.mtst.batch_size, &sp_adam, cfg.mtst.epochs, cfg.seed, 0, None)?;
            mtst_final_loss = log.losses.last().copied();
            let records = infer_style(&sp, ext, cfg.mtst.infer_mode, &hash, cfg.seed)?;
            let restyled = with_instructions(ext, &records)?;
            styled = Some(records);
            Some(restyled)
        }
        (ExternalArm::None, Some(_)) => unreachable!("handled by the first arm"),
    };

    let mut nav = Navigator::new(cfg.navigator.clone(), vocab, dims, cfg.seed)?;
    let max_steps = cfg.train.max_rollout_steps;
    let pretrain = match pre_data {
        Some(ext) => {
            let episodes = nav_episodes(&nav, &ext)?;
            let log = train_navigator(&mut nav, &episodes, &cfg.train, &adam, cfg.train.pretrain_epochs, cfg.seed, Phase::Pretrain, 0, None)?;
            nav.store.reset_optimizer();
            let (dev_report, _, _) = evaluate_navigator(&nav, dev, &cfg.metrics, max_steps)?;
            Some(StageReport {
                stage: Stage::Pretrain,
                epochs: cfg.train.pretrain_epochs,
                steps: log.end_step,
                final_loss: log.losses.last().copied(),
                dev: dev_report,
            })
        }
        None => None,
    };

    let episodes = nav_episodes(&nav, target)?;
    let log = train_navigator(&mut nav, &episodes, &cfg.train, &adam, cfg.train.epochs, cfg.seed, Phase::Train, 0, None)?;
    let (dev_report, _, _) = evaluate_navigator(&nav, dev, &cfg.metrics, max_steps)?;
    let finetune = StageReport {
        stage: Stage::Finetune,
        epochs: cfg.train.epochs,
        steps: log.end_step,
        final_loss: log.losses.last().copied(),
        dev: dev_report,
    };
    Ok(TwoStageOutput {
        navigator: nav,
        report: TwoStageReport { config_hash: hash, seed: cfg.seed, arm: cfg.arm, mtst_final_loss, pretrain, finetune },
        styled,
    })
}
