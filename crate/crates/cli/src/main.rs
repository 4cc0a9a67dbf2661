use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vlnwb_core::autodiff::AdamConfig;
use vlnwb_core::config::{RunConfig, Stage};
use vlnwb_core::dataset::{ingest, read_jsonl, write_jsonl, Dataset, DatasetManifest, IngestOptions, InstructionRecord};
use vlnwb_core::fixtures::{gen_fixtures, FixtureSpec};
use vlnwb_core::navigator::Navigator;
use vlnwb_core::pipeline::{
    build_vocab, evaluate_navigator, infer_style, init_from_pretrained, load_navigator, load_speaker, nav_episodes, nlg_eval,
    save_navigator, save_speaker, speaker_samples, template_tokens, train_navigator, train_speaker, EvalReport, Phase, TrainLog,
};
use vlnwb_core::speaker::Speaker;
use vlnwb_core::text::{MaskMode, MaskPolicy, Style};

#[derive(Parser, Debug)]
#[command(name = "vlnwb", version, about = "Outdoor vision-and-language navigation workbench")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic world and its split manifests.
    GenFixtures(GenArgs),
    /// Validate a manifest and report kept/excluded counts.
    Ingest { manifest: PathBuf },
    /// Write instruction templates.
    Mask {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Object)]
        mode: ModeArg,
    },
    /// Train the masking-and-recovering speaker.
    TrainMtst(TrainArgs),
    /// Rewrite a corpus' instructions with a trained speaker.
    InferStyle {
        manifest: PathBuf,
        #[arg(long)]
        speaker: PathBuf,
    },
    /// Train the navigator on external data.
    PretrainNav(TrainArgs),
    /// Train the navigator on target data, optionally from a pretrained checkpoint.
    FinetuneNav {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Dev manifest scored after training.
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    /// Greedy rollouts with per-step logits, as JSONL.
    Rollout {
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rollouts scored with the navigation metrics.
    Eval {
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generated instructions to score against the manifest's own.
        #[arg(long)]
        generated: Option<PathBuf>,
    },
    /// BLEU-4, ROUGE-L, match rate and #infill of generated instructions.
    NlgEval {
        manifest: PathBuf,
        #[arg(long)]
        generated: PathBuf,
    },
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Fixture size spec (TOML); flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    dev: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long, value_enum)]
    style: Option<StyleArg>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    manifest: PathBuf,
    /// Further manifests whose instructions join the vocabulary.
    #[arg(long)]
    vocab_from: Vec<PathBuf>,
    /// Continue from a checkpoint of this same run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many optimiser steps have been taken in total.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StyleArg {
    Human,
    Machine,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Object,
    Streetname,
}

impl From<ModeArg> for MaskMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Object => MaskMode::ObjectMask,
            ModeArg::Streetname => MaskMode::StreetnameMask,
        }
    }
}

/// Header shared by every JSON artifact.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: T,
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, body: T) -> Result<PathBuf> {
        let stamped = Stamped { config_hash: &self.hash, seed: self.cfg.seed, body };
        let path = self.path(name);
        std::fs::write(&path, serde_json::to_string_pretty(&stamped)? + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn load(&self, manifest: &Path) -> Result<Dataset> {
        let opts = IngestOptions { max_panoramas: self.cfg.data.max_panoramas };
        ingest(manifest, &opts).with_context(|| format!("ingesting {}", manifest.display()))
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let hash = cfg.hash();
    let mut ctx = Ctx { cfg, hash, out: cli.out_dir };
    match cli.cmd {
        Cmd::GenFixtures(a) => gen(&ctx, a),
        Cmd::Ingest { manifest } => {
            let ds = ctx.load(&manifest)?;
            let path = ctx.write_json("ingest_report.json", &ds.report)?;
            println!("kept {} of {} records; report at {}", ds.report.kept, ds.report.read, path.display());
            for (reason, n) in &ds.report.excluded {
                println!("excluded {n}: {reason}");
            }
            Ok(())
        }
        Cmd::Mask { manifest, mode } => mask(&ctx, &manifest, mode.into()),
        Cmd::TrainMtst(a) => {
            ctx.cfg.stage = Stage::MtstTrain;
            train_mtst(&ctx, a)
        }
        Cmd::InferStyle { manifest, speaker } => {
            ctx.cfg.stage = Stage::MtstInfer;
            style(&ctx, &manifest, &speaker)
        }
        Cmd::PretrainNav(a) => {
            ctx.cfg.stage = Stage::Pretrain;
            train_nav(&ctx, a, None, None)
        }
        Cmd::FinetuneNav { train, init, dev } => {
            ctx.cfg.stage = Stage::Finetune;
            train_nav(&ctx, train, init, dev)
        }
        Cmd::Rollout { manifest, checkpoint } => {
            let (nav, _) = load_navigator(&checkpoint)?;
            let ds = ctx.load(&manifest)?;
            let (_, _, rollouts) = evaluate_navigator(&nav, &ds, &ctx.cfg.metrics, ctx.cfg.train.max_rollout_steps)?;
            let path = ctx.path("rollouts.jsonl");
            let stamped: Vec<Stamped<_>> = rollouts.iter().map(|r| Stamped { config_hash: &ctx.hash, seed: ctx.cfg.seed, body: r }).collect();
            write_jsonl(&path, &stamped)?;
            println!("{} rollouts written to {}", rollouts.len(), path.display());
            Ok(())
        }
        Cmd::Eval { manifest, checkpoint, generated } => {
            ctx.cfg.stage = Stage::Eval;
            eval(&ctx, &manifest, &checkpoint, generated.as_deref())
        }
        Cmd::NlgEval { manifest, generated } => {
            let ds = ctx.load(&manifest)?;
            let recs: Vec<InstructionRecord> = read_jsonl(&generated)?;
            let report = nlg_eval(&ds, &recs, ctx.cfg.mtst.train_mode)?;
            ctx.write_json("nlg_report.json", &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn gen(ctx: &Ctx, a: GenArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => toml::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => FixtureSpec::default(),
    };
    spec.grid = a.grid.unwrap_or(spec.grid);
    spec.train = a.train.unwrap_or(spec.train);
    spec.dev = a.dev.unwrap_or(spec.dev);
    spec.test = a.test.unwrap_or(spec.test);
    if let Some(s) = a.style {
        spec.style = match s {
            StyleArg::Human => Style::Human,
            StyleArg::Machine => Style::Machine,
        };
    }
    let out = gen_fixtures(&spec, ctx.cfg.seed, &ctx.out)?;
    for (split, path) in out.manifests {
        println!("{}: {}", split.name(), path.display());
    }
    Ok(())
}

fn mask(ctx: &Ctx, manifest: &Path, mode: MaskMode) -> Result<()> {
    #[derive(Serialize)]
    struct TemplateRecord<'a> {
        route_id: &'a str,
        template: String,
        config_hash: &'a str,
        seed: u64,
    }
    let ds = ctx.load(manifest)?;
    let policy = MaskPolicy::new(mode);
    let recs: Vec<TemplateRecord> = ds
        .samples
        .iter()
        .map(|s| TemplateRecord {
            route_id: s.route_id(),
            template: template_tokens(&s.instruction, &policy).join(" "),
            config_hash: &ctx.hash,
            seed: ctx.cfg.seed,
        })
        .collect();
    let path = ctx.path("templates.jsonl");
    write_jsonl(&path, &recs)?;
    println!("{} templates written to {}", recs.len(), path.display());
    Ok(())
}

fn vocab_sets(ctx: &Ctx, a: &TrainArgs) -> Result<(Dataset, Vec<Dataset>)> {
    let main = ctx.load(&a.manifest)?;
    let extra = a.vocab_from.iter().map(|p| ctx.load(p)).collect::<Result<Vec<_>>>()?;
    Ok((main, extra))
}

/// Checks that a resume checkpoint belongs to this configuration and seed.
fn check_resume(ctx: &Ctx, meta_hash: &str, meta_seed: u64, path: &Path) -> Result<()> {
    if meta_hash != ctx.hash || meta_seed != ctx.cfg.seed {
        bail!("{} was written by a different configuration or seed", path.display());
    }
    Ok(())
}

fn save_log(ctx: &Ctx, name: &str, log: &TrainLog) -> Result<()> {
    ctx.write_json(name, log)?;
    println!(
        "steps {}..{}; last batch loss {}",
        log.start_step,
        log.end_step,
        log.losses.last().map_or("n/a".to_string(), |l| format!("{l:.6}"))
    );
    Ok(())
}

fn train_mtst(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let (ds, extra) = vocab_sets(ctx, &a)?;
    let cfg = &ctx.cfg;
    let (mut sp, start) = match &a.resume {
        Some(p) => {
            let (sp, meta) = load_speaker(p)?;
            check_resume(ctx, &meta.config_hash, meta.seed, p)?;
            (sp, meta.step)
        }
        None => {
            let mut sets = vec![&ds];
            sets.extend(extra.iter());
            (Speaker::new(cfg.speaker.clone(), build_vocab(&sets), cfg.seed)?, 0)
        }
    };
    let samples = speaker_samples(&ds, cfg.mtst.train_mode, true)?;
    let adam = AdamConfig { lr: cfg.mtst.lr, ..AdamConfig::default() };
    let log = train_speaker(&mut sp, &samples, cfg.mtst.batch_size, &adam, cfg.mtst.epochs, cfg.seed, start, a.stop_after)?;
    let path = ctx.path("speaker.ckpt");
    save_speaker(&sp, &path, cfg.seed, log.end_step, &ctx.hash)?;
    save_log(ctx, "speaker_log.json", &log)?;
    println!("speaker checkpoint {}", path.display());
    Ok(())
}

fn style(ctx: &Ctx, manifest: &Path, speaker: &Path) -> Result<()> {
    let (sp, _) = load_speaker(speaker)?;
    let ds = ctx.load(manifest)?;
    let recs = infer_style(&sp, &ds, ctx.cfg.mtst.infer_mode, &ctx.hash, ctx.cfg.seed)?;
    let inst = ctx.path("styled.jsonl");
    write_jsonl(&inst, &recs)?;
    // a manifest over the same routes that reads the rewritten instructions
    let (m, base) = DatasetManifest::load(manifest)?;
    let abs = |p: &Path| -> Result<PathBuf> {
        let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        full.canonicalize().with_context(|| format!("resolving {}", full.display()))
    };
    let styled = DatasetManifest {
        graph: abs(&m.graph)?,
        trajectories: abs(&m.trajectories)?,
        instructions: Some(inst.canonicalize()?),
        features: vlnwb_core::dataset::FeaturePaths { data: abs(&m.features.data)?, index: abs(&m.features.index)? },
        split: m.split,
        style: Style::StyleTransferred,
    };
    let mpath = ctx.path("manifest_styled.json");
    styled.save(&mpath)?;
    println!("{} instructions written to {}; manifest {}", recs.len(), inst.display(), mpath.display());
    Ok(())
}

fn train_nav(ctx: &Ctx, a: TrainArgs, init: Option<PathBuf>, dev: Option<PathBuf>) -> Result<()> {
    let (ds, extra) = vocab_sets(ctx, &a)?;
    let cfg = &ctx.cfg;
    let dims = ds.features.dims().context("empty feature store")?;
    let (mut nav, start) = match (&a.resume, &init) {
        (Some(p), _) => {
            let (nav, meta) = load_navigator(p)?;
            check_resume(ctx, &meta.config_hash, meta.seed, p)?;
            if meta.stage != cfg.stage {
                bail!("{} is a {:?} checkpoint", p.display(), meta.stage);
            }
            (nav, meta.step)
        }
        (None, Some(p)) => {
            let vocab = vlnwb_core::pipeline::read_meta(p)?.vocab;
            let mut nav = Navigator::new(cfg.navigator.clone(), vlnwb_core::text::Vocab::from_tokens(vocab), dims, cfg.seed)?;
            init_from_pretrained(&mut nav, p)?;
            (nav, 0)
        }
        (None, None) => {
            let mut sets = vec![&ds];
            sets.extend(extra.iter());
            (Navigator::new(cfg.navigator.clone(), build_vocab(&sets), dims, cfg.seed)?, 0)
        }
    };
    let (epochs, phase, name) = match cfg.stage {
        Stage::Pretrain => (cfg.train.pretrain_epochs, Phase::Pretrain, "pretrain"),
        _ => (cfg.train.epochs, Phase::Train, "finetune"),
    };
    let episodes = nav_episodes(&nav, &ds)?;
    let log = train_navigator(&mut nav, &episodes, &cfg.train, &cfg.adam(), epochs, cfg.seed, phase, start, a.stop_after)?;
    let path = ctx.path(&format!("{name}.ckpt"));
    save_navigator(&nav, &path, cfg.seed, log.end_step, cfg.stage, &ctx.hash)?;
    save_log(ctx, &format!("{name}_log.json"), &log)?;
    println!("navigator checkpoint {}", path.display());
    if let Some(d) = dev {
        let dev = ctx.load(&d)?;
        let (metrics, samples, _) = evaluate_navigator(&nav, &dev, &cfg.metrics, cfg.train.max_rollout_steps)?;
        println!("dev TC {:.4} SPD {:.4} nDTW {:.4}", metrics.tc, metrics.spd, metrics.ndtw);
        let report = EvalReport { config_hash: ctx.hash.clone(), seed: cfg.seed, split: dev.manifest.split, metrics, nlg: None, samples };
        std::fs::write(ctx.path(&format!("{name}_dev_report.json")), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

fn eval(ctx: &Ctx, manifest: &Path, checkpoint: &Path, generated: Option<&Path>) -> Result<()> {
    let (nav, _) = load_navigator(checkpoint)?;
    let ds = ctx.load(manifest)?;
    let (metrics, samples, _) = evaluate_navigator(&nav, &ds, &ctx.cfg.metrics, ctx.cfg.train.max_rollout_steps)?;
    let nlg = match generated {
        Some(g) => Some(nlg_eval(&ds, &read_jsonl::<InstructionRecord>(g)?, ctx.cfg.mtst.train_mode)?),
        None => None,
    };
    let report = EvalReport { config_hash: ctx.hash.clone(), seed: ctx.cfg.seed, split: ds.manifest.split, metrics, nlg, samples };
    let path = ctx.path("eval_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    let m = &report.metrics;
    println!("n {} TC {:.4} SPD {:.4} SED {:.4} CLS {:.4} nDTW {:.4} SDTW {:.4}", m.n, m.tc, m.spd, m.sed, m.cls, m.ndtw, m.sdtw);
    println!("report {}", path.display());
    Ok(())
}
