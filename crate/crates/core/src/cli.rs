//! Command-line front end: `gen-data`, `train`, `ablate`, `analyze`, `gradcheck`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 contract or assertion
//! failure, 4 I/O or file-format error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{self, MapKind};
use crate::blocks::BlockWeights;
use crate::checks::{self, TOLERANCE};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::io::{self, ImportManifest, TensorContainer};
use crate::model::{Arm, InsertPosition, Model, ModelConfig, TracePoint};
use crate::tensor::Real;
use crate::trainer::{self, TrainConfig, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "vitlm", version, about = "Frozen language-model blocks as visual encoder layers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shape dataset.
    GenData(GenDataArgs),
    /// Train one arm.
    Train(TrainArgs),
    /// Train all five arms with a shared seed and tabulate them.
    Ablate(AblateArgs),
    /// Mask-agreement analysis of a trained checkpoint.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Total samples; 80% train, 20% validation.
    #[arg(long, default_value_t = 2500)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct CommonTrain {
    /// key=value file with model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `mock:seed=N`, or an FVTW container of blocks (see --manifest).
    #[arg(long)]
    pub llm_weights: Option<String>,
    /// Import manifest for a container given by --llm-weights.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// First block to take from the weight source.
    #[arg(long)]
    pub depth_index: Option<usize>,
    /// Where the stage goes: tail, middle or head.
    #[arg(long)]
    pub insert: Option<InsertPosition>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    /// Overrides the config's epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the config's seed (model init and data order).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// baseline, plus_llm, plus_mlp, plus_random_llm or plus_llm_ft.
    #[arg(long, default_value = "baseline")]
    pub arm: Arm,
    #[command(flatten)]
    pub common: CommonTrain,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonTrain,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// encoder, l1, llm_attn, llm_ffn or l2.
    #[arg(long, default_value = "l2")]
    pub stage: TracePoint,
    /// magnitude or frequency.
    #[arg(long, default_value = "magnitude")]
    pub kind: MapKind,
    #[arg(long)]
    pub out: PathBuf,
    /// Analyze at most this many validation images.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Manifest(_) => 2,
        Error::Contract(_) | Error::Shape(_) => 3,
        Error::Io { .. } | Error::Format(_) => 4,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Analyze(a) => analyze(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let d = data::generate(a.seed, a.n, a.classes, a.size)?;
    prepare_out(&a.out, a.force)?;
    d.save(&a.out)?;
    println!("seed={} classes={} size={}", a.seed, a.classes, a.size);
    println!("train={} val={}", d.train.len(), d.val.len());
    Ok(())
}

/// Model and training settings after applying the config file and flags.
fn settings(c: &CommonTrain, data: &Dataset) -> Result<(ModelConfig, TrainConfig)> {
    let mut kv = match &c.config {
        Some(p) => io::parse_kv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => BTreeMap::new(),
    };
    let mut train = TrainConfig::default();
    train.apply_kv(&mut kv)?;
    if kv.contains_key("arm") {
        return Err(Error::Config("set the arm with --arm, not in the config file".into()));
    }
    let mut model = ModelConfig::from_kv(&kv)?;
    if let Some(e) = c.epochs {
        train.epochs = e;
        train.warmup_epochs = train.warmup_epochs.min(e);
    }
    if let Some(s) = c.seed {
        train.seed = s;
    }
    if let Some(p) = c.insert {
        model.insert_position = p;
    }
    if let Some(n) = c.n_blocks {
        model.n_llm_blocks = n;
    }
    model.n_classes = data.n_classes;
    model.image_size = data.image_size;
    model.channels = data.channels;
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

/// Resolves `--llm-weights` into blocks for arms that need them.
fn llm_source(c: &CommonTrain, model: &ModelConfig) -> Result<Option<Vec<BlockWeights<f32>>>> {
    if !model.arm.needs_llm_source() {
        return Ok(None);
    }
    let spec = c.llm_weights.as_deref().ok_or_else(|| {
        Error::Config(format!("arm {} needs --llm-weights (a container or mock:seed=N)", model.arm))
    })?;
    let first = c.depth_index.unwrap_or(0);
    let n = model.n_llm_blocks;
    if let Some(rest) = spec.strip_prefix("mock:") {
        let seed = rest
            .strip_prefix("seed=")
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::Config(format!("expected mock:seed=N, got {spec:?}")))?;
        let mut blocks = io::mock_llm(seed, model.llm_dim, model.llm_heads, model.llm_ffn_hidden, model.llm_variant, first + n)?;
        blocks.iter_mut().for_each(|b| b.activation = model.llm_activation);
        return Ok(Some(blocks.split_off(first)));
    }
    let container = TensorContainer::load(Path::new(spec))?;
    let base = match &c.manifest {
        Some(p) => ImportManifest::load(p)?,
        None => ImportManifest::for_mock(model.llm_variant, model.llm_heads, 0),
    };
    let start = c.depth_index.unwrap_or(base.block_index);
    (start..start + n)
        .map(|i| {
            let m = ImportManifest { block_index: i, ..base.clone() };
            io::import_block(&container, &m)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// FNV-1a over the bit patterns of every frozen parameter, in name order.
pub fn frozen_checksum<T: Real>(model: &Model<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (name, t) in model.frozen_parameters() {
        eat(name.as_bytes());
        for v in t.data() {
            eat(&v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
        }
    }
    h
}

struct ArmResult {
    arm: Arm,
    trainable: usize,
    frozen: usize,
    report: TrainReport,
    checksums: (u64, u64),
}

fn train_arm(c: &CommonTrain, arm: Arm, data: &Dataset, out: &Path) -> Result<ArmResult> {
    let (mut model_cfg, mut train_cfg) = settings(c, data)?;
    model_cfg.arm = arm;
    let source = llm_source(c, &model_cfg)?;
    let mut model = Model::build(&model_cfg, source, train_cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    train_cfg.checkpoint_dir = Some(out.join("checkpoint"));

    let before = frozen_checksum(&model);
    println!("arm={arm} data_seed={} model_seed={}", data.seed, train_cfg.seed);
    println!("trainable_parameters={}", model.trainable_count());
    println!("frozen_parameters={}", model.frozen_count());
    println!("frozen_checksum_before={before:016x}");
    let report = trainer::train(&mut model, data, &train_cfg, |r| {
        println!(
            "epoch={} lr={:.3e} train_loss={:.4} val_loss={:.4} val_top1={:.4}",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_top1
        )
    })?;
    let after = frozen_checksum(&model);
    println!("frozen_checksum_after={after:016x}");
    io::write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
    io::save_checkpoint(&model, &out.join("final"))?;
    if before != after {
        return Err(Error::Contract(format!("frozen parameters changed during training for arm {arm}")));
    }
    Ok(ArmResult {
        arm,
        trainable: model.trainable_count(),
        frozen: model.frozen_count(),
        report,
        checksums: (before, after),
    })
}

fn train(a: &TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.common.data)?;
    prepare_out(&a.common.out, a.common.force)?;
    train_arm(&a.common, a.arm, &data, &a.common.out).map(|_| ())
}

/// Comparison table of an ablation run.
fn ablation_csv(rows: &[ArmResult]) -> String {
    let mut s = String::from("arm,trainable_params,frozen_params,final_val_top1,final_val_loss,best_val_top1\n");
    for r in rows {
        let last = r.report.last().expect("at least one epoch");
        writeln!(
            s,
            "{},{},{},{:.4},{:.6},{:.4}",
            r.arm, r.trainable, r.frozen, last.val_top1, last.val_loss, r.report.best_val_top1
        )
        .expect("string write");
    }
    s
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let data = Dataset::load(&a.common.data)?;
    prepare_out(&a.common.out, a.common.force)?;
    let mut rows = Vec::new();
    for arm in Arm::ALL {
        rows.push(train_arm(&a.common, arm, &data, &a.common.out.join(arm.name()))?);
    }
    let table = ablation_csv(&rows);
    io::write_atomic(&a.common.out.join("ablation.csv"), table.as_bytes())?;
    print!("{table}");
    for r in &rows {
        println!("{} frozen_checksum {:016x} -> {:016x}", r.arm, r.checksums.0, r.checksums.1);
    }
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let model = io::load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let samples = &data.val[..a.limit.unwrap_or(data.val.len()).min(data.val.len())];
    if samples.is_empty() {
        return Err(Error::Config("no validation images to analyze".into()));
    }
    prepare_out(&a.out, a.force)?;
    let c = &model.config;
    let masks = samples
        .iter()
        .map(|s| data::to_token_mask(&s.mask, c.image_size, c.image_size, c.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let traces = analysis::trace_samples(&model, samples)?;
    let report = analysis::miou_from_traces(&traces, &masks, a.stage, a.kind)?;
    analysis::export_maps(&report, &traces, &a.out)?;
    println!("arm={} stage={} kind={} images={}", c.arm, a.stage, a.kind, samples.len());
    println!("feature_miou={:.6}", report.feature_miou());
    println!("attention_miou={:.6}", report.attention_miou());

    let mut sweep = String::from("stage,kind,feature_miou,attention_miou,gap\n");
    for r in analysis::stage_sweep(&traces, &masks)? {
        let (f, att) = (r.feature_miou(), r.attention_miou());
        writeln!(sweep, "{},{},{f:.6},{att:.6},{:.6}", r.stage, r.kind, f - att).expect("string write");
    }
    io::write_atomic(&a.out.join("sweep.csv"), sweep.as_bytes())?;

    match model.linearized_stage() {
        Ok(lin) => {
            let mut worst = 0.0f64;
            for s in samples {
                worst = worst.max(analysis::amplification_identity_check(&lin, &s.image)?);
            }
            println!("amplification_identity_max_residual={worst:.3e}");
            if !(worst < 1e-5) {
                return Err(Error::Contract(format!("amplification identity residual {worst:.3e} ≥ 1e-5")));
            }
        }
        Err(_) => println!("amplification_identity_max_residual=n/a (arm {} has no linearizable stage)", c.arm),
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let entries = checks::gradient_suite(a.seed)?;
    for e in &entries {
        println!(
            "{:<28} elements={:<6} max_rel_error={:.3e}",
            e.name, e.result.elements, e.result.max_rel_error
        );
    }
    let w = checks::worst(&entries).expect("suite is nonempty");
    println!("worst={} max_rel_error={:.3e}", w.name, w.result.max_rel_error);
    if !w.result.passes(TOLERANCE) {
        return Err(Error::Contract(format!(
            "{} exceeds tolerance {TOLERANCE:e} with {:.3e}",
            w.name, w.result.max_rel_error
        )));
    }
    Ok(())
}
