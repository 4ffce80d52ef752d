//! The `fancl` command line.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::clustering::{cluster_purity, dbscan, pairwise_cosine_distance};
use crate::error::{Error, Result};
use crate::evalkit::evaluate;
use crate::fana::{fana, ActivationProbe, ProbeSource};
use crate::memory::Space;
use crate::trainer::{
    load_checkpoint, prepare_images, resume_training, run_training, PipelineConfig, CHECKPOINT_FILE, CONFIG_FILE,
};

use super::manifest::{Manifest, Split};
use super::synth::{generate_synthetic, SyntheticConfig};
use super::tensor_file::{read_tensor, write_stored, write_tensor, StoredTensor};

#[derive(Parser, Debug)]
#[command(name = "fancl", version, about = "Noise-consistency contrastive re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic identity dataset and its manifest.
    Synth(SynthArgs),
    /// Train both branches on a manifest's train split.
    Train(TrainArgs),
    /// Report retrieval metrics on the query/gallery splits.
    Eval(EvalArgs),
    /// Cluster one split with a trained θ and report the partition.
    Cluster(ClusterArgs),
    /// Write the activation map, mask and noised image for one image.
    FanaPreview(FanaArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with a synthetic config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    per_identity: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with a pipeline config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    pad: Option<usize>,
    #[arg(long)]
    flip_prob: Option<f64>,
    #[arg(long, value_parser = parse_probe)]
    probe_source: Option<ProbeSource>,
    #[arg(long)]
    no_cluster_consistency: bool,
    #[arg(long)]
    no_instance_consistency: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeatureSpace {
    Original,
    Noised,
    Fused,
}

impl From<FeatureSpace> for Space {
    fn from(s: FeatureSpace) -> Space {
        match s {
            FeatureSpace::Original => Space::Original,
            FeatureSpace::Noised => Space::Noised,
            FeatureSpace::Fused => Space::Fused,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "original")]
    feature_space: FeatureSpace,
    /// Noise ratio for the noised and fused spaces; defaults to the run's.
    #[arg(long)]
    rho: Option<f64>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Query,
    Gallery,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    /// Write labels as an i32 tensor, outliers as -1.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FanaArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    #[arg(long)]
    patch: Option<usize>,
    /// Take the probe from a training checkpoint instead of a fresh one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn parse_probe(s: &str) -> std::result::Result<ProbeSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string(value).expect("report serializes"));
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.identities {
        cfg.n_identities = v;
    }
    if let Some(v) = args.per_identity {
        cfg.images_per_identity = v;
    }
    if let Some(v) = args.height {
        cfg.height = v;
    }
    if let Some(v) = args.width {
        cfg.width = v;
    }
    let manifest = generate_synthetic(&cfg, &args.out)?;
    let count = |s| manifest.split(s).count();
    print_json(&serde_json::json!({
        "manifest": args.out.join("manifest.jsonl"),
        "train": count(Split::Train),
        "query": count(Split::Query),
        "gallery": count(Split::Gallery),
    }));
    Ok(())
}

fn pipeline_config(args: &TrainArgs) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($flag:ident => $($field:ident).+) => {
            if let Some(v) = args.$flag {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(rho => fana.rho);
    set!(eps => dbscan.eps);
    set!(min_pts => dbscan.min_pts);
    set!(tau => loss.tau);
    set!(alpha => memory.alpha);
    set!(epochs => train.epochs);
    set!(seed => train.seed);
    set!(lr => train.base_lr);
    set!(batch_size => train.batch_size);
    set!(p => train.p);
    set!(k => train.k);
    set!(pad => augment.pad);
    set!(flip_prob => augment.flip_prob);
    set!(probe_source => probe_source);
    if args.patch.is_some() {
        cfg.fana.patch = args.patch;
    }
    if args.no_cluster_consistency {
        cfg.loss.cluster_consistency = false;
    }
    if args.no_instance_consistency {
        cfg.loss.instance_consistency = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = pipeline_config(&args)?;
    let manifest = Manifest::load(&args.manifest)?;
    manifest.validate()?;
    let data = manifest.load_split(Split::Train)?;
    let outcome = if args.resume {
        let state = load_checkpoint(args.out.join(CHECKPOINT_FILE))?;
        resume_training(state, &data.images, Some(&data.ids), &cfg, Some(&args.out))?
    } else {
        run_training(&data.images, Some(&data.ids), &cfg, Some(&args.out))?
    };
    print_json(&serde_json::json!({
        "epochs": outcome.state.epoch,
        "checkpoint": args.out.join(CHECKPOINT_FILE),
    }));
    Ok(())
}

/// The config saved next to a checkpoint, or the defaults.
fn run_config(checkpoint: &Path) -> Result<PipelineConfig> {
    let path = checkpoint.with_file_name(CONFIG_FILE);
    if path.is_file() {
        read_json(&path)
    } else {
        Ok(PipelineConfig::default())
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let mut cfg = run_config(&args.checkpoint)?;
    if let Some(rho) = args.rho {
        cfg.fana.rho = rho;
    }
    let manifest = Manifest::load(&args.manifest)?;
    let space = Space::from(args.feature_space);
    let embed = |split| -> Result<_> {
        let data = manifest.load_split(split)?;
        let images = prepare_images(&data.images, &cfg.augment)?;
        Ok((state.model.embed(&images, space, &cfg.fana)?, data.ids))
    };
    let (q, q_ids) = embed(Split::Query)?;
    let (g, g_ids) = embed(Split::Gallery)?;
    let metrics = evaluate(&q, &q_ids, &g, &g_ids)?;
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
        std::fs::write(out, json).map_err(|e| Error::io(out, e))?;
    }
    print_json(&metrics);
    Ok(())
}

fn cluster(args: ClusterArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let mut cfg = run_config(&args.checkpoint)?;
    if let Some(v) = args.eps {
        cfg.dbscan.eps = v;
    }
    if let Some(v) = args.min_pts {
        cfg.dbscan.min_pts = v;
    }
    let manifest = Manifest::load(&args.manifest)?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Query => Split::Query,
        SplitArg::Gallery => Split::Gallery,
    };
    let data = manifest.load_split(split)?;
    let images = prepare_images(&data.images, &cfg.augment)?;
    let f = state.model.embed(&images, Space::Original, &cfg.fana)?;
    let labeling = dbscan(&pairwise_cosine_distance(&f)?, &cfg.dbscan)?;
    let purity = if labeling.num_clusters > 0 {
        Some(cluster_purity(&labeling, &data.ids)?)
    } else {
        None
    };
    if let Some(out) = &args.out {
        write_stored(out, &StoredTensor::ints(vec![labeling.len()], labeling.to_i32())?)?;
    }
    print_json(&serde_json::json!({
        "samples": labeling.len(),
        "clusters": labeling.num_clusters,
        "outliers": labeling.outliers(),
        "purity": purity,
    }));
    Ok(())
}

fn fana_preview(args: FanaArgs) -> Result<()> {
    let image = read_tensor(&args.image)?;
    if image.ndim() != 3 {
        return Err(Error::shape(format!("expected an [H, W, C] image, got {:?}", image.dims())));
    }
    let probe = match &args.checkpoint {
        Some(p) => load_checkpoint(p)?.model.probe,
        None => ActivationProbe::dedicated(image.dims()[2], args.seed),
    };
    let cfg = crate::fana::FanaConfig {
        rho: args.rho,
        patch: args.patch,
    };
    cfg.validate()?;
    let out = fana(&probe, &image, &cfg)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_tensor(args.out.join("map.ftns"), &out.map)?;
    write_tensor(args.out.join("mask.ftns"), &out.mask.to_tensor())?;
    write_tensor(args.out.join("noised.ftns"), &out.noised)?;
    print_json(&serde_json::json!({
        "height": out.mask.height,
        "width": out.mask.width,
        "masked": out.mask.count(),
        "out": args.out,
    }));
    Ok(())
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Cluster(a) => cluster(a),
        Command::FanaPreview(a) => fana_preview(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_cli(["fancl", "train", "--bogus"]), 1);
        assert_eq!(run_cli(["fancl"]), 1);
        assert_eq!(run_cli(["fancl", "--help"]), 0);
    }

    #[test]
    fn flags_override_defaults() {
        let cli = Cli::try_parse_from([
            "fancl", "train", "--manifest", "m", "--out", "o", "--rho", "0.2", "--p", "8", "--k", "8",
            "--probe-source", "branch-first-conv", "--no-instance-consistency",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else { unreachable!() };
        let cfg = pipeline_config(&args).unwrap();
        assert_eq!(cfg.fana.rho, 0.2);
        assert_eq!((cfg.train.p, cfg.train.k), (8, 8));
        assert_eq!(cfg.probe_source, ProbeSource::BranchFirstConv);
        assert!(!cfg.loss.instance_consistency && cfg.loss.cluster_consistency);
    }
}
