//! The training loop.
//!
//! Each epoch regenerates the noised images, embeds the whole training set in
//! eval mode, clusters the original embeddings with DBSCAN and rebuilds the
//! three memory banks. It then runs one pass over the clustered pool in
//! PK-sampled mini-batches: forward both branches in train mode, fuse, take
//! one Adam step on all parameters and momentum-update the banks.
//!
//! Every random draw of epoch `e` comes from ChaCha8 stream `EPOCH_STREAM + e`
//! of the run seed, so a run resumed from a checkpoint replays exactly.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    assign_pseudo_labels, cluster_purity, dbscan, pairwise_cosine_distance, DbscanConfig, LabeledFeatures,
    PseudoLabeling,
};
use crate::encoder::{
    calibrate_batchnorm, extract_features, forward_branch, forward_fusion, fuse_features, images_to_batch, init_params, BranchParams,
    EncoderConfig, FusionParams, Mode, BN_MOMENTUM,
};
use crate::error::{Error, Result};
use crate::fana::{noise_images, ActivationProbe, FanaConfig, ProbeSource};
use crate::losses::{total_loss, LossConfig, Queries};
use crate::memory::{init_banks, MemoryBank, MemoryBanks, MemoryConfig, Space};
use crate::tensorcore::{adam_step, bilinear_resize, AdamConfig, AdamState, NodeId, Tape, Tensor};
use crate::toolkit::{Container, StoredTensor};

const EPOCH_STREAM: u64 = 1000;

pub const CHECKPOINT_FILE: &str = "checkpoint.ftck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Clusters per batch.
    pub p: usize,
    /// Instances per cluster.
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            base_lr: 3.5e-4,
            lr_decay: 0.1,
            lr_step: 20,
            batch_size: 64,
            weight_decay: 5e-4,
            seed: 0,
            p: 16,
            k: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.k == 0 || self.p * self.k != self.batch_size {
            return Err(Error::Config(format!(
                "P·K = {}·{} must equal the batch size {}",
                self.p, self.k, self.batch_size
            )));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() || !(self.lr_decay >= 0.0) {
            return Err(Error::Config("learning rate and decay must be finite and >= 0".into()));
        }
        if self.lr_step == 0 {
            return Err(Error::Config("lr step must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// `base · decay^⌊epoch / step⌋`
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.base_lr * config.lr_decay.powi((epoch / config.lr_step) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub height: usize,
    pub width: usize,
    pub flip_prob: f64,
    /// Zero padding on every side before the random crop.
    pub pad: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            height: 32,
            width: 32,
            flip_prob: 0.5,
            pad: 10,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("augmentation extents must be positive".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Augmentation {
        Augmentation {
            flip: rng.random_bool(self.flip_prob),
            top: rng.random_range(0..=2 * self.pad),
            left: rng.random_range(0..=2 * self.pad),
        }
    }
}

/// One flip-pad-crop draw, applied identically to an image and its noised copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    /// Crop origin inside the padded image.
    pub top: usize,
    pub left: usize,
}

pub fn augment(image: &Tensor, aug: Augmentation, config: &AugmentConfig) -> Result<Tensor> {
    let (h, w) = (config.height, config.width);
    if image.ndim() != 3 || image.dims()[0] != h || image.dims()[1] != w {
        return Err(Error::shape(format!(
            "augmentation expects [{h}, {w}, C] images, got {:?}",
            image.dims()
        )));
    }
    if aug.top > 2 * config.pad || aug.left > 2 * config.pad {
        return Err(Error::contract("crop does not fit in the padded image"));
    }
    let c = image.dims()[2];
    let src = image.data();
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let sy = (y + aug.top) as isize - config.pad as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = (x + aug.left) as isize - config.pad as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let sx = if aug.flip { w - 1 - sx as usize } else { sx as usize };
            let from = (sy as usize * w + sx) * c;
            out[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Resizes every image to the training extents where needed.
pub fn prepare_images(images: &[Tensor], config: &AugmentConfig) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|img| {
            if img.ndim() == 3 && img.dims()[0] == config.height && img.dims()[1] == config.width {
                Ok(img.clone())
            } else {
                bilinear_resize(img, config.height, config.width)
            }
        })
        .collect()
}

/// Draws `p` distinct clusters and `k` members of each, with replacement
/// only for clusters smaller than `k`. `p` drops to the cluster count when
/// there are fewer clusters.
pub fn pk_sample(labeling: &PseudoLabeling, p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let members = labeling.members();
    if members.is_empty() {
        return Err(Error::contract("PK sampling needs at least one cluster"));
    }
    if p == 0 || k == 0 {
        return Err(Error::Config("P and K must be >= 1".into()));
    }
    let p = if members.len() < p {
        log::warn!("only {} clusters; lowering P from {p}", members.len());
        members.len()
    } else {
        p
    };
    let mut out = Vec::with_capacity(p * k);
    for c in index::sample(rng, members.len(), p) {
        let m = &members[c];
        if m.len() >= k {
            out.extend(index::sample(rng, m.len(), k).into_iter().map(|i| m[i]));
        } else {
            out.extend((0..k).map(|_| m[rng.random_range(0..m.len())]));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub fana: FanaConfig,
    pub probe_source: ProbeSource,
    pub dbscan: DbscanConfig,
    pub memory: MemoryConfig,
    pub loss: LossConfig,
    /// Calibrate batchnorm running statistics on the training images before
    /// the first epoch.
    pub calibrate_bn: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            fana: FanaConfig::default(),
            probe_source: ProbeSource::default(),
            dbscan: DbscanConfig::default(),
            memory: MemoryConfig::default(),
            loss: LossConfig::default(),
            calibrate_bn: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.fana.validate()?;
        self.dbscan.validate()?;
        self.memory.validate()?;
        self.loss.validate()?;
        if (self.augment.height, self.augment.width) != (self.encoder.height, self.encoder.width) {
            return Err(Error::Config(format!(
                "augmentation extents {}x{} differ from encoder input {}x{}",
                self.augment.height, self.augment.width, self.encoder.height, self.encoder.width
            )));
        }
        Ok(())
    }
}

/// Both branches, the fusion layer and the noise probe.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub theta: BranchParams,
    pub theta_prime: BranchParams,
    pub phi: FusionParams,
    pub probe: ActivationProbe,
}

impl Model {
    pub fn init(config: &PipelineConfig) -> Result<Self> {
        let seed = config.train.seed;
        let (theta, theta_prime, phi) = init_params(&config.encoder, seed)?;
        let probe = match config.probe_source {
            ProbeSource::DedicatedProbe => ActivationProbe::dedicated(config.encoder.in_channels, seed),
            source => ActivationProbe::from_branch(&theta, source)?,
        };
        Ok(Model {
            theta,
            theta_prime,
            phi,
            probe,
        })
    }

    /// Trainable tensor names in optimizer order.
    pub fn param_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.theta.trainable().into_iter().map(|(n, _)| format!("theta.{n}")).collect();
        out.extend(self.theta_prime.trainable().into_iter().map(|(n, _)| format!("theta_prime.{n}")));
        out.extend(self.phi.trainable().into_iter().map(|(n, _)| n));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.theta.trainable().into_iter().map(|(_, t)| t).collect();
        out.extend(self.theta_prime.trainable().into_iter().map(|(_, t)| t));
        out.extend(self.phi.trainable().into_iter().map(|(_, t)| t));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.theta.trainable_mut();
        out.extend(self.theta_prime.trainable_mut());
        out.extend(self.phi.trainable_mut());
        out
    }

    /// Re-derives a branch-based probe from the current θ.
    pub fn refresh_probe(&mut self) -> Result<()> {
        if self.probe.source != ProbeSource::DedicatedProbe {
            self.probe = ActivationProbe::from_branch(&self.theta, self.probe.source)?;
        }
        Ok(())
    }

    /// Eval-mode embeddings of `images` in the requested space.
    pub fn embed(&self, images: &[Tensor], space: Space, fana: &FanaConfig) -> Result<Tensor> {
        let refs: Vec<&Tensor> = images.iter().collect();
        if space == Space::Original {
            return extract_features(&self.theta, &refs);
        }
        let noised = noise_images(&self.probe, images, fana)?;
        let noised_refs: Vec<&Tensor> = noised.iter().collect();
        let f_noised = extract_features(&self.theta_prime, &noised_refs)?;
        if space == Space::Noised {
            return Ok(f_noised);
        }
        let f = extract_features(&self.theta, &refs)?;
        fuse_features(&self.phi, &f, &f_noised)
    }
}

/// Everything a run needs to continue from the next epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub seed: u64,
    /// Banks at the end of the last trained epoch.
    pub banks: Option<MemoryBanks>,
}

impl TrainState {
    pub fn init(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config)?;
        let adam_config = AdamConfig {
            weight_decay: config.train.weight_decay,
            ..AdamConfig::default()
        };
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|t| t.dims().to_vec()).collect();
        let adam = AdamState::new(adam_config, shapes.iter().map(Vec::as_slice));
        Ok(TrainState {
            model,
            adam,
            epoch: 0,
            seed: config.train.seed,
            banks: None,
        })
    }
}

/// Sets both branches' batchnorm running statistics from the training set,
/// θ on the images and θ′ on their noised copies.
pub fn calibrate(model: &mut Model, images: &[Tensor], fana: &FanaConfig) -> Result<()> {
    let noised = noise_images(&model.probe, images, fana)?;
    calibrate_batchnorm(&mut model.theta, &images.iter().collect::<Vec<_>>())?;
    calibrate_batchnorm(&mut model.theta_prime, &noised.iter().collect::<Vec<_>>())?;
    model.refresh_probe()
}

/// Result of an epoch's clustering phase.
#[derive(Clone, Debug)]
pub struct EpochClusters {
    pub noised: Vec<Tensor>,
    pub view: LabeledFeatures,
    /// `None` when DBSCAN found no cluster.
    pub banks: Option<MemoryBanks>,
}

/// Noises every image, embeds both sets in eval mode, clusters the original
/// embeddings and initializes the banks.
pub fn clustering_phase(
    images: &[Tensor],
    model: &Model,
    fana: &FanaConfig,
    dbscan_config: &DbscanConfig,
) -> Result<EpochClusters> {
    let noised = noise_images(&model.probe, images, fana)?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let noised_refs: Vec<&Tensor> = noised.iter().collect();
    let f = extract_features(&model.theta, &refs)?;
    let f_noised = extract_features(&model.theta_prime, &noised_refs)?;
    let fused = fuse_features(&model.phi, &f, &f_noised)?;
    let labeling = dbscan(&pairwise_cosine_distance(&f)?, dbscan_config)?;
    let view = assign_pseudo_labels(labeling, f, f_noised, fused)?;
    let banks = if view.labeling.num_clusters == 0 {
        None
    } else {
        Some(init_banks(&view)?)
    };
    Ok(EpochClusters { noised, view, banks })
}

/// An augmented mini-batch in network layout.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, C, H, W]`
    pub images: Tensor,
    pub noised: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn assemble(
        images: &[Tensor],
        noised: &[Tensor],
        indices: &[usize],
        labels: Vec<usize>,
        augs: &[Augmentation],
        config: &AugmentConfig,
    ) -> Result<Batch> {
        if indices.len() != labels.len() || indices.len() != augs.len() {
            return Err(Error::contract("batch indices, labels and augmentations differ in length"));
        }
        let mut xs = Vec::with_capacity(indices.len());
        let mut xns = Vec::with_capacity(indices.len());
        for (&i, &a) in indices.iter().zip(augs) {
            xs.push(augment(&images[i], a, config)?);
            xns.push(augment(&noised[i], a, config)?);
        }
        Ok(Batch {
            images: images_to_batch(&xs.iter().collect::<Vec<_>>())?,
            noised: images_to_batch(&xns.iter().collect::<Vec<_>>())?,
            labels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub cluster_all: f64,
    pub consistency: f64,
    pub total: f64,
}

struct Forward {
    tape: Tape,
    ids: Vec<NodeId>,
    f: NodeId,
    f_noised: NodeId,
    fused: NodeId,
    losses: StepLosses,
    total: NodeId,
    stats: (Vec<crate::encoder::BatchStats>, Vec<crate::encoder::BatchStats>),
}

fn forward(model: &Model, banks: &MemoryBanks, batch: &Batch, loss: &LossConfig) -> Result<Forward> {
    let mut tape = Tape::new();
    let tv = model.theta.register(&mut tape, true);
    let pv = model.theta_prime.register(&mut tape, true);
    let fv = model.phi.register(&mut tape, true);
    let x = tape.constant(batch.images.clone());
    let xn = tape.constant(batch.noised.clone());
    let out = forward_branch(&mut tape, &model.theta, &tv, x, Mode::Train)?;
    let outn = forward_branch(&mut tape, &model.theta_prime, &pv, xn, Mode::Train)?;
    let fused = forward_fusion(&mut tape, &fv, out.features, outn.features)?;
    let queries = Queries {
        original: out.features,
        noised: outn.features,
        fused,
    };
    let terms = total_loss(&mut tape, queries, banks, &batch.labels, loss)?;
    let losses = StepLosses {
        cluster_all: tape.value(terms.cluster_all).item()?,
        consistency: tape.value(terms.consistency).item()?,
        total: tape.value(terms.total).item()?,
    };
    for (name, v) in [
        ("L_cluster-all", losses.cluster_all),
        ("L_consistency", losses.consistency),
        ("L_total", losses.total),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v}")));
        }
    }
    let mut ids = tv.ids();
    ids.extend(pv.ids());
    ids.extend(fv.ids());
    Ok(Forward {
        tape,
        ids,
        f: out.features,
        f_noised: outn.features,
        fused,
        losses,
        total: terms.total,
        stats: (out.batch_stats, outn.batch_stats),
    })
}

/// Train-mode loss of a batch without touching any state.
pub fn batch_loss(model: &Model, banks: &MemoryBanks, batch: &Batch, loss: &LossConfig) -> Result<StepLosses> {
    Ok(forward(model, banks, batch, loss)?.losses)
}

/// One optimization step followed by the bank updates.
pub fn train_iteration(
    model: &mut Model,
    adam: &mut AdamState,
    banks: &mut MemoryBanks,
    batch: &Batch,
    config: &PipelineConfig,
    lr: f64,
) -> Result<StepLosses> {
    let fwd = forward(model, banks, batch, &config.loss)?;
    let grads = fwd.tape.backward(fwd.total)?;
    let grad_refs = fwd
        .ids
        .iter()
        .map(|id| {
            grads
                .get(*id)
                .ok_or_else(|| Error::contract("missing gradient for a trainable tensor"))
        })
        .collect::<Result<Vec<_>>>()?;
    let names = model.param_names();
    let mut params: Vec<(&str, &mut Tensor)> = names.iter().map(String::as_str).zip(model.params_mut()).collect();
    adam_step(&mut params, &grad_refs, adam, lr)?;
    model.theta.update_running_stats(&fwd.stats.0, BN_MOMENTUM)?;
    model.theta_prime.update_running_stats(&fwd.stats.1, BN_MOMENTUM)?;
    banks.update_batch(
        &batch.labels,
        fwd.tape.value(fwd.f),
        fwd.tape.value(fwd.f_noised),
        fwd.tape.value(fwd.fused),
        config.memory.alpha,
    )?;
    Ok(fwd.losses)
}

#[derive(Serialize)]
struct IterRecord {
    epoch: usize,
    iter: usize,
    #[serde(rename = "L_cluster-all")]
    cluster_all: f64,
    #[serde(rename = "L_consistency")]
    consistency: f64,
    #[serde(rename = "L_total")]
    total: f64,
}

#[derive(Serialize)]
struct ClusteringRecord {
    epoch: usize,
    event: &'static str,
    clusters: usize,
    outliers: usize,
    purity: Option<f64>,
}

/// JSON-lines metrics, kept in memory and optionally mirrored to a file.
pub struct MetricsLog {
    lines: Vec<String>,
    file: Option<(PathBuf, File)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog {
            lines: Vec::new(),
            file: None,
        }
    }

    pub fn to_file(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(MetricsLog {
            lines: Vec::new(),
            file: Some((path, file)),
        })
    }

    fn record(&mut self, value: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(value).expect("metrics records serialize");
        if let Some((path, f)) = &mut self.file {
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

/// The ground-truth identities of the training images, used only for the
/// purity diagnostic.
pub type Diagnostics<'a> = Option<&'a [String]>;

pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EPOCH_STREAM + epoch as u64);
    rng
}

/// Runs epoch `state.epoch` and advances the counter.
pub fn run_epoch(
    state: &mut TrainState,
    images: &[Tensor],
    truth: Diagnostics<'_>,
    config: &PipelineConfig,
    log: &mut MetricsLog,
) -> Result<()> {
    let epoch = state.epoch;
    let mut rng = epoch_rng(state.seed, epoch);
    state.model.refresh_probe()?;
    let phase = clustering_phase(images, &state.model, &config.fana, &config.dbscan)?;
    let labeling = &phase.view.labeling;
    let purity = match truth {
        Some(ids) if labeling.num_clusters > 0 => Some(cluster_purity(labeling, ids)?),
        _ => None,
    };
    log.record(&ClusteringRecord {
        epoch,
        event: "clustering",
        clusters: labeling.num_clusters,
        outliers: labeling.outliers(),
        purity,
    })?;
    log::info!(
        "epoch {epoch}: {} clusters, {} outliers",
        labeling.num_clusters,
        labeling.outliers()
    );
    let Some(mut banks) = phase.banks else {
        log::warn!("epoch {epoch}: no clusters found, skipping");
        state.epoch += 1;
        return Ok(());
    };
    let TrainConfig { p, k, .. } = config.train;
    let p = if labeling.num_clusters < p {
        log::warn!("epoch {epoch}: {} clusters < P = {p}; lowering P", labeling.num_clusters);
        labeling.num_clusters
    } else {
        p
    };
    let iters = phase.view.pool.len().div_ceil(p * k);
    let lr = lr_at(epoch, &config.train);
    for iter in 0..iters {
        let idx = pk_sample(labeling, p, k, &mut rng)?;
        let labels = idx
            .iter()
            .map(|&i| labeling.labels[i].expect("PK draws clustered samples"))
            .collect();
        let augs: Vec<Augmentation> = idx.iter().map(|_| config.augment.sample(&mut rng)).collect();
        let batch = Batch::assemble(images, &phase.noised, &idx, labels, &augs, &config.augment)?;
        let losses = train_iteration(&mut state.model, &mut state.adam, &mut banks, &batch, config, lr)?;
        log.record(&IterRecord {
            epoch,
            iter,
            cluster_all: losses.cluster_all,
            consistency: losses.consistency,
            total: losses.total,
        })?;
    }
    state.banks = Some(banks);
    state.epoch += 1;
    Ok(())
}

/// Runs epochs until `config.train.epochs`, checkpointing after each one
/// when `out_dir` is given.
pub fn continue_training(
    state: &mut TrainState,
    images: &[Tensor],
    truth: Diagnostics<'_>,
    config: &PipelineConfig,
    out_dir: Option<&Path>,
    log: &mut MetricsLog,
) -> Result<()> {
    config.validate()?;
    let images = prepare_images(images, &config.augment)?;
    while state.epoch < config.train.epochs {
        run_epoch(state, &images, truth, config, log)?;
        if let Some(dir) = out_dir {
            save_checkpoint(state, dir.join(CHECKPOINT_FILE))?;
        }
    }
    Ok(())
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<String>,
}

/// A fresh run. With `out_dir`, writes the config, the initial checkpoint,
/// per-epoch checkpoints and the metrics stream there.
pub fn run_training(
    images: &[Tensor],
    truth: Diagnostics<'_>,
    config: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut state = TrainState::init(config)?;
    if config.calibrate_bn {
        calibrate(&mut state.model, &prepare_images(images, &config.augment)?, &config.fana)?;
    }
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join(CONFIG_FILE);
            let json = serde_json::to_string_pretty(config).expect("config serializes");
            std::fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))?;
            save_checkpoint(&state, dir.join(CHECKPOINT_FILE))?;
            MetricsLog::to_file(dir.join(METRICS_FILE), false)?
        }
        None => MetricsLog::in_memory(),
    };
    continue_training(&mut state, images, truth, config, out_dir, &mut log)?;
    Ok(TrainOutcome {
        state,
        metrics: log.lines,
    })
}

/// Continues from a saved state, appending to the metrics stream in `out_dir`.
pub fn resume_training(
    mut state: TrainState,
    images: &[Tensor],
    truth: Diagnostics<'_>,
    config: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut log = match out_dir {
        Some(dir) => MetricsLog::to_file(dir.join(METRICS_FILE), true)?,
        None => MetricsLog::in_memory(),
    };
    continue_training(&mut state, images, truth, config, out_dir, &mut log)?;
    Ok(TrainOutcome {
        state,
        metrics: log.lines,
    })
}

fn u64_words(v: u64) -> StoredTensor {
    StoredTensor::I32 {
        dims: vec![2],
        data: vec![(v >> 32) as u32 as i32, v as u32 as i32],
    }
}

fn words_u64(w: &[i32]) -> Result<u64> {
    match w {
        [hi, lo] => Ok(((*hi as u32 as u64) << 32) | (*lo as u32 as u64)),
        _ => Err(Error::contract("expected two 32-bit words")),
    }
}

fn probe_code(s: ProbeSource) -> i32 {
    match s {
        ProbeSource::DedicatedProbe => 0,
        ProbeSource::BranchFirstConv => 1,
        ProbeSource::BranchFirstBatchnorm => 2,
    }
}

fn probe_from_code(c: i32) -> Result<ProbeSource> {
    match c {
        0 => Ok(ProbeSource::DedicatedProbe),
        1 => Ok(ProbeSource::BranchFirstConv),
        2 => Ok(ProbeSource::BranchFirstBatchnorm),
        _ => Err(Error::contract(format!("unknown probe source code {c}"))),
    }
}

fn small_ints(values: &[usize]) -> Result<StoredTensor> {
    let data = values
        .iter()
        .map(|&v| i32::try_from(v).map_err(|_| Error::contract(format!("{v} does not fit in i32"))))
        .collect::<Result<Vec<_>>>()?;
    StoredTensor::ints(vec![data.len()], data)
}

fn put_branch(c: &mut Container, prefix: &str, b: &BranchParams) -> Result<()> {
    c.insert(format!("{prefix}.meta"), small_ints(&[b.stride, b.pad])?)?;
    for (name, t) in b.named_tensors() {
        c.insert(format!("{prefix}.{name}"), t.clone())?;
    }
    Ok(())
}

fn get_branch(c: &Container, prefix: &str) -> Result<BranchParams> {
    let meta = c.ints(&format!("{prefix}.meta"))?;
    let [stride, pad] = meta else {
        return Err(Error::contract(format!("{prefix}.meta must hold stride and pad")));
    };
    BranchParams::from_named(|n| c.float(&format!("{prefix}.{n}")), *stride as usize, *pad as usize)
}

pub fn state_to_container(state: &TrainState) -> Result<Container> {
    let mut c = Container::new();
    c.insert("meta.epoch", small_ints(&[state.epoch])?)?;
    c.insert("meta.seed", u64_words(state.seed))?;
    put_branch(&mut c, "theta", &state.model.theta)?;
    put_branch(&mut c, "theta_prime", &state.model.theta_prime)?;
    for (name, t) in state.model.phi.trainable() {
        c.insert(name, t.clone())?;
    }
    let probe = &state.model.probe;
    c.insert("probe.weight", probe.weight.clone())?;
    c.insert("probe.bias", probe.bias.clone())?;
    c.insert(
        "probe.meta",
        StoredTensor::ints(vec![3], vec![probe.stride as i32, probe.pad as i32, probe_code(probe.source)])?,
    )?;
    let a = &state.adam;
    c.insert("adam.step", u64_words(a.step))?;
    c.insert(
        "adam.config",
        Tensor::from_vec(vec![a.config.beta1, a.config.beta2, a.config.eps, a.config.weight_decay])?,
    )?;
    for (i, (m, v)) in a.first.iter().zip(&a.second).enumerate() {
        c.insert(format!("adam.m.{i}"), m.clone())?;
        c.insert(format!("adam.v.{i}"), v.clone())?;
    }
    if let Some(banks) = &state.banks {
        for space in [Space::Original, Space::Noised, Space::Fused] {
            c.insert(format!("bank.{}", space.name()), banks.get(space).entries().clone())?;
        }
    }
    Ok(c)
}

pub fn state_from_container(c: &Container) -> Result<TrainState> {
    let epoch = match c.ints("meta.epoch")? {
        [e] if *e >= 0 => *e as usize,
        _ => return Err(Error::contract("meta.epoch must be one non-negative int")),
    };
    let seed = words_u64(c.ints("meta.seed")?)?;
    let theta = get_branch(c, "theta")?;
    let theta_prime = get_branch(c, "theta_prime")?;
    let phi = FusionParams {
        weight: c.float("fusion.weight")?,
        bias: c.float("fusion.bias")?,
    };
    let [stride, pad, code] = c.ints("probe.meta")? else {
        return Err(Error::contract("probe.meta must hold stride, pad and source"));
    };
    let probe = ActivationProbe {
        weight: c.float("probe.weight")?,
        bias: c.float("probe.bias")?,
        stride: *stride as usize,
        pad: *pad as usize,
        source: probe_from_code(*code)?,
    };
    let model = Model {
        theta,
        theta_prime,
        phi,
        probe,
    };
    let cfg = c.float("adam.config")?;
    let [beta1, beta2, eps, weight_decay] = cfg.data() else {
        return Err(Error::contract("adam.config must hold four values"));
    };
    let n = model.params().len();
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    for i in 0..n {
        first.push(c.float(&format!("adam.m.{i}"))?);
        second.push(c.float(&format!("adam.v.{i}"))?);
    }
    let adam = AdamState {
        config: AdamConfig {
            beta1: *beta1,
            beta2: *beta2,
            eps: *eps,
            weight_decay: *weight_decay,
        },
        first,
        second,
        step: words_u64(c.ints("adam.step")?)?,
    };
    let banks = if c.names().any(|n| n == "bank.original") {
        let bank = |s: Space| -> Result<MemoryBank> { MemoryBank::new(s, c.float(&format!("bank.{}", s.name()))?) };
        Some(MemoryBanks {
            original: bank(Space::Original)?,
            noised: bank(Space::Noised)?,
            fused: bank(Space::Fused)?,
        })
    } else {
        None
    };
    Ok(TrainState {
        model,
        adam,
        epoch,
        seed,
        banks,
    })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    state_to_container(state)?.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    state_from_container(&Container::load(path)?)
}
