//! The two feature extractor branches and the fusion layer.
//!
//! A branch is a stack of `conv3x3/stride2 -> batchnorm -> relu` stages
//! followed by global average pooling, a linear projection to the embedding
//! dimension, a 1-D batchnorm and L2 normalization. Both branches share this
//! architecture and differ only in their parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::{channel_stats, BnMode, NodeId, Tape, Tensor};

/// Running-statistics momentum of every batchnorm layer.
pub const BN_MOMENTUM: f64 = 0.1;

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub embed_dim: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            channels: vec![8, 16, 32],
            kernel: 3,
            stride: 2,
            pad: 1,
            embed_dim: 64,
            height: 32,
            width: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config(format!("embedding dim {} < 2", self.embed_dim)));
        }
        if self.channels.is_empty() || self.channels.iter().chain([&self.in_channels]).any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "channel counts must be >= 1: in {} stages {:?}",
                self.in_channels, self.channels
            )));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config("kernel and stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Uniform init bound `sqrt(1 / fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize) -> Tensor {
    let bound = init_bound(fan_in);
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(dims.to_vec(), data).expect("uniform init is finite")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Parameters of one branch (θ or θ′).
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub stride: usize,
    pub pad: usize,
    pub stages: Vec<ConvStage>,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub head_gamma: Tensor,
    pub head_beta: Tensor,
    pub head_running_mean: Tensor,
    pub head_running_var: Tensor,
}

/// Fusion layer φ: `[2D] -> [D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl BranchParams {
    fn init(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = config.kernel;
        let mut stages = Vec::with_capacity(config.channels.len());
        let mut cin = config.in_channels;
        for &cout in &config.channels {
            stages.push(ConvStage {
                weight: uniform(rng, &[cout, cin, k, k], cin * k * k),
                bias: Tensor::zeros(&[cout]),
                bn_gamma: Tensor::ones(&[cout]),
                bn_beta: Tensor::zeros(&[cout]),
                running_mean: Tensor::zeros(&[cout]),
                running_var: Tensor::ones(&[cout]),
            });
            cin = cout;
        }
        let d = config.embed_dim;
        BranchParams {
            stride: config.stride,
            pad: config.pad,
            stages,
            proj_weight: uniform(rng, &[cin, d], cin),
            proj_bias: Tensor::zeros(&[d]),
            head_gamma: Tensor::ones(&[d]),
            head_beta: Tensor::zeros(&[d]),
            head_running_mean: Tensor::zeros(&[d]),
            head_running_var: Tensor::ones(&[d]),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.proj_weight.dims()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].weight.dims()[1]
    }

    /// Learnable tensors in a fixed order.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.weight"), &s.weight));
            out.push((format!("stage{i}.bias"), &s.bias));
            out.push((format!("stage{i}.bn_gamma"), &s.bn_gamma));
            out.push((format!("stage{i}.bn_beta"), &s.bn_beta));
        }
        out.push(("proj.weight".into(), &self.proj_weight));
        out.push(("proj.bias".into(), &self.proj_bias));
        out.push(("head.gamma".into(), &self.head_gamma));
        out.push(("head.beta".into(), &self.head_beta));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
            out.push(&mut s.bn_gamma);
            out.push(&mut s.bn_beta);
        }
        out.push(&mut self.proj_weight);
        out.push(&mut self.proj_bias);
        out.push(&mut self.head_gamma);
        out.push(&mut self.head_beta);
        out
    }

    /// Every tensor including running statistics, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trainable();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.running_mean"), &s.running_mean));
            out.push((format!("stage{i}.running_var"), &s.running_var));
        }
        out.push(("head.running_mean".into(), &self.head_running_mean));
        out.push(("head.running_var".into(), &self.head_running_var));
        out
    }

    /// Rebuilds a branch from named tensors written by [`named_tensors`](Self::named_tensors).
    pub fn from_named(
        mut get: impl FnMut(&str) -> Result<Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let mut stages = Vec::new();
        let mut i = 0;
        loop {
            let weight = match get(&format!("stage{i}.weight")) {
                Ok(w) => w,
                Err(_) if i > 0 => break,
                Err(e) => return Err(e),
            };
            stages.push(ConvStage {
                weight,
                bias: get(&format!("stage{i}.bias"))?,
                bn_gamma: get(&format!("stage{i}.bn_gamma"))?,
                bn_beta: get(&format!("stage{i}.bn_beta"))?,
                running_mean: get(&format!("stage{i}.running_mean"))?,
                running_var: get(&format!("stage{i}.running_var"))?,
            });
            i += 1;
        }
        Ok(BranchParams {
            stride,
            pad,
            stages,
            proj_weight: get("proj.weight")?,
            proj_bias: get("proj.bias")?,
            head_gamma: get("head.gamma")?,
            head_beta: get("head.beta")?,
            head_running_mean: get("head.running_mean")?,
            head_running_var: get("head.running_var")?,
        })
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> BranchVars {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                [
                    tape.leaf(s.weight.clone(), requires_grad),
                    tape.leaf(s.bias.clone(), requires_grad),
                    tape.leaf(s.bn_gamma.clone(), requires_grad),
                    tape.leaf(s.bn_beta.clone(), requires_grad),
                ]
            })
            .collect();
        BranchVars {
            stages,
            proj_weight: tape.leaf(self.proj_weight.clone(), requires_grad),
            proj_bias: tape.leaf(self.proj_bias.clone(), requires_grad),
            head_gamma: tape.leaf(self.head_gamma.clone(), requires_grad),
            head_beta: tape.leaf(self.head_beta.clone(), requires_grad),
        }
    }

    /// Folds a training batch's statistics into the running estimates.
    /// Variance is blended in its unbiased form.
    pub fn update_running_stats(&mut self, stats: &[BatchStats], momentum: f64) -> Result<()> {
        if stats.len() != self.stages.len() + 1 {
            return Err(Error::contract(format!(
                "{} batch statistics for {} batchnorm layers",
                stats.len(),
                self.stages.len() + 1
            )));
        }
        let targets = self
            .stages
            .iter_mut()
            .map(|s| (&mut s.running_mean, &mut s.running_var))
            .chain(std::iter::once((
                &mut self.head_running_mean,
                &mut self.head_running_var,
            )));
        for ((mean, var), st) in targets.zip(stats) {
            let unbias = if st.count > 1 {
                st.count as f64 / (st.count - 1) as f64
            } else {
                1.0
            };
            for (r, &m) in mean.data_mut().iter_mut().zip(&st.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            for (r, &v) in var.data_mut().iter_mut().zip(&st.var) {
                *r = (1.0 - momentum) * *r + momentum * v * unbias;
            }
        }
        Ok(())
    }
}

impl FusionParams {
    pub fn embed_dim(&self) -> usize {
        self.bias.numel()
    }

    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("fusion.weight".into(), &self.weight),
            ("fusion.bias".into(), &self.bias),
        ]
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> FusionVars {
        FusionVars {
            weight: tape.leaf(self.weight.clone(), requires_grad),
            bias: tape.leaf(self.bias.clone(), requires_grad),
        }
    }
}

/// Tape handles of a branch's learnable tensors.
#[derive(Clone, Debug)]
pub struct BranchVars {
    pub stages: Vec<[NodeId; 4]>,
    pub proj_weight: NodeId,
    pub proj_bias: NodeId,
    pub head_gamma: NodeId,
    pub head_beta: NodeId,
}

impl BranchVars {
    /// Same order as [`BranchParams::trainable`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self.stages.iter().flatten().copied().collect();
        out.extend([self.proj_weight, self.proj_bias, self.head_gamma, self.head_beta]);
        out
    }
}

#[derive(Clone, Debug)]
pub struct FusionVars {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl FusionVars {
    pub fn ids(&self) -> Vec<NodeId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel statistics observed by a batchnorm layer in train mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// `[N, D]`, unit rows.
    pub features: NodeId,
    /// Empty in eval mode.
    pub batch_stats: Vec<BatchStats>,
}

/// Initializes θ, θ′ and φ from independent substreams of `seed`.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<(BranchParams, BranchParams, FusionParams)> {
    config.validate()?;
    let stream = |id: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        rng
    };
    let theta = BranchParams::init(config, &mut stream(1));
    let theta_prime = BranchParams::init(config, &mut stream(2));
    let d = config.embed_dim;
    let phi = FusionParams {
        weight: uniform(&mut stream(3), &[2 * d, d], 2 * d),
        bias: Tensor::zeros(&[d]),
    };
    Ok((theta, theta_prime, phi))
}

fn bn_with_stats(
    tape: &mut Tape,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    mode: Mode,
    running: (&Tensor, &Tensor),
    stats: &mut Vec<BatchStats>,
) -> Result<NodeId> {
    let bn_mode = match mode {
        Mode::Train => {
            let v = tape.value(x);
            let (mean, var) = channel_stats(v);
            let count = v.numel() / v.dims()[1].max(1);
            stats.push(BatchStats { mean, var, count });
            BnMode::Train
        }
        Mode::Eval => BnMode::Eval {
            running_mean: running.0.data().to_vec(),
            running_var: running.1.data().to_vec(),
        },
    };
    tape.batch_norm(x, gamma, beta, bn_mode)
}

/// Runs one branch on an `[N, C, H, W]` batch already on the tape.
pub fn forward_branch(
    tape: &mut Tape,
    params: &BranchParams,
    vars: &BranchVars,
    images: NodeId,
    mode: Mode,
) -> Result<BranchOutput> {
    let dims = tape.value(images).dims().to_vec();
    if dims.len() != 4 || dims[1] != params.in_channels() {
        return Err(Error::shape(format!(
            "branch expects [N, {}, H, W] images, got {dims:?}",
            params.in_channels()
        )));
    }
    let mut stats = Vec::new();
    let mut h = images;
    for (stage, ids) in params.stages.iter().zip(&vars.stages) {
        let conv = tape.conv2d(h, ids[0], ids[1], params.stride, params.pad)?;
        let bn = bn_with_stats(
            tape,
            conv,
            ids[2],
            ids[3],
            mode,
            (&stage.running_mean, &stage.running_var),
            &mut stats,
        )?;
        h = tape.relu(bn)?;
    }
    let pooled = tape.global_avg_pool(h)?;
    let proj = tape.matmul(pooled, vars.proj_weight)?;
    let proj = tape.add(proj, vars.proj_bias)?;
    let head = bn_with_stats(
        tape,
        proj,
        vars.head_gamma,
        vars.head_beta,
        mode,
        (&params.head_running_mean, &params.head_running_var),
        &mut stats,
    )?;
    let features = tape.l2_normalize(head)?;
    Ok(BranchOutput {
        features,
        batch_stats: stats,
    })
}

/// `l2_normalize(concat(f, f̃) · W + b)`.
pub fn forward_fusion(tape: &mut Tape, vars: &FusionVars, f: NodeId, f_noised: NodeId) -> Result<NodeId> {
    let (a, b) = (tape.value(f).dims(), tape.value(f_noised).dims());
    if a != b || a.len() != 2 {
        return Err(Error::shape(format!("fusion inputs {a:?} vs {b:?}")));
    }
    let d = tape.value(vars.bias).numel();
    if a[1] != d {
        return Err(Error::shape(format!(
            "fusion expects feature dim {d}, got {}",
            a[1]
        )));
    }
    let cat = tape.concat(&[f, f_noised], 1)?;
    let lin = tape.matmul(cat, vars.weight)?;
    let lin = tape.add(lin, vars.bias)?;
    tape.l2_normalize(lin)
}

/// Converts `[H, W, C]` images into one `[N, C, H, W]` batch.
pub fn images_to_batch(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::shape("empty image batch"))?;
    if first.ndim() != 3 {
        return Err(Error::shape(format!("expected [H, W, C] image, got {:?}", first.dims())));
    }
    let (h, w, c) = (first.dims()[0], first.dims()[1], first.dims()[2]);
    let mut data = vec![0.0; images.len() * c * h * w];
    for (n, img) in images.iter().enumerate() {
        if img.dims() != first.dims() {
            return Err(Error::shape(format!(
                "image {n} has dims {:?}, expected {:?}",
                img.dims(),
                first.dims()
            )));
        }
        let src = img.data();
        let base = n * c * h * w;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[base + (ch * h + y) * w + x] = src[(y * w + x) * c + ch];
                }
            }
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Eval-mode embeddings of `[H, W, C]` images, without gradients.
pub fn extract_features(params: &BranchParams, images: &[&Tensor]) -> Result<Tensor> {
    let d = params.embed_dim();
    let mut data = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let x = tape.constant(images_to_batch(chunk)?);
        let out = forward_branch(&mut tape, params, &vars, x, Mode::Eval)?;
        data.extend_from_slice(tape.value(out.features).data());
    }
    Tensor::new(vec![images.len(), d], data)
}

/// Replaces every running statistic with the train-mode statistics of one
/// pass over `images`, processed as a single batch.
pub fn calibrate_batchnorm(params: &mut BranchParams, images: &[&Tensor]) -> Result<()> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(images_to_batch(images)?);
    let out = forward_branch(&mut tape, params, &vars, x, Mode::Train)?;
    params.update_running_stats(&out.batch_stats, 1.0)
}

/// Fused embeddings of precomputed feature batches, without gradients.
pub fn fuse_features(phi: &FusionParams, f: &Tensor, f_noised: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = phi.register(&mut tape, false);
    let a = tape.constant(f.clone());
    let b = tape.constant(f_noised.clone());
    let out = forward_fusion(&mut tape, &vars, a, b)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            channels: vec![4, 6],
            embed_dim: 5,
            height: 8,
            width: 8,
            ..EncoderConfig::default()
        }
    }

    fn image(seed: u64, cfg: &EncoderConfig) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.height * cfg.width * cfg.in_channels;
        Tensor::new(
            vec![cfg.height, cfg.width, cfg.in_channels],
            (0..n).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig::default();
        assert_eq!(init_params(&cfg, 11).unwrap(), init_params(&cfg, 11).unwrap());
        let (a, _, _) = init_params(&cfg, 11).unwrap();
        let (b, _, _) = init_params(&cfg, 12).unwrap();
        assert_ne!(a.stages[0].weight, b.stages[0].weight);
    }

    #[test]
    fn branches_use_different_streams() {
        let (t, tp, _) = init_params(&EncoderConfig::default(), 3).unwrap();
        assert_ne!(t.stages[0].weight, tp.stages[0].weight);
    }

    #[test]
    fn init_bound_for_3x3_over_8_channels() {
        assert_eq!(init_bound(8 * 3 * 3), (1.0f64 / 72.0).sqrt());
        let (t, _, _) = init_params(&EncoderConfig::default(), 0).unwrap();
        let bound = init_bound(72);
        assert!(t.stages[1].weight.data().iter().all(|v| v.abs() <= bound));
        assert!(t.stages[1].bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_features_are_unit_rows() {
        let cfg = small();
        let (t, _, _) = init_params(&cfg, 1).unwrap();
        let imgs: Vec<Tensor> = (0..5).map(|s| image(s, &cfg)).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let f = extract_features(&t, &refs).unwrap();
        assert_eq!(f.dims(), &[5, cfg.embed_dim]);
        for r in 0..5 {
            let n: f64 = f.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_rows_in_eval_mode_match() {
        let cfg = small();
        let (t, _, _) = init_params(&cfg, 2).unwrap();
        let a = image(9, &cfg);
        let b = image(10, &cfg);
        let f = extract_features(&t, &[&a, &b, &a]).unwrap();
        assert_eq!(f.row(0), f.row(2));
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let cfg = small();
        let (t, _, _) = init_params(&cfg, 2).unwrap();
        let img = Tensor::zeros(&[8, 8, 2]);
        assert!(matches!(extract_features(&t, &[&img]), Err(Error::Shape(_))));
    }

    #[test]
    fn selector_fusion_returns_original() {
        let d = 3;
        let mut w = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        let phi = FusionParams {
            weight: w,
            bias: Tensor::zeros(&[d]),
        };
        let f = Tensor::from_rows(&[vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let fused = fuse_features(&phi, &f, &g).unwrap();
        assert!(fused.max_abs_diff(&f) < 1e-15);
    }

    #[test]
    fn fusion_is_order_sensitive() {
        let (_, _, phi) = init_params(&small(), 5).unwrap();
        let f = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0, 0.0], vec![0.0, 0.6, 0.8, 0.0, 0.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0, 1.0, 0.0]]).unwrap();
        let a = fuse_features(&phi, &f, &g).unwrap();
        let b = fuse_features(&phi, &g, &f).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn running_stats_blend() {
        let cfg = small();
        let (mut t, _, _) = init_params(&cfg, 2).unwrap();
        let stats: Vec<BatchStats> = t
            .stages
            .iter()
            .map(|s| s.bias.numel())
            .chain([cfg.embed_dim])
            .map(|c| BatchStats {
                mean: vec![1.0; c],
                var: vec![3.0; c],
                count: 4,
            })
            .collect();
        t.update_running_stats(&stats, BN_MOMENTUM).unwrap();
        assert!((t.stages[0].running_mean.data()[0] - 0.1).abs() < 1e-15);
        assert!((t.stages[0].running_var.data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }
}
