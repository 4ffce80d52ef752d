//! Random gradient-check problems, one per differentiable op plus the full
//! joint objective through both branches and the fusion layer.

use fancl::clustering::PseudoLabeling;
use fancl::encoder::{forward_branch, forward_fusion, images_to_batch, init_params, EncoderConfig, Mode};
use fancl::losses::{total_loss, LossConfig, Queries};
use fancl::memory::{MemoryBank, MemoryBanks, Space};
use fancl::tensorcore::{grad_check, BnMode, GradCheckOptions, NodeId, Tape};
use fancl::{Error, Tensor};
use rand::Rng;

use super::{random_unit, random_vec};

pub const OPS: &[&str] = &[
    "matmul",
    "transpose",
    "conv2d",
    "conv2d_strided",
    "add",
    "add_broadcast",
    "sub",
    "mul",
    "mul_broadcast",
    "relu",
    "sigmoid",
    "batchnorm_train_2d",
    "batchnorm_train_4d",
    "batchnorm_eval",
    "global_avg_pool",
    "l2_normalize",
    "concat",
    "sum",
    "sum_last_axis",
    "scale",
    "mean",
    "logsumexp",
    "pick_columns",
    "row_dot",
];

fn rand_tensor(rng: &mut impl Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), random_vec(rng, n, 1.0)).unwrap()
}

/// A tape whose scalar output is a random weighting of `op`'s output, and
/// the leaves to check.
pub fn op_case(op: &str, rng: &mut impl Rng) -> (Tape, Vec<NodeId>, NodeId) {
    let mut t = Tape::new();
    let p = |t: &mut Tape, rng: &mut _, dims: &[usize]| t.param(rand_tensor(rng, dims));
    let (out, leaves) = match op {
        "matmul" => {
            let a = p(&mut t, rng, &[3, 4]);
            let b = p(&mut t, rng, &[4, 2]);
            (t.matmul(a, b).unwrap(), vec![a, b])
        }
        "transpose" => {
            let a = p(&mut t, rng, &[3, 5]);
            (t.transpose(a).unwrap(), vec![a])
        }
        "conv2d" | "conv2d_strided" => {
            let stride = if op == "conv2d" { 1 } else { 2 };
            let x = p(&mut t, rng, &[2, 2, 5, 5]);
            let w = p(&mut t, rng, &[3, 2, 3, 3]);
            let b = p(&mut t, rng, &[3]);
            (t.conv2d(x, w, b, stride, 1).unwrap(), vec![x, w, b])
        }
        "add" | "sub" | "mul" => {
            let a = p(&mut t, rng, &[2, 3]);
            let b = p(&mut t, rng, &[2, 3]);
            let o = match op {
                "add" => t.add(a, b),
                "sub" => t.sub(a, b),
                _ => t.mul(a, b),
            };
            (o.unwrap(), vec![a, b])
        }
        "add_broadcast" | "mul_broadcast" => {
            let a = p(&mut t, rng, &[4, 3]);
            let b = p(&mut t, rng, &[3]);
            let o = if op == "add_broadcast" { t.add(a, b) } else { t.mul(a, b) };
            (o.unwrap(), vec![a, b])
        }
        "relu" => {
            let a = p(&mut t, rng, &[3, 4]);
            (t.relu(a).unwrap(), vec![a])
        }
        "sigmoid" => {
            let a = p(&mut t, rng, &[3, 4]);
            (t.sigmoid(a).unwrap(), vec![a])
        }
        "batchnorm_train_2d" | "batchnorm_train_4d" | "batchnorm_eval" => {
            let dims: &[usize] = if op == "batchnorm_train_2d" { &[5, 3] } else { &[3, 3, 2, 2] };
            let x = p(&mut t, rng, dims);
            let g = p(&mut t, rng, &[3]);
            let b = p(&mut t, rng, &[3]);
            let mode = if op == "batchnorm_eval" {
                BnMode::Eval {
                    running_mean: random_vec(rng, 3, 1.0),
                    running_var: (0..3).map(|_| rng.random_range(0.5..2.0)).collect(),
                }
            } else {
                BnMode::Train
            };
            (t.batch_norm(x, g, b, mode).unwrap(), vec![x, g, b])
        }
        "global_avg_pool" => {
            let x = p(&mut t, rng, &[2, 3, 3, 2]);
            (t.global_avg_pool(x).unwrap(), vec![x])
        }
        "l2_normalize" => {
            let x = p(&mut t, rng, &[3, 4]);
            (t.l2_normalize(x).unwrap(), vec![x])
        }
        "concat" => {
            let a = p(&mut t, rng, &[2, 3]);
            let b = p(&mut t, rng, &[2, 2]);
            (t.concat(&[a, b], 1).unwrap(), vec![a, b])
        }
        "sum" => {
            let a = p(&mut t, rng, &[2, 3]);
            (t.sum(a).unwrap(), vec![a])
        }
        "sum_last_axis" => {
            let a = p(&mut t, rng, &[3, 4]);
            (t.sum_last_axis(a).unwrap(), vec![a])
        }
        "scale" => {
            let a = p(&mut t, rng, &[3, 2]);
            let c = rng.random_range(-3.0..3.0);
            (t.scale(a, c).unwrap(), vec![a])
        }
        "mean" => {
            let a = p(&mut t, rng, &[5]);
            (t.mean(a).unwrap(), vec![a])
        }
        "logsumexp" => {
            let a = p(&mut t, rng, &[3, 4]);
            let a2 = t.scale(a, 5.0).unwrap();
            (t.logsumexp(a2).unwrap(), vec![a])
        }
        "pick_columns" => {
            let a = p(&mut t, rng, &[3, 4]);
            let idx = (0..3).map(|_| rng.random_range(0..4)).collect();
            (t.pick_columns(a, idx).unwrap(), vec![a])
        }
        "row_dot" => {
            let a = p(&mut t, rng, &[3, 4]);
            let b = p(&mut t, rng, &[3, 4]);
            (t.row_dot(a, b).unwrap(), vec![a, b])
        }
        other => panic!("unknown op {other}"),
    };
    let dims = t.value(out).dims().to_vec();
    let weights = t.constant(rand_tensor(rng, &dims));
    let weighted = t.mul(out, weights).unwrap();
    let loss = t.sum(weighted).unwrap();
    (t, leaves, loss)
}

/// Tape for the joint objective on a 4-image, 2-cluster batch through a
/// small encoder; leaves are every trainable tensor of θ, θ′ and φ.
pub fn composite_case(rng: &mut impl Rng) -> (Tape, Vec<NodeId>, NodeId) {
    let cfg = EncoderConfig {
        channels: vec![2, 3],
        embed_dim: 4,
        height: 6,
        width: 6,
        ..EncoderConfig::default()
    };
    let (theta, theta_prime, phi) = init_params(&cfg, rng.random()).unwrap();
    let imgs: Vec<Tensor> = (0..4).map(|_| rand_tensor(rng, &[6, 6, 3])).collect();
    let noised: Vec<Tensor> = (0..4).map(|_| rand_tensor(rng, &[6, 6, 3])).collect();
    let bank = |rng: &mut _, s| {
        let rows: Vec<Vec<f64>> = (0..2).map(|_| random_unit(rng, 4)).collect();
        MemoryBank::new(s, Tensor::from_rows(&rows).unwrap()).unwrap()
    };
    let banks = MemoryBanks {
        original: bank(rng, Space::Original),
        noised: bank(rng, Space::Noised),
        fused: bank(rng, Space::Fused),
    };
    let mut t = Tape::new();
    let tv = theta.register(&mut t, true);
    let pv = theta_prime.register(&mut t, true);
    let fv = phi.register(&mut t, true);
    let x = t.constant(images_to_batch(&imgs.iter().collect::<Vec<_>>()).unwrap());
    let xn = t.constant(images_to_batch(&noised.iter().collect::<Vec<_>>()).unwrap());
    let a = forward_branch(&mut t, &theta, &tv, x, Mode::Train).unwrap();
    let b = forward_branch(&mut t, &theta_prime, &pv, xn, Mode::Train).unwrap();
    let fused = forward_fusion(&mut t, &fv, a.features, b.features).unwrap();
    let q = Queries {
        original: a.features,
        noised: b.features,
        fused,
    };
    let labels = PseudoLabeling::new(vec![Some(0), Some(1), Some(0), Some(1)]).unwrap();
    let labels: Vec<usize> = labels.labels.iter().map(|l| l.unwrap()).collect();
    let terms = total_loss(&mut t, q, &banks, &labels, &LossConfig::default()).unwrap();
    let mut leaves = tv.ids();
    leaves.extend(pv.ids());
    leaves.extend(fv.ids());
    (t, leaves, terms.total)
}

/// Worst relative error over all leaves of one accepted sample, redrawing
/// samples that land near a relu kink.
pub fn check_sample(build: &mut dyn FnMut() -> (Tape, Vec<NodeId>, NodeId)) -> f64 {
    for _ in 0..100 {
        let (tape, leaves, loss) = build();
        let mut worst: f64 = 0.0;
        let mut rejected = false;
        for leaf in leaves {
            match grad_check(&tape, leaf, loss, &GradCheckOptions::default()) {
                Ok(e) => worst = worst.max(e),
                Err(Error::KinkProximity(_)) => {
                    rejected = true;
                    break;
                }
                Err(e) => panic!("grad check failed: {e}"),
            }
        }
        if !rejected {
            return worst;
        }
    }
    panic!("no smooth sample found in 100 draws");
}
