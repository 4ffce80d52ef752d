//! Feature-aware noise addition.
//!
//! A frozen single-channel convolution followed by a sigmoid scores every
//! pixel; the top `round(ρ·H·W)` pixels are set to zero in all channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{images_to_batch, init_bound, BranchParams};
use crate::error::{Error, Result};
use crate::tensorcore::{bilinear_resize, conv2d, sigmoid, Tensor, BN_EPS};

/// Where the probe's weights come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeSource {
    /// A randomly initialized 3×3 convolution, frozen for the whole run.
    #[default]
    DedicatedProbe,
    /// Channel average of θ's first convolution.
    BranchFirstConv,
    /// Channel average of θ's first convolution followed by its batchnorm.
    BranchFirstBatchnorm,
}

impl std::str::FromStr for ProbeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dedicated-probe" => Ok(ProbeSource::DedicatedProbe),
            "branch-first-conv" => Ok(ProbeSource::BranchFirstConv),
            "branch-first-batchnorm" => Ok(ProbeSource::BranchFirstBatchnorm),
            other => Err(Error::Config(format!("unknown probe source {other:?}"))),
        }
    }
}

/// Frozen convolution producing the activation map. Never part of a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationProbe {
    /// `[1, C, k, k]`
    pub weight: Tensor,
    /// `[1]`
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub source: ProbeSource,
}

impl ActivationProbe {
    /// Random 3×3 probe with stride 1 and padding 1, so the map already has
    /// the image's extents.
    pub fn dedicated(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        let fan_in = in_channels * 9;
        let bound = init_bound(fan_in);
        let data = (0..fan_in).map(|_| rng.random_range(-bound..bound)).collect();
        ActivationProbe {
            weight: Tensor::new(vec![1, in_channels, 3, 3], data).expect("finite init"),
            bias: Tensor::zeros(&[1]),
            stride: 1,
            pad: 1,
            source: ProbeSource::DedicatedProbe,
        }
    }

    /// Snapshot of θ's first stage collapsed to one output channel.
    ///
    /// Averaging filters equals averaging the channel responses, and an
    /// eval-mode batchnorm is a per-channel affine map, so both variants fold
    /// into a single convolution.
    pub fn from_branch(theta: &BranchParams, source: ProbeSource) -> Result<Self> {
        let stage = theta
            .stages
            .first()
            .ok_or_else(|| Error::contract("branch has no stages"))?;
        let dims = stage.weight.dims();
        let (o, per_filter) = (dims[0], dims[1] * dims[2] * dims[3]);
        let mut weight = vec![0.0; per_filter];
        let mut bias = 0.0;
        for oc in 0..o {
            let (scale, shift) = match source {
                ProbeSource::BranchFirstConv => (1.0, stage.bias.data()[oc]),
                ProbeSource::BranchFirstBatchnorm => {
                    let inv = 1.0 / (stage.running_var.data()[oc] + BN_EPS).sqrt();
                    let g = stage.bn_gamma.data()[oc] * inv;
                    (
                        g,
                        g * (stage.bias.data()[oc] - stage.running_mean.data()[oc])
                            + stage.bn_beta.data()[oc],
                    )
                }
                ProbeSource::DedicatedProbe => {
                    return Err(Error::contract("dedicated probes are not derived from a branch"))
                }
            };
            let filter = &stage.weight.data()[oc * per_filter..(oc + 1) * per_filter];
            for (w, &f) in weight.iter_mut().zip(filter) {
                *w += scale * f / o as f64;
            }
            bias += shift / o as f64;
        }
        Ok(ActivationProbe {
            weight: Tensor::new(vec![1, dims[1], dims[2], dims[3]], weight)?,
            bias: Tensor::new(vec![1], vec![bias])?,
            stride: theta.stride,
            pad: theta.pad,
            source,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FanaConfig {
    /// Fraction of pixels to contaminate.
    pub rho: f64,
    /// Erase square blocks of this side around the top pixels instead of
    /// single pixels. The mask cardinality stays `round(ρ·H·W)`.
    pub patch: Option<usize>,
}

impl Default for FanaConfig {
    fn default() -> Self {
        FanaConfig {
            rho: 0.05,
            patch: None,
        }
    }
}

impl FanaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("noise proportion {} outside [0, 1]", self.rho)));
        }
        if self.patch == Some(0) {
            return Err(Error::Config("patch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Binary noise-position map.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
    /// Activation of the weakest selected seed pixel, `None` when nothing was selected.
    pub threshold: Option<f64>,
}

impl NoiseMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.height, self.width], data).expect("finite mask")
    }
}

/// `sigmoid(W ∗ x + b)` resized back to the image's `H×W`.
pub fn activation_map(probe: &ActivationProbe, image: &Tensor) -> Result<Tensor> {
    if image.ndim() != 3 || image.dims()[2] != probe.in_channels() {
        return Err(Error::shape(format!(
            "probe expects [H, W, {}] images, got {:?}",
            probe.in_channels(),
            image.dims()
        )));
    }
    let (h, w) = (image.dims()[0], image.dims()[1]);
    let batch = images_to_batch(&[image])?;
    let response = conv2d(&batch, &probe.weight, &probe.bias, probe.stride, probe.pad)?;
    let (mh, mw) = (response.dims()[2], response.dims()[3]);
    let activated = response.map(sigmoid).reshape(&[mh, mw, 1])?;
    bilinear_resize(&activated, h, w)?.reshape(&[h, w])
}

/// Pixels ranked by activation, strongest first, row-major among ties.
fn ranked_pixels(map: &Tensor) -> Vec<usize> {
    let mut order: Vec<usize> = (0..map.numel()).collect();
    let v = map.data();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    order
}

/// Selects exactly `round(ρ·H·W)` pixels with the highest activation.
pub fn noise_mask(map: &Tensor, rho: f64) -> Result<NoiseMask> {
    noise_mask_with(map, &FanaConfig { rho, patch: None })
}

pub fn noise_mask_with(map: &Tensor, config: &FanaConfig) -> Result<NoiseMask> {
    config.validate()?;
    if map.ndim() != 2 {
        return Err(Error::shape(format!("activation map must be [H, W], got {:?}", map.dims())));
    }
    map.check_finite("activation map")?;
    let (h, w) = (map.dims()[0], map.dims()[1]);
    let k = (config.rho * (h * w) as f64).round() as usize;
    let mut bits = vec![false; h * w];
    let mut threshold = None;
    let mut selected = 0;
    for p in ranked_pixels(map) {
        if selected == k {
            break;
        }
        if bits[p] {
            continue;
        }
        threshold = Some(map.data()[p]);
        match config.patch {
            None | Some(1) => {
                bits[p] = true;
                selected += 1;
            }
            Some(size) => {
                let (py, px) = (p / w, p % w);
                let y0 = py.saturating_sub(size / 2);
                let x0 = px.saturating_sub(size / 2);
                'block: for y in y0..(y0 + size).min(h) {
                    for x in x0..(x0 + size).min(w) {
                        if selected == k {
                            break 'block;
                        }
                        if !bits[y * w + x] {
                            bits[y * w + x] = true;
                            selected += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(NoiseMask {
        height: h,
        width: w,
        bits,
        threshold,
    })
}

/// Zeroes every channel of masked pixels; other pixels are copied unchanged.
pub fn apply_pepper_noise(image: &Tensor, mask: &NoiseMask) -> Result<Tensor> {
    if image.ndim() != 3 || image.dims()[0] != mask.height || image.dims()[1] != mask.width {
        return Err(Error::shape(format!(
            "mask {}x{} does not match image {:?}",
            mask.height,
            mask.width,
            image.dims()
        )));
    }
    let c = image.dims()[2];
    let mut data = image.data().to_vec();
    for (p, _) in mask.bits.iter().enumerate().filter(|(_, &b)| b) {
        data[p * c..(p + 1) * c].fill(0.0);
    }
    Tensor::new(image.dims().to_vec(), data)
}

#[derive(Clone, Debug)]
pub struct FanaOutput {
    pub map: Tensor,
    pub mask: NoiseMask,
    pub noised: Tensor,
}

/// Full pipeline: activation map, mask, pepper noise.
pub fn fana(probe: &ActivationProbe, image: &Tensor, config: &FanaConfig) -> Result<FanaOutput> {
    let map = activation_map(probe, image)?;
    let mask = noise_mask_with(&map, config)?;
    let noised = apply_pepper_noise(image, &mask)?;
    Ok(FanaOutput { map, mask, noised })
}

/// Noised copies of a whole image set.
pub fn noise_images(probe: &ActivationProbe, images: &[Tensor], config: &FanaConfig) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|img| fana(probe, img, config).map(|o| o.noised))
        .collect()
}
