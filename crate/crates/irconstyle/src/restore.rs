//! The general restoration network: a U-Net with replaceable process blocks,
//! unified down/upsampling (1×1 conv + pixel un/shuffle), concat skips, and
//! affine injection of ConStyle latent features at each scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::constyle::{ConStyleConfig, LatentBundle};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, Parameter};
use crate::tensor::{Scalar, Tensor};

/// The pluggable operator filling the Process slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Conv3×3 → leaky_relu → Conv3×3 with an additive skip.
    Residual,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub width: usize,
    pub blocks_left: Vec<usize>,
    pub blocks_bottom: usize,
    pub blocks_right: Vec<usize>,
    pub levels: usize,
    pub block_kind: BlockKind,
    pub negative_slope: f64,
}

impl Default for NetConfig {
    /// Desk-scale default; trains in minutes on a CPU.
    fn default() -> Self {
        NetConfig {
            width: 16,
            blocks_left: vec![2, 2, 2],
            blocks_bottom: 2,
            blocks_right: vec![2, 2, 2],
            levels: 3,
            block_kind: BlockKind::Residual,
            negative_slope: 0.2,
        }
    }
}

impl NetConfig {
    /// The reference configuration: width 48, blocks [7,8,9]/9/[9,8,7].
    pub fn reference() -> Self {
        NetConfig {
            width: 48,
            blocks_left: vec![7, 8, 9],
            blocks_bottom: 9,
            blocks_right: vec![9, 8, 7],
            levels: 3,
            block_kind: BlockKind::Residual,
            negative_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be positive".into()));
        }
        if self.blocks_left.len() != self.levels || self.blocks_right.len() != self.levels {
            return Err(Error::Config(format!(
                "blocks_left/right must have {} entries, got {}/{}",
                self.levels,
                self.blocks_left.len(),
                self.blocks_right.len()
            )));
        }
        if self.width == 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!(
                "width {} must be positive and even",
                self.width
            )));
        }
        Ok(())
    }
}

struct ResBlock<T: Scalar> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    slope: T,
}

impl<T: Scalar> ResBlock<T> {
    fn new(name: &str, ch: usize, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), ch, ch, 3, 1, 1, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), ch, ch, 3, 1, 1, rng),
            slope: T::cast_f64(slope),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv1.forward(x)?.leaky_relu(self.slope)?;
        let y = self.conv2.forward(&y)?;
        x.add(&y)
    }

    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v
    }
}

/// 1×1 conv (C → C′/4) then pixel_unshuffle(2): halves H,W.
pub struct Downsample<T: Scalar> {
    conv: Conv2d<T>,
}

impl<T: Scalar> Downsample<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if out_ch % 4 != 0 {
            return Err(Error::Config(format!(
                "downsample output channels {out_ch} must be divisible by 4"
            )));
        }
        Ok(Downsample {
            conv: Conv2d::new(name, in_ch, out_ch / 4, 1, 1, 0, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::dim(format!("downsample: odd spatial dims {s:?}")));
        }
        self.conv.forward(x)?.pixel_unshuffle(2)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.conv.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.conv.params_mut()
    }
}

/// 1×1 conv (C → 4·C″) then pixel_shuffle(2): doubles H,W.
pub struct Upsample<T: Scalar> {
    conv: Conv2d<T>,
}

impl<T: Scalar> Upsample<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Upsample {
            conv: Conv2d::new(name, in_ch, out_ch * 4, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(x)?.pixel_shuffle(2)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.conv.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.conv.params_mut()
    }
}

/// Two zero-initialized 1×1 convs deriving per-channel scale γ and shift β
/// from a ConStyle feature map: F′ = (1+γ(M))⊙F + β(M). Identity at init.
pub struct AffineInjector<T: Scalar> {
    gamma: Conv2d<T>,
    beta: Conv2d<T>,
}

impl<T: Scalar> AffineInjector<T> {
    pub fn new(name: &str, map_ch: usize, feat_ch: usize) -> Self {
        AffineInjector {
            gamma: Conv2d::zeros_1x1(&format!("{name}.gamma"), map_ch, feat_ch),
            beta: Conv2d::zeros_1x1(&format!("{name}.beta"), map_ch, feat_ch),
        }
    }

    pub fn inject(&self, feat: &Tensor<T>, map: &Tensor<T>) -> Result<Tensor<T>> {
        let (fs, ms) = (feat.shape(), map.shape());
        if fs.len() != 4 || ms.len() != 4 || fs[2] != ms[2] || fs[3] != ms[3] {
            return Err(Error::dim(format!(
                "affine_inject: feature {fs:?} vs map {ms:?} scale mismatch"
            )));
        }
        let gamma = self.gamma.forward(map)?;
        let beta = self.beta.forward(map)?;
        feat.add(&feat.mul(&gamma)?)?.add(&beta)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.gamma.params();
        v.extend(self.beta.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.gamma.params_mut();
        v.extend(self.beta.params_mut());
        v
    }
}

struct EncLevel<T: Scalar> {
    blocks: Vec<ResBlock<T>>,
    down: Downsample<T>,
    injector: AffineInjector<T>,
}

struct DecLevel<T: Scalar> {
    up: Upsample<T>,
    skip_reduce: Conv2d<T>,
    blocks: Vec<ResBlock<T>>,
}

/// The U-Net of the framework, with a global residual from input to output.
pub struct RestorationNet<T: Scalar> {
    cfg: NetConfig,
    latent_dim: usize,
    preprocess: Conv2d<T>,
    enc: Vec<EncLevel<T>>,
    code_proj: Linear<T>,
    code_fuse: Conv2d<T>,
    bottom: Vec<ResBlock<T>>,
    dec: Vec<DecLevel<T>>,
    finetune: Conv2d<T>,
}

impl<T: Scalar> RestorationNet<T> {
    /// Deterministic construction from a seed. `constyle` fixes the channel
    /// widths of the injected feature maps and the latent code dimension.
    pub fn build(cfg: &NetConfig, constyle: &ConStyleConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if constyle.stages != cfg.levels {
            return Err(Error::Config(format!(
                "constyle stages {} must equal net levels {}",
                constyle.stages, cfg.levels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.width;
        let preprocess = Conv2d::new("preprocess", 3, w, 3, 1, 1, &mut rng);

        let mut enc = Vec::with_capacity(cfg.levels);
        for i in 0..cfg.levels {
            let ch = w << i;
            let next = ch * 2;
            let blocks = (0..cfg.blocks_left[i])
                .map(|j| ResBlock::new(&format!("enc{i}.block{j}"), ch, cfg.negative_slope, &mut rng))
                .collect();
            let down = Downsample::new(&format!("down{i}"), ch, next, &mut rng)?;
            let injector = AffineInjector::new(&format!("inj{i}"), constyle.width << i, next);
            enc.push(EncLevel {
                blocks,
                down,
                injector,
            });
        }

        let bottom_ch = w << cfg.levels;
        let code_proj = Linear::new("code_proj", constyle.latent_dim, bottom_ch, &mut rng);
        let code_fuse = Conv2d::zeros_1x1("code_fuse", bottom_ch, bottom_ch);
        let bottom = (0..cfg.blocks_bottom)
            .map(|j| ResBlock::new(&format!("bottom.block{j}"), bottom_ch, cfg.negative_slope, &mut rng))
            .collect();

        let mut dec = Vec::with_capacity(cfg.levels);
        for i in (0..cfg.levels).rev() {
            let ch = w << i;
            let up = Upsample::new(&format!("up{i}"), ch * 2, ch, &mut rng);
            let skip_reduce = Conv2d::new(&format!("skip{i}"), ch * 2, ch, 1, 1, 0, &mut rng);
            let blocks = (0..cfg.blocks_right[i])
                .map(|j| ResBlock::new(&format!("dec{i}.block{j}"), ch, cfg.negative_slope, &mut rng))
                .collect();
            dec.push(DecLevel {
                up,
                skip_reduce,
                blocks,
            });
        }
        let finetune = Conv2d::new("finetune", w, 3, 3, 1, 1, &mut rng);

        Ok(RestorationNet {
            cfg: cfg.clone(),
            latent_dim: constyle.latent_dim,
            preprocess,
            enc,
            code_proj,
            code_fuse,
            bottom,
            dec,
            finetune,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// restored = U-Net(degraded, bundle) + degraded. With `inject` unset the
    /// output is a pure function of `degraded` and the net's parameters.
    pub fn forward(
        &self,
        degraded: &Tensor<T>,
        bundle: &LatentBundle<T>,
        inject: bool,
    ) -> Result<Tensor<T>> {
        let s = degraded.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim(format!("forward: expected (N,3,H,W), got {s:?}")));
        }
        let div = 1 << self.cfg.levels;
        if s[2] % div != 0 || s[3] % div != 0 {
            return Err(Error::dim(format!(
                "forward: spatial dims of {s:?} not divisible by {div}"
            )));
        }
        if inject && bundle.feature_maps.len() != self.cfg.levels {
            return Err(Error::dim(format!(
                "forward: {} feature maps for {} levels",
                bundle.feature_maps.len(),
                self.cfg.levels
            )));
        }

        let mut x = self.preprocess.forward(degraded)?;
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for (i, level) in self.enc.iter().enumerate() {
            for b in &level.blocks {
                x = b.forward(&x)?;
            }
            skips.push(x.clone());
            x = level.down.forward(&x)?;
            if inject {
                x = level.injector.inject(&x, &bundle.feature_maps[i])?;
            }
        }

        if inject {
            if bundle.code.shape() != [s[0], self.latent_dim] {
                return Err(Error::dim(format!(
                    "forward: code {:?} vs expected ({}, {})",
                    bundle.code.shape(),
                    s[0],
                    self.latent_dim
                )));
            }
            let (bh, bw) = (x.shape()[2], x.shape()[3]);
            let code = self.code_proj.forward(&bundle.code)?;
            let code = code
                .reshape(&[s[0], code.shape()[1], 1, 1])?
                .broadcast_spatial(bh, bw)?;
            x = x.add(&self.code_fuse.forward(&code)?)?;
        }
        for b in &self.bottom {
            x = b.forward(&x)?;
        }

        for (level, skip) in self.dec.iter().zip(skips.iter().rev()) {
            x = level.up.forward(&x)?;
            x = Tensor::concat(&[x, skip.clone()], 1)?;
            x = level.skip_reduce.forward(&x)?;
            for b in &level.blocks {
                x = b.forward(&x)?;
            }
        }

        self.finetune.forward(&x)?.add(degraded)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.preprocess.params();
        for l in &self.enc {
            for b in &l.blocks {
                v.extend(b.params());
            }
            v.extend(l.down.params());
            v.extend(l.injector.params());
        }
        v.extend(self.code_proj.params());
        v.extend(self.code_fuse.params());
        for b in &self.bottom {
            v.extend(b.params());
        }
        for l in &self.dec {
            v.extend(l.up.params());
            v.extend(l.skip_reduce.params());
            for b in &l.blocks {
                v.extend(b.params());
            }
        }
        v.extend(self.finetune.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.preprocess.params_mut();
        for l in &mut self.enc {
            for b in &mut l.blocks {
                v.extend(b.params_mut());
            }
            v.extend(l.down.params_mut());
            v.extend(l.injector.params_mut());
        }
        v.extend(self.code_proj.params_mut());
        v.extend(self.code_fuse.params_mut());
        for b in &mut self.bottom {
            v.extend(b.params_mut());
        }
        for l in &mut self.dec {
            v.extend(l.up.params_mut());
            v.extend(l.skip_reduce.params_mut());
            for b in &mut l.blocks {
                v.extend(b.params_mut());
            }
        }
        v.extend(self.finetune.params_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}
