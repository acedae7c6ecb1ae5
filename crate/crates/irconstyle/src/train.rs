//! Training loop: AdamW with cosine annealing, the per-iteration contrastive
//! + restoration objective, ablation runs, and binary checkpoints.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::constyle::{
    self, ConStyle, ConStyleConfig, InfoNceConvention, NegativeQueue, Temperature,
    DEFAULT_EMA_MOMENTUM, DEFAULT_QUEUE_CAPACITY, DEFAULT_TEMPERATURE,
};
use crate::degrade::{self, DegradationSpec, PatchSampler, Sigma};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::nn::Parameter;
use crate::restore::{NetConfig, RestorationNet};
use crate::tensor::{Scalar, Tensor};

pub const G1_QUEUE_CAPACITY: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub style: f64,
    pub content: f64,
    pub infonce: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            style: 1.0,
            content: 1.0,
            infonce: 1.0,
            l1: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Guideline 1: shrink the negative queue to 16.
    pub g1_small_queue: bool,
    /// Guideline 2: withhold the latent feature bundle from the net.
    pub g2_no_feature_maps: bool,
    /// Guideline 3: source queue and positive from the momentum encoder's
    /// view of the degraded image (the DASR/AirNet pretext task).
    pub g3_queue_behind_momentum: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub patch: usize,
    pub batch: usize,
    pub total_iters: u64,
    pub queue_capacity: usize,
    pub temperature: f64,
    pub ema_momentum: f64,
    pub loss_weights: LossWeights,
    pub ablation: AblationFlags,
    pub seed: u64,
    pub net: NetConfig,
    pub constyle: ConStyleConfig,
    pub convention: InfoNceConvention,
    /// Optional floor on the (negative) style term; cuts its gradient once
    /// saturated. Off by default.
    pub style_clamp: Option<f64>,
    /// Optional global-norm gradient clip. Off by default.
    pub grad_clip: Option<f64>,
    pub degradation: DegradationSpec,
    pub augment: bool,
    pub checkpoint_every: u64,
    pub data_manifest: Option<String>,
    pub eval_manifest: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 3e-4,
            lr_final: 1e-6,
            betas: (0.9, 0.999),
            weight_decay: 1e-4,
            patch: 128,
            batch: 4,
            total_iters: 2000,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            temperature: DEFAULT_TEMPERATURE,
            ema_momentum: DEFAULT_EMA_MOMENTUM,
            loss_weights: LossWeights::default(),
            ablation: AblationFlags::default(),
            seed: 0,
            net: NetConfig::default(),
            constyle: ConStyleConfig::default(),
            convention: InfoNceConvention::Moco,
            style_clamp: None,
            grad_clip: None,
            degradation: DegradationSpec::GaussianNoise {
                sigma: Sigma::Range(0.0, 50.0),
            },
            augment: true,
            checkpoint_every: 500,
            data_manifest: None,
            eval_manifest: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_final >= self.lr_init {
            return Err(Error::Config(format!(
                "lr_final {} must be below lr_init {}",
                self.lr_final, self.lr_init
            )));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.total_iters < 1 {
            return Err(Error::Config("total_iters must be >= 1".into()));
        }
        let w = &self.loss_weights;
        if w.style < 0.0 || w.content < 0.0 || w.infonce < 0.0 || w.l1 < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "ema_momentum {} not in [0,1)",
                self.ema_momentum
            )));
        }
        self.net.validate()?;
        if self.patch % (1 << self.net.levels) != 0 {
            return Err(Error::Config(format!(
                "patch {} not divisible by 2^{}",
                self.patch, self.net.levels
            )));
        }
        self.degradation.validate()?;
        Ok(())
    }

    /// Queue capacity after the Guideline-1 flag.
    pub fn effective_queue_capacity(&self) -> usize {
        if self.ablation.g1_small_queue {
            G1_QUEUE_CAPACITY
        } else {
            self.queue_capacity
        }
    }
}

/// lr_final + 0.5·(lr_init − lr_final)·(1 + cos(π·iter/total_iters))
pub fn cosine_lr(iter: u64, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.total_iters {
        return Err(Error::Contract(format!(
            "cosine_lr: iter {iter} past horizon {}",
            cfg.total_iters
        )));
    }
    let frac = iter as f64 / cfg.total_iters as f64;
    Ok(cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (PI * frac).cos()))
}

/// AdamW with bias correction and decoupled weight decay. Moment buffers are
/// keyed by parameter name; the step counter is global.
pub struct AdamW<T: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        AdamW {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn moments(&self) -> &HashMap<String, (Vec<T>, Vec<T>)> {
        &self.moments
    }

    pub(crate) fn restore(&mut self, step: u64, moments: HashMap<String, (Vec<T>, Vec<T>)>) {
        self.step = step;
        self.moments = moments;
    }

    /// One update over `params`. A missing gradient counts as zero;
    /// `grad_scale` pre-multiplies every gradient (global-norm clipping).
    pub fn step(&mut self, params: &mut [&mut Parameter<T>], lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            let grad = p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter {}",
                    p.name()
                )));
            }
            let (m, v) = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]));
            let mut data = p.tensor().data().to_vec();
            for i in 0..data.len() {
                let g = Scalar::to_f64(grad[i]) * grad_scale;
                let mi = self.beta1 * Scalar::to_f64(m[i]) + (1.0 - self.beta1) * g;
                let vi = self.beta2 * Scalar::to_f64(v[i]) + (1.0 - self.beta2) * g * g;
                m[i] = T::cast_f64(mi);
                v[i] = T::cast_f64(vi);
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                let x = Scalar::to_f64(data[i]);
                data[i] = T::cast_f64(
                    x - lr * self.weight_decay * x - lr * m_hat / (v_hat.sqrt() + self.eps),
                );
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// Per-step loss components. `total` is the weighted sum of the components
/// (exactly, in f64); the graph total driving backward matches it to
/// element-type precision.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossBreakdown {
    pub iter: u64,
    pub lr: f64,
    pub l1: f64,
    pub infonce: f64,
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub constyle: ConStyle<T>,
    pub net: RestorationNet<T>,
    pub opt: AdamW<T>,
    pub iter: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let constyle = ConStyle::new(
            &cfg.constyle,
            cfg.effective_queue_capacity(),
            cfg.seed.wrapping_add(1),
        )?;
        let net = RestorationNet::build(&cfg.net, &cfg.constyle, cfg.seed)?;
        let opt = AdamW::new(cfg.betas, cfg.weight_decay);
        Ok(Trainer {
            cfg,
            constyle,
            net,
            opt,
            iter: 0,
        })
    }

    fn inject(&self) -> bool {
        !self.cfg.ablation.g2_no_feature_maps
    }

    /// One optimization step on an aligned (clean, degraded) batch.
    ///
    /// Per iteration: encode the degraded batch (query q + feature bundle),
    /// take the positive from the momentum encoder, restore, combine the four
    /// loss terms, update encoder+net, EMA the momentum encoder, and feed the
    /// queue. InfoNCE sees the queue before this step's codes enter it, so a
    /// code is never its own negative; the push happens right before the
    /// style term because that term consumes the exemplars the push exposes.
    pub fn train_step(&mut self, clean: &Tensor<T>, degraded: &Tensor<T>) -> Result<LossBreakdown> {
        if clean.shape() != degraded.shape() {
            return Err(Error::dim(format!(
                "train_step: clean {:?} vs degraded {:?}",
                clean.shape(),
                degraded.shape()
            )));
        }
        let lr = cosine_lr(self.iter, &self.cfg)?;
        let g3 = self.cfg.ablation.g3_queue_behind_momentum;
        let w = self.cfg.loss_weights;
        let temp = Temperature::new(T::cast_f64(self.cfg.temperature))?;

        let bundle = self.constyle.encoder.encode(degraded)?;
        let q = bundle.code.clone();
        let k = self.constyle.momentum.encode(clean)?.code.detach();
        // Guideline-3 ablation: positive and queue both come from the
        // momentum encoder's view of the degraded image
        let k_prime = if g3 {
            Some(self.constyle.momentum.encode(degraded)?.code.detach())
        } else {
            None
        };

        let restored = self.net.forward(degraded, &bundle, self.inject())?;
        let l1 = restored.l1_loss(clean)?;

        let convention = if g3 {
            InfoNceConvention::Dasr
        } else {
            self.cfg.convention
        };
        let positive = k_prime.as_ref().unwrap_or(&k);
        let infonce = if self.constyle.queue.is_empty() {
            None // cold queue: term joins once negatives exist
        } else {
            Some(constyle::info_nce(
                &q,
                positive,
                &self.constyle.queue,
                temp,
                convention,
            )?)
        };
        let content = constyle::content_loss(&q, &k)?;

        let to_push = if g3 { positive.clone() } else { q.detach() };
        let (q1, q2) = self.constyle.queue.push(&to_push)?;
        let style = constyle::style_loss(
            &q,
            q1.as_ref(),
            q2.as_ref(),
            self.cfg.style_clamp.map(T::cast_f64),
        )?;

        let l1_v = Scalar::to_f64(l1.item()?);
        let infonce_v = infonce
            .as_ref()
            .map(|t| Scalar::to_f64(t.item().unwrap()))
            .unwrap_or(0.0);
        let content_v = Scalar::to_f64(content.item()?);
        let style_v = Scalar::to_f64(style.value.item()?);
        let total_v =
            w.l1 * l1_v + w.infonce * infonce_v + w.content * content_v + w.style * style_v;
        let breakdown = LossBreakdown {
            iter: self.iter,
            lr,
            l1: l1_v,
            infonce: infonce_v,
            content: content_v,
            style: style_v,
            total: total_v,
        };
        if !total_v.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss: {}",
                serde_json::to_string(&breakdown)?
            )));
        }

        let mut total = l1.scale(T::cast_f64(w.l1))?;
        if let Some(n) = &infonce {
            total = total.add(&n.scale(T::cast_f64(w.infonce))?)?;
        }
        total = total.add(&content.scale(T::cast_f64(w.content))?)?;
        if style.active {
            total = total.add(&style.value.scale(T::cast_f64(w.style))?)?;
        }
        total.backward()?;

        let mut params: Vec<&mut Parameter<T>> = self.constyle.encoder.params_mut();
        params.extend(self.net.params_mut());
        let grad_scale = match self.cfg.grad_clip {
            Some(c) => {
                let mut sq = 0.0;
                for p in &params {
                    if let Some(g) = p.grad() {
                        sq += g.iter().map(|v| Scalar::to_f64(*v).powi(2)).sum::<f64>();
                    }
                }
                let norm = sq.sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.opt.step(&mut params, lr, grad_scale)?;

        constyle::ema_update(
            &mut self.constyle.momentum,
            &self.constyle.encoder,
            T::cast_f64(self.cfg.ema_momentum),
        )?;
        self.iter += 1;
        Ok(breakdown)
    }

    /// Restore a batch; encoder + net only (the momentum encoder and queue
    /// play no part at inference).
    pub fn infer(&self, degraded: &Tensor<T>) -> Result<Tensor<T>> {
        let bundle = self.constyle.encoder.encode(degraded)?;
        self.net.forward(degraded, &bundle, self.inject())
    }
}

/// Per-iteration seed: every step's data draw is a pure function of
/// (config seed, iteration), so resumed runs replay the identical stream.
pub fn step_seed(seed: u64, iter: u64) -> u64 {
    // splitmix64
    let mut z = seed ^ iter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Drive `iters` training steps off the sampler, reseeding it per iteration.
pub fn train_loop<T: Scalar>(
    trainer: &mut Trainer<T>,
    sampler: &mut PatchSampler<T>,
    iters: u64,
    mut on_step: impl FnMut(&LossBreakdown) -> Result<()>,
) -> Result<()> {
    for _ in 0..iters {
        sampler.reseed(step_seed(trainer.cfg.seed, trainer.iter));
        let (clean, degraded) =
            sampler.sample_batch(&trainer.cfg.degradation, trainer.cfg.batch)?;
        let b = trainer.train_step(&clean, &degraded)?;
        on_step(&b)?;
    }
    Ok(())
}

fn clamp01<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let data = t
        .data()
        .iter()
        .map(|v| T::cast_f64(Scalar::to_f64(*v).clamp(0.0, 1.0)))
        .collect();
    Tensor::new(&t.shape().to_vec(), data).unwrap()
}

/// Degrade each corpus image and score infer(degraded) against the clean
/// original. With no model, the degraded input itself is scored (baseline
/// pass-through). Unreadable or undersized images are logged to stderr and
/// skipped; `count` reflects the survivors.
pub fn evaluate<T: Scalar>(
    model: Option<&Trainer<T>>,
    paths: &[PathBuf],
    spec: &DegradationSpec,
    seed: u64,
    name: Option<String>,
) -> Result<MetricReport> {
    let div = model.map(|m| 1usize << m.cfg.net.levels).unwrap_or(1);
    let mut pairs = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        let clean = match degrade::load_png::<T>(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("eval: skipping {}: {e}", path.display());
                continue;
            }
        };
        let s = clean.shape();
        let (h, w) = (s[1] / div * div, s[2] / div * div);
        if h == 0 || w == 0 {
            eprintln!(
                "eval: skipping {}: {}x{} below the net's {div}-pixel granularity",
                path.display(),
                s[2],
                s[1]
            );
            continue;
        }
        let clean = crop(&clean, h, w);
        let run = || -> Result<Tensor<T>> {
            let degraded = degrade::apply(spec, &clean.reshape(&[1, 3, h, w])?, seed.wrapping_add(i as u64))?;
            let restored = match model {
                Some(m) => clamp01(&m.infer(&degraded)?),
                None => degraded,
            };
            restored.reshape(&[3, h, w])
        };
        match run() {
            Ok(restored) => pairs.push((
                metrics::psnr(&restored, &clean)?,
                metrics::ssim(&restored, &clean)?,
            )),
            Err(e) => eprintln!("eval: skipping {}: {e}", path.display()),
        }
    }
    MetricReport::from_pairs(name, &pairs)
}

fn crop<T: Scalar>(img: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = img.shape();
    if s[1] == h && s[2] == w {
        return img.clone();
    }
    let (sh, sw) = (s[1], s[2]);
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data.push(img.data()[c * sh * sw + y * sw + x]);
            }
        }
    }
    Tensor::new(&[3, h, w], data).unwrap()
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationEntry {
    pub variant: String,
    pub queue_capacity: usize,
    pub report: MetricReport,
}

/// Train the baseline plus each single-guideline ablation under the same
/// seed, evaluating every variant on the same held-out corpus.
pub fn run_ablation<T: Scalar>(
    base: &TrainConfig,
    train_paths: &[PathBuf],
    eval_paths: &[PathBuf],
    mut on_log: impl FnMut(&str, &LossBreakdown),
) -> Result<Vec<AblationEntry>> {
    let variants: [(&str, AblationFlags); 4] = [
        ("baseline", AblationFlags::default()),
        (
            "g1_small_queue",
            AblationFlags {
                g1_small_queue: true,
                ..Default::default()
            },
        ),
        (
            "g2_no_feature_maps",
            AblationFlags {
                g2_no_feature_maps: true,
                ..Default::default()
            },
        ),
        (
            "g3_queue_behind_momentum",
            AblationFlags {
                g3_queue_behind_momentum: true,
                ..Default::default()
            },
        ),
    ];
    let mut out = Vec::new();
    for (name, flags) in variants {
        let mut cfg = base.clone();
        cfg.ablation = flags;
        let mut trainer = Trainer::<T>::new(cfg.clone())?;
        let mut sampler =
            PatchSampler::<T>::new(train_paths.to_vec(), cfg.patch, cfg.augment, cfg.seed)?;
        train_loop(&mut trainer, &mut sampler, cfg.total_iters, |b| {
            on_log(name, b);
            Ok(())
        })?;
        let report = evaluate(
            Some(&trainer),
            eval_paths,
            &cfg.degradation,
            cfg.seed.wrapping_add(0xEA11),
            Some(name.to_string()),
        )?;
        out.push(AblationEntry {
            variant: name.to_string(),
            queue_capacity: trainer.constyle.queue.capacity(),
            report,
        });
    }
    Ok(out)
}

// ---- checkpoints ----

pub const CKPT_MAGIC: &[u8; 8] = b"CSTYLCKP";
pub const CKPT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for d in shape {
        put_u64(buf, *d as u64);
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl<T: Scalar> Trainer<T> {
    /// Little-endian binary snapshot: magic, version, named f32 tensors
    /// (model parameters and optimizer moments), counters, queue rows, and
    /// the config echoed as JSON.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut buf, CKPT_VERSION);

        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        let groups: [(&str, Vec<&Parameter<T>>); 3] = [
            ("encoder", self.constyle.encoder.params()),
            ("momentum", self.constyle.momentum.params()),
            ("net", self.net.params()),
        ];
        for (prefix, params) in groups {
            for p in params {
                tensors.push((
                    format!("{prefix}.{}", p.name()),
                    p.shape().to_vec(),
                    p.tensor().data().iter().map(|v| Scalar::to_f64(*v) as f32).collect(),
                ));
            }
        }
        let mut moment_names: Vec<&String> = self.opt.moments().keys().collect();
        moment_names.sort();
        for name in moment_names {
            let (m, v) = &self.opt.moments()[name];
            tensors.push((
                format!("opt.m.{name}"),
                vec![m.len()],
                m.iter().map(|x| Scalar::to_f64(*x) as f32).collect(),
            ));
            tensors.push((
                format!("opt.v.{name}"),
                vec![v.len()],
                v.iter().map(|x| Scalar::to_f64(*x) as f32).collect(),
            ));
        }
        put_u64(&mut buf, tensors.len() as u64);
        for (name, shape, data) in &tensors {
            put_tensor(&mut buf, name, shape, data.iter().copied());
        }

        put_u64(&mut buf, self.iter);
        put_u64(&mut buf, self.opt.step_count());

        put_u64(&mut buf, self.constyle.queue.len() as u64);
        put_u64(&mut buf, self.constyle.queue.dim() as u64);
        for row in self.constyle.queue.entries() {
            for v in row {
                buf.extend_from_slice(&(Scalar::to_f64(*v) as f32).to_le_bytes());
            }
        }

        let cfg_json = serde_json::to_vec(&self.cfg)?;
        put_u64(&mut buf, cfg_json.len() as u64);
        buf.extend_from_slice(&cfg_json);

        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        f.write_all(&buf)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
            .read_to_end(&mut raw)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut r = Reader { buf: &raw, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic, not a checkpoint",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: version {version}, expected {CKPT_VERSION}",
                path.display()
            )));
        }

        let n_tensors = r.u64()? as usize;
        let mut tensors: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
        for _ in 0..n_tensors {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f32s(numel)?;
            tensors.insert(name, (shape, data));
        }

        let iter = r.u64()?;
        let opt_step = r.u64()?;

        let q_rows = r.u64()? as usize;
        let q_dim = r.u64()? as usize;
        let mut rows = Vec::with_capacity(q_rows);
        for _ in 0..q_rows {
            rows.push(
                r.f32s(q_dim)?
                    .into_iter()
                    .map(|v| T::cast_f64(v as f64))
                    .collect::<Vec<T>>(),
            );
        }

        let json_len = r.u64()? as usize;
        let cfg: TrainConfig = serde_json::from_slice(r.take(json_len)?)?;

        let mut trainer = Trainer::<T>::new(cfg)?;
        let apply = |prefix: &str, params: Vec<&mut Parameter<T>>| -> Result<()> {
            for p in params {
                let key = format!("{prefix}.{}", p.name());
                let (shape, data) = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if shape != p.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {key}: shape {shape:?}, expected {:?}",
                        p.shape()
                    )));
                }
                p.set_data(data.iter().map(|v| T::cast_f64(*v as f64)).collect())?;
            }
            Ok(())
        };
        apply("encoder", trainer.constyle.encoder.params_mut())?;
        apply("momentum", trainer.constyle.momentum.params_mut())?;
        apply("net", trainer.net.params_mut())?;

        let mut moments = HashMap::new();
        for (name, (_, data)) in &tensors {
            if let Some(base) = name.strip_prefix("opt.m.") {
                let v = tensors
                    .get(&format!("opt.v.{base}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor opt.v.{base}")))?;
                moments.insert(
                    base.to_string(),
                    (
                        data.iter().map(|x| T::cast_f64(*x as f64)).collect(),
                        v.1.iter().map(|x| T::cast_f64(*x as f64)).collect(),
                    ),
                );
            }
        }
        trainer.opt.restore(opt_step, moments);

        trainer.constyle.queue = NegativeQueue::restore(
            trainer.cfg.effective_queue_capacity(),
            q_dim,
            rows,
        )?;
        trainer.iter = iter;
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::save_png;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            patch: 16,
            batch: 2,
            total_iters: 400,
            queue_capacity: 32,
            net: NetConfig {
                width: 4,
                blocks_left: vec![1, 1, 1],
                blocks_bottom: 1,
                blocks_right: vec![1, 1, 1],
                ..Default::default()
            },
            constyle: ConStyleConfig {
                width: 4,
                latent_dim: 8,
                mlp_hidden: 16,
                ..Default::default()
            },
            degradation: DegradationSpec::GaussianNoise {
                sigma: Sigma::Fixed(25.0),
            },
            ..Default::default()
        }
    }

    fn fixed_batch<T: Scalar>(cfg: &TrainConfig, seed: u64) -> (Tensor<T>, Tensor<T>) {
        let p = cfg.patch;
        let clean = Tensor::new(
            &[cfg.batch, 3, p, p],
            (0..cfg.batch * 3 * p * p)
                .map(|i| T::cast_f64(0.2 + 0.6 * ((i % 97) as f64 / 97.0)))
                .collect(),
        )
        .unwrap();
        let degraded = degrade::apply(&cfg.degradation, &clean, seed).unwrap();
        (clean, degraded)
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 3e-4);
        assert!((cosine_lr(cfg.total_iters, &cfg).unwrap() - 1e-6).abs() < 1e-18);
        let mid = cosine_lr(cfg.total_iters / 2, &cfg).unwrap();
        assert!((mid - (3e-4 + 1e-6) / 2.0).abs() < 1e-12, "mid {mid}");
        assert!(cosine_lr(cfg.total_iters + 1, &cfg).is_err());
    }

    #[test]
    fn adamw_hand_oracles() {
        // p=1, g=1, lr=0.1, wd=0 → update ≈ lr·m̂/(√v̂+ε) ≈ 0.1
        let mut p = Parameter::<f64>::new("p", &[1], vec![1.0]).unwrap();
        p.tensor().accumulate_grad(&[1.0]);
        let mut opt = AdamW::new((0.9, 0.999), 0.0);
        opt.step(&mut [&mut p], 0.1, 1.0).unwrap();
        assert!((p.tensor().data()[0] - 0.9).abs() < 1e-6);

        // decoupled decay adds lr·wd·p = 0.01
        let mut p = Parameter::<f64>::new("p", &[1], vec![1.0]).unwrap();
        p.tensor().accumulate_grad(&[1.0]);
        let mut opt = AdamW::new((0.9, 0.999), 0.1);
        opt.step(&mut [&mut p], 0.1, 1.0).unwrap();
        assert!((p.tensor().data()[0] - 0.89).abs() < 1e-6);

        // zero gradient, zero decay: untouched
        let mut p = Parameter::<f64>::new("p", &[1], vec![1.0]).unwrap();
        let mut opt = AdamW::new((0.9, 0.999), 0.0);
        opt.step(&mut [&mut p], 0.1, 1.0).unwrap();
        assert_eq!(p.tensor().data()[0], 1.0);
    }

    #[test]
    fn adamw_nan_grad_names_parameter() {
        let mut p = Parameter::<f64>::new("enc.fc1.weight", &[1], vec![1.0]).unwrap();
        p.tensor().accumulate_grad(&[f64::NAN]);
        let mut opt = AdamW::new((0.9, 0.999), 0.0);
        let err = opt.step(&mut [&mut p], 0.1, 1.0).unwrap_err().to_string();
        assert!(err.contains("enc.fc1.weight"), "{err}");
    }

    #[test]
    fn step_grows_queue_and_keeps_ema_identity() {
        let cfg = tiny_cfg();
        let mut t = Trainer::<f64>::new(cfg.clone()).unwrap();
        let (clean, degraded) = fixed_batch::<f64>(&cfg, 1);
        let before_mom: Vec<Vec<f64>> = t
            .constyle
            .momentum
            .params()
            .iter()
            .map(|p| p.tensor().data().to_vec())
            .collect();
        assert_eq!(t.constyle.queue.len(), 0);
        t.train_step(&clean, &degraded).unwrap();
        assert_eq!(t.constyle.queue.len(), cfg.batch);
        assert_eq!(t.iter, 1);

        let m = cfg.ema_momentum;
        for ((mom, enc), old) in t
            .constyle
            .momentum
            .params()
            .iter()
            .zip(t.constyle.encoder.params())
            .zip(&before_mom)
        {
            for ((a, e), o) in mom.tensor().data().iter().zip(enc.tensor().data()).zip(old) {
                assert!((a - (m * o + (1.0 - m) * e)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l1_only_weights_make_total_equal_l1() {
        let mut cfg = tiny_cfg();
        cfg.loss_weights = LossWeights {
            style: 0.0,
            content: 0.0,
            infonce: 0.0,
            l1: 1.0,
        };
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let (clean, degraded) = fixed_batch::<f32>(&cfg, 1);
        t.train_step(&clean, &degraded).unwrap();
        let b = t.train_step(&clean, &degraded).unwrap();
        assert_eq!(b.total, b.l1);
    }

    #[test]
    fn loss_is_additive_in_components() {
        let cfg = tiny_cfg();
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let (clean, degraded) = fixed_batch::<f32>(&cfg, 1);
        for _ in 0..3 {
            let b = t.train_step(&clean, &degraded).unwrap();
            let w = cfg.loss_weights;
            let sum = w.l1 * b.l1 + w.infonce * b.infonce + w.content * b.content + w.style * b.style;
            assert!((b.total - sum).abs() < 1e-10);
        }
    }

    #[test]
    fn overfit_probe_reduces_loss() {
        let mut cfg = tiny_cfg();
        cfg.total_iters = 200;
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let (clean, degraded) = fixed_batch::<f32>(&cfg, 1);
        // fill the queue first: while it grows, the InfoNCE term's scale
        // grows with it and totals across steps aren't comparable
        for _ in 0..16 {
            t.train_step(&clean, &degraded).unwrap();
        }
        let first = t.train_step(&clean, &degraded).unwrap().total;
        let mut last = first;
        for _ in 17..200 {
            last = t.train_step(&clean, &degraded).unwrap().total;
        }
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn infer_ignores_momentum_encoder() {
        let cfg = tiny_cfg();
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let (_, degraded) = fixed_batch::<f32>(&cfg, 1);
        let a = t.infer(&degraded).unwrap();
        for p in t.constyle.momentum.params_mut() {
            let n = p.numel();
            p.set_data((0..n).map(|i| (i as f32).sin()).collect()).unwrap();
        }
        let b = t.infer(&degraded).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), degraded.shape());
    }

    #[test]
    fn g3_pushes_momentum_codes() {
        let mut cfg = tiny_cfg();
        cfg.ablation.g3_queue_behind_momentum = true;
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let (clean, degraded) = fixed_batch::<f32>(&cfg, 1);
        let expected = t.constyle.momentum.encode(&degraded).unwrap().code;
        t.train_step(&clean, &degraded).unwrap();
        let rows: Vec<&[f32]> = t.constyle.queue.entries().collect();
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(*row, &expected.data()[i * 8..(i + 1) * 8]);
        }
    }

    #[test]
    fn g1_shrinks_queue_capacity() {
        let mut cfg = tiny_cfg();
        cfg.ablation.g1_small_queue = true;
        let t = Trainer::<f32>::new(cfg).unwrap();
        assert_eq!(t.constyle.queue.capacity(), 16);
    }

    #[test]
    fn fixed_seed_training_is_bit_reproducible() {
        let cfg = tiny_cfg();
        let run = || {
            let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
            let (clean, degraded) = fixed_batch::<f32>(&cfg, 1);
            for _ in 0..5 {
                t.train_step(&clean, &degraded).unwrap();
            }
            t.net
                .params()
                .iter()
                .flat_map(|p| p.tensor().data().to_vec())
                .collect::<Vec<f32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let (clean, degraded) = fixed_batch::<f32>(&cfg, 1);
        let (clean2, degraded2) = fixed_batch::<f32>(&cfg, 2);

        let mut a = Trainer::<f32>::new(cfg.clone()).unwrap();
        for _ in 0..3 {
            a.train_step(&clean, &degraded).unwrap();
        }
        let path = dir.path().join("ck.bin");
        a.save_checkpoint(&path).unwrap();

        let mut b = Trainer::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(b.iter, 3);
        let ba = a.train_step(&clean2, &degraded2).unwrap();
        let bb = b.train_step(&clean2, &degraded2).unwrap();
        assert_eq!(ba.total, bb.total);
        for (pa, pb) in a.net.params().iter().zip(b.net.params()) {
            assert_eq!(pa.tensor().data(), pb.tensor().data());
        }
        for (pa, pb) in a.constyle.encoder.params().iter().zip(b.constyle.encoder.params()) {
            assert_eq!(pa.tensor().data(), pb.tensor().data());
        }
    }

    #[test]
    fn checkpoint_version_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let t = Trainer::<f32>::new(cfg).unwrap();
        let path = dir.path().join("ck.bin");
        t.save_checkpoint(&path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw[8] = 99; // version field
        std::fs::write(&path, raw).unwrap();
        let err = match Trainer::<f32>::load_checkpoint(&path) {
            Err(e) => e,
            Ok(_) => panic!("load succeeded on mismatched version"),
        };
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn evaluate_passthrough_matches_noise_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(6);
        let mut paths = Vec::new();
        for i in 0..4 {
            let img = Tensor::<f32>::new(
                &[3, 64, 64],
                (0..3 * 64 * 64)
                    .map(|_| rand::Rng::gen_range(&mut rng, 0.2..0.8))
                    .collect(),
            )
            .unwrap();
            let p = dir.path().join(format!("{i}.png"));
            save_png(&p, &img).unwrap();
            paths.push(p);
        }
        let spec = DegradationSpec::GaussianNoise {
            sigma: Sigma::Fixed(25.0),
        };
        let report = evaluate::<f32>(None, &paths, &spec, 5, None).unwrap();
        assert_eq!(report.count, 4);
        let expect = 20.0 * (255.0_f64 / 25.0).log10(); // ≈ 20.17
        assert!((report.psnr_db - expect).abs() < 0.3, "{}", report.psnr_db);
    }

    #[test]
    fn evaluate_sigma_zero_passthrough_hits_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f32>::full(&[3, 32, 32], 0.5);
        let p = dir.path().join("c.png");
        save_png(&p, &img).unwrap();
        let spec = DegradationSpec::GaussianNoise {
            sigma: Sigma::Fixed(0.0),
        };
        let report = evaluate::<f32>(None, &[p], &spec, 0, None).unwrap();
        assert!(report.psnr_db.is_infinite());
    }

    #[test]
    fn evaluate_skips_unreadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f32>::full(&[3, 32, 32], 0.5);
        let good = dir.path().join("good.png");
        save_png(&good, &img).unwrap();
        let bad = dir.path().join("missing.png");
        let spec = DegradationSpec::GaussianNoise {
            sigma: Sigma::Fixed(10.0),
        };
        let report = evaluate::<f32>(None, &[bad, good], &spec, 0, None).unwrap();
        assert_eq!(report.count, 1);
    }

    #[test]
    fn train_loop_resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for i in 0..2 {
            let img = Tensor::<f32>::new(
                &[3, 32, 32],
                (0..3 * 32 * 32)
                    .map(|j| ((i * 131 + j) % 251) as f32 / 255.0)
                    .collect(),
            )
            .unwrap();
            let p = dir.path().join(format!("{i}.png"));
            save_png(&p, &img).unwrap();
            paths.push(p);
        }
        let cfg = tiny_cfg();

        let mut full = Trainer::<f32>::new(cfg.clone()).unwrap();
        let mut s1 = PatchSampler::<f32>::new(paths.clone(), cfg.patch, true, cfg.seed).unwrap();
        train_loop(&mut full, &mut s1, 6, |_| Ok(())).unwrap();

        let mut half = Trainer::<f32>::new(cfg.clone()).unwrap();
        let mut s2 = PatchSampler::<f32>::new(paths.clone(), cfg.patch, true, cfg.seed).unwrap();
        train_loop(&mut half, &mut s2, 3, |_| Ok(())).unwrap();
        let path = dir.path().join("ck.bin");
        half.save_checkpoint(&path).unwrap();
        let mut resumed = Trainer::<f32>::load_checkpoint(&path).unwrap();
        let mut s3 = PatchSampler::<f32>::new(paths, cfg.patch, true, cfg.seed).unwrap();
        train_loop(&mut resumed, &mut s3, 3, |_| Ok(())).unwrap();

        for (pa, pb) in full.net.params().iter().zip(resumed.net.params()) {
            assert_eq!(pa.tensor().data(), pb.tensor().data());
        }
    }
}
