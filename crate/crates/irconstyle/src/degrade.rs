//! Synthetic degradations and paired patch sampling.
//!
//! Degradations run on raw buffers, outside the autodiff graph; they are data
//! pipeline, not model. Everything is a pure function of the seed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Noise level in 8-bit units (0–50), either fixed or drawn uniformly per
/// patch from a range.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma {
    Fixed(f64),
    Range(f64, f64),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationSpec {
    GaussianNoise { sigma: Sigma },
    GaussianBlur { kernel: usize, sigma: f64 },
    Compose(Vec<DegradationSpec>),
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DegradationSpec::GaussianNoise { sigma } => {
                let ok = match *sigma {
                    Sigma::Fixed(s) => (0.0..=50.0).contains(&s),
                    Sigma::Range(lo, hi) => {
                        lo <= hi && (0.0..=50.0).contains(&lo) && (0.0..=50.0).contains(&hi)
                    }
                };
                if !ok {
                    return Err(Error::Config(format!(
                        "noise sigma {sigma:?} outside [0, 50]"
                    )));
                }
            }
            DegradationSpec::GaussianBlur { kernel, sigma } => {
                if *kernel < 3 || kernel % 2 == 0 {
                    return Err(Error::Config(format!(
                        "blur kernel {kernel} must be odd and >= 3"
                    )));
                }
                if !(*sigma > 0.0) {
                    return Err(Error::Config(format!("blur sigma {sigma} must be > 0")));
                }
            }
            DegradationSpec::Compose(list) => {
                for s in list {
                    s.validate()?;
                }
            }
        }
        Ok(())
    }
}

fn gaussian_kernel_1d(kernel: usize, sigma: f64) -> Vec<f64> {
    let c = (kernel / 2) as f64;
    let mut k: Vec<f64> = (0..kernel)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Reflect (symmetric, edge included) index into 0..len.
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= len {
            i = 2 * len - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur of one (C,H,W) plane set, reflect padding.
fn blur_chw<T: Scalar>(data: &mut [T], c: usize, h: usize, w: usize, kernel: usize, sigma: f64) {
    let k = gaussian_kernel_1d(kernel, sigma);
    let half = (kernel / 2) as isize;
    let mut tmp = vec![T::zero(); h * w];
    for ch in 0..c {
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        // horizontal pass
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in k.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - half, w);
                    acc += kv * plane[y * w + sx].to_f64();
                }
                tmp[y * w + x] = T::cast_f64(acc);
            }
        }
        // vertical pass
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in k.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - half, h);
                    acc += kv * tmp[sy * w + x].to_f64();
                }
                plane[y * w + x] = T::cast_f64(acc);
            }
        }
    }
}

fn apply_buf<T: Scalar>(
    spec: &DegradationSpec,
    buf: &mut [T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) {
    match spec {
        DegradationSpec::GaussianNoise { sigma } => {
            let chw = c * h * w;
            for s in 0..n {
                let sv = match *sigma {
                    Sigma::Fixed(v) => v,
                    Sigma::Range(lo, hi) => {
                        if lo == hi {
                            lo
                        } else {
                            rng.gen_range(lo..hi)
                        }
                    }
                };
                if sv == 0.0 {
                    continue;
                }
                let dist = Normal::new(0.0, sv / 255.0).unwrap();
                for v in &mut buf[s * chw..(s + 1) * chw] {
                    let noised = v.to_f64() + dist.sample(rng);
                    *v = T::cast_f64(noised.clamp(0.0, 1.0));
                }
            }
        }
        DegradationSpec::GaussianBlur { kernel, sigma } => {
            let chw = c * h * w;
            for s in 0..n {
                blur_chw(&mut buf[s * chw..(s + 1) * chw], c, h, w, *kernel, *sigma);
            }
        }
        DegradationSpec::Compose(list) => {
            for s in list {
                apply_buf(s, buf, n, c, h, w, rng);
            }
        }
    }
}

/// Degrade a clean (N,3,H,W) batch in [0,1]. Noise is i.i.d. N(0,(σ/255)²),
/// added then clamped to [0,1]; blur uses a normalized Gaussian kernel with
/// reflect padding. Output is fully determined by `seed`.
pub fn apply<T: Scalar>(spec: &DegradationSpec, clean: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    spec.validate()?;
    let s = clean.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::dim(format!("apply: expected (N,3,H,W), got {s:?}")));
    }
    if let Some(v) = clean
        .data()
        .iter()
        .find(|v| Scalar::to_f64(**v) < 0.0 || Scalar::to_f64(**v) > 1.0)
    {
        return Err(Error::Domain(format!("apply: clean value {v} outside [0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = clean.data().to_vec();
    apply_buf(spec, &mut buf, s[0], s[1], s[2], s[3], &mut rng);
    Tensor::new(s, buf)
}

/// Decoded 8-bit RGB PNG as a (3,H,W) buffer in [0,1].
struct DecodedImage<T> {
    data: Vec<T>,
    h: usize,
    w: usize,
}

fn decode_png<T: Scalar>(path: &Path) -> Result<DecodedImage<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(im) => im,
        other => {
            return Err(Error::Image(format!(
                "{}: expected 8-bit RGB, got {other:?}",
                path.display()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw(); // HWC, interleaved
    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data[ch * h * w + y * w + x] =
                    T::cast_f64(raw[(y * w + x) * 3 + ch] as f64 / 255.0);
            }
        }
    }
    Ok(DecodedImage { data, h, w })
}

/// Load one RGB PNG as a (3,H,W) tensor in [0,1].
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let d = decode_png::<T>(path)?;
    Tensor::new(&[3, d.h, d.w], d.data)
}

/// Write a (3,H,W) tensor in [0,1] as an 8-bit RGB PNG.
pub fn save_png<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("save_png: expected (3,H,W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut raw = vec![0u8; h * w * 3];
    let data = img.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = data[ch * h * w + y * w + x].to_f64().clamp(0.0, 1.0);
                raw[(y * w + x) * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    let im: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, raw).unwrap();
    im.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Read a corpus manifest: a text file of relative paths, one per line,
/// resolved against the manifest's directory. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let paths: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect();
    if paths.is_empty() {
        return Err(Error::Data(format!("{}: empty manifest", path.display())));
    }
    Ok(paths)
}

/// Seeded stream of (clean, degraded) patch pairs. Crops and flips come from
/// one RNG stream; the degradation of each pair is seeded from that stream,
/// so the whole epoch is reproducible from the constructor seed.
pub struct PatchSampler<T: Scalar> {
    paths: Vec<PathBuf>,
    patch: usize,
    augment: bool,
    rng: ChaCha8Rng,
    cache: HashMap<usize, Arc<DecodedImage<T>>>,
}

pub const DEFAULT_PATCH: usize = 128;

impl<T: Scalar> PatchSampler<T> {
    pub fn new(paths: Vec<PathBuf>, patch: usize, augment: bool, seed: u64) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Data("sampler: no source images".into()));
        }
        if patch == 0 {
            return Err(Error::Config("sampler: patch size must be positive".into()));
        }
        Ok(PatchSampler {
            paths,
            patch,
            augment,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cache: HashMap::new(),
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Restart the draw stream from a new seed, keeping the decode cache.
    /// Lets a training loop key every iteration's data on (seed, iter), so
    /// resuming from a checkpoint replays the exact same stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    fn image(&mut self, idx: usize) -> Result<Arc<DecodedImage<T>>> {
        if let Some(im) = self.cache.get(&idx) {
            return Ok(im.clone());
        }
        let im = Arc::new(decode_png::<T>(&self.paths[idx])?);
        self.cache.insert(idx, im.clone());
        Ok(im)
    }

    /// Draw one (clean, degraded) pair, both (3,patch,patch) in [0,1]. The
    /// same crop and flips apply to both members; degradation happens after
    /// cropping.
    pub fn sample_pair(&mut self, spec: &DegradationSpec) -> Result<(Tensor<T>, Tensor<T>)> {
        let p = self.patch;
        let idx = self.rng.gen_range(0..self.paths.len());
        let im = self.image(idx)?;
        if im.h < p || im.w < p {
            return Err(Error::Data(format!(
                "{}: image {}x{} smaller than patch {p}",
                self.paths[idx].display(),
                im.w,
                im.h
            )));
        }
        let (oy, ox, hflip, vflip) = if self.augment {
            (
                self.rng.gen_range(0..=im.h - p),
                self.rng.gen_range(0..=im.w - p),
                self.rng.gen(),
                self.rng.gen(),
            )
        } else {
            (0, 0, false, false)
        };
        let mut data = vec![T::zero(); 3 * p * p];
        for ch in 0..3 {
            for y in 0..p {
                for x in 0..p {
                    let sy = oy + if vflip { p - 1 - y } else { y };
                    let sx = ox + if hflip { p - 1 - x } else { x };
                    data[ch * p * p + y * p + x] = im.data[ch * im.h * im.w + sy * im.w + sx];
                }
            }
        }
        let clean = Tensor::new(&[3, p, p], data)?;
        let seed: u64 = self.rng.gen();
        let degraded = apply(spec, &clean.reshape(&[1, 3, p, p])?, seed)?.reshape(&[3, p, p])?;
        Ok((clean, degraded))
    }

    /// Stack `batch` pairs into (B,3,p,p) clean/degraded batches.
    pub fn sample_batch(
        &mut self,
        spec: &DegradationSpec,
        batch: usize,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let p = self.patch;
        let mut clean = Vec::with_capacity(batch * 3 * p * p);
        let mut degraded = Vec::with_capacity(batch * 3 * p * p);
        for _ in 0..batch {
            let (c, d) = self.sample_pair(spec)?;
            clean.extend_from_slice(c.data());
            degraded.extend_from_slice(d.data());
        }
        Ok((
            Tensor::new(&[batch, 3, p, p], clean)?,
            Tensor::new(&[batch, 3, p, p], degraded)?,
        ))
    }
}
