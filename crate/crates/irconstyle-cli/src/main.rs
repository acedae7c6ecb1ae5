//! Batch front end. stdout carries machine-readable JSON only; human logs go
//! to stderr. Exit codes: 2 invalid config, 3 I/O failure, 4 checkpoint
//! version mismatch, 5 bad image, 1 anything else.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use irconstyle::constyle::{self, ConStyle, NegativeQueue, Temperature};
use irconstyle::degrade::{self, DegradationSpec, PatchSampler, Sigma};
use irconstyle::restore::{NetConfig, RestorationNet};
use irconstyle::train::{self, TrainConfig, Trainer};
use irconstyle::{grad_check, Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "irconstyle", version, about = "Contrastive image restoration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON config, writing checkpoints and a JSONL loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a model (or the raw degraded input with --ckpt none) on a corpus.
    Eval {
        /// Checkpoint path, or "none" for the degraded-input baseline.
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        manifest: PathBuf,
        /// Noise level: a value ("25") or a range ("0:50"), 8-bit units.
        #[arg(long)]
        sigma: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Restore one PNG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the baseline and each single-guideline ablation, then compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference checks over every differentiable operation.
    Gradcheck {
        /// Check a single op by name.
        #[arg(long)]
        op: Option<String>,
    },
    /// Per-module parameter counts.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() {
    if let Ok(v) = std::env::var("CONSTYLE_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => eprintln!("data-loader parallelism capped at {n} thread(s)"),
            _ => {
                emit_error(&Error::Config(format!(
                    "CONSTYLE_THREADS must be a positive integer, got {v:?}"
                )));
                std::process::exit(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            emit_error(&e);
            std::process::exit(exit_code(&e));
        }
    }
}

fn emit_error(e: &Error) {
    let line = serde_json::json!({ "error": e.to_string(), "exit_code": exit_code(e) });
    eprintln!("{line}");
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Io(_) => 3,
        Error::Checkpoint(_) => 4,
        Error::Image(_) => 5,
        _ => 1,
    }
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Cmd::Eval {
            ckpt,
            manifest,
            sigma,
            seed,
        } => cmd_eval(&ckpt, &manifest, &sigma, seed),
        Cmd::Infer { ckpt, input, out } => cmd_infer(&ckpt, &input, &out),
        Cmd::Ablate { config } => cmd_ablate(&config),
        Cmd::Gradcheck { op } => cmd_gradcheck(op.as_deref()),
        Cmd::Params { config } => cmd_params(config.as_deref()),
    }
}

/// Parse a config file; errors carry the file path and, for bad fields, the
/// JSON path to the offending value.
fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        Error::Config(format!(
            "config {}: field {}: {}",
            path.display(),
            e.path(),
            e.inner()
        ))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_sigma(s: &str) -> Result<Sigma> {
    let bad = |s: &str| Error::Config(format!("sigma {s:?}: expected a value or lo:hi"));
    if let Some((lo, hi)) = s.split_once(':') {
        let lo = lo.parse().map_err(|_| bad(s))?;
        let hi = hi.parse().map_err(|_| bad(s))?;
        Ok(Sigma::Range(lo, hi))
    } else {
        Ok(Sigma::Fixed(s.parse().map_err(|_| bad(s))?))
    }
}

fn manifest_paths(cfg_field: &Option<String>, what: &str) -> Result<Vec<PathBuf>> {
    let m = cfg_field
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{what} not set in config")))?;
    degrade::read_manifest(Path::new(m))
}

fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<i32> {
    let mut trainer: Trainer<f32> = match resume {
        Some(ckpt) => {
            let t = Trainer::load_checkpoint(ckpt)?;
            eprintln!("resumed from {} at iteration {}", ckpt.display(), t.iter);
            t
        }
        None => Trainer::new(load_config(config)?)?,
    };
    let cfg = trainer.cfg.clone();
    let paths = manifest_paths(&cfg.data_manifest, "data_manifest")?;
    let out_dir = PathBuf::from(cfg.out_dir.clone().unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;

    let log_path = out_dir.join("loss_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::Io(format!("{}: {e}", log_path.display())))?;

    let mut sampler = PatchSampler::<f32>::new(paths, cfg.patch, cfg.augment, cfg.seed)?;
    let remaining = cfg.total_iters.saturating_sub(trainer.iter);
    let mut last_total = f64::NAN;
    let every = cfg.checkpoint_every.max(1);

    // train_loop handles data; checkpointing happens between chunks so the
    // loop body stays a pure step
    let mut done = 0;
    while done < remaining {
        let chunk = every.min(remaining - done);
        train::train_loop(&mut trainer, &mut sampler, chunk, |b| {
            last_total = b.total;
            writeln!(log, "{}", serde_json::to_string(b)?)
                .map_err(|e| Error::Io(format!("{}: {e}", log_path.display())))?;
            if b.iter % 50 == 0 {
                eprintln!("iter {:>6}  total {:.5}  lr {:.3e}", b.iter, b.total, b.lr);
            }
            Ok(())
        })?;
        done += chunk;
        let ckpt = out_dir.join(format!("ckpt_{:06}.bin", trainer.iter));
        trainer.save_checkpoint(&ckpt)?;
        eprintln!("wrote {}", ckpt.display());
    }
    let final_path = out_dir.join("ckpt_final.bin");
    trainer.save_checkpoint(&final_path)?;

    println!(
        "{}",
        serde_json::json!({
            "iterations": trainer.iter,
            "final_total": last_total,
            "checkpoint": final_path.to_string_lossy(),
            "loss_log": log_path.to_string_lossy(),
        })
    );
    Ok(0)
}

fn cmd_eval(ckpt: &str, manifest: &Path, sigma: &str, seed: u64) -> Result<i32> {
    let spec = DegradationSpec::GaussianNoise {
        sigma: parse_sigma(sigma)?,
    };
    spec.validate()?;
    let paths = degrade::read_manifest(manifest)?;
    let model: Option<Trainer<f32>> = if ckpt == "none" {
        None
    } else {
        Some(Trainer::load_checkpoint(Path::new(ckpt))?)
    };
    let report = train::evaluate(model.as_ref(), &paths, &spec, seed, None)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(0)
}

/// Reflect-pad (1,3,H,W) on the bottom/right up to multiples of `div`.
fn pad_to_multiple(x: &Tensor<f32>, div: usize) -> Tensor<f32> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (ph, pw) = (h.div_ceil(div) * div, w.div_ceil(div) * div);
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    let refl = |i: usize, n: usize| if i < n { i } else { 2 * n - 1 - i };
    let mut data = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        for y in 0..ph {
            for xx in 0..pw {
                data.push(x.data()[c * h * w + refl(y, h) * w + refl(xx, w)]);
            }
        }
    }
    Tensor::new(&[1, 3, ph, pw], data).unwrap()
}

fn cmd_infer(ckpt: &Path, input: &Path, out: &Path) -> Result<i32> {
    if input.extension().and_then(|e| e.to_str()) != Some("png") {
        return Err(Error::Image(format!(
            "{}: only PNG input is supported",
            input.display()
        )));
    }
    let trainer: Trainer<f32> = Trainer::load_checkpoint(ckpt)?;
    let img = degrade::load_png::<f32>(input)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let div = 1 << trainer.cfg.net.levels;
    let padded = pad_to_multiple(&img.reshape(&[1, 3, h, w])?, div);
    let restored = trainer.infer(&padded)?;
    // crop back and clamp to 8-bit range
    let (ph, pw) = (restored.shape()[2], restored.shape()[3]);
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data.push(restored.data()[c * ph * pw + y * pw + x].clamp(0.0, 1.0));
            }
        }
    }
    degrade::save_png(out, &Tensor::new(&[3, h, w], data)?)?;
    println!(
        "{}",
        serde_json::json!({
            "in": input.to_string_lossy(),
            "out": out.to_string_lossy(),
            "width": w,
            "height": h,
        })
    );
    Ok(0)
}

fn cmd_ablate(config: &Path) -> Result<i32> {
    let cfg = load_config(config)?;
    let train_paths = manifest_paths(&cfg.data_manifest, "data_manifest")?;
    let eval_paths = match &cfg.eval_manifest {
        Some(_) => manifest_paths(&cfg.eval_manifest, "eval_manifest")?,
        None => train_paths.clone(),
    };
    let entries = train::run_ablation::<f32>(&cfg, &train_paths, &eval_paths, |variant, b| {
        if b.iter % 100 == 0 {
            eprintln!("{variant}: iter {:>6}  total {:.5}", b.iter, b.total);
        }
    })?;
    println!("{}", serde_json::to_string(&entries)?);
    Ok(0)
}

struct CheckResult {
    op: &'static str,
    err: f64,
    tol: f64,
}

fn cmd_gradcheck(only: Option<&str>) -> Result<i32> {
    fn seq(n: usize, scale: f64, off: f64) -> Vec<f64> {
        (0..n).map(|i| off + scale * i as f64).collect()
    }

    let mut results: Vec<CheckResult> = Vec::new();
    let all: Vec<(&'static str, f64, Box<dyn Fn() -> Result<f64>>)> = vec![
        (
            "conv2d",
            1e-4,
            Box::new(|| {
                grad_check(
                    |t| t[0].conv2d(&t[1], Some(&t[2]), 1, 1)?.sum_all(),
                    &[
                        (vec![1, 2, 5, 5], seq(50, 0.013, -0.3)),
                        (vec![3, 2, 3, 3], seq(54, -0.017, 0.4)),
                        (vec![3], seq(3, 0.1, -0.1)),
                    ],
                    1e-5,
                )
            }),
        ),
        (
            "linear",
            1e-4,
            Box::new(|| {
                grad_check(
                    |t| t[0].linear(&t[1], Some(&t[2]))?.mse_loss(&Tensor::zeros(&[3, 2])),
                    &[
                        (vec![3, 4], seq(12, 0.07, -0.4)),
                        (vec![2, 4], seq(8, -0.09, 0.3)),
                        (vec![2], seq(2, 0.2, -0.1)),
                    ],
                    1e-5,
                )
            }),
        ),
        (
            "pixel_shuffle",
            1e-4,
            Box::new(|| {
                grad_check(
                    |t| {
                        let down = t[0].pixel_unshuffle(2)?;
                        down.pixel_shuffle(2)?.mul(&down.pixel_shuffle(2)?)?.sum_all()
                    },
                    &[(vec![1, 2, 4, 4], seq(32, 0.05, -0.7))],
                    1e-5,
                )
            }),
        ),
        (
            "l1_loss",
            1e-4,
            Box::new(|| {
                grad_check(
                    |t| t[0].l1_loss(&t[1]),
                    &[(vec![2, 3], seq(6, 0.31, -0.8)), (vec![2, 3], seq(6, -0.23, 0.6))],
                    1e-5,
                )
            }),
        ),
        (
            "mse_loss",
            1e-4,
            Box::new(|| {
                grad_check(
                    |t| t[0].mse_loss(&t[1]),
                    &[(vec![2, 3], seq(6, 0.31, -0.8)), (vec![2, 3], seq(6, -0.23, 0.6))],
                    1e-5,
                )
            }),
        ),
        (
            "gram",
            1e-4,
            Box::new(|| {
                grad_check(
                    |t| t[0].gram()?.mse_loss(&t[1].gram()?),
                    &[(vec![2, 4], seq(8, 0.11, -0.4)), (vec![2, 4], seq(8, -0.13, 0.5))],
                    1e-5,
                )
            }),
        ),
        (
            "info_nce",
            1e-4,
            Box::new(|| {
                let mut queue = NegativeQueue::<f64>::new(8, 4)?;
                let inv = 0.5; // rows of (±.5, ±.5, .5, .5) are unit norm
                queue.push(&Tensor::new(
                    &[2, 4],
                    vec![inv, inv, inv, inv, -inv, inv, -inv, inv],
                )?)?;
                grad_check(
                    |t| {
                        let q = t[0].normalize_rows()?;
                        let k = t[1].normalize_rows()?;
                        constyle::info_nce(
                            &q,
                            &k,
                            &queue,
                            Temperature::new(0.07)?,
                            irconstyle::constyle::InfoNceConvention::Moco,
                        )
                    },
                    &[(vec![2, 4], seq(8, 0.17, 0.2)), (vec![2, 4], seq(8, -0.19, 1.1))],
                    1e-5,
                )
            }),
        ),
        (
            "affine_inject",
            1e-4,
            Box::new(|| {
                grad_check(
                    |t| {
                        // F' = (1 + γ(M))⊙F + β(M), γ/β as 1×1 convs
                        let gamma = t[1].conv2d(&t[2], None, 1, 0)?;
                        let beta = t[1].conv2d(&t[3], None, 1, 0)?;
                        t[0].add(&t[0].mul(&gamma)?)?.add(&beta)?.mse_loss(&Tensor::zeros(t[0].shape()))
                    },
                    &[
                        (vec![1, 3, 4, 4], seq(48, 0.04, -0.9)),
                        (vec![1, 2, 4, 4], seq(32, -0.05, 0.7)),
                        (vec![3, 2, 1, 1], seq(6, 0.15, -0.4)),
                        (vec![3, 2, 1, 1], seq(6, -0.12, 0.3)),
                    ],
                    1e-5,
                )
            }),
        ),
        (
            "end_to_end",
            1e-3,
            Box::new(|| {
                use irconstyle::constyle::{ConStyleConfig, ConStyleEncoder};
                let net_cfg = NetConfig {
                    width: 4,
                    blocks_left: vec![1, 1, 1],
                    blocks_bottom: 1,
                    blocks_right: vec![1, 1, 1],
                    ..Default::default()
                };
                let cs_cfg = ConStyleConfig {
                    width: 4,
                    latent_dim: 8,
                    mlp_hidden: 16,
                    ..Default::default()
                };
                let net = RestorationNet::<f64>::build(&net_cfg, &cs_cfg, 17)?;
                let mut rng = rand_chacha_rng(29);
                let enc = ConStyleEncoder::<f64>::new(&cs_cfg, &mut rng);
                let target = Tensor::full(&[1, 3, 8, 8], 0.5);
                grad_check(
                    |t| {
                        let bundle = enc.encode(&t[0])?;
                        net.forward(&t[0], &bundle, true)?.mse_loss(&target)
                    },
                    &[(vec![1, 3, 8, 8], seq(192, 0.002, 0.3))],
                    1e-5,
                )
            }),
        ),
    ];

    let mut any_fail = false;
    let mut matched = false;
    for (name, tol, runner) in &all {
        if let Some(filter) = only {
            if filter != *name {
                continue;
            }
        }
        matched = true;
        let err = runner()?;
        results.push(CheckResult { op: name, err, tol: *tol });
        if err >= *tol {
            any_fail = true;
        }
    }
    if !matched {
        return Err(Error::Config(format!(
            "unknown op {:?}; known: {}",
            only.unwrap_or(""),
            all.iter().map(|(n, _, _)| *n).collect::<Vec<_>>().join(", ")
        )));
    }
    let json: Vec<_> = results
        .iter()
        .map(|r| {
            serde_json::json!({
                "op": r.op,
                "max_rel_err": r.err,
                "tolerance": r.tol,
                "pass": r.err < r.tol,
            })
        })
        .collect();
    println!("{}", serde_json::to_string(&json)?);
    Ok(if any_fail { 1 } else { 0 })
}

fn rand_chacha_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng as _;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn cmd_params(config: Option<&Path>) -> Result<i32> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    let constyle = ConStyle::<f32>::new(&cfg.constyle, cfg.effective_queue_capacity(), cfg.seed)?;
    let net = RestorationNet::<f32>::build(&cfg.net, &cfg.constyle, cfg.seed)?;
    let (c, n) = (constyle.param_count(), net.param_count());
    println!(
        "{}",
        serde_json::json!({
            "constyle": c,
            "encoder": constyle.encoder.param_count(),
            "momentum_encoder": constyle.momentum.param_count(),
            "restoration_net": n,
            "total": c + n,
        })
    );
    Ok(0)
}
