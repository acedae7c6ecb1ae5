//! Acceptance suite. Each test covers one numbered criterion and prints a
//! single `ACCEPTANCE <nn> <name>: PASS` line on success (visible with
//! `--nocapture`); a failed test is the corresponding FAIL line.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use irconstyle::constyle::{
    self, ConStyleConfig, ConStyleEncoder, InfoNceConvention, NegativeQueue, Temperature,
};
use irconstyle::degrade::{save_png, DegradationSpec, PatchSampler, Sigma};
use irconstyle::metrics::{psnr, ssim};
use irconstyle::restore::{NetConfig, RestorationNet};
use irconstyle::train::{
    evaluate, run_ablation, train_loop, TrainConfig, Trainer, G1_QUEUE_CAPACITY,
};
use irconstyle::{grad_check, Tensor};

fn seq(n: usize, scale: f64, off: f64) -> Vec<f64> {
    (0..n).map(|i| off + scale * i as f64).collect()
}

fn pass(n: u32, name: &str) {
    println!("ACCEPTANCE {n:02} {name}: PASS");
}

// ---------------------------------------------------------------------------
// 1. Gradient suite: every differentiable op < 1e-4 (end-to-end < 1e-3),
//    finite differences in f64, under two minutes.
// ---------------------------------------------------------------------------
#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let mut results: Vec<(&str, f64, f64)> = Vec::new();

    results.push((
        "conv2d",
        grad_check(
            |t| t[0].conv2d(&t[1], Some(&t[2]), 1, 1)?.sum_all(),
            &[
                (vec![1, 2, 5, 5], seq(50, 0.013, -0.3)),
                (vec![3, 2, 3, 3], seq(54, -0.017, 0.4)),
                (vec![3], seq(3, 0.1, -0.1)),
            ],
            1e-5,
        )
        .unwrap(),
        1e-4,
    ));

    results.push((
        "linear",
        grad_check(
            |t| t[0].linear(&t[1], Some(&t[2]))?.mse_loss(&Tensor::zeros(&[3, 2])),
            &[
                (vec![3, 4], seq(12, 0.07, -0.4)),
                (vec![2, 4], seq(8, -0.09, 0.3)),
                (vec![2], seq(2, 0.2, -0.1)),
            ],
            1e-5,
        )
        .unwrap(),
        1e-4,
    ));

    results.push((
        "pixel_shuffle_pair",
        grad_check(
            |t| {
                let down = t[0].pixel_unshuffle(2)?;
                down.pixel_shuffle(2)?.mul(&down.pixel_shuffle(2)?)?.sum_all()
            },
            &[(vec![1, 2, 4, 4], seq(32, 0.05, -0.7))],
            1e-5,
        )
        .unwrap(),
        1e-4,
    ));

    results.push((
        "l1_loss",
        grad_check(
            |t| t[0].l1_loss(&t[1]),
            &[(vec![2, 3], seq(6, 0.31, -0.8)), (vec![2, 3], seq(6, -0.23, 0.6))],
            1e-5,
        )
        .unwrap(),
        1e-4,
    ));

    results.push((
        "mse_loss",
        grad_check(
            |t| t[0].mse_loss(&t[1]),
            &[(vec![2, 3], seq(6, 0.31, -0.8)), (vec![2, 3], seq(6, -0.23, 0.6))],
            1e-5,
        )
        .unwrap(),
        1e-4,
    ));

    results.push((
        "gram",
        grad_check(
            |t| t[0].gram()?.mse_loss(&t[1].gram()?),
            &[(vec![2, 4], seq(8, 0.11, -0.4)), (vec![2, 4], seq(8, -0.13, 0.5))],
            1e-5,
        )
        .unwrap(),
        1e-4,
    ));

    let mut queue = NegativeQueue::<f64>::new(8, 4).unwrap();
    let inv = 0.5; // rows of (±.5, ±.5, .5, .5) are unit norm
    queue
        .push(&Tensor::new(&[2, 4], vec![inv, inv, inv, inv, -inv, inv, -inv, inv]).unwrap())
        .unwrap();
    results.push((
        "info_nce",
        grad_check(
            |t| {
                let q = t[0].normalize_rows()?;
                let k = t[1].normalize_rows()?;
                constyle::info_nce(
                    &q,
                    &k,
                    &queue,
                    Temperature::new(0.07)?,
                    InfoNceConvention::Moco,
                )
            },
            &[(vec![2, 4], seq(8, 0.17, 0.2)), (vec![2, 4], seq(8, -0.19, 1.1))],
            1e-5,
        )
        .unwrap(),
        1e-4,
    ));

    results.push((
        "affine_inject",
        grad_check(
            |t| {
                let gamma = t[1].conv2d(&t[2], None, 1, 0)?;
                let beta = t[1].conv2d(&t[3], None, 1, 0)?;
                t[0].add(&t[0].mul(&gamma)?)?
                    .add(&beta)?
                    .mse_loss(&Tensor::zeros(t[0].shape()))
            },
            &[
                (vec![1, 3, 4, 4], seq(48, 0.04, -0.9)),
                (vec![1, 2, 4, 4], seq(32, -0.05, 0.7)),
                (vec![3, 2, 1, 1], seq(6, 0.15, -0.4)),
                (vec![3, 2, 1, 1], seq(6, -0.12, 0.3)),
            ],
            1e-5,
        )
        .unwrap(),
        1e-4,
    ));

    // full tiny encoder + restoration net, loss to a fixed target
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
    let net = RestorationNet::<f64>::build(&net_cfg, &cs_cfg, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let enc = ConStyleEncoder::<f64>::new(&cs_cfg, &mut rng);
    let target = Tensor::full(&[1, 3, 8, 8], 0.5);
    results.push((
        "end_to_end",
        grad_check(
            |t| {
                let bundle = enc.encode(&t[0])?;
                net.forward(&t[0], &bundle, true)?.mse_loss(&target)
            },
            &[(vec![1, 3, 8, 8], seq(192, 0.002, 0.3))],
            1e-5,
        )
        .unwrap(),
        1e-3,
    ));

    for (name, err, tol) in &results {
        assert!(err < tol, "{name}: max rel err {err} >= {tol}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "gradient suite took {elapsed:?}");
    pass(1, "gradient suite");
}

// ---------------------------------------------------------------------------
// 2. Queue oracle: >= 10^3 randomized push sequences against a brute-force
//    FIFO, including capacities 65,760 and 16, under a minute.
// ---------------------------------------------------------------------------
struct BruteQueue {
    capacity: usize,
    rows: Vec<Vec<f64>>,
}

impl BruteQueue {
    fn push(&mut self, batch: &[Vec<f64>]) -> (Option<Vec<Vec<f64>>>, Option<Vec<Vec<f64>>>) {
        for r in batch {
            self.rows.push(r.clone());
        }
        let mut evicted = Vec::new();
        while self.rows.len() > self.capacity {
            evicted.push(self.rows.remove(0));
        }
        if self.rows.len() < 2 * batch.len() {
            return (None, None);
        }
        let q1 = (evicted.len() == batch.len()).then_some(evicted);
        let q2 = Some(self.rows[..batch.len()].to_vec());
        (q1, q2)
    }
}

fn rows_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    (0..n).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect()
}

#[test]
fn criterion_02_queue_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9E3779B9);
    let dim = 3;
    for case in 0..1200u32 {
        let capacity = match case % 3 {
            0 => 65_760,
            1 => 16,
            _ => rng.gen_range(1..48),
        };
        let mut queue = NegativeQueue::<f64>::new(capacity, dim).unwrap();
        let mut brute = BruteQueue { capacity, rows: Vec::new() };
        let pushes = rng.gen_range(1..12);
        for _ in 0..pushes {
            let b = rng.gen_range(1..5);
            let rows: Vec<Vec<f64>> = (0..b)
                .map(|_| {
                    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                    v.iter_mut().for_each(|x| *x /= n);
                    v
                })
                .collect();
            let mut flat = Vec::new();
            rows.iter().for_each(|r| flat.extend_from_slice(r));
            let (q1, q2) = queue.push(&Tensor::new(&[b, dim], flat).unwrap()).unwrap();
            let (b1, b2) = brute.push(&rows);
            assert_eq!(q1.as_ref().map(rows_of), b1, "case {case}: q1 mismatch");
            assert_eq!(q2.as_ref().map(rows_of), b2, "case {case}: q2 mismatch");
            let got: Vec<Vec<f64>> = queue.entries().map(|r| r.to_vec()).collect();
            assert_eq!(got, brute.rows, "case {case}: contents diverged");
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "queue oracle took {elapsed:?}");
    pass(2, "queue oracle (1200 cases, capacities incl. 65760 and 16)");
}

// ---------------------------------------------------------------------------
// 3. Loss closed forms.
// ---------------------------------------------------------------------------
#[test]
fn criterion_03_loss_closed_forms() {
    // uniform logits: positive and all N negatives identical => log(N+1)
    let n = 5;
    let e1 = vec![1.0, 0.0, 0.0, 0.0];
    let mut queue = NegativeQueue::<f64>::new(8, 4).unwrap();
    let mut flat = Vec::new();
    (0..n).for_each(|_| flat.extend_from_slice(&e1));
    queue.push(&Tensor::new(&[n, 4], flat).unwrap()).unwrap();
    let q = Tensor::new(&[1, 4], e1.clone()).unwrap();
    let loss = constyle::info_nce(&q, &q, &queue, Temperature::new(0.07).unwrap(), InfoNceConvention::Moco)
        .unwrap()
        .item()
        .unwrap();
    let expect = ((n + 1) as f64).ln();
    assert!((loss - expect).abs() < 1e-6, "uniform {loss} vs {expect}");

    // worked example: t=1, q=k=[1,0], one negative [0,1] => log(1 + e^{-1})
    let mut queue = NegativeQueue::<f64>::new(4, 2).unwrap();
    queue.push(&Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
    let q = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let loss = constyle::info_nce(&q, &q, &queue, Temperature::new(1.0).unwrap(), InfoNceConvention::Moco)
        .unwrap()
        .item()
        .unwrap();
    let expect = (1.0f64 + (-1.0f64).exp()).ln(); // ~= 0.31326
    assert!((loss - expect).abs() < 1e-5, "worked {loss} vs {expect}");
    assert!((expect - 0.31326_f64).abs() < 1e-5);

    // content: orthonormal single rows => gram MSE of 2/4
    let a = Tensor::<f64>::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let b = Tensor::<f64>::new(&[1, 2], vec![0.0, 1.0]).unwrap();
    let c = constyle::content_loss(&a, &b).unwrap().item().unwrap();
    assert!((c - 0.5).abs() < 1e-9, "content {c}");

    // style: never positive, with or without the clamp
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::new(&[2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let (q, q1, q2) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let clamp = if trial % 2 == 0 { None } else { Some(0.5) };
        let s = constyle::style_loss(&q, Some(&q1), Some(&q2), clamp).unwrap();
        assert!(s.active);
        let v = s.value.item().unwrap();
        assert!(v <= 0.0, "trial {trial}: style {v} > 0");
    }
    pass(3, "loss closed forms");
}

// ---------------------------------------------------------------------------
// 4. EMA identity to 1e-12.
// ---------------------------------------------------------------------------
#[test]
fn criterion_04_ema_identity() {
    let cfg = ConStyleConfig {
        width: 4,
        latent_dim: 8,
        mlp_hidden: 16,
        ..Default::default()
    };
    for m in [0.0, 0.9, 0.999] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let encoder = ConStyleEncoder::<f64>::new(&cfg, &mut rng);
        let mut momentum = ConStyleEncoder::<f64>::new(&cfg, &mut rng);
        let before: Vec<Vec<f64>> = momentum
            .params()
            .iter()
            .map(|p| p.tensor().data().to_vec())
            .collect();
        constyle::ema_update(&mut momentum, &encoder, m).unwrap();
        for ((p, old), enc) in momentum.params().iter().zip(&before).zip(encoder.params()) {
            for ((a, t), e) in p.tensor().data().iter().zip(old).zip(enc.tensor().data()) {
                let want = m * t + (1.0 - m) * e;
                assert!((a - want).abs() <= 1e-12, "{}: {a} vs {want}", p.name());
            }
        }
    }
    pass(4, "EMA identity");
}

// ---------------------------------------------------------------------------
// 5. Inference never reads the momentum encoder: randomizing its weights
//    changes no bit of the output.
// ---------------------------------------------------------------------------
#[test]
fn criterion_05_infer_ignores_momentum_encoder() {
    let cfg = tiny_train_config(4);
    let mut trainer = Trainer::<f32>::new(cfg).unwrap();
    let x = Tensor::new(
        &[1, 3, 16, 16],
        (0..768).map(|i| 0.1 + 0.7 * ((i * 13 % 97) as f32 / 97.0)).collect(),
    )
    .unwrap();
    let before = trainer.infer(&x).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(999);
    for p in trainer.constyle.momentum.params_mut() {
        let n = p.tensor().numel();
        p.set_data((0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
    }
    let after = trainer.infer(&x).unwrap();
    let same = before
        .data()
        .iter()
        .zip(after.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same, "infer output changed with momentum weights");
    pass(5, "infer is bit-invariant to momentum weights");
}

// ---------------------------------------------------------------------------
// 6. Guideline-2 gating: with injection off the output ignores the latent
//    bundle bit-for-bit; with injection on and nonzero injectors it reacts.
// ---------------------------------------------------------------------------
#[test]
fn criterion_06_guideline2_gating() {
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
    let mut net = RestorationNet::<f32>::build(&net_cfg, &cs_cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let enc = ConStyleEncoder::<f32>::new(&cs_cfg, &mut rng);
    let x = Tensor::new(
        &[1, 3, 16, 16],
        (0..768).map(|i| 0.2 + 0.5 * ((i * 29 % 101) as f32 / 101.0)).collect(),
    )
    .unwrap();
    let bundle = enc.encode(&x).unwrap();
    let mut warped = bundle.clone();
    warped.code = warped.code.scale(-3.0).unwrap();
    warped.feature_maps = warped
        .feature_maps
        .iter()
        .map(|m| m.scale(2.5).unwrap().add(&Tensor::full(m.shape(), 0.4)).unwrap())
        .collect();

    // gated off: arbitrary bundle perturbation must not move a single bit
    let off_a = net.forward(&x, &bundle, false).unwrap();
    let off_b = net.forward(&x, &warped, false).unwrap();
    assert!(
        off_a.data().iter().zip(off_b.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "output depends on bundle while injection is off"
    );

    // gated on with nonzero injector weights: the same perturbation must show
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for p in net.params_mut() {
        if p.name().contains("inj") || p.name().contains("code_fuse") {
            let n = p.tensor().numel();
            p.set_data((0..n).map(|_| rng.gen_range(-0.1f32..0.1)).collect()).unwrap();
        }
    }
    let on_a = net.forward(&x, &bundle, true).unwrap();
    let on_b = net.forward(&x, &warped, true).unwrap();
    assert!(
        on_a.data().iter().zip(on_b.data()).any(|(a, b)| a != b),
        "output ignored the bundle despite active injection"
    );
    pass(6, "guideline-2 gating");
}

// ---------------------------------------------------------------------------
// 7. Metric fidelity.
// ---------------------------------------------------------------------------
#[test]
fn criterion_07_metric_fidelity() {
    // uniform offset of 16/255 => 20*log10(255/16) ~= 24.0482 dB
    let a = Tensor::<f64>::full(&[3, 16, 16], 0.3);
    let b = Tensor::<f64>::full(&[3, 16, 16], 0.3 + 16.0 / 255.0);
    let p = psnr(&a, &b).unwrap();
    assert!((p - 24.0482).abs() < 1e-3, "psnr {p}");

    // self-similarity is exactly 1
    let img = Tensor::<f64>::new(
        &[3, 16, 16],
        (0..768).map(|i| ((i * 37) % 113) as f64 / 113.0).collect(),
    )
    .unwrap();
    assert_eq!(ssim(&img, &img).unwrap(), 1.0);

    // constant images: zero variance collapses SSIM to the luminance term,
    // computable independently as (2*m1*m2 + C1) / (m1^2 + m2^2 + C1)
    let (m1, m2) = (0.3, 0.6);
    let ca = Tensor::<f64>::full(&[3, 16, 16], m1);
    let cb = Tensor::<f64>::full(&[3, 16, 16], m2);
    let c1 = 0.01f64 * 0.01;
    let reference = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
    let s = ssim(&ca, &cb).unwrap();
    assert!((s - reference).abs() < 1e-6, "ssim {s} vs {reference}");
    pass(7, "metric fidelity");
}

// ---------------------------------------------------------------------------
// 8/9 shared probe infrastructure.
// ---------------------------------------------------------------------------

/// Smooth sinusoid + gradient images: structured enough that denoising can
/// beat the noisy baseline by a wide margin within a short run.
fn write_probe_corpus(dir: &std::path::Path) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let hw = 96;
    let mut paths = Vec::new();
    for i in 0..14 {
        let (fx, fy): (f64, f64) = (rng.gen_range(1.0..5.0), rng.gen_range(1.0..5.0));
        let phase: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let (gx, gy): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let mut data = Vec::with_capacity(3 * hw * hw);
        for c in 0..3 {
            for y in 0..hw {
                for x in 0..hw {
                    let (xf, yf) = (x as f64 / hw as f64, y as f64 / hw as f64);
                    let v = 0.5
                        + 0.25 * (std::f64::consts::TAU * (fx * xf + fy * yf) + phase[c]).sin()
                        + 0.15 * (gx * xf + gy * yf);
                    data.push(v.clamp(0.05, 0.95) as f32);
                }
            }
        }
        let img = Tensor::<f32>::new(&[3, hw, hw], data).unwrap();
        let path = dir.join(format!("img_{i:02}.png"));
        save_png(&path, &img).unwrap();
        paths.push(path);
    }
    let held = paths.split_off(10);
    (paths, held)
}

fn probe_config() -> TrainConfig {
    TrainConfig {
        patch: 32,
        batch: 2,
        total_iters: 2000,
        queue_capacity: 256,
        checkpoint_every: 10_000,
        net: NetConfig::default(), // levels=3, width=16
        constyle: ConStyleConfig::default(), // d=128
        degradation: DegradationSpec::GaussianNoise { sigma: Sigma::Fixed(25.0) },
        seed: 1,
        ..Default::default()
    }
}

fn tiny_train_config(width: usize) -> TrainConfig {
    TrainConfig {
        patch: 16,
        batch: 2,
        total_iters: 100,
        queue_capacity: 32,
        net: NetConfig {
            width,
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
        degradation: DegradationSpec::GaussianNoise { sigma: Sigma::Fixed(25.0) },
        ..Default::default()
    }
}

const EVAL_SEED: u64 = 99;

// ---------------------------------------------------------------------------
// 8. Desk-scale denoising probe: levels=3, width=16, d=128, queue 256,
//    2000 iterations at sigma=25 on a 14-image corpus; held-out PSNR must
//    beat the noisy baseline (~20.2 dB) by at least 2 dB inside 20 minutes.
// ---------------------------------------------------------------------------
#[test]
fn criterion_08_denoising_probe() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (train_paths, held) = write_probe_corpus(dir.path());
    let cfg = probe_config();
    let spec = cfg.degradation.clone();

    let baseline = evaluate::<f32>(None, &held, &spec, EVAL_SEED, None).unwrap();

    let mut trainer = Trainer::<f32>::new(cfg.clone()).unwrap();
    let mut sampler =
        PatchSampler::<f32>::new(train_paths, cfg.patch, cfg.augment, cfg.seed).unwrap();
    train_loop(&mut trainer, &mut sampler, cfg.total_iters, |_| Ok(())).unwrap();

    let trained = evaluate(Some(&trainer), &held, &spec, EVAL_SEED, None).unwrap();
    let elapsed = start.elapsed();
    assert!(
        trained.psnr_db >= baseline.psnr_db + 2.0,
        "trained {:.2} dB vs baseline {:.2} dB: gain below 2 dB",
        trained.psnr_db,
        baseline.psnr_db
    );
    assert!((baseline.psnr_db - 20.2).abs() < 0.6, "baseline {:.2}", baseline.psnr_db);
    assert!(elapsed.as_secs() < 20 * 60, "probe took {elapsed:?}");
    pass(8, "denoising probe");
    println!(
        "  baseline {:.2} dB -> trained {:.2} dB (+{:.2}) in {:.0}s",
        baseline.psnr_db,
        trained.psnr_db,
        trained.psnr_db - baseline.psnr_db,
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 9. Ablation direction probe (soft): the full model should match or beat
//    each single-guideline ablation on held-out PSNR at the same seed. The
//    report always prints; an ordering miss is flagged as informational
//    because the effect is stochastic at this scale.
// ---------------------------------------------------------------------------
#[test]
fn criterion_09_ablation_direction() {
    let dir = tempfile::tempdir().unwrap();
    let (train_paths, held) = write_probe_corpus(dir.path());
    let cfg = probe_config();

    let entries = run_ablation::<f32>(&cfg, &train_paths, &held, |_, _| {}).unwrap();
    assert_eq!(entries.len(), 4);
    assert_eq!(entries[0].variant, "baseline");
    assert_eq!(entries[1].queue_capacity, G1_QUEUE_CAPACITY);

    let full = entries[0].report.psnr_db;
    let mut ordered = true;
    for e in &entries {
        println!(
            "  {:<26} queue={:<6} psnr={:.2} dB ssim={:.4}",
            e.variant, e.queue_capacity, e.report.psnr_db, e.report.ssim
        );
        if e.report.psnr_db > full {
            ordered = false;
        }
    }
    pass(9, "ablation direction report");
    if !ordered {
        println!("  INFO: an ablation outscored the full model; informational only at this scale");
    } else {
        println!("  full model >= every ablation");
    }
}

// ---------------------------------------------------------------------------
// 10. Determinism & persistence: fixed-seed runs are bit-identical, and
//     save -> load -> step equals the uninterrupted step bit-for-bit.
// ---------------------------------------------------------------------------
fn param_bits(t: &Trainer<f32>) -> Vec<u32> {
    let mut bits = Vec::new();
    for group in [
        t.constyle.encoder.params(),
        t.constyle.momentum.params(),
        t.net.params(),
    ] {
        for p in group {
            bits.extend(p.tensor().data().iter().map(|v| v.to_bits()));
        }
    }
    for row in t.constyle.queue.entries() {
        bits.extend(row.iter().map(|v| v.to_bits()));
    }
    bits
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let (train_paths, _) = write_probe_corpus(dir.path());
    let cfg = tiny_train_config(4);

    let run = |iters: u64| -> (Trainer<f32>, Vec<u64>) {
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let mut sampler =
            PatchSampler::<f32>::new(train_paths.clone(), cfg.patch, cfg.augment, cfg.seed)
                .unwrap();
        let mut losses = Vec::new();
        train_loop(&mut t, &mut sampler, iters, |l| {
            losses.push(l.total.to_bits());
            Ok(())
        })
        .unwrap();
        (t, losses)
    };

    // bit reproducibility across independent runs
    let (a, la) = run(6);
    let (b, lb) = run(6);
    assert_eq!(la, lb, "loss streams diverged");
    assert_eq!(param_bits(&a), param_bits(&b), "parameters diverged");

    // save -> load -> step == uninterrupted step
    let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
    let mut sampler =
        PatchSampler::<f32>::new(train_paths.clone(), cfg.patch, cfg.augment, cfg.seed).unwrap();
    train_loop(&mut t, &mut sampler, 3, |_| Ok(())).unwrap();
    let ckpt = dir.path().join("mid.bin");
    t.save_checkpoint(&ckpt).unwrap();
    train_loop(&mut t, &mut sampler, 1, |_| Ok(())).unwrap();

    let mut resumed = Trainer::<f32>::load_checkpoint(&ckpt).unwrap();
    let mut sampler2 =
        PatchSampler::<f32>::new(train_paths, cfg.patch, cfg.augment, cfg.seed).unwrap();
    train_loop(&mut resumed, &mut sampler2, 1, |_| Ok(())).unwrap();

    assert_eq!(t.iter, resumed.iter);
    assert_eq!(param_bits(&t), param_bits(&resumed), "resumed step diverged");
    pass(10, "determinism & persistence");
}
