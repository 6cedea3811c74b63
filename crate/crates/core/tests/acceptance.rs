//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! stderr; the test fails if any criterion does.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use dnsc_core::channel::{awgn_transmit, power_normalize, ChannelConfig};
use dnsc_core::checkpoint::Checkpoint;
use dnsc_core::diffusion::{forward_mix, Stage2Trainer};
use dnsc_core::harness::stats::{mean, paired_ci95, spearman};
use dnsc_core::harness::{
    emit_report, ingest_dataset, stage1_data, stage1_trainer, stage2_source, sweep_csv, synth, Config, Dataset,
    Evaluator, PointKey, SweepResult, FULL_SERIES,
};
use dnsc_core::metrics::{psnr_8bit, ssim_plane};
use dnsc_core::rng::{child_seed, stream, GaussianSource};
use dnsc_core::{LatentTensor, NoiseSchedule, Stage};

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn announce(v: &Verdict) {
    let status = if v.pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{status} criterion {:>2} ({}): {}", v.id, v.name, v.detail);
    let _ = err.flush();
}

fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

fn schedule_product() -> Verdict {
    let start = Instant::now();
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let got = s.alpha_bar(1000);
    // Compensated sum of log1p(−β_i) with β_i rebuilt from integer steps.
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for i in 0..1000u32 {
        let beta = 1e-4 + (0.02 - 1e-4) * f64::from(i) / 999.0;
        let y = (-beta).ln_1p() - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    let oracle = sum.exp();
    let secs = elapsed(start);
    Verdict {
        id: 1,
        name: "schedule",
        pass: (got - 4.04e-5).abs() <= 1e-6 && (got - oracle).abs() <= 1e-12 * oracle && secs < 1.0,
        detail: format!("alpha_bar_1000 = {got:.6e}, oracle {oracle:.6e}, {secs:.3} s"),
    }
}

fn channel_fidelity() -> Verdict {
    let start = Instant::now();
    let n = 100_000;
    let mut worst_db = 0.0f64;
    let mut worst_power = 0.0f64;
    for (i, snr) in [-5.0, 0.0, 10.0, 20.0, 30.0].into_iter().enumerate() {
        for power in [1.0, 2.5] {
            let raw = stream(21, "accept/channel/z", i as u64)
                .standard_normal(&(1, n).into(), DType::F64, &Device::Cpu)
                .unwrap();
            let z = power_normalize(&LatentTensor::new(raw, Stage::Clean).unwrap(), power).unwrap();
            let p = z.item_power().unwrap()[0];
            worst_power = worst_power.max((p - power).abs());
            let cfg = ChannelConfig {
                power,
                snr_db: snr,
                ..Default::default()
            };
            let y = awgn_transmit(&z, &cfg, &mut stream(21, "accept/channel/n", i as u64)).unwrap();
            let noise = (y.tensor() - z.tensor()).unwrap();
            let np = noise.sqr().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
            let measured = 10.0 * (p / np).log10();
            worst_db = worst_db.max((measured - snr).abs());
        }
    }
    let secs = elapsed(start);
    Verdict {
        id: 2,
        name: "channel",
        pass: worst_db <= 0.1 && worst_power <= 1e-9 && secs < 10.0,
        detail: format!("worst SNR gap {worst_db:.4} dB, worst power gap {worst_power:.1e}, {secs:.2} s"),
    }
}

fn forward_marginal() -> Verdict {
    let start = Instant::now();
    let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let n = 100_000;
    let z0 = 1.0;
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for t in [1usize, 5, 20] {
        let mut z = candle_core::Tensor::full(z0, n, &Device::Cpu).unwrap();
        let mut rng = stream(31, "accept/forward", t as u64);
        for step in 1..=t {
            let eps = rng.standard_normal(&n.into(), DType::F64, &Device::Cpu).unwrap();
            z = forward_mix(&z, &eps, s.alpha(step)).unwrap();
        }
        let v: Vec<f64> = z.to_vec1().unwrap();
        let m = mean(&v);
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (want_m, want_v) = (s.alpha_bar(t).sqrt() * z0, 1.0 - s.alpha_bar(t));
        let (em, ev) = ((m - want_m).abs() / want_m, (var - want_v).abs() / want_v);
        worst = worst.max(em).max(ev);
        parts.push(format!("t={t}: mean {:.2}%, var {:.2}%", 100.0 * em, 100.0 * ev));
    }
    let secs = elapsed(start);
    Verdict {
        id: 3,
        name: "forward marginal",
        pass: worst <= 0.03 && secs < 30.0,
        detail: format!("{}; {secs:.2} s", parts.join(", ")),
    }
}

fn mmse_oracle() -> Verdict {
    let r = common::mmse::run();
    Verdict {
        id: 4,
        name: "MMSE oracle",
        pass: r.mean <= 0.05 && r.seconds <= 40.0 * 60.0,
        detail: format!(
            "relative errors at t = {:?}: {:.4?}, mean {:.4}; training {:.0} s",
            common::mmse::CHECK_STEPS,
            r.errors,
            r.mean,
            r.seconds
        ),
    }
}

fn gradients() -> Verdict {
    use common::grad::*;
    let start = Instant::now();
    let errs = [
        ("recon", recon_error()),
        ("kl", kl_error()),
        ("adversarial", adversarial_error()),
        ("noise prediction", noise_prediction_error()),
    ];
    let secs = elapsed(start);
    Verdict {
        id: 5,
        name: "gradients",
        pass: errs.iter().all(|(_, e)| *e < TOL) && secs < 60.0,
        detail: format!(
            "{}; {secs:.1} s",
            errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn metric_units() -> Verdict {
    let start = Instant::now();
    let (h, w) = (32, 32);
    let mut rng = stream(41, "accept/metrics", 0);
    let pixels = |rng: &mut dnsc_core::rng::Stream, hi: f64| -> Vec<f64> {
        use rand::Rng;
        (0..h * w).map(|_| f64::from(rng.random_range(0..=hi as u32))).collect()
    };
    let x = pixels(&mut rng, 254.0);
    let shifted: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
    let y = pixels(&mut rng, 255.0);
    let same = psnr_8bit(&x, &x).unwrap();
    let unit = psnr_8bit(&x, &shifted).unwrap();
    let s_same = ssim_plane(&x, &x, h, w).unwrap();
    let sym_p = psnr_8bit(&x, &y).unwrap() == psnr_8bit(&y, &x).unwrap();
    let (a, b) = (ssim_plane(&x, &y, h, w).unwrap(), ssim_plane(&y, &x, h, w).unwrap());
    let sym_s = (a - b).abs() <= 1e-12;
    let secs = elapsed(start);
    Verdict {
        id: 6,
        name: "metric units",
        pass: same == 100.0 && (unit - 48.1308).abs() <= 1e-3 && (s_same - 1.0).abs() <= 1e-9 && sym_p && sym_s && secs < 5.0,
        detail: format!(
            "psnr(x,x) {same}, unit shift {unit:.4} dB, ssim(x,x) {s_same:.12}, symmetric psnr {sym_p} ssim {sym_s}; {secs:.3} s"
        ),
    }
}

/// The trained toy system plus the resume probes taken during training.
struct Toy {
    cfg: Config,
    data: Dataset,
    ae: Checkpoint,
    dn: Checkpoint,
    train_secs: f64,
    /// Next-step loss after resume against the uninterrupted run, per stage.
    resume: Vec<(&'static str, f64, f64)>,
}

fn toy_config(root: &Path) -> Config {
    let file = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let sets = vec![
        format!("train.data_dir='{}'", root.join("data").display()),
        format!("train.out_dir='{}'", root.join("run").display()),
    ];
    Config::load(Some(&file), Vec::new(), &sets).unwrap()
}

fn roundtrip(c: Checkpoint) -> Checkpoint {
    Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap()
}

fn train_toy(root: &Path) -> Toy {
    let start = Instant::now();
    let cfg = toy_config(root);
    synth::generate(&cfg.train.data_dir, 1000, cfg.model.image_size, cfg.train.seed).unwrap();
    let size = cfg.model.image_size;
    let data = ingest_dataset(&cfg.train.data_dir, (size, size), cfg.train.test_fraction).unwrap();
    let mut resume = Vec::new();

    let d = stage1_data(&cfg, &data).unwrap();
    let mut s1 = stage1_trainer(&cfg, None).unwrap();
    s1.train_epoch(&d).unwrap();
    let probe = roundtrip(s1.checkpoint(None).unwrap());
    let mark = s1.step_log().len();
    s1.run(&d).unwrap();
    let ae = s1.checkpoint(Some(&d)).unwrap();
    let mut again = stage1_trainer(&cfg, Some(&probe)).unwrap();
    again.train_epoch(&d).unwrap();
    resume.push(("stage 1", s1.step_log()[mark].total, again.step_log()[0].total));

    let source = stage2_source(&cfg, &ae, &data).unwrap();
    let mut s2 = Stage2Trainer::new(
        &cfg.diffusion,
        source.latent_shape().unwrap(),
        child_seed(cfg.train.seed, "stage2"),
        DType::F32,
        Some(ae.hash().unwrap()),
    )
    .unwrap();
    s2.train_epoch(&source).unwrap();
    let probe = roundtrip(s2.checkpoint().unwrap());
    let mark = s2.step_log().len();
    s2.run(&source).unwrap();
    let dn = s2.checkpoint().unwrap();
    let mut again = Stage2Trainer::from_checkpoint(&probe, DType::F32).unwrap();
    again.train_epoch(&source).unwrap();
    resume.push(("stage 2", s2.step_log()[mark], again.step_log()[0]));

    let _ = writeln!(
        std::io::stderr(),
        "toy training: {} train / {} test images, stage-1 epochs {}, stage-2 final loss {:.4}, {:.0} s",
        data.split(dnsc_core::harness::Split::Train).unwrap().0.len(),
        data.split(dnsc_core::harness::Split::Test).unwrap().0.len(),
        s1.epoch(),
        s2.history().last().map_or(f64::NAN, |h| h.loss),
        elapsed(start)
    );
    Toy {
        train_secs: elapsed(start),
        cfg,
        data,
        ae,
        dn,
        resume,
    }
}

fn psnrs(ev: &Evaluator, ablation: bool, snr_db: f64) -> Vec<f64> {
    ev.point(PointKey {
        ablation,
        snr_db,
        steps: None,
    })
    .unwrap()
    .into_iter()
    .map(|(_, s)| s.psnr)
    .collect()
}

fn trend(toy: &Toy, snr: &SweepResult, sweep_secs: f64) -> Verdict {
    let full = snr.series(FULL_SERIES).unwrap();
    let axis: Vec<f64> = full.points.iter().map(|p| p.axis).collect();
    let p: Vec<f64> = full.points.iter().map(|p| p.mean_psnr).collect();
    let q: Vec<f64> = full.points.iter().map(|p| p.mean_ssim).collect();
    let (rp, rq) = (spearman(&axis, &p), spearman(&axis, &q));
    let n = full.points.iter().map(|p| p.n).min().unwrap_or(0);
    let total = toy.train_secs + sweep_secs;
    Verdict {
        id: 7,
        name: "SNR trend",
        pass: rp >= 0.95 && rq >= 0.95 && n >= 200 && total <= 3600.0,
        detail: format!(
            "{n} images; PSNR {p:.2?} (rho {rp:.3}); SSIM {q:.3?} (rho {rq:.3}); {total:.0} s incl. training"
        ),
    }
}

fn ablation_gap(ev: &Evaluator) -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for snr in [0.0, 5.0] {
        let (f, a) = (psnrs(ev, false, snr), psnrs(ev, true, snr));
        let (d, lo, hi) = paired_ci95(&f, &a);
        pass &= mean(&f) > mean(&a) && lo > 0.0 && f.len() >= 200;
        parts.push(format!("{snr} dB: gap {d:.3} dB, CI [{lo:.3}, {hi:.3}]"));
    }
    let gap30 = mean(&psnrs(ev, false, 30.0)) - mean(&psnrs(ev, true, 30.0));
    pass &= gap30.abs() <= 1.0;
    parts.push(format!("30 dB: gap {gap30:.3} dB"));
    Verdict {
        id: 8,
        name: "ablation gap",
        pass,
        detail: parts.join("; "),
    }
}

fn steps_hump(steps: &SweepResult, counts: &[usize], secs: f64) -> Verdict {
    let pts = &steps.series(FULL_SERIES).unwrap().points;
    let (half, matched, double) = (&pts[0], &pts[1], &pts[2]);
    let pass = matched.mean_psnr >= half.mean_psnr
        && matched.mean_psnr >= double.mean_psnr
        && matched.mean_ssim >= half.mean_ssim
        && matched.mean_ssim >= double.mean_ssim
        && secs <= 600.0;
    Verdict {
        id: 9,
        name: "steps trade-off",
        pass,
        detail: format!(
            "SNR {} dB, steps {counts:?}: PSNR [{:.3}, {:.3}, {:.3}], SSIM [{:.4}, {:.4}, {:.4}]; sweep {secs:.0} s",
            steps.snr_db.unwrap_or(f64::NAN),
            half.mean_psnr,
            matched.mean_psnr,
            double.mean_psnr,
            half.mean_ssim,
            matched.mean_ssim,
            double.mean_ssim
        ),
    }
}

fn report_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn reproducibility(toy: &Toy, root: &Path, first: &[SweepResult], counts: &[usize]) -> Verdict {
    let ev = Evaluator::new(&toy.cfg, &toy.ae, &toy.dn, &toy.data).unwrap();
    let second = [
        ev.snr_sweep(&toy.cfg.eval.snr_list, true).unwrap(),
        ev.steps_sweep(toy.cfg.eval.steps_snr_db, counts).unwrap(),
    ];
    let (a, b) = (root.join("report-a"), root.join("report-b"));
    emit_report(first, &a).unwrap();
    emit_report(&second, &b).unwrap();
    let (fa, fb) = (report_files(&a), report_files(&b));
    let same_csv = !fa.is_empty() && fa == fb;
    let same_bytes = first
        .iter()
        .zip(&second)
        .all(|(x, y)| sweep_csv(x).unwrap() == sweep_csv(y).unwrap());
    let resumed = toy.resume.iter().all(|(_, x, y)| x.to_bits() == y.to_bits());
    Verdict {
        id: 10,
        name: "reproducibility",
        pass: same_csv && same_bytes && resumed,
        detail: format!(
            "{} CSV files identical {same_csv}; resumed next-step losses {}",
            fa.len(),
            toy.resume
                .iter()
                .map(|(s, x, y)| format!("{s} {x:.6} vs {y:.6}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = Vec::new();
    let mut record = |v: Verdict| {
        announce(&v);
        verdicts.push(v);
    };
    record(schedule_product());
    record(channel_fidelity());
    record(forward_marginal());
    record(gradients());
    record(metric_units());
    record(mmse_oracle());

    let root = tempfile::tempdir().unwrap();
    let toy = train_toy(root.path());
    let ev = Evaluator::new(&toy.cfg, &toy.ae, &toy.dn, &toy.data)
        .unwrap()
        .with_cache(root.path().join("cache"));
    let start = Instant::now();
    let snr = ev.snr_sweep(&toy.cfg.eval.snr_list, true).unwrap();
    record(trend(&toy, &snr, elapsed(start)));
    record(ablation_gap(&ev));

    let t_star = toy.dn.schedule().unwrap().snr_to_start_step(toy.cfg.eval.steps_snr_db);
    let counts = [(t_star + 1) / 2, t_star, 2 * t_star];
    let start = Instant::now();
    let steps = ev.steps_sweep(toy.cfg.eval.steps_snr_db, &counts).unwrap();
    record(steps_hump(&steps, &counts, elapsed(start)));
    record(reproducibility(&toy, root.path(), &[snr, steps], &counts));

    verdicts.sort_by_key(|v| v.id);
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    let _ = writeln!(
        std::io::stderr(),
        "acceptance: {}/{} criteria passed",
        verdicts.len() - failed.len(),
        verdicts.len()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
