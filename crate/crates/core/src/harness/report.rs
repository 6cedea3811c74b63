use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;

use super::sweep::{SweepKind, SweepResult};
use crate::checkpoint::write_atomic;
use crate::{Error, Result};

/// One CSV line; field order is the file's column order.
#[derive(Serialize)]
struct Row<'a> {
    series: &'a str,
    axis: f64,
    mean_psnr: f64,
    std_psnr: f64,
    mean_ssim: f64,
    std_ssim: f64,
    n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub csvs: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
    pub summary: PathBuf,
}

/// CSV text of one sweep.
pub fn sweep_csv(r: &SweepResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &r.series {
        for p in &s.points {
            w.serialize(Row {
                series: &s.label,
                axis: p.axis,
                mean_psnr: p.mean_psnr,
                std_psnr: p.std_psnr,
                mean_ssim: p.mean_ssim,
                std_ssim: p.std_ssim,
                n: p.n,
            })?;
        }
    }
    w.into_inner()
        .map_err(|e| Error::Report(format!("flushing CSV: {e}")))
}

fn base_name(r: &SweepResult) -> String {
    match (r.kind, r.snr_db) {
        (SweepKind::Snr, _) => "snr_sweep".into(),
        (SweepKind::Steps, Some(snr)) => format!("steps_sweep_snr{snr}"),
        (SweepKind::Steps, None) => "steps_sweep".into(),
    }
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Report(format!("plotting: {e}"))
}

const PALETTE: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
];

fn plot(r: &SweepResult, metric: &str, path: &Path) -> Result<()> {
    let value = |p: &super::sweep::SweepPoint| if metric == "psnr" { p.mean_psnr } else { p.mean_ssim };
    let pts: Vec<(f64, f64)> = r
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(move |p| (p.axis, value(p))))
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad_x = ((x1 - x0) * 0.05).max(0.5);
    let pad_y = ((y1 - y0) * 0.1).max(if metric == "psnr" { 0.5 } else { 0.01 });
    let x_desc = match r.kind {
        SweepKind::Snr => "SNR (dB)",
        SweepKind::Steps => "de-noising steps",
    };
    let y_desc = if metric == "psnr" { "PSNR (dB)" } else { "SSIM" };
    let title = format!("{y_desc} vs {x_desc} [{}]", &r.config_hash[..12.min(r.config_hash.len())]);

    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 16))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d((x0 - pad_x)..(x1 + pad_x), (y0 - pad_y)..(y1 + pad_y))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;
    for (i, s) in r.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let line: Vec<(f64, f64)> = s.points.iter().map(|p| (p.axis, value(p))).collect();
        chart
            .draw_series(LineSeries::new(line.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(line.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes one CSV per sweep, PSNR and SSIM plots per sweep and a summary.
/// All sweeps must come from the same configuration.
pub fn emit_report(results: &[SweepResult], out_dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let out_dir = out_dir.as_ref();
    let first = results
        .first()
        .ok_or_else(|| Error::Report("no sweep results to report".into()))?;
    let hashes: BTreeSet<&str> = results.iter().map(|r| r.config_hash.as_str()).collect();
    if hashes.len() > 1 {
        return Err(Error::Report(format!(
            "sweeps come from different configurations: {}",
            hashes.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(Error::at(out_dir))?;
    let short = &first.config_hash[..12.min(first.config_hash.len())];

    let mut used = BTreeSet::new();
    let mut files = ReportFiles {
        csvs: Vec::new(),
        plots: Vec::new(),
        summary: out_dir.join(format!("summary-{short}.txt")),
    };
    let mut summary = format!("config_hash {}\n", first.config_hash);
    for (i, r) in results.iter().enumerate() {
        let mut name = base_name(r);
        if !used.insert(name.clone()) {
            name = format!("{name}_{i}");
            used.insert(name.clone());
        }
        let csv_path = out_dir.join(format!("{name}-{short}.csv"));
        write_atomic(&csv_path, &sweep_csv(r)?)?;
        files.csvs.push(csv_path.clone());
        for metric in ["psnr", "ssim"] {
            let p = out_dir.join(format!("{name}_{metric}-{short}.svg"));
            plot(r, metric, &p)?;
            files.plots.push(p);
        }
        summary.push_str(&format!(
            "{name}: kind {:?}, seed {}, snr_db {}, series [{}], csv {}\n",
            r.kind,
            r.seed,
            r.snr_db.map_or("-".to_string(), |s| s.to_string()),
            r.series
                .iter()
                .map(|s| format!("{} ({} points)", s.label, s.points.len()))
                .collect::<Vec<_>>()
                .join(", "),
            csv_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        ));
    }
    write_atomic(&files.summary, summary.as_bytes())?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::sweep::{Series, SweepPoint};

    fn sweep(kind: SweepKind, hash: &str, snr: Option<f64>) -> SweepResult {
        let pt = |axis: f64, v: f64| SweepPoint {
            axis,
            mean_psnr: 20.0 + v,
            std_psnr: 1.5,
            mean_ssim: 0.5 + v / 100.0,
            std_ssim: 0.1,
            n: 50,
        };
        SweepResult {
            kind,
            config_hash: hash.into(),
            seed: 7,
            snr_db: snr,
            series: vec![
                Series {
                    label: "latent-diff".into(),
                    points: vec![pt(0.0, 1.0), pt(10.0, 4.0), pt(20.0, 6.0)],
                },
                Series {
                    label: "no-denoiser".into(),
                    points: vec![pt(0.0, -3.0), pt(10.0, 2.0), pt(20.0, 5.5)],
                },
            ],
        }
    }

    #[test]
    fn file_counts_schema_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let h = "ab".repeat(32);
        let rs = vec![sweep(SweepKind::Snr, &h, None), sweep(SweepKind::Steps, &h, Some(10.0))];
        let files = emit_report(&rs, dir.path()).unwrap();
        assert_eq!(files.csvs.len(), 2);
        assert_eq!(files.plots.len(), 4);
        assert!(files.summary.exists());
        let text = std::fs::read_to_string(&files.csvs[0]).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "series,axis,mean_psnr,std_psnr,mean_ssim,std_ssim,n"
        );
        assert_eq!(text.lines().count(), 7);
        for p in &files.plots {
            let svg = std::fs::read_to_string(p).unwrap();
            assert!(svg.starts_with("<svg") && svg.contains("latent-diff"));
        }

        let first: Vec<Vec<u8>> = files.csvs.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let json = dir.path().join("snr.json");
        rs[0].save(&json).unwrap();
        let again = emit_report(&[SweepResult::load(&json).unwrap(), rs[1].clone()], dir.path()).unwrap();
        let second: Vec<Vec<u8>> = again.csvs.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn mixed_hashes_and_empty_input_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rs = vec![sweep(SweepKind::Snr, "aaaa", None), sweep(SweepKind::Snr, "bbbb", None)];
        assert!(matches!(emit_report(&rs, dir.path()), Err(Error::Report(_))));
        assert!(matches!(emit_report(&[], dir.path()), Err(Error::Report(_))));
    }
}
