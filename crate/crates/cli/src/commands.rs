use crate::config::RunConfig;
use crate::plot::render_pr_plot;
use image::imageops::FilterType;
use image::{GrayImage, Rgb, RgbImage};
use ndarray::{Array2, ArrayD, Axis};
use serde::Serialize;
use sod_core::data::{load_dataset, preprocess, synth_dataset, Sample};
use sod_core::losses::LossKind;
use sod_core::metrics::{evaluate_pairs, MetricReport, MetricSummary};
use sod_core::model::{combine_predictions, SaliencyNet};
use sod_core::tensor::{bilinear_resize_2d, Var};
use sod_core::training::{fit, load_checkpoint, net_from_checkpoint};
use sod_core::{Result, SodError};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| SodError::Data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    if out.is_empty() {
        return Err(SodError::Data(format!("no images in {}", dir.display())));
    }
    Ok(out)
}

/// Preprocessed (1,3,H,W) tensor at the model resolution, plus the source
/// image and its original size.
fn prepare_input(path: &Path, target: (usize, usize)) -> Result<(ArrayD<f64>, RgbImage, (u32, u32))> {
    let img = image::open(path)
        .map_err(|e| SodError::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let orig = img.dimensions();
    let resized = image::imageops::resize(&img, target.1 as u32, target.0 as u32, FilterType::Triangle);
    let x = preprocess(&resized).insert_axis(Axis(0)).into_dyn();
    Ok((x, resized, orig))
}

/// Run the model in eval mode and return the combined map as (H,W).
fn predict_map(net: &SaliencyNet, input: ArrayD<f64>) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let pair = net.forward(&Var::constant(input), false)?;
    let combined = combine_predictions(&pair);
    let as2 = |a: &ArrayD<f64>| -> Array2<f64> {
        a.index_axis(Axis(0), 0)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .unwrap()
    };
    let sig = |v: &Var| -> Array2<f64> {
        as2(&v.data().mapv(|z| 1.0 / (1.0 + (-z).exp())))
    };
    Ok((
        sig(&pair.p1_logits.var),
        sig(&pair.p2_logits.var),
        as2(&combined),
    ))
}

fn to_gray(map: &Array2<f64>) -> GrayImage {
    let (h, w) = map.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn load_gray(path: &Path, binarize: bool) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| SodError::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        let v = img.get_pixel(x as u32, y as u32)[0];
        if binarize {
            if v > 127 { 1.0 } else { 0.0 }
        } else {
            v as f64 / 255.0
        }
    }))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    // the model defines the working resolution
    let mut cfg = cfg.clone();
    cfg.data.target_size = cfg.model.encoder.input_size;
    cfg.write_resolved(out)?;
    let samples = load_dataset(&cfg.data)?;
    let net = SaliencyNet::build(cfg.model.clone())?;
    let outcome = fit(&net, &samples, &cfg.train, cfg.data.augment, out)?;
    println!(
        "trained {} steps on {} images; final loss {:.6}; checkpoint {}",
        outcome.steps,
        samples.len(),
        outcome.final_loss,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

pub fn cmd_predict(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let net = net_from_checkpoint(&load_checkpoint(checkpoint)?)?;
    let target = net.cfg.encoder.input_size;
    std::fs::create_dir_all(out)?;
    let images = list_images(input)?;
    for (stem, path) in &images {
        let (x, _, (ow, oh)) = prepare_input(path, target)?;
        let (_, _, combined) = predict_map(&net, x)?;
        let full = bilinear_resize_2d(&combined.view(), oh as usize, ow as usize);
        to_gray(&full).save(out.join(format!("{stem}.png")))?;
    }
    println!("wrote {} predictions to {}", images.len(), out.display());
    Ok(())
}

fn load_eval_pairs(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<(String, Array2<f64>, Array2<f64>)>> {
    let preds = list_images(pred_dir)?;
    let gts = list_images(gt_dir)?;
    for stem in preds.keys() {
        if !gts.contains_key(stem) {
            return Err(SodError::Data(format!(
                "prediction `{stem}` has no ground truth in {}",
                gt_dir.display()
            )));
        }
    }
    for stem in gts.keys() {
        if !preds.contains_key(stem) {
            return Err(SodError::Data(format!(
                "ground truth `{stem}` has no prediction in {}",
                pred_dir.display()
            )));
        }
    }
    let mut pairs = Vec::with_capacity(preds.len());
    for (stem, ppath) in &preds {
        let mut pred = load_gray(ppath, false)?;
        let gt = load_gray(&gts[stem], true)?;
        if pred.dim() != gt.dim() {
            pred = bilinear_resize_2d(&pred.view(), gt.dim().0, gt.dim().1);
        }
        pairs.push((stem.clone(), pred, gt));
    }
    Ok(pairs)
}

fn print_summary(s: &MetricSummary) {
    println!(
        "mF={:.4} MAE={:.4} S={:.4} E={:.4} (n={})",
        s.m_f, s.mae, s.s, s.e, s.n_images
    );
}

pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, out: &Path) -> Result<()> {
    let pairs = load_eval_pairs(pred_dir, gt_dir)?;
    let report = evaluate_pairs(
        &gt_dir.display().to_string(),
        &pred_dir.display().to_string(),
        &pairs,
    )?;
    std::fs::create_dir_all(out)?;
    report.write_csv(&out.join("per_image.csv"))?;
    report.write_summary_json(&out.join("summary.json"))?;
    print_summary(&report.summary);
    Ok(())
}

pub fn cmd_curves(pred_dir: &Path, gt_dir: &Path, out: &Path) -> Result<()> {
    let pairs = load_eval_pairs(pred_dir, gt_dir)?;
    let report = evaluate_pairs(
        &gt_dir.display().to_string(),
        &pred_dir.display().to_string(),
        &pairs,
    )?;
    std::fs::create_dir_all(out)?;
    report.pr.write_csv(&out.join("pr_curve.csv"))?;
    render_pr_plot(&report.pr, &out.join("pr_curve.png"))?;
    println!("wrote PR curve ({} thresholds) to {}", report.pr.thresholds.len(), out.display());
    Ok(())
}

pub fn cmd_visualize(checkpoint: &Path, images: &Path, gt: Option<&Path>, out: &Path) -> Result<()> {
    let net = net_from_checkpoint(&load_checkpoint(checkpoint)?)?;
    let (th, tw) = net.cfg.encoder.input_size;
    std::fs::create_dir_all(out)?;
    let gts = match gt {
        Some(dir) => Some(list_images(dir)?),
        None => None,
    };
    let inputs = list_images(images)?;
    for (stem, path) in &inputs {
        let (x, resized, _) = prepare_input(path, (th, tw))?;
        let (p1, p2, combined) = predict_map(&net, x)?;
        let mut tiles: Vec<RgbImage> = vec![resized];
        if let Some(gts) = &gts {
            let gpath = gts.get(stem).ok_or_else(|| {
                SodError::Data(format!("no ground truth for `{stem}`"))
            })?;
            let g = load_gray(gpath, true)?;
            let g = Array2::from_shape_fn((th, tw), |(y, x)| {
                // nearest-neighbor keeps the mask binary
                let sy = (y * g.dim().0) / th;
                let sx = (x * g.dim().1) / tw;
                g[[sy, sx]]
            });
            tiles.push(gray_tile(&g));
        }
        tiles.push(gray_tile(&p1));
        tiles.push(gray_tile(&p2));
        tiles.push(gray_tile(&combined));
        let mut strip = RgbImage::new((tw * tiles.len()) as u32, th as u32);
        for (i, tile) in tiles.iter().enumerate() {
            image::imageops::replace(&mut strip, tile, (i * tw) as i64, 0);
        }
        strip.save(out.join(format!("{stem}.png")))?;
    }
    println!("wrote {} strips to {}", inputs.len(), out.display());
    Ok(())
}

fn gray_tile(map: &Array2<f64>) -> RgbImage {
    let (h, w) = map.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    })
}

pub fn parse_loss_kind(s: &str) -> Result<LossKind> {
    match s.to_ascii_lowercase().as_str() {
        "bce" => Ok(LossKind::Bce),
        "iou" => Ok(LossKind::Iou),
        "bce+iou" | "bce_iou" => Ok(LossKind::BceIou),
        "weighted" | "weighted(bce+iou)" | "weighted_bce_iou" => Ok(LossKind::WeightedBceIou),
        other => Err(SodError::Config(format!(
            "unknown loss `{other}` (expected bce, iou, bce+iou, or weighted)"
        ))),
    }
}

fn cell_dir_name(kind: LossKind, use_mre: bool) -> String {
    let loss = match kind {
        LossKind::Bce => "bce",
        LossKind::Iou => "iou",
        LossKind::BceIou => "bce_iou",
        LossKind::WeightedBceIou => "weighted_bce_iou",
    };
    format!("{loss}_mre_{}", if use_mre { "on" } else { "off" })
}

#[derive(Serialize)]
struct AblationRow {
    loss: String,
    use_mre: bool,
    #[serde(flatten)]
    summary: MetricSummary,
}

/// Score a trained model on its own training images (desk-scale report).
fn eval_on_samples(net: &SaliencyNet, samples: &[Sample], checkpoint: &str) -> Result<MetricReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let x = s.image.clone().insert_axis(Axis(0)).into_dyn();
        let (_, _, combined) = predict_map(net, x)?;
        pairs.push((s.stem.clone(), combined, s.gt.clone()));
    }
    evaluate_pairs("train", checkpoint, &pairs)
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    losses: &[LossKind],
    mre: &[bool],
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut cfg = cfg.clone();
    cfg.data.target_size = cfg.model.encoder.input_size;
    let samples = load_dataset(&cfg.data)?;
    let mut rows = Vec::new();
    for &kind in losses {
        for &use_mre in mre {
            let mut cell_cfg = cfg.clone();
            cell_cfg.model.use_mre = use_mre;
            cell_cfg.train.loss.kind = kind;
            let cell_dir = out.join(cell_dir_name(kind, use_mre));
            std::fs::create_dir_all(&cell_dir)?;
            cell_cfg.write_resolved(&cell_dir)?;
            let net = SaliencyNet::build(cell_cfg.model.clone())?;
            let outcome = fit(&net, &samples, &cell_cfg.train, cell_cfg.data.augment, &cell_dir)?;
            let report = eval_on_samples(
                &net,
                &samples,
                &outcome.final_checkpoint.display().to_string(),
            )?;
            report.write_summary_json(&cell_dir.join("summary.json"))?;
            println!(
                "{:<20} mre={:<5} mF={:.4} MAE={:.4} S={:.4} E={:.4}",
                kind.label(),
                use_mre,
                report.summary.m_f,
                report.summary.mae,
                report.summary.s,
                report.summary.e
            );
            rows.push(AblationRow {
                loss: kind.label().to_string(),
                use_mre,
                summary: report.summary,
            });
        }
    }
    let mut csv = String::from("loss,use_mre,mF,MAE,S,E\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.loss, r.use_mre, r.summary.m_f, r.summary.mae, r.summary.s, r.summary.e
        ));
    }
    std::fs::write(out.join("report.csv"), csv)?;
    let json = serde_json::to_string_pretty(&rows)
        .map_err(|e| SodError::Data(e.to_string()))?;
    std::fs::write(out.join("report.json"), json)?;
    Ok(())
}

pub fn cmd_synth(out: &Path, seed: u64, n: usize, size: usize) -> Result<()> {
    let manifest = synth_dataset(out, seed, n, size)?;
    println!(
        "generated {} {}x{} images under {}",
        manifest.n, manifest.size, manifest.size, out.display()
    );
    Ok(())
}
