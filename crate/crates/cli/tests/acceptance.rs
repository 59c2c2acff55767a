//! Acceptance gate: one test per criterion, each printing a PASS line.
//! Run with `cargo test --test acceptance -- --nocapture` to see them.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sod_core::data::synth_dataset;
use sod_core::losses::{
    supervised_loss_var, supervised_loss_with_grad, wbce, wiou, LossConfig, MaskBatch,
};
use sod_core::metrics::{
    adaptive_threshold, e_measure, f_measure, mae, mean_f, pr_curve, s_measure, PR_THRESHOLDS,
};
use sod_core::model::{
    combine_predictions, EncoderConfig, LrGroup, ModelConfig, SaliencyNet,
};
use sod_core::tensor::{conv2d, Var};
use sod_core::training::{fit, lr_schedule, train_step, SgdMomentum, TrainConfig};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_sod");

fn tiny_cfg(hw: usize, channels: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_size: (hw, hw),
            ..Default::default()
        },
        mre: sod_core::model::MreConfig {
            unified_channels: channels,
            ..Default::default()
        },
        fusion_channels: channels,
        seed,
        ..Default::default()
    }
}

fn random_binary(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
}

fn random_pred(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0))
}

#[test]
fn criterion_01_receptive_field_exactness() {
    // a single dilated 3x3 tap must light up exactly a (2r+1)^2 extent
    for (rate, extent) in [(1usize, 3usize), (2, 5), (3, 7), (5, 11)] {
        let size = 31;
        let mut x = ArrayD::zeros(IxDyn(&[1, 1, size, size]));
        x[[0, 0, size / 2, size / 2]] = 1.0;
        let w = Var::constant(ArrayD::ones(IxDyn(&[1, 1, 3, 3])));
        let y = conv2d(&Var::constant(x), &w, None, 1, rate, rate).unwrap();
        let data = y.data();
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for r in 0..size {
            for c in 0..size {
                if data[[0, 0, r, c]] != 0.0 {
                    rows.push(r);
                    cols.push(c);
                }
            }
        }
        let height = rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1;
        let width = cols.iter().max().unwrap() - cols.iter().min().unwrap() + 1;
        assert_eq!((height, width), (extent, extent), "rate {rate}");
        // corners of the extent are genuinely reached
        let lo = size / 2 - extent / 2;
        let hi = size / 2 + extent / 2;
        assert_ne!(data[[0, 0, lo, lo]], 0.0);
        assert_ne!(data[[0, 0, hi, hi]], 0.0);
    }
    println!("PASS: criterion 1 - dilated 3x3 footprints are 3/5/7/11 for rates 1/2/3/5");
}

#[test]
fn criterion_02_loss_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cfg = LossConfig::default();
    let h = 1e-6;
    let mut max_rel: f64 = 0.0;
    for trial in 0..20 {
        let gt = ArrayD::from_shape_fn(IxDyn(&[1, 1, 6, 6]), |_| {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let masks = MaskBatch::from_gt(gt).unwrap();
        let mut z1 = ArrayD::from_shape_fn(IxDyn(&[1, 1, 6, 6]), |_| rng.gen_range(-2.0..2.0));
        let mut z2 = ArrayD::from_shape_fn(IxDyn(&[1, 1, 6, 6]), |_| rng.gen_range(-2.0..2.0));
        let (_, g1, g2) =
            supervised_loss_with_grad(&z1.view(), &z2.view(), &masks, &cfg).unwrap();
        let total = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
            supervised_loss_with_grad(&a.view(), &b.view(), &masks, &cfg)
                .unwrap()
                .0
                .total
        };
        for idx in 0..36 {
            let flat = [0, 0, idx / 6, idx % 6];
            for which in 0..2 {
                let (z, g) = if which == 0 { (&mut z1, &g1) } else { (&mut z2, &g2) };
                let orig = z[flat];
                z[flat] = orig + h;
                let up = total(&z1, &z2);
                let (z, _) = if which == 0 { (&mut z1, &g1) } else { (&mut z2, &g2) };
                z[flat] = orig - h;
                let down = total(&z1, &z2);
                let (z, _) = if which == 0 { (&mut z1, &g1) } else { (&mut z2, &g2) };
                z[flat] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = g[flat];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "trial {trial} idx {idx} p{}: analytic {analytic} vs numeric {numeric}",
                    which + 1
                );
                max_rel = max_rel.max(rel);
            }
        }
    }
    println!("PASS: criterion 2 - loss gradients match finite differences (20 trials, max rel err {max_rel:.2e})");
}

#[test]
fn criterion_03_loss_spot_values() {
    let p = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 0.5);
    let alpha = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.5);
    for g_val in [1.0, 0.0] {
        let g = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), g_val);
        let v = wbce(&p.view(), &g.view(), &alpha.view(), 1e-7).unwrap();
        assert!((v - 1.1552453).abs() < 1e-6, "wbce({g_val}) = {v}");
    }

    let g = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let p = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![0.5, 0.5, 0.0, 0.0]).unwrap();
    let alpha = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.5);
    let v = wiou(&p.view(), &g.view(), &alpha.view()).unwrap();
    assert!((v - 0.6666667).abs() < 1e-6, "wiou 2x2 = {v}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let g = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let alpha = g.mapv(|_| rng.gen_range(1.5..1.74));
        let v = wiou(&g.view(), &g.view(), &alpha.view()).unwrap();
        assert_eq!(v, 0.0, "wiou(g,g) must be exactly 0");
    }
    println!("PASS: criterion 3 - wbce 1.1552453, wiou 0.6666667, wiou(g,g)=0 on 50 masks");
}

#[test]
fn criterion_04_metric_oracle_equivalence() {
    let f = f_measure(0.8, 0.6);
    assert!((f - 0.7428571).abs() < 1e-6, "f_measure(0.8,0.6) = {f}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let pred = random_pred(&mut rng, 8, 8);
        let gt = random_binary(&mut rng, 8, 8);

        // mae oracle
        let oracle_mae = pred
            .iter()
            .zip(gt.iter())
            .map(|(p, g)| (p - g).abs())
            .sum::<f64>()
            / 64.0;
        assert!((mae(&pred.view(), &gt.view()).unwrap() - oracle_mae).abs() <= 1e-12);

        // pr_curve oracle
        let curve = pr_curve(&pred.view(), &gt.view()).unwrap();
        let npos = gt.iter().filter(|&&g| g > 0.0).count();
        for k in 0..PR_THRESHOLDS {
            let tau = k as f64 / (PR_THRESHOLDS - 1) as f64;
            let mut tp = 0usize;
            let mut pp = 0usize;
            for (p, g) in pred.iter().zip(gt.iter()) {
                if *p >= tau {
                    pp += 1;
                    if *g > 0.0 {
                        tp += 1;
                    }
                }
            }
            let prec = if pp == 0 { 1.0 } else { tp as f64 / pp as f64 };
            let rec = if npos == 0 { 1.0 } else { tp as f64 / npos as f64 };
            assert!((curve.precision[k] - prec).abs() <= 1e-12);
            assert!((curve.recall[k] - rec).abs() <= 1e-12);
        }

        // mean_f oracle on a singleton dataset
        let tau = (2.0 * pred.mean().unwrap()).min(1.0);
        assert!((adaptive_threshold(&pred.view()) - tau).abs() <= 1e-12);
        let mut tp = 0.0;
        let mut pp = 0.0;
        for (p, g) in pred.iter().zip(gt.iter()) {
            if *p >= tau {
                pp += 1.0;
                if *g > 0.0 {
                    tp += 1.0;
                }
            }
        }
        let prec = if pp == 0.0 { 1.0 } else { tp / pp };
        let rec = if npos == 0 { 1.0 } else { tp / npos as f64 };
        let oracle_f = f_measure(prec, rec);
        let got = mean_f([(&pred, &gt)]).unwrap();
        assert!((got - oracle_f).abs() <= 1e-12);
    }
    println!("PASS: criterion 4 - mae/pr_curve/mean_f match brute-force oracles on 100 pairs");
}

#[test]
fn criterion_05_metric_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // non-degenerate binary gt with both classes present
    let gt = loop {
        let g = random_binary(&mut rng, 16, 16);
        let fg = g.sum();
        if fg > 20.0 && fg < 200.0 {
            break g;
        }
    };

    assert_eq!(mae(&gt.view(), &gt.view()).unwrap(), 0.0);
    assert_eq!(mean_f([(&gt, &gt)]).unwrap(), 1.0);
    assert!((s_measure(&gt.view(), &gt.view()).unwrap() - 1.0).abs() < 1e-12);
    assert!((e_measure(&gt.view(), &gt.view()).unwrap() - 1.0).abs() < 1e-12);

    let inv = gt.mapv(|g| 1.0 - g);
    assert_eq!(mae(&inv.view(), &gt.view()).unwrap(), 1.0);
    assert_eq!(mean_f([(&inv, &gt)]).unwrap(), 0.0);

    // documented degenerate-gt conventions
    let zeros = Array2::<f64>::zeros((8, 8));
    let ones = Array2::<f64>::ones((8, 8));
    let half = Array2::from_elem((8, 8), 0.25);
    assert_eq!(s_measure(&zeros.view(), &zeros.view()).unwrap(), 1.0);
    assert_eq!(s_measure(&ones.view(), &zeros.view()).unwrap(), 0.0);
    assert!((s_measure(&half.view(), &zeros.view()).unwrap() - 0.75).abs() < 1e-12);
    assert!((s_measure(&half.view(), &ones.view()).unwrap() - 0.25).abs() < 1e-12);
    assert_eq!(e_measure(&zeros.view(), &zeros.view()).unwrap(), 1.0);
    assert_eq!(e_measure(&ones.view(), &ones.view()).unwrap(), 1.0);
    println!("PASS: criterion 5 - identity/inversion/degenerate metric fixed points hold");
}

#[test]
fn criterion_06_shape_and_determinism() {
    for hw in [64usize, 96, 352] {
        let net = SaliencyNet::build(tiny_cfg(hw, 128, 9)).unwrap();
        let x = ArrayD::from_shape_fn(vec![1, 3, hw, hw], |ix| {
            ((ix[1] * 31 + ix[2] * 7 + ix[3]) % 17) as f64 / 17.0 - 0.3
        });
        let pair = net.forward(&Var::constant(x.clone()), false).unwrap();
        assert_eq!(pair.p1_logits.var.shape(), vec![1, 1, hw, hw]);
        assert_eq!(pair.p2_logits.var.shape(), vec![1, 1, hw, hw]);

        // identical seed, identical input -> bit-identical outputs
        let net2 = SaliencyNet::build(tiny_cfg(hw, 128, 9)).unwrap();
        let pair2 = net2.forward(&Var::constant(x), false).unwrap();
        assert_eq!(&*pair.p1_logits.var.data(), &*pair2.p1_logits.var.data());
        assert_eq!(&*pair.p2_logits.var.data(), &*pair2.p2_logits.var.data());
    }

    // every parameter participates in the gradient graph
    let net = SaliencyNet::build(tiny_cfg(64, 128, 9)).unwrap();
    let x = ArrayD::from_shape_fn(vec![2, 3, 64, 64], |ix| {
        ((ix[0] + ix[1] * 5 + ix[2] * 3 + ix[3]) % 11) as f64 / 11.0
    });
    let gt = ArrayD::from_shape_fn(IxDyn(&[2, 1, 64, 64]), |ix| {
        if (ix[2] / 8 + ix[3] / 8) % 2 == 0 {
            1.0
        } else {
            0.0
        }
    });
    let masks = MaskBatch::from_gt(gt).unwrap();
    let pair = net.forward(&Var::constant(x), true).unwrap();
    let (loss, _) = supervised_loss_var(
        &pair.p1_logits.var,
        &pair.p2_logits.var,
        &masks,
        &LossConfig::default(),
    )
    .unwrap();
    loss.backward();
    for p in net.params() {
        let g = p.var.grad().unwrap_or_else(|| panic!("{} has no gradient", p.name));
        assert!(
            g.iter().any(|&v| v != 0.0),
            "{} gradient is identically zero",
            p.name
        );
    }
    println!("PASS: criterion 6 - logit shapes at 64/96/352, bit-determinism, all-params gradients");
}

#[test]
fn criterion_07_overfit_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    synth_dataset(&data_dir, 7, 8, 64).unwrap();
    let spec = sod_core::data::DatasetSpec {
        root: data_dir,
        target_size: (64, 64),
        ..Default::default()
    };
    let samples = sod_core::data::load_dataset(&spec).unwrap();
    let net = SaliencyNet::build(tiny_cfg(64, 64, 1)).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        seed: 1,
        ..Default::default()
    };
    let outcome = fit(&net, &samples, &cfg, false, &dir.path().join("run")).unwrap();
    assert_eq!(outcome.steps, 200);
    assert!(
        outcome.final_loss < 0.15,
        "final loss {} not below 0.15",
        outcome.final_loss
    );

    let mut mae_sum = 0.0;
    for s in &samples {
        let x = s.image.clone().insert_axis(Axis(0)).into_dyn();
        let pair = net.forward(&Var::constant(x), false).unwrap();
        let combined = combine_predictions(&pair);
        let map: Array2<f64> = combined
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .unwrap();
        mae_sum += mae(&map.view(), &s.gt.view()).unwrap();
    }
    let train_mae = mae_sum / samples.len() as f64;
    assert!(train_mae < 0.05, "training-set MAE {train_mae} not below 0.05");
    println!(
        "PASS: criterion 7 - overfit: 200 steps, loss {:.4} < 0.15, MAE {:.4} < 0.05",
        outcome.final_loss, train_mae
    );
}

#[test]
fn criterion_08_schedule_and_optimizer_contracts() {
    let peak = 0.02;
    assert_eq!(lr_schedule(10, 100, 10, peak), peak);
    assert_eq!(lr_schedule(100, 100, 10, peak), 0.0);

    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path(), 11, 2, 64).unwrap();
    let spec = sod_core::data::DatasetSpec {
        root: dir.path().to_path_buf(),
        target_size: (64, 64),
        ..Default::default()
    };
    let samples = sod_core::data::load_dataset(&spec).unwrap();
    let refs: Vec<&sod_core::data::Sample> = samples.iter().collect();
    let (images, masks) = sod_core::data::batch(&refs);

    for (lr_b, lr_r) in [(0.01, 0.0), (0.0, 0.01)] {
        let net = SaliencyNet::build(tiny_cfg(64, 32, 2)).unwrap();
        let params = net.params();
        let before: Vec<ArrayD<f64>> = params.iter().map(|p| p.var.data().clone()).collect();
        let mut opt = SgdMomentum::new(&params, 0.9, 0.0, None);
        train_step(
            &net,
            &mut opt,
            &params,
            &images,
            &masks,
            &LossConfig::default(),
            lr_b,
            lr_r,
        )
        .unwrap();
        let mut frozen_ok = true;
        let mut moving_moved = false;
        for (p, b) in params.iter().zip(&before) {
            let changed = &*p.var.data() != b;
            let lr = match p.group {
                LrGroup::Backbone => lr_b,
                LrGroup::Branch => lr_r,
            };
            if lr == 0.0 && changed {
                frozen_ok = false;
            }
            if lr > 0.0 && changed {
                moving_moved = true;
            }
        }
        assert!(frozen_ok, "zero-lr group moved");
        assert!(moving_moved, "active group did not move");
    }
    println!("PASS: criterion 8 - schedule peak/zero exact; LR groups update in isolation");
}

fn run_ok(args: &[&str]) {
    let out = Command::new(BIN).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "sod {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn criterion_09_cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).display().to_string();
    run_ok(&["synth", "--out", &d("data"), "--seed", "7", "--n", "4", "--size", "64"]);
    run_ok(&[
        "train",
        "--set", &format!("data.root={}", d("data")),
        "--set", "model.encoder.input_size=[64,64]",
        "--set", "model.mre.unified_channels=32",
        "--set", "model.fusion_channels=32",
        "--set", "train.epochs=1",
        "--set", "train.batch_size=4",
        "--out", &d("run"),
    ]);
    let ckpt = d("run/checkpoint_final.ckpt");
    run_ok(&["predict", "--checkpoint", &ckpt, "--input", &d("data/images"), "--out", &d("preds")]);
    run_ok(&["eval", "--pred", &d("preds"), "--gt", &d("data/masks"), "--out", &d("report")]);

    let summary = std::fs::read_to_string(dir.path().join("report/summary.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&summary).unwrap();
    let obj = json.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["E", "MAE", "S", "mF", "n_images"]);
    assert_eq!(obj["n_images"], 4);
    let csv = std::fs::read_to_string(dir.path().join("report/per_image.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5); // header + 4 images

    // rerun: byte-identical predictions and identical report
    run_ok(&["predict", "--checkpoint", &ckpt, "--input", &d("data/images"), "--out", &d("preds2")]);
    run_ok(&["eval", "--pred", &d("preds2"), "--gt", &d("data/masks"), "--out", &d("report2")]);
    for entry in std::fs::read_dir(dir.path().join("preds")).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap();
        assert_eq!(
            std::fs::read(&p).unwrap(),
            std::fs::read(dir.path().join("preds2").join(name)).unwrap()
        );
    }
    let summary2 = std::fs::read_to_string(dir.path().join("report2/summary.json")).unwrap();
    assert_eq!(summary, summary2);
    println!("PASS: criterion 9 - synth -> train -> predict -> eval round trip is reproducible");
}

#[test]
fn criterion_10_ablation_harness() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).display().to_string();
    run_ok(&["synth", "--out", &d("data"), "--seed", "7", "--n", "4", "--size", "64"]);
    run_ok(&[
        "ablate",
        "--set", &format!("data.root={}", d("data")),
        "--set", "model.encoder.input_size=[64,64]",
        "--set", "model.mre.unified_channels=32",
        "--set", "model.fusion_channels=32",
        "--set", "train.epochs=1",
        "--set", "train.batch_size=4",
        "--loss", "weighted",
        "--mre", "both",
        "--out", &d("grid"),
    ]);
    let csv = std::fs::read_to_string(dir.path().join("grid/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "header + 2 cells");
    assert_eq!(lines[0], "loss,use_mre,mF,MAE,S,E");
    for cell in ["weighted_bce_iou_mre_on", "weighted_bce_iou_mre_off"] {
        let cell_dir = dir.path().join("grid").join(cell);
        assert!(cell_dir.join("config_resolved.toml").exists(), "{cell} config missing");
        assert!(cell_dir.join("summary.json").exists(), "{cell} summary missing");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("grid/report.json")).unwrap())
            .unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    println!("PASS: criterion 10 - two-cell ablation grid completes with per-cell configs");
}
