use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::ArrayD;
use sod_core::losses::{supervised_loss_var, LossConfig, MaskBatch};
use sod_core::model::{EncoderConfig, ModelConfig, SaliencyNet};
use sod_core::tensor::Var;

fn cfg(hw: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_size: (hw, hw),
            ..Default::default()
        },
        seed: 0,
        ..Default::default()
    }
}

fn test_images(n: usize, hw: usize) -> ArrayD<f64> {
    ArrayD::from_shape_fn(vec![n, 3, hw, hw], |ix| {
        ((ix[0] + ix[1] * 5 + ix[2] * 3 + ix[3] * 7) % 23) as f64 / 23.0 - 0.4
    })
}

fn bench_forward(c: &mut Criterion) {
    for hw in [64usize, 96] {
        let net = SaliencyNet::build(cfg(hw)).unwrap();
        let x = Var::constant(test_images(1, hw));
        c.bench_function(&format!("forward_eval_{hw}"), |b| {
            b.iter(|| net.forward(&x, false).unwrap())
        });
    }
}

fn bench_train_step(c: &mut Criterion) {
    let hw = 64;
    let net = SaliencyNet::build(cfg(hw)).unwrap();
    let x = Var::constant(test_images(2, hw));
    let gt = ArrayD::from_shape_fn(vec![2, 1, hw, hw], |ix| {
        if (ix[2] / 8 + ix[3] / 8) % 2 == 0 {
            1.0
        } else {
            0.0
        }
    });
    let masks = MaskBatch::from_gt(gt).unwrap();
    c.bench_function("forward_backward_64", |b| {
        b.iter_batched(
            || (),
            |_| {
                for p in net.params() {
                    p.var.zero_grad();
                }
                let pair = net.forward(&x, true).unwrap();
                let (loss, _) = supervised_loss_var(
                    &pair.p1_logits.var,
                    &pair.p2_logits.var,
                    &masks,
                    &LossConfig::default(),
                )
                .unwrap();
                loss.backward();
            },
            BatchSize::PerIteration,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_forward, bench_train_step
}
criterion_main!(benches);
