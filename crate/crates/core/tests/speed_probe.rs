use ncd_core::architectures::build_mnist_cnn;
use ncd_core::data::load_idx;
use ncd_core::train::{train_model, TrainConfig};
use std::path::Path;
use std::time::Instant;

#[test]
#[ignore]
fn probe_training_speed() {
    let dir = Path::new("../../data/mnist");
    let t0 = Instant::now();
    let ds = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    println!("load: {:?}, {} samples", t0.elapsed(), ds.len());

    let spec = build_mnist_cnn(10).unwrap();
    let mut model = spec.build::<f32>(1).unwrap();
    let idx: Vec<usize> = (0..2048).collect();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 32,
        optimizer: ncd_core::engine::OptimizerKind::adam(1e-3),
        seed: 7,
    };
    let t0 = Instant::now();
    let log = train_model(&mut model, &ds, &idx, &cfg).unwrap();
    let dt = t0.elapsed();
    println!(
        "2048 samples trained in {dt:?} -> {:.1} samples/s; loss {:.3} acc {:.3}",
        2048.0 / dt.as_secs_f64(),
        log.epochs[0].mean_loss,
        log.epochs[0].accuracy
    );
    let t0 = Instant::now();
    let eval = ncd_core::train::evaluate(&model, &ds, &(0..4096usize).collect::<Vec<_>>(), 256).unwrap();
    let dt = t0.elapsed();
    println!(
        "eval 4096 in {dt:?} -> {:.0} samples/s, acc {:.3}",
        4096.0 / dt.as_secs_f64(),
        eval.accuracy
    );
}
