use ncd_core::architectures::build_mnist_cnn;
use ncd_core::data::{hold_out_classes, load_idx};
use ncd_core::metrics::roc_auc;
use ncd_core::ncd::{fit_class_gaussians, score_sets, DaMode, ShrinkagePolicy};
use ncd_core::train::{evaluate, extract_features, train_model, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use std::path::Path;
use std::time::Instant;

#[test]
#[ignore]
fn probe_ood_auc_per_layer() {
    let dir = Path::new("../../data/mnist");
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
    let nine = train.label_of("9").unwrap();
    let train_part = hold_out_classes(train, &[nine]).unwrap();
    let test_part = hold_out_classes(test, &[nine]).unwrap();

    let mut spec = build_mnist_cnn(9).unwrap();
    if let Ok(rate) = std::env::var("PROBE_DROPOUT") {
        use ncd_core::architectures::{LayerDesc, LayerKind};
        let rate: f64 = rate.parse().unwrap();
        for i in (1..=3).rev() {
            let pos = spec.layers.iter().position(|l| l.name == format!("fcact{i}")).unwrap();
            spec.layers.insert(pos + 1, LayerDesc { name: format!("drop{i}"), kind: LayerKind::Dropout { rate } });
        }
        spec.validate().unwrap();
    }
    if std::env::var("PROBE_BN").is_ok() {
        use ncd_core::architectures::{LayerDesc, LayerKind};
        for (i, ch) in [(1usize, 10usize), (2, 20)] {
            let pos = spec.layers.iter().position(|l| l.name == format!("conv{i}")).unwrap();
            spec.layers.insert(pos + 1, LayerDesc { name: format!("bn{i}"), kind: LayerKind::BatchNorm { channels: ch } });
        }
        spec.validate().unwrap();
    }
    let mut model = spec.build::<f32>(42).unwrap();
    let mut idx: Vec<usize> = (0..train_part.id.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    idx.shuffle(&mut rng);
    idx.truncate(std::env::var("PROBE_N").map(|v| v.parse().unwrap()).unwrap_or(12_000));
    let cfg = TrainConfig {
        epochs: std::env::var("PROBE_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(2),
        batch_size: 32,
        optimizer: ncd_core::engine::OptimizerKind::adam(1e-3),
        seed: 7,
    };
    let t0 = Instant::now();
    train_model(&mut model, &train_part.id, &idx, &cfg).unwrap();
    println!("train 12k x2: {:?}", t0.elapsed());
    let t_idx: Vec<usize> = (0..test_part.id.len()).collect();
    let eval = evaluate(&model, &test_part.id, &t_idx, 256).unwrap();
    println!("CNN accuracy on ID test: {:.4}", eval.accuracy);

    let hooks = ["FL", "FC1", "FC2", "FC3", "fcact1", "fcact2", "fcact3", "fc4"];
    let t0 = Instant::now();
    let s_feats = extract_features(&model, &train_part.id, &idx, &hooks, 256, Some(false)).unwrap();
    let t_feats = extract_features(&model, &test_part.id, &t_idx, &hooks, 256, Some(false)).unwrap();
    let o_idx: Vec<usize> = (0..test_part.ood.len()).collect();
    let o_feats = extract_features(&model, &test_part.ood, &o_idx, &hooks, 256, Some(true)).unwrap();
    println!("extract: {:?}", t0.elapsed());

    for hook in hooks {
        let s: Vec<_> = s_feats.iter().filter(|r| r.layer == hook).cloned().collect();
        let t: Vec<_> = t_feats.iter().filter(|r| r.layer == hook).cloned().collect();
        let o: Vec<_> = o_feats.iter().filter(|r| r.layer == hook).cloned().collect();
        for mode in [DaMode::Lda, DaMode::Qda] {
            let t0 = Instant::now();
            let gm = fit_class_gaussians(&s, mode, ShrinkagePolicy::Auto).unwrap();
            let set = score_sets(std::slice::from_ref(&gm), &t, &o).unwrap();
            let (w, u) = set.column(hook).unwrap();
            let auc = roc_auc(&w, &u).unwrap().auc;
            println!("{hook:<4} {mode}: AUC {auc:.4}  ({:?})", t0.elapsed());
        }
    }
}
