use semloc::experiment::RayonEncoder;
use semloc_core::dataset::*;
use semloc_core::descriptor::*;
use semloc_core::geom::MapSpec;
use semloc_core::retrieval::*;
use semloc_core::worldgen::*;

#[test]
fn diag_train_big() {
    let t0 = std::time::Instant::now();
    let spec = MapSpec::default();
    let maps: Vec<_> = (0..4u64)
        .map(|s| generate_map(&WorldGenConfig { seed: 100 + s, ..Default::default() }, &spec).unwrap())
        .collect();
    let profiles = ContextProfiles::all_clean();
    let cfg = DatasetConfig {
        n: 5000, frame_count: 1, seed: 11,
        contexts: vec![(semloc_core::sensorsim::ContextName::Clean, 1.0)],
        ..Default::default()
    };
    use rayon::prelude::*;
    let samples: Vec<_> = (0..cfg.n as u64).into_par_iter()
        .map(|i| build_sample(&maps, &spec, &profiles, &cfg, i).unwrap())
        .collect();
    let train_s = train_samples(&samples, Split::Train);
    let val_s = train_samples(&samples, Split::Val);
    eprintln!("dataset: {} train {} val ({:.1}s)", train_s.len(), val_s.len(), t0.elapsed().as_secs_f64());

    let desc = DescriptorConfig::default();
    let bases: Vec<_> = maps.iter()
        .map(|m| pool_base_grid(&tokenize(m, &desc).unwrap(), &spec).unwrap())
        .collect();
    let tc = TrainConfig {
        epochs: 45, batch_size: 32, learning_rate: 8e-3, seed: 3,
        eval_rotations: 4,
        ..Default::default()
    };
    let t1 = std::time::Instant::now();
    let out = train_with_encoder(&RayonEncoder, &train_s, &val_s, &bases, &tc, &spec).unwrap();
    for row in out.curve.iter().step_by(4) {
        eprintln!("epoch {}: loss {:.4} val1 {:.3} val3 {:.3}", row.epoch, row.train_loss, row.val_top1, row.val_top3);
    }
    eprintln!("train time {:.1} min (best epoch {})", t1.elapsed().as_secs_f64() / 60.0, out.best_epoch);
    let (t1a, t3a) = evaluate_accuracy_with(&RayonEncoder, &val_s, &bases, &out.params, &desc, 8).unwrap();
    eprintln!("FULL VAL (8 rot): top1 {t1a:.3} top3 {t3a:.3}; total {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
}
