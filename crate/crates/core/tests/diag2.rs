use semloc_core::dataset::*;
use semloc_core::descriptor::*;
use semloc_core::geom::MapSpec;
use semloc_core::worldgen::*;

#[test]
fn diag_centered_nn() {
    let spec = MapSpec::default();
    let map = generate_map(&WorldGenConfig::default(), &spec).unwrap();
    let profiles = ContextProfiles::all_clean();
    let cfg = DatasetConfig {
        n: 200, frame_count: 1, seed: 11,
        contexts: vec![(semloc_core::sensorsim::ContextName::Clean, 1.0)],
        ..Default::default()
    };
    let samples = build_dataset(&[map.clone()], &spec, &profiles, &cfg).unwrap();
    let desc = DescriptorConfig::default();
    let map_tokens = tokenize(&map, &desc).unwrap();
    let base = pool_base_grid(&map_tokens, &spec).unwrap();

    // cell similarity stats
    let mut sims = Vec::new();
    for a in 0..100 { for b in (a+1)..100 {
        let s: f64 = base.descriptor(a).iter().zip(base.descriptor(b)).map(|(x,y)| x*y).sum();
        sims.push(s);
    }}
    sims.sort_by(f64::total_cmp);
    eprintln!("cell cos-sim: min {:.4} median {:.4} max {:.4}", sims[0], sims[sims.len()/2], sims[sims.len()-1]);

    // centered cells
    let dim = base.dim;
    let mut mean = vec![0.0; dim];
    for c in 0..100 { for (m, v) in mean.iter_mut().zip(base.descriptor(c)) { *m += v / 100.0; } }
    let mut centered = vec![0.0; 100 * dim];
    for c in 0..100 {
        let mut norm = 0.0;
        for k in 0..dim { let v = base.descriptor(c)[k] - mean[k]; centered[c*dim+k] = v; norm += v*v; }
        let norm = norm.sqrt().max(1e-12);
        for k in 0..dim { centered[c*dim+k] /= norm; }
    }

    let mut hit1 = 0; let mut hit3 = 0;
    for s in &samples {
        let mut best_scores = vec![f64::NEG_INFINITY; 100];
        for r in 0..8 {
            let angle = r as f64 * std::f64::consts::PI / 4.0;
            let view = if r == 0 { s.latest_query().clone() } else { s.latest_query().rotated_by(angle) };
            let q = tokenize(&view, &desc).unwrap();
        // center query tokens by their own mean too
            let mut qmean = vec![0.0; dim];
            let nt = q.rows * q.cols;
            for t in 0..nt { for (m, v) in qmean.iter_mut().zip(&q.data[t*dim..(t+1)*dim]) { *m += v / nt as f64; } }
            for cell in 0..100 {
                let b = &centered[cell*dim..(cell+1)*dim];
                let mut score = 0.0;
                for t in 0..nt {
                    let d = &q.data[t*dim..(t+1)*dim];
                    let sim: f64 = d.iter().zip(&qmean).zip(b).map(|((x, m), y)| (x - m) * y).sum();
                    score += sim;
                }
                if score > best_scores[cell] { best_scores[cell] = score; }
            }
        }
        let mut bi = 0;
        for c in 1..100 { if best_scores[c] > best_scores[bi] { bi = c; } }
        let pred = semloc_core::geom::GridIndex::from_flat(bi, 10);
        if pred == s.truth_cell { hit1 += 1; }
        if pred.chebyshev(&s.truth_cell) <= 1 { hit3 += 1; }
    }
    eprintln!("centered NN: top1 {:.3} top3 {:.3}", hit1 as f64 / 200.0, hit3 as f64 / 200.0);
}
