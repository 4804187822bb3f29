// temp probe: feature scale at init + single-batch descent behavior
use anomatile::config::RunConfig;
use anomatile::loss::init_centers;
use anomatile::nn::{self, Batch, SgdState};
use anomatile::pipeline::{channel_means, normalize_tile};
use anomatile::synth::{self, tile_seed};

fn main() {
    let all = synth::default_classes();
    let mut tiles = Vec::new();
    let mut labels = Vec::new();
    for ci in 0..8usize {
        for i in 0..8usize {
            tiles.push(synth::gen_tile(&all[ci], 64, tile_seed(1, 0, ci as u64, i as u64)).unwrap());
            labels.push(ci);
        }
    }
    let means = channel_means(tiles.iter()).unwrap();
    let inputs: Vec<_> = tiles.iter().map(|t| normalize_tile(t, means)).collect();

    // input stats
    let v: Vec<f64> = inputs[0].data.clone();
    let m0 = v.iter().sum::<f64>() / v.len() as f64;
    let s0 = (v.iter().map(|x| (x - m0).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    println!("input: mean {m0:.4} std {s0:.4}");

    let model = nn::init_model(1, 32, 8).unwrap();
    let feats = nn::features(&model, &inputs).unwrap();
    let fd = feats.data();
    let fm = fd.iter().sum::<f64>() / fd.len() as f64;
    let fs = (fd.iter().map(|x| (x - fm).powi(2)).sum::<f64>() / fd.len() as f64).sqrt();
    let fmax = fd.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let per_row_norm: f64 = (0..feats.rows()).map(|r| {
        feats.row(r).iter().map(|x| x * x).sum::<f64>().sqrt()
    }).sum::<f64>() / feats.rows() as f64;
    println!("features at init: mean {fm:.4} std {fs:.4} max|f| {fmax:.4} mean ||f||2 {per_row_norm:.4}");

    let batch = Batch { inputs, labels };
    let cfg = RunConfig::default();
    let centers = init_centers(&model, &batch.inputs, &batch.labels, vec![0], 0.5).unwrap();
    let mut model = model;
    let mut sgd = SgdState::new(&model, cfg.encoder.learning_rate, cfg.encoder.momentum).unwrap();
    let m = batch.inputs.len() as f64;
    for step in 0..600 {
        let (lb, mut grads) = nn::backward(&model, &batch, &centers, 1.0).unwrap();
        grads.scale(1.0 / m);
        nn::sgd_step(&mut model, &grads, &mut sgd).unwrap();
        if step % 60 == 0 || step == 599 {
            println!("step {step:3}  ce/sample {:.4}  center {:.4}", lb.cross_entropy / m, lb.center);
        }
    }
}
