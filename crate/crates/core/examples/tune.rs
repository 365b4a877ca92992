// Scratch sweep harness for benchmark tuning. Not part of the deliverable.

use acsdet_core::data::{gen_synthetic, SynthConfig};
use acsdet_core::eval::{compute_eer, score_dataset, split_scores};
use acsdet_core::model::LossKind;
use acsdet_core::train::{train_loop, CentroidKind, TrainConfig};
use rayon::prelude::*;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn main() {
    // variant knobs: [pure-direction?, noise]
    let variants: Vec<(bool, f64)> = vec![(true, 0.4), (true, 0.55)];
    let seed_bases: Vec<u64> = vec![7, 1000];
    let cells = [
        ("acs", LossKind::AcsOc, CentroidKind::Acs),
        ("partial", LossKind::AcsOc, CentroidKind::PartialAcs),
        ("fixed", LossKind::AcsOc, CentroidKind::Fixed),
        ("trainable", LossKind::AcsOc, CentroidKind::Trainable),
        ("wce", LossKind::Wce, CentroidKind::Acs),
        ("ocs", LossKind::OcSoftmax, CentroidKind::Acs),
    ];

    let mut jobs = Vec::new();
    for &(pure, noise) in &variants {
        for &base in &seed_bases {
            for cell in cells {
                for s in 0..5u64 {
                    jobs.push((pure, noise, base, cell, base + s));
                }
            }
        }
    }

    let results: Vec<((String, u64, String), (f64, usize, f64))> = jobs
        .par_iter()
        .map(|&(pure, noise, base, (name, loss, centroid), seed)| {
            let mut synth = SynthConfig { noise_level: noise, ..SynthConfig::default() };
            if pure {
                for mode in synth
                    .attack_modes_train
                    .iter_mut()
                    .chain(synth.attack_modes_eval_unseen.iter_mut())
                {
                    mode.process.mixing_scale = 1.0;
                    mode.process.temporal_corr = 0.9;
                }
            }
            let (train, dev, eval) = gen_synthetic(&synth).unwrap();
            let config = TrainConfig {
                seed,
                loss,
                centroid,
                ..TrainConfig::default()
            };
            let start = std::time::Instant::now();
            let (model, history) = train_loop(&train, &dev, &config).unwrap();
            let secs = start.elapsed().as_secs_f64();
            let records = score_dataset(&model, &eval).unwrap();
            let (b, s) = split_scores(&records).unwrap();
            let eer = compute_eer(&b, &s).unwrap().0;
            (
                (format!("pure {pure} noise {noise}"), base, name.to_string()),
                (eer, history.records.len(), secs),
            )
        })
        .collect();

    let mut grouped: std::collections::BTreeMap<(String, u64, String), Vec<(f64, usize, f64)>> =
        std::collections::BTreeMap::new();
    for (key, value) in results {
        grouped.entry(key).or_default().push(value);
    }
    let mut current = (String::new(), u64::MAX);
    for ((variant, base, cell), entries) in grouped {
        if (variant.clone(), base) != current {
            println!("--- {variant} seed base {base} ---");
            current = (variant, base);
        }
        let eers: Vec<f64> = entries.iter().map(|e| e.0).collect();
        let epochs: Vec<usize> = entries.iter().map(|e| e.1).collect();
        let tmax = entries.iter().map(|e| e.2).fold(0.0, f64::max);
        println!(
            "  {cell:10} mean {:5.2}%  {:?} epochs {:?} max {tmax:.1}s",
            mean(&eers) * 100.0,
            eers.iter().map(|e| (e * 1000.0).round() / 10.0).collect::<Vec<_>>(),
            epochs
        );
    }
}
