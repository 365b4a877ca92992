// Scratch: per-epoch dev/eval trajectory for one configuration.

use acsdet_core::data::{gen_synthetic, SynthConfig};
use acsdet_core::eval::{compute_eer, score_dataset, split_scores};
use acsdet_core::model::LossKind;
use acsdet_core::train::{train_loop, CentroidKind, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let centroid = match args.get(1).map(|s| s.as_str()).unwrap_or("acs") {
        "fixed" => CentroidKind::Fixed,
        "trainable" => CentroidKind::Trainable,
        "partial" => CentroidKind::PartialAcs,
        _ => CentroidKind::Acs,
    };
    let loss = match args.get(2).map(|s| s.as_str()).unwrap_or("acs-oc") {
        "wce" => LossKind::Wce,
        "ocs" => LossKind::OcSoftmax,
        _ => LossKind::AcsOc,
    };
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let noise: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let max_epochs: u32 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(40);
    let bona_shift: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.0);

    let mut synth = SynthConfig { noise_level: noise, ..SynthConfig::default() };
    synth.bonafide_process.mean_shift = bona_shift;
    let (train, dev, eval) = gen_synthetic(&synth).unwrap();

    // Hack: re-train from scratch with increasing epoch caps to watch the
    // eval EER trajectory (train_loop has no per-epoch eval hook).
    for cap in [1u32, 2, 3, 5, 8, 12, 17, 25, max_epochs] {
        let config = TrainConfig {
            seed,
            loss,
            centroid,
            learning_rate: lr,
            max_epochs: cap,
            patience: 1000, // disable early stop to observe the full path
            top_k_average: 1,
            ..TrainConfig::default()
        };
        let (model, history) = train_loop(&train, &dev, &config).unwrap();
        let records = score_dataset(&model, &eval).unwrap();
        let (b, s) = split_scores(&records).unwrap();
        let (eval_eer, _) = compute_eer(&b, &s).unwrap();
        let last = history.records.last().unwrap();
        println!(
            "cap {cap:3} dev_eer_last {:6.3}% best_epoch {:3} eval_eer(top1) {:6.3}%",
            last.dev_eer * 100.0,
            history.best_epoch,
            eval_eer * 100.0
        );
    }
}
