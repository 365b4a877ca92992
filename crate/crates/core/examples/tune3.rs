// Scratch: embedding geometry of the untrained encoder.

use acsdet_core::asp::{asp_forward, AspParams};
use acsdet_core::data::{gen_synthetic, SynthConfig};
use acsdet_core::encoder::{encoder_forward, EncoderParams};
use acsdet_core::losses::Label;
use acsdet_core::rng::substream;
use ndarray::Array1;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let bona_shift: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.5);

    let mut synth = SynthConfig { noise_level: noise, ..SynthConfig::default() };
    synth.bonafide_process.mean_shift = bona_shift;
    let (train, _, eval) = gen_synthetic(&synth).unwrap();

    let mut rng = substream(1000, "init");
    let encoder = EncoderParams::init(20, 32, 16, &mut rng);
    let asp = AspParams::init(16, &mut rng, Default::default());

    let embed = |frames: &ndarray::Array2<f64>| {
        let seq = encoder_forward(frames, &encoder).unwrap();
        asp_forward(&seq, &asp).unwrap().into_values()
    };

    // Bonafide mean embedding from train.
    let bona: Vec<Array1<f64>> = train
        .records
        .iter()
        .filter(|u| u.key == Label::Bonafide)
        .take(100)
        .map(|u| embed(&u.frames))
        .collect();
    let dim = bona[0].len();
    let mut center = Array1::<f64>::zeros(dim);
    for e in &bona {
        center += e;
    }
    center /= bona.len() as f64;

    let cos = |a: &Array1<f64>, b: &Array1<f64>| {
        a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
    };
    let stats = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        (m, v.sqrt())
    };

    let bona_cos: Vec<f64> = bona.iter().map(|e| cos(e, &center)).collect();
    let (m, s) = stats(&bona_cos);
    println!("bonafide->center cos: mean {m:.4} std {s:.4}");
    let mu_norm: Vec<f64> = bona
        .iter()
        .map(|e| e.slice(ndarray::s![..dim / 2]).dot(&e.slice(ndarray::s![..dim / 2])).sqrt())
        .collect();
    let sd_norm: Vec<f64> = bona
        .iter()
        .map(|e| e.slice(ndarray::s![dim / 2..]).dot(&e.slice(ndarray::s![dim / 2..])).sqrt())
        .collect();
    let (mm, _) = stats(&mu_norm);
    let (sm, _) = stats(&sd_norm);
    println!("bonafide block norms: mu {mm:.3} sigma {sm:.3}");

    for system in ["S01", "S02", "S03"] {
        let scores: Vec<f64> = train
            .records
            .iter()
            .filter(|u| u.system_id == system)
            .take(100)
            .map(|u| cos(&embed(&u.frames), &center))
            .collect();
        let (m, s) = stats(&scores);
        println!("{system}->center cos: mean {m:.4} std {s:.4}");
    }
    for system in ["U01", "U02"] {
        let scores: Vec<f64> = eval
            .records
            .iter()
            .filter(|u| u.system_id == system)
            .take(100)
            .map(|u| cos(&embed(&u.frames), &center))
            .collect();
        let (m, s) = stats(&scores);
        println!("{system}->center cos: mean {m:.4} std {s:.4}");
    }
}
