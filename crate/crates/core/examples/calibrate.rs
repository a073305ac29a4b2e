//! Runs the ablation grid on a generated bundle and prints median mAP per
//! mode. Generator knobs come from `KEY=VALUE` arguments, e.g.
//! `cargo run --release --example calibrate -- noise_sigma=0.3 seeds=5`.

use std::time::Instant;

use exmem::datagen::{generate, GenConfig};
use exmem::evalkit::evaluate;
use exmem::trainer::{train, EvalSplit, Mode, TrainConfig, TrainData};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn main() {
    let mut gen = GenConfig::default();
    let mut cfg = TrainConfig::default();
    let mut seeds = 3u64;
    let mut modes: Vec<Mode> = Mode::ALL.to_vec();
    for arg in std::env::args().skip(1) {
        let (key, value) = arg.split_once('=').expect("KEY=VALUE");
        match key {
            "noise_sigma" => gen.noise_sigma = value.parse().unwrap(),
            "camera_transform_scale" => gen.camera_transform_scale = value.parse().unwrap(),
            "domain_shift_scale" => gen.domain_shift_scale = value.parse().unwrap(),
            "gen_seed" => gen.seed = value.parse().unwrap(),
            "epochs" => cfg.epochs = value.parse().unwrap(),
            "lr" => cfg.lr = value.parse().unwrap(),
            "lambda" => cfg.lambda = value.parse().unwrap(),
            "beta" => cfg.beta = value.parse().unwrap(),
            "k" => cfg.k = value.parse().unwrap(),
            "lr_decay_epoch" => cfg.lr_decay_epoch = value.parse().unwrap(),
            "hidden_dim" => cfg.hidden_dim = value.parse().unwrap(),
            "embed_dim" => cfg.embed_dim = value.parse().unwrap(),
            "seeds" => seeds = value.parse().unwrap(),
            "modes" => modes = value.split(',').map(|m| m.parse().unwrap()).collect(),
            other => panic!("unknown key {other}"),
        }
    }
    let bundle = generate(&gen).unwrap();
    let data = TrainData::from_bundle(&bundle);
    let split = EvalSplit::from_bundle(&bundle);
    for mode in modes {
        let started = Instant::now();
        let mut maps = Vec::new();
        let mut r1 = Vec::new();
        for s in 0..seeds {
            let c = TrainConfig {
                mode,
                seed: s,
                ..cfg.clone()
            };
            let out = train(&c, data, None).unwrap();
            let r = evaluate(&out.net, split.query, split.gallery).unwrap();
            maps.push(r.map);
            r1.push(r.cmc_at(1));
        }
        println!(
            "{:12} median mAP {:.3}  rank-1 {:.3}  maps {:?}  ({:.1}s)",
            mode.name(),
            median(maps.clone()),
            median(r1),
            maps.iter()
                .map(|m| (m * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>(),
            started.elapsed().as_secs_f64()
        );
    }
}
