//! Scratch driver for sizing the end-to-end transfer fixture. Debug aid.
//!
//! Accepts key=value overrides, e.g.:
//!   e2e_probe fundamentals=8,15,22,29,33 shift=1.15 noise=0.8 spc=40 \
//!             methods=dann,cat-tempscaling seeds=0,1,2

use std::collections::HashMap;

use catuda::config::Method;
use catuda::data::{generate_synth, normalize, split_train_test, SynthDomainSpec};
use catuda::nets::NetConfig;
use catuda::trainer::{run_training, TrainInputs, TrainerConfig};

fn main() {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .map(|a| {
            let (k, v) = a.split_once('=').expect("key=value");
            (k.to_string(), v.to_string())
        })
        .collect();
    let f = |k: &str, d: f64| args.get(k).map(|v| v.parse().unwrap()).unwrap_or(d);
    let u = |k: &str, d: usize| args.get(k).map(|v| v.parse().unwrap()).unwrap_or(d);

    let fundamentals: Vec<f64> = args
        .get("fundamentals")
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![8.0, 15.0, 22.0, 29.0, 36.0]);
    let sample_length = u("L", 320);
    let shift = f("shift", 1.15);
    let noise = f("noise", 0.8);
    let spc = u("spc", 40);
    let frac = f("frac", 0.8);
    let data_seed = u("data_seed", 7) as u64;

    let base = TrainerConfig {
        total_epochs: u("epochs", 30),
        batch_size: u("bs", 64),
        t_da: u("tda", 3),
        t_pl: u("tpl", 18),
        t_cal: u("tcal", 20),
        tau: f("tau", 0.9),
        ema_alpha: f("ema", 0.95),
        base_lr: f("lr", 0.003),
        lr_drop_epochs: (u("d1", 20), u("d2", 26)),
        sam_rho: f("rho", 0.01),
        mcc_temperature: f("mccT", 2.5),
        ..TrainerConfig::default()
    };

    let mut sets = Vec::new();
    for (domain_id, speed) in [(0u32, 1.0), (1u32, shift)] {
        let spec = SynthDomainSpec {
            speed_factor: speed,
            amplitude_factor: 1.0,
            noise_sigma: noise,
            fundamentals: fundamentals.clone(),
            harmonic_weights: vec![1.0, 0.5, 0.25],
            sample_length,
        };
        spec.validate().unwrap();
        let full = generate_synth(&spec, spc, domain_id, data_seed).unwrap();
        let (train, test) = split_train_test(&full, frac, data_seed).unwrap();
        sets.push(normalize(&train));
        sets.push(normalize(&test));
    }
    let target_test = sets.pop().unwrap();
    let (target_train, target_labels) = sets.pop().unwrap().strip_labels();
    let source_test = sets.pop().unwrap();
    let source_train = sets.pop().unwrap();
    let inputs = TrainInputs {
        source_train: &source_train,
        source_test: &source_test,
        target_train: &target_train,
        target_train_eval_labels: target_labels.as_deref(),
        target_test: &target_test,
    };
    let net = NetConfig {
        input_length: sample_length,
        classes: fundamentals.len(),
    };

    let methods: Vec<Method> = args
        .get("methods")
        .map(|s| s.as_str())
        .unwrap_or("source-only,dann,at-star,cat-tempscaling")
        .split(',')
        .map(|m| Method::parse(m).unwrap())
        .collect();
    let seeds: Vec<u64> = args
        .get("seeds")
        .map(|s| s.as_str())
        .unwrap_or("0,1,2")
        .split(',')
        .map(|x| x.parse().unwrap())
        .collect();

    for method in &methods {
        let (mut acc_sum, mut ece_sum) = (0.0, 0.0);
        let mut accs = Vec::new();
        for &seed in &seeds {
            let cfg = method.trainer_config(&TrainerConfig {
                seed,
                ..base.clone()
            });
            let out = run_training(&cfg, net, &inputs, None).unwrap();
            let last = out.metrics.last().unwrap();
            acc_sum += last.target_test_acc;
            ece_sum += last.target_ece;
            accs.push(format!(
                "{:.3}/{:.3}(T={:.2})",
                last.target_test_acc, last.target_ece, out.calibrator.t
            ));
            println!(
                "  {:?} seed {}: acc {:.4} ece {:.4} srcacc {:.4} T {:.3}",
                method, seed, last.target_test_acc, last.target_ece, last.source_test_acc, out.calibrator.t
            );
        }
        println!(
            "{:?}: mean acc {:.4} mean ece {:.4} [{}]",
            method,
            acc_sum / seeds.len() as f64,
            ece_sum / seeds.len() as f64,
            accs.join(" ")
        );
    }
}
