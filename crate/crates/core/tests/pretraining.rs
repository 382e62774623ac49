use ubna_core::datagen::{DatasetSpec, DomainDataset};
use ubna_core::model::{Architecture, Model};
use ubna_core::pretrain::{pretrain, PretrainConfig};
use ubna_core::BnLayer;

fn easy_source(seed: u64) -> DomainDataset {
    DomainDataset::new(DatasetSpec {
        height: 12,
        width: 12,
        color_noise: 0.04,
        ..DatasetSpec::default_source(seed, 60)
    })
    .unwrap()
}

#[test]
fn same_seed_gives_identical_model() {
    let data = easy_source(3);
    let cfg = PretrainConfig { steps: 40, seed: 5, ..PretrainConfig::default() };
    let run = || {
        let mut m = Model::init(Architecture::default_segmenter(3, 4), 9).unwrap();
        let log = pretrain(&mut m, &data, &cfg).unwrap();
        (m, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la.to_csv(), lb.to_csv());
}

#[test]
fn easy_task_reaches_high_source_accuracy() {
    let data = easy_source(1);
    let mut m = Model::init(Architecture::default_segmenter(3, 4), 1).unwrap();
    let log = pretrain(&mut m, &data, &PretrainConfig { steps: 500, seed: 1, ..PretrainConfig::default() }).unwrap();
    let tail = &log.records[log.records.len() - 20..];
    let acc = tail.iter().map(|r| r.accuracy).sum::<f64>() / tail.len() as f64;
    assert!(acc >= 0.95, "source accuracy {acc}");
}

#[test]
fn loss_decreases_over_first_hundred_steps() {
    let mut decreased = 0;
    for seed in 0..10 {
        let data = easy_source(seed);
        let mut m = Model::init(Architecture::default_segmenter(3, 4), seed).unwrap();
        let log = pretrain(&mut m, &data, &PretrainConfig { steps: 100, seed, ..PretrainConfig::default() }).unwrap();
        let mean = |r: &[ubna_core::pretrain::TrainRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
        if mean(&log.records[90..]) < mean(&log.records[..10]) {
            decreased += 1;
        }
    }
    assert!(decreased >= 9, "loss decreased for {decreased}/10 seeds");
}

#[test]
fn running_stats_equal_ema_replay_of_logged_batch_stats() {
    let data = easy_source(2);
    let init = Model::init(Architecture::default_segmenter(3, 4), 2).unwrap();
    let mut m = init.clone();
    let cfg = PretrainConfig { steps: 80, bn_momentum: 0.1, seed: 2, ..PretrainConfig::default() };
    let log = pretrain(&mut m, &data, &cfg).unwrap();
    let replay: Vec<(Vec<f64>, Vec<f64>)> = init
        .bn_layers()
        .enumerate()
        .map(|(l, bn): (usize, &BnLayer)| {
            let mut mean = bn.running_mean().0.clone();
            let mut var = bn.running_var().0.clone();
            for step in &log.batch_stats {
                let (bm, bv) = &step[l];
                for c in 0..mean.len() {
                    mean[c] = (1.0 - cfg.bn_momentum) * mean[c] + cfg.bn_momentum * bm.0[c];
                    var[c] = (1.0 - cfg.bn_momentum) * var[c] + cfg.bn_momentum * bv.0[c];
                }
            }
            (mean, var)
        })
        .collect();
    for (bn, (mean, var)) in m.bn_layers().zip(&replay) {
        for c in 0..mean.len() {
            assert!((bn.running_mean().0[c] - mean[c]).abs() <= 1e-10);
            assert!((bn.running_var().0[c] - var[c]).abs() <= 1e-10);
        }
    }
}
