//! Warm-up and bank initialization on the default synthetic task.

use protoseg::data::DatasetSpec;
use protoseg::metrics::ConfusionMatrix;
use protoseg::model::{extract_features, linear_posterior, Network};
use protoseg::numerics::cosine;
use protoseg::protobank::{init_bank, BankInit};
use protoseg::trainer::{self, pseudo_label_report, DataSplits, TrainConfig};

fn labeled_miou(net: &Network<f32>, data: &DataSplits) -> f64 {
    let mut cm = ConfusionMatrix::new(net.classes());
    for s in &data.labeled {
        let f = extract_features(net, &s.image).unwrap();
        cm.add(&s.label, &linear_posterior(&net.head, &f).unwrap().labels()).unwrap();
    }
    cm.miou().unwrap()
}

#[test]
fn default_warmup_fits_the_labeled_set_and_seeds_the_bank() {
    let data = DataSplits::generate(&DatasetSpec::default()).unwrap();
    let cfg = TrainConfig::default();
    let (net, losses) = trainer::warm_start::<f32>(&cfg, &data, 0).unwrap();
    assert_eq!(losses.len(), cfg.warmup_epochs);

    let miou = labeled_miou(&net, &data);
    assert!(miou >= 0.90, "labeled mIoU {miou}");

    let q = pseudo_label_report(&net, &data.unlabeled, 0.8).unwrap();
    assert!(q.coverage >= 0.5, "valid fraction {}", q.coverage);

    // two prototypes per class sit on the two appearance modes
    let bank = init_bank(
        &net,
        &data.labeled,
        &BankInit {
            k: 2,
            ..BankInit::default()
        },
    )
    .unwrap();
    let d = net.feature_dim();
    for class in 1..data.spec.classes {
        let mut sums = vec![vec![0.0f32; d]; data.spec.modes_per_class];
        for s in &data.labeled {
            let f = extract_features(&net, &s.image).unwrap();
            for ((row, &l), &m) in f.rows().zip(&s.label).zip(&s.modes) {
                if l as usize == class {
                    sums[m as usize].iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
            }
        }
        for j in class * 2..class * 2 + 2 {
            let best = sums.iter().map(|m| cosine(bank.prototype(j), m)).fold(f32::NEG_INFINITY, f32::max);
            assert!(best >= 0.9, "class {class} prototype {j}: cosine {best}");
        }
    }
}

#[test]
fn warmup_loss_falls_after_the_first_epoch() {
    let data = DataSplits::generate(&DatasetSpec::default()).unwrap();
    let cfg = TrainConfig {
        warmup_epochs: 2,
        ..TrainConfig::default()
    };
    let (mut first, mut second) = (0.0, 0.0);
    for seed in 0..3 {
        let (_, losses) = trainer::warm_start::<f32>(&cfg, &data, seed).unwrap();
        first += losses[0];
        second += losses[1];
    }
    assert!(second < first, "{second} vs {first}");
}
