use hardreid::experiment::ExperimentConfig;
use hardreid::model::{init_params, NetConfig};
use hardreid::trainer::{pretrain_coarse, ClassMap, TrainConfig};

fn first_and_last_epoch_means(log: &[hardreid::trainer::TrainLogRow]) -> (f64, f64) {
    let first = log[0].epoch;
    let last = log[log.len() - 1].epoch;
    let mean = |e: usize| {
        let rows: Vec<f64> = log.iter().filter(|r| r.epoch == e).map(|r| r.l_total).collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    (mean(first), mean(last))
}

#[test]
fn coarse_pretraining_lowers_the_loss_on_most_seeds() {
    let mut exp = ExperimentConfig::default();
    exp.scenario.num_identities = 12;
    let mut decreased = 0;
    for seed in 0..3u64 {
        let set = exp.generate(seed).unwrap();
        let base_train = set.base.subset(hardreid::data::Split::Train).unwrap();
        let classes = ClassMap::from_dataset(&base_train);
        let net = NetConfig {
            input_dim: set.provenance.feature_dim,
            num_classes: classes.num_classes(),
            init_seed: seed,
            ..exp.net.clone()
        };
        let cfg = TrainConfig {
            pretrain_epochs: 8,
            seed,
            batch_spec: hardreid::data::BatchSpec { p: 4, k: 4, seed },
            ..exp.train.clone()
        };
        let params = init_params(&net).unwrap();
        let (_, log) = pretrain_coarse(&net, params, &set.coarse, &classes, &cfg).unwrap();
        assert!(!log.is_empty());
        let (first, last) = first_and_last_epoch_means(&log);
        if last < first {
            decreased += 1;
        }
    }
    assert!(decreased >= 2, "pretraining loss fell on only {decreased}/3 seeds");
}
