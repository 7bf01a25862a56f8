mod common;

use common::*;
use mmrec::eval::{evaluate, Predictor};
use mmrec::gradcheck::finite_difference_check;
use mmrec::graph::Graph;
use mmrec::interest::{ClusteringConfig, PrototypeCount};
use mmrec::matching::Mode;
use mmrec::model::{Model, ModelConfig};
use mmrec::param::{adam_step, AdamConfig, AdamState, ParamStore};
use mmrec::store::Dataset;
use mmrec::synth::generate;
use mmrec::tensor::{Precision, Tensor};
use mmrec::trainer::{finetune, finetune_search, pretrain, refresh_index, EpochLog, Objective, Stage, TrainConfig};
use mmrec::Error;

fn synth(dim: usize) -> (mmrec::config::RunConfig, Dataset) {
    let run = small_run(dim);
    let ds = generate(&run.synth).unwrap().dataset().unwrap();
    (run, ds)
}

fn fresh(run: &mmrec::config::RunConfig, ds: &Dataset, use_ids: bool) -> (Model, ParamStore) {
    let mut store = ParamStore::new(Precision::Single);
    let mc = ModelConfig { use_ids, ..run.model.clone() };
    let model = Model::new(mc, ds.text.dim(), ds.visual.dim(), ds.n_items(), &mut store, 8).unwrap();
    (model, store)
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let (run, ds) = synth(8);
    let (model, mut store) = fresh(&run, &ds, false);
    let cfg = TrainConfig { dropout: 0.0, augment_rate: 0.0, ..run.train.clone() };
    let index = refresh_index(&model, &store, ds.features(), &cfg.clustering).unwrap();
    let examples = ds.train.examples();
    let batch: Vec<_> = examples.iter().step_by(7).take(8).collect();
    let obj = Objective { model: &model, features: ds.features(), index: index.as_ref(), config: &cfg, stage: Stage::Pretrain, epoch: 0 };
    let mut opt = AdamState::new(&store);
    let adam = AdamConfig { lr: 3e-3, ..AdamConfig::default() };
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut g = Graph::new(Precision::Single);
        let b = model.bind(&mut g, &store);
        let l = obj.batch_loss(&mut g, &b, &batch).unwrap().total;
        losses.push(g.value(l).item());
        let grads = g.backward(l).unwrap();
        store.zero_grad();
        store.accumulate(&g, &grads);
        store.clip_grad_norm(5.0);
        adam_step(&mut store, &mut opt, &adam).unwrap();
    }
    assert!(losses[49] < 0.5 * losses[0], "{:?}", (losses[0], losses[49]));
}

#[test]
fn transductive_gradients_reach_the_id_table() {
    let ds = toy_dataset(3, 5, 4, &[true, true, false], &[vec![0, 1, 2, 0, 1], vec![2, 0, 1, 2]]);
    let mut store = ParamStore::new(Precision::Double);
    let mc = ModelConfig { d: 8, heads: 2, ffn: 12, max_seq_len: 8, adapter_hidden: Some(6), use_ids: true, ..ModelConfig::default() };
    let model = Model::new(mc, 5, 4, 3, &mut store, 4).unwrap();
    let cfg = TrainConfig {
        mode: Mode::Transductive,
        tau: 0.5,
        clustering: ClusteringConfig { k: None, prototypes: PrototypeCount::Absolute(2) },
        ..TrainConfig::default()
    };
    let index = refresh_index(&model, &store, ds.features(), &cfg.clustering).unwrap();
    mmrec::trainer::freeze_for_finetune(&model, &mut store, Mode::Transductive).unwrap();
    let examples = mmrec::eval::last_train_examples(&ds.train);
    let batch: Vec<_> = examples.iter().collect();
    let obj = Objective { model: &model, features: ds.features(), index: index.as_ref(), config: &cfg, stage: Stage::Finetune, epoch: 1 };
    let rep = finite_difference_check(&mut store, 1e-5, |g, st| {
        let b = model.bind(g, st);
        obj.batch_loss(g, &b, &batch).map(|p| p.total)
    })
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    assert!(rep.per_param.iter().any(|(n, _)| n == "id.emb"));
    assert!(rep.per_param.iter().all(|(n, _)| n == "id.emb" || n.starts_with("adapter.")));
}

#[test]
fn patience_stops_a_stalled_run() {
    let (run, ds) = synth(8);
    let (model, mut store) = fresh(&run, &ds, false);
    let cfg = TrainConfig { lr: 1e-12, epochs: 20, patience: 2, ..run.train.clone() };
    let mut lines = Vec::new();
    let rep = finetune(&model, &mut store, &ds, &cfg, &mut |e: &EpochLog| lines.push(e.to_string())).unwrap();
    assert!(rep.stopped_early);
    assert_eq!(rep.log.len(), 3);
    assert_eq!(rep.best_epoch, Some(0));
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("0,"), "{}", lines[0]);
}

#[test]
fn finetune_restores_the_best_validation_parameters() {
    let (run, ds) = synth(8);
    let (model, mut store) = fresh(&run, &ds, false);
    let cfg = TrainConfig { epochs: 6, patience: 100, lr: 3e-2, ..run.train.clone() };
    let rep = finetune(&model, &mut store, &ds, &cfg, &mut |_: &EpochLog| {}).unwrap();
    let pred = Predictor { model: &model, store: &store, features: ds.features(), index: rep.index.as_ref() };
    let r = evaluate(&pred, &ds.valid.examples(), &[10]).unwrap();
    assert_eq!(Some(r.recall(10)), rep.best_valid_recall10);
    let best = rep.log.iter().filter_map(|l| l.valid_recall10).fold(f64::MIN, f64::max);
    assert_eq!(rep.best_valid_recall10, Some(best));
}

#[test]
fn learning_rate_search_keeps_the_best_run() {
    let (run, ds) = synth(8);
    let (model, mut store) = fresh(&run, &ds, false);
    let cfg = TrainConfig { epochs: 2, lr_grid: vec![1e-12, 3e-3], ..run.train.clone() };
    let mut epochs = 0;
    let (lr, rep) = finetune_search(&model, &mut store, &ds, &cfg, &mut |_: &EpochLog| epochs += 1).unwrap();
    assert_eq!(epochs, 4);
    assert!(cfg.lr_grid.contains(&lr));
    assert!(rep.log.iter().all(|l| l.lr == lr));
}

#[test]
fn transductive_finetune_requires_an_id_table() {
    let (run, ds) = synth(8);
    let (model, mut store) = fresh(&run, &ds, false);
    let cfg = TrainConfig { mode: Mode::Transductive, epochs: 1, ..run.train.clone() };
    let err = finetune(&model, &mut store, &ds, &cfg, &mut |_: &EpochLog| {}).unwrap_err();
    assert!(matches!(err, Error::Invalid(_)), "{err}");
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (run, ds) = synth(8);
    let go = || {
        let (model, mut store) = fresh(&run, &ds, false);
        let cfg = TrainConfig { epochs: 2, ..run.train.clone() };
        let rep = pretrain(&model, &mut store, &ds, &cfg, &mut |_: &EpochLog| {}).unwrap();
        let values: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
        (values, rep.log.iter().map(|l| l.train_loss).collect::<Vec<_>>())
    };
    assert_eq!(go(), go());
}

#[test]
fn pretraining_beats_random_ranking() {
    let (run, ds) = synth(8);
    let (model, mut store) = fresh(&run, &ds, false);
    let cfg = TrainConfig { epochs: 15, ..run.train.clone() };
    let rep = pretrain(&model, &mut store, &ds, &cfg, &mut |_: &EpochLog| {}).unwrap();
    let losses: Vec<f64> = rep.log.iter().map(|l| l.train_loss).collect();
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    let pred = Predictor { model: &model, store: &store, features: ds.features(), index: rep.index.as_ref() };
    let r = evaluate(&pred, &ds.valid.examples(), &[10]).unwrap();
    assert!(r.recall(10) > 10.0 / ds.n_items() as f64, "{}", r.recall(10));
}
