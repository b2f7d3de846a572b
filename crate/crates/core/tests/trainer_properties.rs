//! Whole-run properties of the trainer on small synthetic worlds.

use dcg_core::corpus::{
    leave_last_split, simulate_biased_logs, ClickRecord, Dataset, ItemCatalog, ItemId, World,
    WorldConfig,
};
use dcg_core::encoder::encode_user;
use dcg_core::retrieval::{multi_hit_rate_at_k, top_k, ItemIndex};
use dcg_core::trainer::{run_workers, train, Sequential, TrainConfig, TrainMode};
use dcg_core::Error;

fn world(items: usize, users: usize, seed: u64) -> World {
    simulate_biased_logs(&WorldConfig {
        num_items: items,
        num_users: users,
        interactions_per_user: 15,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small_config(mode: TrainMode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        batch_size: 32,
        queue_capacity: 160,
        negatives: 16,
        epochs: 3,
        seed,
        ..Default::default()
    }
}

#[test]
fn cached_queue_loss_decreases_over_first_three_epochs() {
    let w = world(20, 150, 1);
    let cfg = TrainConfig {
        epochs: 5,
        ..small_config(TrainMode::ClrecQueueCached, 1)
    };
    let (_, history) = train(&cfg, &w.catalog, &w.dataset, &[]).unwrap();
    let losses: Vec<f64> = history.epochs.iter().map(|e| e.mean_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
}

#[test]
fn one_worker_reproduces_single_process_training_bitwise() {
    let w = world(30, 80, 2);
    for mode in TrainMode::ALL {
        let cfg = small_config(mode, 2);
        let (a, ha) = train(&cfg, &w.catalog, &w.dataset, &[]).unwrap();
        let (b, hb) = run_workers(&cfg, &w.catalog, &w.dataset, &[], 1, &Sequential).unwrap();
        assert_eq!(a, b, "{}", mode.name());
        assert_eq!(ha, hb, "{}", mode.name());
    }
}

#[test]
fn multi_worker_training_is_deterministic() {
    let w = world(30, 80, 3);
    let cfg = small_config(TrainMode::ClrecQueue, 3);
    let (a, ha) = run_workers(&cfg, &w.catalog, &w.dataset, &[], 4, &Sequential).unwrap();
    let (b, hb) = run_workers(&cfg, &w.catalog, &w.dataset, &[], 4, &Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        ha.epochs.last().unwrap().mean_loss.to_bits(),
        hb.epochs.last().unwrap().mean_loss.to_bits()
    );
    let (single, _) = run_workers(&cfg, &w.catalog, &w.dataset, &[], 1, &Sequential).unwrap();
    assert_ne!(a, single, "private queues should change the candidate sets");
}

#[test]
fn zero_weight_u2u_leaves_the_trajectory_unchanged() {
    let w = world(30, 80, 4);
    let base = small_config(TrainMode::ClrecQueueCached, 4);
    let mut aux = base.clone();
    aux.u2u.enabled = true;
    aux.u2u.weight = 0.0;
    aux.u2u.queue_capacity = 160;
    let (a, ha) = train(&base, &w.catalog, &w.dataset, &[]).unwrap();
    let (b, hb) = train(&aux, &w.catalog, &w.dataset, &[]).unwrap();
    assert_eq!(a, b);
    for (x, y) in ha.epochs.iter().zip(&hb.epochs) {
        assert_eq!(x.mean_loss.to_bits(), y.mean_loss.to_bits());
    }
    assert!(
        hb.epochs.last().unwrap().counters.user_encoder_forwards
            > ha.epochs.last().unwrap().counters.user_encoder_forwards
    );
}

#[test]
fn no_mode_produces_non_finite_losses() {
    for seed in 0..10 {
        let w = world(25, 40, 100 + seed);
        for mode in TrainMode::ALL {
            let cfg = TrainConfig {
                epochs: 1,
                ..small_config(mode, seed)
            };
            let result = train(&cfg, &w.catalog, &w.dataset, &[]);
            match result {
                Ok((params, history)) => {
                    assert!(
                        history.epochs.iter().all(|e| e.mean_loss.is_finite()),
                        "{} seed {seed}",
                        mode.name()
                    );
                    assert!(params.tables().iter().flatten().all(|x| x.is_finite()));
                }
                Err(e) => panic!("{} seed {seed}: {e}", mode.name()),
            }
        }
    }
}

#[test]
fn divergent_training_names_step_and_mode() {
    let w = world(20, 40, 5);
    let mut cfg = small_config(TrainMode::ClrecInBatch, 5);
    cfg.encoder.similarity = dcg_core::encoder::SimilarityMode::InnerProduct;
    cfg.encoder.temperature = 1.0;
    cfg.encoder.init_scale = 1e200;
    let err = train(&cfg, &w.catalog, &w.dataset, &[]).unwrap_err();
    assert!(
        matches!(
            err,
            Error::NonFiniteLoss {
                step: 0,
                mode: "clrec_inbatch"
            }
        ),
        "{err:?}"
    );
}

/// A user's earlier clicks and the clicks that follow them.
type Continuation = (Vec<ItemId>, Vec<ItemId>);

/// Holds out each user's last `n` clicks as a multi-step target.
fn hold_out_tail(dataset: &Dataset, n: usize) -> (Dataset, Vec<Continuation>) {
    let mut train = Vec::<ClickRecord>::new();
    let mut eval = Vec::new();
    for (_, clicks) in dataset.users() {
        let cut = clicks.len().saturating_sub(n);
        train.extend_from_slice(&clicks[..cut]);
        if cut > 0 {
            let items = |c: &[ClickRecord]| c.iter().map(|r| r.item).collect::<Vec<_>>();
            eval.push((items(&clicks[..cut]), items(&clicks[cut..])));
        }
    }
    (
        Dataset::from_records(train, dataset.num_items()).unwrap(),
        eval,
    )
}

fn multi_step_hit_rate(
    params: &dcg_core::encoder::Parameters,
    catalog: &ItemCatalog,
    eval: &[Continuation],
    max_len: usize,
) -> f64 {
    let index = ItemIndex::build(params, catalog).unwrap();
    let total: f64 = eval
        .iter()
        .map(|(prefix, targets)| {
            let u = encode_user(
                params,
                catalog,
                &prefix[prefix.len().saturating_sub(max_len)..],
            )
            .unwrap();
            multi_hit_rate_at_k(&top_k(&u, &index, 50), targets, 50)
        })
        .sum();
    total / eval.len() as f64
}

#[test]
fn u2u_auxiliary_task_is_non_inferior() {
    // HR@50 over each user's next five clicks, u2u weight 0.3 against 0.
    const MARGIN: f64 = 0.01;
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in [1, 2, 3] {
        let w = simulate_biased_logs(&WorldConfig {
            num_items: 300,
            num_users: 600,
            interactions_per_user: 20,
            seed,
            ..Default::default()
        })
        .unwrap();
        let (train_set, eval) = hold_out_tail(&w.dataset, 5);
        let base = TrainConfig {
            mode: TrainMode::ClrecQueueCached,
            batch_size: 128,
            queue_capacity: 1280,
            // At 5 epochs the auxiliary arm is still catching up: its user-tower
            // gradients inflate the adagrad accumulators.
            epochs: 10,
            seed,
            ..Default::default()
        };
        let mut aux = base.clone();
        aux.u2u.enabled = true;
        aux.u2u.weight = 0.3;
        aux.u2u.queue_capacity = 1280;
        let (p0, _) = train(&base, &w.catalog, &train_set, &[]).unwrap();
        let (p1, _) = train(&aux, &w.catalog, &train_set, &[]).unwrap();
        without.push(multi_step_hit_rate(
            &p0,
            &w.catalog,
            &eval,
            base.max_prefix_len,
        ));
        with.push(multi_step_hit_rate(
            &p1,
            &w.catalog,
            &eval,
            base.max_prefix_len,
        ));
    }
    for (a, b) in with.iter().zip(&without) {
        assert!(*a >= b - MARGIN, "with {with:?} without {without:?}");
    }
}

#[test]
fn validation_split_is_consistent_with_training_data() {
    let w = world(30, 60, 6);
    let split = leave_last_split(&w.dataset).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        eval_k: 10,
        ..small_config(TrainMode::ClrecQueueCached, 6)
    };
    let (_, history) = train(&cfg, &w.catalog, &split.train, &split.valid).unwrap();
    for e in &history.epochs {
        let hr = e.valid_hit_rate.unwrap();
        assert!((0.0..=1.0).contains(&hr));
    }
    let steps: u64 = history.epochs.iter().map(|e| e.steps).sum();
    assert_eq!(steps, 2 * history.epochs[0].steps);
}
