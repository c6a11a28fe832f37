//! Protocol-level properties: single-client federation must reproduce
//! centralized SGD bit for bit, the data-noise budget must not grow with
//! rounds, and a short run must actually learn.

use henfl::config::{DataRole, ExperimentConfig, Scenario};
use henfl::data::{PixelMatrix, RawDataset};
use henfl::dp::cumulative_leakage;
use henfl::fl::{
    batch_tensor, dataset_tensor, dropout_seed, epoch_permutation, run_round, server_init,
    shard_dataset, Client, Hyper,
};
use henfl::nn::{evaluate_accuracy, loss_and_grad, sgd_step};
use henfl::rng::{derive_seed, next_below, rng_from_seed, tags};

/// Ten distinguishable 8x8 glyphs: class c gets a bright band at row/column
/// patterns derived from c, plus per-image pixel jitter.
fn synthetic_digits(count: usize, side: usize, seed: u64) -> RawDataset {
    let mut rng = rng_from_seed(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = (i % 10) as u8;
        let mut pixels = vec![0u8; side * side];
        for (index, pixel) in pixels.iter_mut().enumerate() {
            let row = index / side;
            let col = index % side;
            let on = if (class as usize) < 5 {
                row % 5 == class as usize % 5
            } else {
                col % 5 == class as usize % 5
            };
            let base: u8 = if on { 220 } else { 20 };
            let jitter = next_below(&mut rng, 30) as u8;
            *pixel = base.saturating_add(jitter);
        }
        images.push(PixelMatrix::new(side, side, pixels));
        labels.push(class);
    }
    RawDataset::new(images, labels).unwrap()
}

fn test_config(scenario: Scenario, side: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(scenario, 2.0);
    cfg.input_side = side;
    cfg
}

#[test]
fn one_client_rounds_match_centralized_sgd_bitwise() {
    // Power-of-two learning rate so the (global - local) / lr scaling on
    // the wire divides and multiplies exactly.
    let mut cfg = test_config(Scenario::One, 8);
    cfg.clients = 1;
    cfg.learning_rate = 0.015625;
    let raw = synthetic_digits(12, 8, 41);
    let (mut server, broadcast) = server_init(&cfg).unwrap();
    let mut client = Client::new(0, raw, cfg.seed);
    client.pretrain(&broadcast, &cfg).unwrap();
    let shard = client.private().unwrap().clone();

    let hyper = Hyper {
        local_epochs: 1,
        batch_size: shard.len(), // full batch
        learning_rate: cfg.learning_rate,
        server_lr: 1.0,
    };

    let mut centralized = server.global().clone();
    let client_seed = derive_seed(cfg.seed, tags::CLIENT, 0);

    for round in 0..5u32 {
        run_round(&mut server, std::slice::from_ref(&client), &hyper, None).unwrap();

        // Centralized step with the identical batch order and dropout seed.
        let order = epoch_permutation(client_seed, round, 0, shard.len());
        let (batch, labels) = batch_tensor(&shard, &order).unwrap();
        let seed = dropout_seed(client_seed, round, 0, 0);
        let (_, gradient) = loss_and_grad(&centralized, &batch, &labels, seed).unwrap();
        centralized = sgd_step(&centralized, &gradient, hyper.learning_rate).unwrap();

        for (f, c) in server.global().as_flat().iter().zip(centralized.as_flat()) {
            assert_eq!(
                f.to_bits(),
                c.to_bits(),
                "round {round}: federated and centralized parameters diverged"
            );
        }
    }
}

#[test]
fn noise_draws_do_not_grow_with_rounds() {
    let mut cfg = test_config(Scenario::Two, 8);
    cfg.clients = 2;
    cfg.batch_size = 4;
    let raw = synthetic_digits(24, 8, 43);
    let images = raw.len() as u64;
    let pixels_per_image = 4 * 4; // 8x8 compressed by 2x2 blocks

    let run = |rounds: u32| -> u64 {
        let (mut server, broadcast) = server_init(&cfg).unwrap();
        let shards = shard_dataset(&raw, cfg.clients, cfg.seed).unwrap();
        let mut clients: Vec<Client> = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| Client::new(id, shard, cfg.seed))
            .collect();
        let mut draws = 0;
        for client in &mut clients {
            draws += client.pretrain(&broadcast, &cfg).unwrap().noise_draws();
        }
        let hyper = Hyper::from_config(&cfg);
        for _ in 0..rounds {
            run_round(&mut server, &clients, &hyper, None).unwrap();
        }
        // Training never touches the noise stream, so the count recorded
        // at preparation is the run's total.
        clients
            .iter()
            .map(|c| c.private().unwrap().noise_draws())
            .sum::<u64>()
            .max(draws)
    };

    let one_round = run(1);
    let ten_rounds = run(10);
    assert_eq!(one_round, images * pixels_per_image);
    assert_eq!(ten_rounds, one_round, "noise budget grew with round count");
}

#[test]
fn reported_leakage_is_one_shot_while_baseline_composes() {
    let epsilon = 1.5;
    assert_eq!(cumulative_leakage(epsilon, 1), epsilon);
    assert_eq!(cumulative_leakage(epsilon, 10), 15.0);
}

#[test]
fn short_federated_run_learns_synthetic_digits() {
    let mut cfg = test_config(Scenario::One, 8);
    cfg.clients = 2;
    cfg.batch_size = 16;
    cfg.learning_rate = 0.05;
    let train = synthetic_digits(400, 8, 47);
    let eval_raw = synthetic_digits(100, 8, 48);

    let (mut server, broadcast) = server_init(&cfg).unwrap();
    let shards = shard_dataset(&train, cfg.clients, cfg.seed).unwrap();
    let mut clients: Vec<Client> = shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| Client::new(id, shard, cfg.seed))
        .collect();
    for client in &mut clients {
        client.pretrain(&broadcast, &cfg).unwrap();
    }
    let eval =
        henfl::data::prepare_private_dataset(&eval_raw, &cfg, DataRole::Test).unwrap();
    let (eval_images, eval_labels) = dataset_tensor(&eval).unwrap();

    let hyper = Hyper::from_config(&cfg);
    let initial = evaluate_accuracy(server.global(), &eval_images, &eval_labels).unwrap();
    let mut last = initial;
    for _ in 0..12 {
        let record = run_round(
            &mut server,
            &clients,
            &hyper,
            Some((&eval_images, &eval_labels)),
        )
        .unwrap();
        last = record.accuracy.unwrap();
    }
    assert!(
        last > 0.6,
        "federated training failed to learn: {initial:.3} -> {last:.3}"
    );
}

#[test]
fn two_runs_with_the_same_seed_are_bit_identical() {
    let mut cfg = test_config(Scenario::Two, 8);
    cfg.clients = 2;
    cfg.batch_size = 8;
    let raw = synthetic_digits(32, 8, 51);

    let run = || {
        let (mut server, broadcast) = server_init(&cfg).unwrap();
        let shards = shard_dataset(&raw, cfg.clients, cfg.seed).unwrap();
        let mut clients: Vec<Client> = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| Client::new(id, shard, cfg.seed))
            .collect();
        for client in &mut clients {
            client.pretrain(&broadcast, &cfg).unwrap();
        }
        let hyper = Hyper::from_config(&cfg);
        for _ in 0..3 {
            run_round(&mut server, &clients, &hyper, None).unwrap();
        }
        server.global().clone()
    };

    let a = run();
    let b = run();
    assert_eq!(a, b);
}
