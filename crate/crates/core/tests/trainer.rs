use plasticnet::config::TrainConfig;
use plasticnet::idx::encode_idx;
use plasticnet::model::Layer;
use plasticnet::trainer::{prepare_data, run, run_full, RunState};
use plasticnet::NetworkState;

fn small(pairs: &[(&str, &str)]) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("epochs", "6"),
        ("e_mod", "3"),
        ("hidden", "12,8"),
        ("num_classes", "4"),
        ("dim", "6"),
        ("n_max", "60"),
        ("p", "10"),
        ("test_per_class", "20"),
        ("batch_size", "16"),
    ]
    .iter()
    .chain(pairs)
    {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn params(net: &NetworkState) -> Vec<Vec<f64>> {
    net.layers().iter().flat_map(|l| l.params()).map(|t| t.data().to_vec()).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    for opt in ["adamw", "sgd"] {
        let cfg = small(&[("lr", "0"), ("optimizer", opt)]);
        let data = prepare_data(&cfg).unwrap();
        let mut state = RunState::new(&cfg, &data.train).unwrap();
        let before = params(&state.net);
        state.train_epoch(&data.train, &cfg, true).unwrap();
        assert_eq!(params(&state.net), before, "{opt}");
    }
}

#[test]
fn separable_toy_is_learned() {
    let cfg = small(&[
        ("num_classes", "2"),
        ("dim", "2"),
        ("separation", "10"),
        ("p", "1"),
        ("n_max", "100"),
        ("epochs", "50"),
        ("e_mod", "50"),
        ("nam", "false"),
        ("lr", "0.01"),
    ]);
    let data = prepare_data(&cfg).unwrap();
    let mut state = RunState::new(&cfg, &data.train).unwrap();
    let mut acc = 0.0;
    for e in 0..cfg.epochs {
        state.epoch = e;
        acc = state.train_epoch(&data.train, &cfg, false).unwrap().1;
    }
    assert!(acc > 0.95, "train accuracy {acc}");
}

#[test]
fn same_seed_same_report() {
    let cfg = small(&[("seed", "3")]);
    let data = prepare_data(&cfg).unwrap();
    let a = run(&cfg, &data).unwrap();
    let b = run(&cfg, &data).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.events.len(), 2);

    let mut other = cfg.clone();
    other.seed = 4;
    assert_ne!(run(&other, &data).unwrap().epochs, a.epochs);
}

#[test]
fn nam_off_matches_plain_training() {
    let plain = small(&[("nam", "false"), ("gr", "false"), ("ws", "false"), ("gda", "false")]);
    let data = prepare_data(&plain).unwrap();
    let fixed = run_full(&plain, &data).unwrap();
    assert!(fixed.report.events.is_empty());

    // A bare loop with no ledger and no events.
    let mut state = RunState::new(&plain, &data.train).unwrap();
    for e in 0..plain.epochs {
        state.epoch = e;
        state.train_epoch(&data.train, &plain, false).unwrap();
    }
    assert_eq!(params(&state.net), params(&fixed.network));

    // The other switches have nothing to act on without NAM.
    let others = small(&[("nam", "false")]);
    let with_flags = run_full(&others, &data).unwrap();
    assert_eq!(with_flags.network, fixed.network);
    assert_eq!(with_flags.report.epochs, fixed.report.epochs);
    assert_eq!(with_flags.report.final_per_class, fixed.report.final_per_class);
}

#[test]
fn optimizer_keys_track_live_ids_through_events() {
    let cfg = small(&[("alpha", "0.5")]);
    let data = prepare_data(&cfg).unwrap();
    let mut state = RunState::new(&cfg, &data.train).unwrap();
    let widths: Vec<usize> = state.net.mutable_layers().iter().map(|&l| state.net.width(l)).collect();
    let mut seen = std::collections::BTreeSet::new();
    for e in 0..cfg.epochs {
        state.epoch = e;
        let window = plasticnet::trainer::is_event_epoch(&cfg, e);
        state.train_epoch(&data.train, &cfg, window).unwrap();
        if window {
            let (_, record) = state.modify(&cfg).unwrap();
            assert_eq!(state.optimizer.neuron_keys(), state.net.live_ids());
            for ev in &record.layers {
                assert!(ev.added_ids.iter().all(|id| seen.insert(*id)), "stable ids are never reused");
                assert!(ev.pruned_ids.iter().all(|id| !state.net.live_ids().contains(id)));
            }
        }
    }
    let after: Vec<usize> = state.net.mutable_layers().iter().map(|&l| state.net.width(l)).collect();
    assert_eq!(widths, after);
}

#[test]
fn class_weighted_loss_changes_training() {
    let base = small(&[]);
    let weighted = small(&[("class_weighted_loss", "true")]);
    let data = prepare_data(&base).unwrap();
    assert_ne!(run(&base, &data).unwrap().epochs, run(&weighted, &data).unwrap().epochs);
}

#[test]
fn ema_and_clone_options_run() {
    let cfg = small(&[("ledger_mode", "ema"), ("init_scheme", "clone"), ("magnitude", "l1")]);
    let data = prepare_data(&cfg).unwrap();
    let r = run(&cfg, &data).unwrap();
    assert_eq!(r.events.len(), 2);
}

#[test]
fn idx_dataset_trains_a_cnn() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = (8, 8);
    let write = |name: &str, n: usize| {
        let mut pixels = Vec::with_capacity(n * h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 3) as u8;
            labels.push(class);
            for p in 0..h * w {
                let lit = p % 3 == class as usize;
                pixels.push(if lit { 200 + (i % 50) as u8 } else { (i * 7 % 40) as u8 });
            }
        }
        let (img, lbl) = encode_idx(&pixels, n, h, w, &labels);
        std::fs::write(dir.path().join(format!("{name}-images-idx3-ubyte")), img).unwrap();
        std::fs::write(dir.path().join(format!("{name}-labels-idx1-ubyte")), lbl).unwrap();
    };
    write("train", 90);
    write("t10k", 30);
    let cfg = small(&[
        ("dataset", &format!("idx:{}", dir.path().display())),
        ("arch", "cnn"),
        ("channels", "4,4"),
        ("residual", "true"),
        ("n_max", "30"),
        ("p", "5"),
        ("lr", "0.01"),
    ]);
    let data = prepare_data(&cfg).unwrap();
    assert_eq!(data.train.histogram(), vec![30, 13, 6]);
    assert_eq!(data.test.len(), 30);
    let out = run_full(&cfg, &data).unwrap();
    assert_eq!(out.report.events.len(), 2);
    assert!(out.network.layers().iter().any(|l| matches!(l, Layer::Conv(_))));
    assert!(out.report.final_overall > 0.5, "{}", out.report.final_overall);
}

#[test]
fn invalid_schedule_rejected() {
    let cfg = small(&[("e_mod", "7")]);
    let data = prepare_data(&small(&[])).unwrap();
    assert!(run(&cfg, &data).is_err());
}
