use super::*;
use crate::autodiff::ParamStore;
use crate::spectra::GRID_N;
use crate::synth::synth_dataset;

#[test]
fn adamw_zero_grads_no_decay_leaves_params_unchanged() {
    let mut store = ParamStore::new();
    store
        .add("w", Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap())
        .unwrap();
    let mut opt = AdamW::new(&store);
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    opt.step(&mut store, 1e-3, &cfg).unwrap();
    assert_eq!(store.value(0).data(), &[1.0, -2.0, 0.5]);
}

#[test]
fn adamw_decay_only_shrinks_multiplicatively() {
    let mut store = ParamStore::new();
    store
        .add("w", Tensor::from_vec(1, 2, vec![2.0, -4.0]).unwrap())
        .unwrap();
    let mut opt = AdamW::new(&store);
    let cfg = TrainConfig::default(); // wd = 0.01
    let lr = 1e-3;
    opt.step(&mut store, lr, &cfg).unwrap();
    let k = 1.0 - lr * cfg.weight_decay;
    assert!((store.value(0).data()[0] - 2.0 * k).abs() < 1e-15);
    assert!((store.value(0).data()[1] + 4.0 * k).abs() < 1e-15);
}

#[test]
fn adamw_single_step_matches_closed_form() {
    // one scalar, one step: update = -lr * mhat / (sqrt(vhat) + eps) after
    // the decoupled decay, with mhat = g, vhat = g^2 after bias correction
    let g = 3.7;
    let x0 = 1.5;
    let mut store = ParamStore::new();
    store.add("w", Tensor::scalar(x0)).unwrap();
    let mut tape = Tape::new();
    let vars = store.inject(&mut tape).unwrap();
    let scaled = tape.scale(vars[0], g).unwrap();
    let loss = tape.sum_all(scaled).unwrap();
    store.accumulate(&tape, &vars, loss).unwrap();
    assert!((store.grad(0).item() - g).abs() < 1e-15);

    let cfg = TrainConfig::default();
    let lr = 1e-3;
    let mut opt = AdamW::new(&store);
    opt.step(&mut store, lr, &cfg).unwrap();
    let decayed = x0 * (1.0 - lr * cfg.weight_decay);
    let expected = decayed - lr * g / (g.abs() + cfg.adam_eps);
    assert!((store.value(0).item() - expected).abs() < 1e-12);
}

#[test]
fn adamw_rejects_nan_grads() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::scalar(1.0)).unwrap();
    store.grad_mut(0).data_mut()[0] = f64::NAN;
    let mut opt = AdamW::new(&store);
    assert!(opt.step(&mut store, 1e-3, &TrainConfig::default()).is_err());
}

#[test]
fn plateau_halves_after_patience_and_respects_min_lr() {
    let mut p = Plateau::new(1e-3, 0.5, 3, 1e-4);
    p.step(1.0);
    for _ in 0..2 {
        assert_eq!(p.step(2.0), 1e-3);
    }
    assert_eq!(p.step(2.0), 5e-4); // third bad epoch triggers the cut
    p.step(0.5); // improvement resets
    for _ in 0..20 {
        p.step(9.0);
    }
    assert!(p.lr >= 1e-4);
    assert_eq!(p.lr, 1e-4);
}

fn single_absorber_records(n: usize) -> Vec<DatasetRecord> {
    (0..n)
        .map(|i| DatasetRecord {
            lattice: [[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]],
            pbc: [true, true, true],
            positions: vec![[0.0, 0.0, 0.0], [2.0 + 0.001 * i as f64, 0.0, 0.0]],
            numbers: vec![26, 8],
            absorber: 0,
            spectrum: vec![i as f64; GRID_N],
            e0: 7112.0 + i as f64 * 0.01,
        })
        .collect()
}

#[test]
fn split_is_exact_for_single_absorber_records() {
    let recs = single_absorber_records(100);
    let (tr, va, te) = split_dataset(&recs, 11).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
    let (tr2, va2, te2) = split_dataset(&recs, 11).unwrap();
    assert_eq!((tr, va, te), (tr2, va2, te2));
    let (tr3, _, _) = split_dataset(&recs, 12).unwrap();
    assert_ne!(tr3, split_dataset(&recs, 11).unwrap().0);
}

#[test]
fn split_keeps_sibling_absorber_graphs_together() {
    let grid = SpectrumGrid::canonical();
    let recs = synth_dataset(80, 3, &grid).unwrap();
    let (tr, va, te) = split_dataset(&recs, 5).unwrap();
    let assign = |i: usize| {
        if tr.contains(&i) {
            0
        } else if va.contains(&i) {
            1
        } else {
            assert!(te.contains(&i));
            2
        }
    };
    let mut by_hash: std::collections::HashMap<u64, Vec<usize>> = Default::default();
    for (i, r) in recs.iter().enumerate() {
        by_hash.entry(r.structure_hash()).or_default().push(assign(i));
    }
    for (_, splits) in by_hash {
        assert!(splits.windows(2).all(|w| w[0] == w[1]));
    }
    assert_eq!(tr.len() + va.len() + te.len(), 80);
}

#[test]
fn config_overrides_by_dotted_key() {
    let mut run = RunConfig::default();
    run.apply_override("model.layers=2").unwrap();
    run.apply_override("train.lr0=0.01").unwrap();
    run.apply_override("loss.lambda_e0=0.5").unwrap();
    assert_eq!(run.model.layers, 2);
    assert_eq!(run.train.lr0, 0.01);
    assert_eq!(run.loss.lambda_e0, 0.5);
    assert!(run.apply_override("model.no_such_key=1").is_err());
    assert!(run.apply_override("bogus").is_err());
}

fn tiny_run_config(seed: u64, max_epochs: usize) -> RunConfig {
    let mut run = RunConfig::default();
    run.model = ModelConfig {
        layers: 2,
        m0: 4,
        m1: 2,
        m2: 1,
        n_radial: 6,
        readout_hidden: 16,
        attention_hidden: 8,
        gate_hidden: 8,
        e0_hidden: 8,
        ..Default::default()
    };
    run.train.seed = seed;
    run.train.max_epochs = max_epochs;
    run.train.batch_size = 8;
    run.loss.anneal_start = 1;
    run.loss.anneal_len = 1;
    run
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let run = tiny_run_config(3, 1);
    let model = Model::new(run.model.clone(), 3).unwrap();
    let stats = E0Stats {
        mean: 7112.1,
        std: 0.37,
    };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model, &stats, &run).unwrap();
    let (loaded, stats2, run2) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(stats.mean.to_bits(), stats2.mean.to_bits());
    assert_eq!(stats.std.to_bits(), stats2.std.to_bits());
    assert_eq!(run2.model.layers, run.model.layers);
    for id in 0..model.store.len() {
        let a = model.store.value(id).data();
        let b = loaded.store.value(id).data();
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn short_training_runs_deterministically_and_improves() {
    let grid = SpectrumGrid::canonical();
    let recs = synth_dataset(40, 9, &grid).unwrap();
    let run = tiny_run_config(1, 6);
    let a = train_loop(&recs, &run, None).unwrap();
    let b = train_loop(&recs, &run, None).unwrap();
    assert_eq!(a.metrics.len(), b.metrics.len());
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits());
        assert_eq!(x.loss_spec.to_bits(), y.loss_spec.to_bits());
    }
    let first = a
        .metrics
        .iter()
        .find(|m| m.split == "train")
        .unwrap()
        .loss_spec;
    let last = a
        .metrics
        .iter()
        .rev()
        .find(|m| m.split == "train")
        .unwrap()
        .loss_spec;
    assert!(last < first, "train spec loss {} -> {}", first, last);
    assert!(a.test_report.spec.is_finite());
}
