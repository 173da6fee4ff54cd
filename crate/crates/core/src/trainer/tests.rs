use super::*;
use crate::blocks::AttnScale;
use crate::data::{build_vocab, encode_corpus, generate_bitext, SynthTaskSpec};
use crate::kernel::{ParamGroup, ParamStore, Tensor};
use crate::microbert::MicroBertConfig;

fn tiny_data() -> (TrainData, usize, usize) {
    let spec = SynthTaskSpec {
        content_vocab: 6,
        min_len: 2,
        max_len: 4,
        train: 40,
        valid: 10,
        test: 10,
        seed: 5,
        ..SynthTaskSpec::copy_task()
    };
    let bt = generate_bitext(&spec).unwrap();
    let (sv, tv) = build_vocab([&bt.train[..]]);
    let data = TrainData {
        train: encode_corpus(&bt.train, &sv, &tv),
        valid: encode_corpus(&bt.valid, &sv, &tv),
        test: encode_corpus(&bt.test, &sv, &tv),
    };
    (data, sv.len(), tv.len())
}

fn tiny_config(src: usize, tgt: usize, variant: Variant) -> TrainConfig {
    let model = ModelConfig {
        src_vocab: src,
        tgt_vocab: tgt,
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        n_layers: 1,
        dropout: 0.1,
        max_len: 32,
        attn_scale: AttnScale::PerHead,
        combiner: CombinerKind::Gated,
        use_bert: true,
        encdec_self_keys: true,
        label_smoothing: 0.1,
        bert: MicroBertConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.1,
            max_len: 32,
            vocab: src,
        },
    };
    TrainConfig {
        plan: PhasePlan {
            epochs: [2, 1, 2],
            ..PhasePlan::default()
        },
        schedule: LrSchedule {
            warmup: 10,
            peak: 3e-3,
            floor: 1e-7,
        },
        batch_tokens: 40,
        seed: 3,
        valid_bleu: true,
        eval_search: SearchMode::Greedy,
        final_search: SearchMode::Beam(BeamConfig {
            width: 2,
            ..BeamConfig::default()
        }),
        ..TrainConfig::new(model, variant)
    }
}

#[test]
fn lr_schedule_examples() {
    let s = LrSchedule::default();
    assert!((s.lr_at(2000).unwrap() - 2.5005e-4).abs() < 1e-15);
    assert!((s.lr_at(4000).unwrap() - 5e-4).abs() < 1e-15);
    assert!((s.lr_at(16000).unwrap() - 2.5e-4).abs() < 1e-15);
    assert!((s.lr_at(1).unwrap() - (1e-7 + (5e-4 - 1e-7) / 4000.0)).abs() < 1e-18);
    assert!(s.lr_at(0).is_err());
    assert!(LrSchedule { warmup: 0, ..s }.lr_at(5).is_err());
}

#[test]
fn adam_matches_hand_computation() {
    let mut store = ParamStore::new();
    let w = store.register("w", ParamGroup::EncDec, Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let frozen = store.register("f", ParamGroup::Bert, Tensor::new(vec![1], vec![7.0]).unwrap()).unwrap();
    store.set_group_trainable(ParamGroup::Bert, false);
    let mut adam = AdamState::new();
    // constant gradient 0.5: the bias-corrected moments stay at (0.5, 0.25),
    // so every update is lr * 0.5 / (0.5 + eps)
    for expected in [0.9, 0.8, 0.7] {
        store.zero_grad();
        store.grad_mut(w)[0] = 0.5;
        adam.step(&mut store, 0.1).unwrap();
        assert!((store.value(w).data()[0] - expected).abs() < 1e-7);
    }
    assert_eq!(store.value(frozen).data()[0], 7.0);
    assert!(adam.first_moment(frozen.index()).is_none());
    // moment after three steps: 0.5 * (1 - 0.9^3)
    assert!((adam.first_moment(w.index()).unwrap()[0] - 0.5 * (1.0 - 0.729)).abs() < 1e-15);

    store.grad_mut(w)[0] = f64::NAN;
    let err = adam.step(&mut store, 0.1).unwrap_err();
    assert!(err.to_string().contains("`w`"), "{err}");

    let records = adam.to_records(&store);
    let back = AdamState::from_records(&store, adam.step, &records).unwrap();
    assert_eq!(back, adam);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = WeightSet::default();
    records.names = vec!["a".into(), "b.c".into()];
    records.tensors = vec![
        Tensor::new(vec![2, 2], vec![0.1, -2.5e-300, f64::MIN_POSITIVE, 1.0 / 3.0]).unwrap(),
        Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
    ];
    let ck = Checkpoint {
        config: serde_json::json!({"d": 8, "x": 0.1 + 0.2}),
        meta: serde_json::json!({"epoch": 3, "loss": 1.0 / 7.0}),
        records,
    };
    let p1 = dir.path().join("one.ckpt");
    let p2 = dir.path().join("two.ckpt");
    ck.save(&p1).unwrap();
    let back = Checkpoint::load(&p1).unwrap();
    assert_eq!(back, ck);
    back.save(&p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    assert!(!dir.path().join("one.tmp").exists());

    let bytes = fs::read(&p1).unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
}

#[test]
fn averaging_oracle_and_mismatch() {
    let set = |vals: [f64; 3]| WeightSet {
        names: vec!["p".into(), "q".into()],
        tensors: vec![
            Tensor::new(vec![2], vec![vals[0], vals[1]]).unwrap(),
            Tensor::new(vec![1], vec![vals[2]]).unwrap(),
        ],
    };
    let avg = average_checkpoints(&[set([1.0, 2.0, 3.0]), set([3.0, 4.0, -3.0]), set([2.0, 0.0, 6.0])]).unwrap();
    assert_eq!(avg.get("p").unwrap().data(), &[2.0, 2.0]);
    assert_eq!(avg.get("q").unwrap().data(), &[2.0]);
    assert_eq!(average_checkpoints(&[set([1.0, 2.0, 3.0])]).unwrap(), set([1.0, 2.0, 3.0]));

    let mut other = set([0.0; 3]);
    other.tensors[1] = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
    let err = average_checkpoints(&[set([0.0; 3]), other]).unwrap_err();
    assert!(err.to_string().contains("`q`"), "{err}");
    assert!(average_checkpoints(&[]).is_err());
}

#[test]
fn ring_keeps_the_window_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut ring = CheckpointRing::new(3, Some(dir.path().to_path_buf())).unwrap();
    for e in 0..7u64 {
        let ws = WeightSet {
            names: vec!["p".into()],
            tensors: vec![Tensor::new(vec![1], vec![e as f64]).unwrap()],
        };
        let ck = Checkpoint {
            config: serde_json::Value::Null,
            meta: serde_json::Value::Null,
            records: ws.clone(),
        };
        ring.push(e, ws, Some(&ck)).unwrap();
        assert!(ring.len() <= 3);
    }
    assert_eq!(ring.epochs(), vec![4, 5, 6]);
    assert_eq!(ring.average().unwrap().get("p").unwrap().data(), &[5.0]);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 3);
    assert!(CheckpointRing::new(0, None).is_err());
}

#[test]
fn accumulated_gradients_equal_the_concatenated_batch() {
    let (data, sv, tv) = tiny_data();
    let mut cfg = tiny_config(sv, tv, Variant::M0).model;
    cfg.dropout = 0.0;
    cfg.bert.dropout = 0.0;
    cfg.label_smoothing = 0.0;
    // two batches with the same number of target tokens
    let by_len = |n: usize| -> Vec<usize> { (0..data.train.len()).filter(|&i| data.train[i].tgt.len() == n).collect() };
    let idx = by_len(3);
    assert!(idx.len() >= 4);
    let a = Batch::from_pairs(&data.train, &idx[0..2]);
    let b = Batch::from_pairs(&data.train, &idx[2..4]);
    let both = Batch::from_pairs(&data.train, &idx[0..4]);

    let mut m1 = BertJamModel::new(&cfg, &mut RngStream::new(1, 0).rng()).unwrap();
    m1.set_phase(3).unwrap();
    let mut m2 = m1.clone();
    let l1 = accumulate_gradients(&mut m1, &[a, b], 9).unwrap();
    let l2 = accumulate_gradients(&mut m2, &[both], 9).unwrap();
    assert!((l1 - l2).abs() < 1e-9);
    let mut worst: f64 = 0.0;
    for (id, p) in m1.store.iter() {
        for (x, y) in p.grad().iter().zip(m2.store.get(id).grad()) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn variants_map_to_stages() {
    let plan = PhasePlan {
        epochs: [4, 2, 3],
        ..PhasePlan::default()
    };
    let labels = |v: Variant| -> Vec<(u8, String, usize)> {
        v.stages(&plan).into_iter().map(|s| (s.phase, s.label, s.max_epochs)).collect()
    };
    assert_eq!(labels(Variant::M0), vec![(1, "1".into(), 4), (2, "2".into(), 2), (3, "3".into(), 3)]);
    assert_eq!(labels(Variant::M2), vec![(1, "1+2".into(), 6), (3, "3".into(), 3)]);
    assert_eq!(labels(Variant::M3), vec![(2, "1+2".into(), 6), (3, "3".into(), 3)]);
    for v in [Variant::M0, Variant::M1, Variant::M2, Variant::M3, Variant::Baseline] {
        assert_eq!(Variant::parse(v.name()).unwrap(), v);
    }
    assert!(Variant::parse("m9").is_err());
    assert!(PhasePlan { epochs: [1, 0, 1], ..plan }.validate().is_err());
}

fn weights_of(o: &RunOutcome) -> WeightSet {
    o.model.store.weights()
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let (data, sv, tv) = tiny_data();
    let cfg = tiny_config(sv, tv, Variant::M0);
    let a = run_three_phase(&cfg, None, &data, None, &mut |_| {}).unwrap();
    let b = run_three_phase(&cfg, None, &data, None, &mut |_| {}).unwrap();
    assert_eq!(weights_of(&a), weights_of(&b));
    assert_eq!(a.report.metrics, b.report.metrics);
    assert_eq!(a.report.stages, b.report.stages);

    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg.clone(), None, &data, Some(dir.path())).unwrap();
    match t.run(Some(3), &mut |_| {}).unwrap() {
        RunStatus::Interrupted { epochs } => assert_eq!(epochs, 3),
        RunStatus::Finished(_) => panic!("should have been interrupted"),
    }
    drop(t);
    let resumed = Trainer::resume(dir.path(), &data).unwrap().run(None, &mut |_| {}).unwrap().finished().unwrap();
    assert_eq!(weights_of(&resumed), weights_of(&a));
    assert_eq!(resumed.report.metrics, a.report.metrics);
    assert_eq!(resumed.report.stages, a.report.stages);

    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, metrics_csv(&a.report.metrics));
    assert!(csv.starts_with(METRICS_HEADER));
    let ring_files = fs::read_dir(dir.path().join("ring")).unwrap().count();
    assert!(ring_files <= cfg.plan.average_window);
    let loaded = load_model(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(loaded.store.weights(), weights_of(&a));
}

#[test]
fn stages_freeze_and_fold_as_planned() {
    let (data, sv, tv) = tiny_data();
    let cfg = tiny_config(sv, tv, Variant::M0);
    let init = Trainer::new(cfg.clone(), None, &data, None).unwrap().model().store.weights();
    let mut t = Trainer::new(cfg.clone(), None, &data, None).unwrap();
    // the two phase-1 epochs
    let _ = t.run(Some(2), &mut |_| {}).unwrap();
    let after = t.model().store.weights();
    for (i, name) in init.names.iter().enumerate() {
        let same = init.tensors[i] == after.tensors[i];
        if name.starts_with("bert.") || name.contains(".glu.") {
            assert!(same, "{name} moved during phase 1");
        } else if name.ends_with("weight") {
            assert!(!same, "{name} did not train");
        }
    }
    let out = t.run(None, &mut |_| {}).unwrap().finished().unwrap();
    let phases: Vec<&str> = out.report.metrics.iter().map(|m| m.phase.as_str()).collect();
    assert_eq!(phases[..3], ["1", "1", "2"]);
    assert!(out.model.phase_state().folded);
    assert_eq!(out.report.stages.len(), 3);
    let ft = out.report.finetune.unwrap();
    assert!(ft.start_loss.is_finite());
    // the returned model is never worse than the starting point on validation
    let final_loss = corpus_loss(&out.model, &data.valid, cfg.batch_tokens).unwrap();
    assert!(final_loss <= ft.start_loss + 1e-12);
    let steps: Vec<u64> = out.report.metrics.iter().map(|m| m.step).collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn baseline_and_merged_variants_run() {
    let (data, sv, tv) = tiny_data();
    for v in [Variant::Baseline, Variant::M2, Variant::M3] {
        let mut cfg = tiny_config(sv, tv, v);
        cfg.plan.epochs = [1, 1, 1];
        cfg.valid_bleu = false;
        let out = run_three_phase(&cfg, None, &data, None, &mut |_| {}).unwrap();
        assert!(out.report.test_bleu >= 0.0 && out.report.test_bleu <= 1.0);
        assert!(out.report.metrics.iter().all(|m| m.valid_bleu.is_none()));
        if v == Variant::Baseline {
            assert!(!out.model.config.use_bert);
        }
    }
}

#[test]
fn divergence_names_the_phase() {
    let (data, sv, tv) = tiny_data();
    let mut cfg = tiny_config(sv, tv, Variant::M0);
    cfg.schedule = LrSchedule {
        warmup: 1,
        peak: 1e300,
        floor: 1e300,
    };
    let err = match run_three_phase(&cfg, None, &data, None, &mut |_| {}) {
        Err(e) => e,
        Ok(_) => panic!("training with an absurd learning rate should diverge"),
    };
    assert!(matches!(err, Error::Diverged { phase: 1, .. }), "{err}");
    assert!(err.is_numerical());
}

proptest::proptest! {
    #[test]
    fn averaging_identical_sets_is_bit_identical(vals in proptest::collection::vec(-1e6f64..1e6, 1..12), n in 1usize..12) {
        let ws = WeightSet { names: vec!["w".into()], tensors: vec![Tensor::new(vec![vals.len()], vals.clone()).unwrap()] };
        let avg = average_checkpoints(&vec![ws.clone(); n]).unwrap();
        proptest::prop_assert_eq!(avg, ws);
    }

    #[test]
    fn averaging_matches_the_arithmetic_mean(rows in proptest::collection::vec(proptest::collection::vec(-10f64..10.0, 3), 1..8)) {
        let sets: Vec<WeightSet> = rows
            .iter()
            .map(|r| WeightSet { names: vec!["w".into()], tensors: vec![Tensor::new(vec![3], r.clone()).unwrap()] })
            .collect();
        let avg = average_checkpoints(&sets).unwrap();
        for c in 0..3 {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
            proptest::prop_assert!((avg.tensors[0].data()[c] - mean).abs() <= 1e-12);
        }
    }
}
