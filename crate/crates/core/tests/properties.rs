mod common;

use std::collections::BTreeSet;

use ctxagg::aggregation::{decay_weights, Aggregator, AggregatorKind};
use ctxagg::data::{
    fit_normalizer, load_jsonl, split_by_user, top_k_event_types, write_jsonl, Event, EventSequence, LabeledDataset,
    Split,
};
use ctxagg::encoder::{coles_loss, encode_asof, EncoderConfig, GruEncoder};
use ctxagg::eval::{fit_gbdt, nested_subsets, roc_auc_binary, window_starts, GbdtConfig};
use ctxagg::nn::softmax;
use ctxagg::store::{AsOfIndex, RefreshPolicy};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(m: usize, n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0f64..2.0, m * n).prop_map(move |v| Array2::from_shape_vec((m, n), v).unwrap())
}

/// `(H, q, T, t)` with `T_i ≤ t`.
fn instance() -> impl Strategy<Value = (Array2<f64>, Array1<f64>, Vec<f64>, f64)> {
    (1usize..5, 1usize..9).prop_flat_map(|(m, n)| {
        (
            matrix(m, n),
            prop::collection::vec(-2.0f64..2.0, m).prop_map(Array1::from),
            prop::collection::vec(0.0f64..10.0, n),
            0.0f64..5.0,
        )
            .prop_map(|(h, q, ts, extra)| {
                let t = ts.iter().cloned().fold(0.0, f64::max) + extra;
                (h, q, ts, t)
            })
    })
}

fn dataset_strategy() -> impl Strategy<Value = LabeledDataset> {
    prop::collection::vec(
        prop::collection::vec((0.0f64..100.0, 0u32..6, 0.1f64..50.0), 1..20),
        4..12,
    )
    .prop_map(|users| {
        LabeledDataset::from_sequences(users.into_iter().enumerate().map(|(u, evs)| {
            let events = evs
                .into_iter()
                .map(|(t, event_type, amount)| Event { t, event_type, amount })
                .collect();
            EventSequence::new(format!("user{u:02}"), events, Some((u % 2) as i64)).unwrap()
        }))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(scores in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let w = softmax(&scores);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn aggregators_match_the_scalar_oracle((h, q, ts, t) in instance(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = common::columns(h.view());
        for kind in AggregatorKind::ALL {
            let agg = Aggregator::init(kind, h.nrows(), 1.5, &mut rng).unwrap();
            let got = agg.aggregate_raw(h.view(), Some(q.view()), &ts, t).unwrap();
            let want = common::aggregate(&agg, &cols, q.as_slice().unwrap(), &ts, t);
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{kind}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn aggregators_ignore_column_order((h, q, ts, t) in instance(), seed in 0u64..1000, rot in 0usize..8) {
        let n = h.ncols();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let hp = h.select(ndarray::Axis(1), &perm);
        let tp: Vec<f64> = perm.iter().map(|&i| ts[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in AggregatorKind::ALL {
            let agg = Aggregator::init(kind, h.nrows(), 1.5, &mut rng).unwrap();
            let a = agg.aggregate_raw(h.view(), Some(q.view()), &ts, t).unwrap();
            let b = agg.aggregate_raw(hp.view(), Some(q.view()), &tp, t).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12, "{kind}");
            }
        }
    }

    #[test]
    fn combinations_of_h_stay_in_its_column_space((h, q, ts, t) in instance(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let svd = nalgebra::DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[[i, j]]).svd(true, true);
        for kind in AggregatorKind::ALL.into_iter().filter(|k| *k != AggregatorKind::LearnableExpHawkes) {
            let agg = Aggregator::init(kind, h.nrows(), 1.5, &mut rng).unwrap();
            let g = agg.aggregate_raw(h.view(), Some(q.view()), &ts, t).unwrap();
            if kind == AggregatorKind::Max {
                continue;
            }
            let gv = nalgebra::DVector::from_iterator(g.len(), g.iter().cloned());
            let x = svd.solve(&gv, 1e-12).unwrap();
            let hm = nalgebra::DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[[i, j]]);
            let residual = (&hm * x - &gv).norm();
            prop_assert!(residual < 1e-8, "{kind}: residual {residual}");
        }
    }

    #[test]
    fn decay_weights_lie_in_unit_interval(ts in prop::collection::vec(0.0f64..10.0, 1..10), tau in 0.01f64..100.0) {
        let t = 10.0;
        let d = decay_weights(&ts, t, tau).unwrap();
        for (w, ti) in d.iter().zip(&ts) {
            prop_assert!(*w > 0.0 && *w <= 1.0);
            for (w2, tj) in d.iter().zip(&ts) {
                if ti < tj {
                    prop_assert!(w <= w2);
                }
            }
        }
    }

    #[test]
    fn asof_agrees_with_a_scan(
        times in prop::collection::btree_set(0u32..500, 1..40),
        queries in prop::collection::vec(-10.0f64..520.0, 1..30),
    ) {
        let mut index = AsOfIndex::new(2);
        let mut entries = Vec::new();
        for (k, t) in times.iter().enumerate() {
            let t = *t as f64 * 0.25;
            let v = vec![k as f64 * 0.1, -(t.sqrt())];
            index.insert("u", t, Array1::from(v.clone()).view()).unwrap();
            entries.push((t, v.iter().map(|x| *x as f32 as f64).collect::<Vec<_>>()));
        }
        for q in queries {
            let got = index.asof("u", q).map(|e| (e.t, e.to_array().to_vec()));
            let want = common::asof_scan(&entries, q).cloned();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn encoder_states_are_piecewise_constant(seed in 0u64..500, n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let events: Vec<Event> = (0..n)
            .map(|i| Event { t: i as f64 * 1.5, event_type: (i % 3) as u32, amount: 1.0 + i as f64 })
            .collect();
        let seq = EventSequence::new("u", events, None).unwrap();
        let ds = LabeledDataset::from_sequences([seq.clone()]);
        let spec = fit_normalizer(&ds, 3).unwrap();
        let enc = GruEncoder::new(spec, EncoderConfig { hidden: 4 }, &mut rng);
        let traj = enc.forward(&seq).unwrap();
        prop_assert_eq!(traj.len(), n);
        prop_assert!(traj.states.iter().all(|v| v.is_finite()));
        prop_assert!(encode_asof(&traj, -0.1).is_none());
        for j in 0..n {
            let tj = j as f64 * 1.5;
            let at = encode_asof(&traj, tj).unwrap();
            let mid = encode_asof(&traj, tj + 0.75).unwrap();
            prop_assert_eq!(at, traj.states.row(j));
            prop_assert_eq!(mid, at);
        }
    }

    #[test]
    fn contrastive_loss_is_nonnegative_and_translation_invariant(
        points in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 4..10),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let owners: Vec<usize> = (0..points.len()).map(|i| i % 2).collect();
        let emb: Vec<Array1<f64>> = points.iter().map(|p| Array1::from(p.clone())).collect();
        let (loss, grads) = coles_loss(&emb, &owners, 0.5).unwrap();
        prop_assert!(loss >= 0.0);
        let moved: Vec<Array1<f64>> = emb.iter().map(|e| e + &Array1::from(shift.clone())).collect();
        let (loss2, _) = coles_loss(&moved, &owners, 0.5).unwrap();
        prop_assert!((loss - loss2).abs() < 1e-9 * (1.0 + loss));
        let total: Array1<f64> = grads.iter().fold(Array1::zeros(3), |a, g| a + g);
        prop_assert!(total.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn auc_is_a_rank_statistic(
        pairs in prop::collection::vec((-40i32..40, any::<bool>()), 2..60),
        scale in 0.1f64..1.0,
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
        let auc = roc_auc_binary(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc));
        let warped: Vec<f64> = scores.iter().map(|s| (scale * s).exp()).collect();
        prop_assert!((roc_auc_binary(&warped, &labels).unwrap() - auc).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc_binary(&flipped, &labels).unwrap() - (1.0 - auc)).abs() < 1e-12);
    }

    #[test]
    fn jsonl_round_trip_preserves_events(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        write_jsonl(&ds, &path).unwrap();
        let back = load_jsonl(&path, None).unwrap();
        prop_assert_eq!(back.sequences.len(), ds.sequences.len());
        for (user, seq) in &ds.sequences {
            let other = &back.sequences[user];
            prop_assert_eq!(&other.events, &seq.events);
        }
    }

    #[test]
    fn split_is_deterministic_and_partitions_users(ds in dataset_strategy(), seed in 0u64..100) {
        let a = split_by_user(&ds, 0.3, seed).unwrap();
        let b = split_by_user(&ds, 0.3, seed).unwrap();
        prop_assert_eq!(a.users(Split::Train), b.users(Split::Train));
        let train: BTreeSet<&str> = a.users(Split::Train).into_iter().collect();
        let test: BTreeSet<&str> = a.users(Split::Test).into_iter().collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), ds.n_users());
    }

    #[test]
    fn top_k_filter_keeps_only_chosen_codes(ds in dataset_strategy(), k in 1usize..8) {
        let ds = split_by_user(&ds, 0.3, 0).unwrap();
        let top = top_k_event_types(&ds, k).unwrap();
        let distinct: BTreeSet<u32> = ds
            .sequences_in(Split::Train)
            .flat_map(|s| s.events.iter().map(|e| e.event_type))
            .collect();
        prop_assert_eq!(top.len(), k.min(distinct.len()));
        let keep: BTreeSet<u32> = top.iter().copied().collect();
        let filtered = ds.filter_codes(&keep);
        prop_assert!(filtered.sequences.values().all(|s| s.events.iter().all(|e| keep.contains(&e.event_type))));
    }

    #[test]
    fn windows_fit_and_step_by_stride(len in 0usize..300, window in 1usize..40, stride_frac in 0.05f64..1.0) {
        let stride = ((window as f64 * stride_frac).ceil() as usize).max(1);
        let starts = window_starts(len, window, stride);
        prop_assert!(starts.iter().all(|s| s + window < len));
        prop_assert!(starts.windows(2).all(|w| w[1] - w[0] == stride));
        let expected = if len > window { (len - window - 1) / stride + 1 } else { 0 };
        prop_assert_eq!(starts.len(), expected);
    }

    #[test]
    fn context_subsets_are_nested(n in 5usize..80, seed in 0u64..50) {
        let pool: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        let sizes = [1, n / 2 + 1, n];
        let subsets = nested_subsets(&pool, &sizes, seed).unwrap();
        for w in subsets.windows(2) {
            prop_assert_eq!(&w[1][..w[0].len()], &w[0][..]);
        }
        let all: BTreeSet<&String> = subsets[2].iter().collect();
        prop_assert_eq!(all.len(), n);
    }

    #[test]
    fn refresh_ticks_are_evenly_spaced(start in -50.0f64..50.0, span in 0.0f64..100.0, interval in 0.1f64..10.0) {
        let policy = RefreshPolicy::new(interval).unwrap();
        let ticks = policy.ticks(start, start + span);
        prop_assert_eq!(ticks[0], start);
        prop_assert!(*ticks.last().unwrap() <= start + span + 1e-6);
        prop_assert!(ticks.last().unwrap() + interval > start + span);
        for w in ticks.windows(2) {
            prop_assert!((w[1] - w[0] - interval).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn boosting_never_increases_train_loss(
        rows in prop::collection::vec((prop::collection::vec(-3.0f64..3.0, 3), any::<bool>()), 30..120),
        seed in 0u64..100,
    ) {
        prop_assume!(rows.iter().any(|r| r.1) && rows.iter().any(|r| !r.1));
        let x = Array2::from_shape_fn((rows.len(), 3), |(i, j)| rows[i].0[j]);
        let y: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let cfg = GbdtConfig { n_estimators: 30, min_samples_leaf: 3, learning_rate: 0.1, ..GbdtConfig::default() };
        let model = fit_gbdt(x.view(), &y, &cfg, seed).unwrap();
        for w in model.train_loss.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
    }
}
