//! Invariants checked with shrinking generators. The runtime suite behind
//! `patkit proptest` covers the same ground with replayable seeds; these
//! catch regressions with minimal counterexamples.

use patkit::attention::{shuffle_source, shuffle_tensor};
use patkit::dataio::events::{clip_count, span_us};
use patkit::dataio::{system_prediction, window_events, ClipSpec, EventRecord};
use patkit::geometry::{fps, knn, pairwise_sq_dist, PointCloud};
use patkit::model::{parse_plan, PatConfig};
use patkit::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cloud(max_n: usize) -> impl Strategy<Value = PointCloud<f64>> {
    prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 2..max_n)
        .prop_map(|rows| PointCloud::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap())
}

fn group_shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=8, 1usize..=6).prop_map(|(g, cg)| (g * cg, g))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shuffle_is_a_permutation_undone_by_the_transposed_grouping((c, g) in group_shape(), rows in 1usize..4) {
        let mut seen = shuffle_source(c, g).unwrap();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..c).collect::<Vec<_>>());
        let x = Tensor::<f64>::from_fn(&[rows, c], |i| i as f64);
        let back = shuffle_tensor(&shuffle_tensor(&x, g).unwrap(), c / g).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn distances_are_symmetric_with_zero_diagonal(c in cloud(20)) {
        let d = pairwise_sq_dist(&c);
        let n = c.len();
        for i in 0..n {
            prop_assert_eq!(d.at(&[i, i]), 0.0);
            for j in 0..n {
                prop_assert_eq!(d.at(&[i, j]), d.at(&[j, i]));
                prop_assert!(d.at(&[i, j]) >= 0.0);
            }
        }
    }

    #[test]
    fn fps_returns_distinct_indices_starting_at_start(c in cloud(30), frac in 0.0f64..1.0, start_frac in 0.0f64..1.0) {
        let n = c.len();
        let k = 1 + ((n - 1) as f64 * frac) as usize;
        let start = ((n - 1) as f64 * start_frac) as usize;
        let idx = fps(&c, k, start).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert_eq!(idx[0], start);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
    }

    #[test]
    fn knn_rows_are_sorted_by_distance_and_exclude_self(c in cloud(25)) {
        let n = c.len();
        let k = (n - 1).min(5);
        let nb = knn(&c, k).unwrap();
        let d = pairwise_sq_dist(&c);
        for p in 0..n {
            let row = nb.row(p);
            prop_assert!(!row.contains(&p));
            for w in row.windows(2) {
                prop_assert!(d.at(&[p, w[0]]) <= d.at(&[p, w[1]]));
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let m = vals.len();
        let tape = Tape::new();
        let y = tape.constant(Tensor::new(&[1, m], vals).unwrap()).softmax(1).value();
        let s: f64 = y.data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn clip_count_matches_window_enumeration(span_ms in 0u64..3000, window in 10u64..900, step_frac in 0.01f64..1.0) {
        let step = ((window as f64 * step_frac).round() as u64).max(1);
        let spec = ClipSpec { window_ms: window as f64, step_ms: step as f64, n_sample: 4 };
        let span = span_ms * 1000;
        let enumerated = (0..).take_while(|k| k * step * 1000 + window * 1000 <= span).count();
        prop_assert_eq!(clip_count(span, &spec), enumerated);
    }

    #[test]
    fn windowing_emits_clip_count_clips(gaps in prop::collection::vec(1u64..20_000, 2..200)) {
        let mut t = 0;
        let stream: Vec<EventRecord> = gaps.iter().map(|g| { t += g; EventRecord { t, x: (t % 128) as u16, y: 3, polarity: 1 } }).collect();
        let spec = ClipSpec { window_ms: 40.0, step_ms: 15.0, n_sample: 8 };
        let clips = window_events::<f32, _>(&stream, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(clips.len(), clip_count(span_us(&stream), &spec));
        for c in &clips {
            prop_assert_eq!(c.len(), 8);
        }
    }

    #[test]
    fn vote_returns_a_most_frequent_label(preds in prop::collection::vec(0usize..4, 1..30)) {
        let winner = system_prediction(&preds).unwrap();
        let count = |l: usize| preds.iter().filter(|&&p| p == l).count();
        prop_assert!((0..4).all(|l| count(l) <= count(winner)));
        prop_assert!((0..winner).all(|l| count(l) < count(winner)));
    }

    #[test]
    fn config_text_round_trips(c in 1usize..5, g in prop::sample::select(vec![1usize, 2, 4, 8]), seed in any::<u64>(), lr in 1e-5f64..1e-1) {
        let cfg = PatConfig { c: c * 8 * g, g, seed, lr, plan: parse_plan("fps64,gss16").unwrap(), ..PatConfig::default() };
        let back = PatConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
