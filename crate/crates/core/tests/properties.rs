use std::collections::BTreeMap;

use gadapter_lab::autodiff::{kron, Tape};
use gadapter_lab::data::{gen_data, split, DatasetKind, GenConfig};
use gadapter_lab::diagnostics::{build_histogram, js_divergence, performance_gap, shared_edges, FeatureSample, Score};
use gadapter_lab::graph::{all_pairs_shortest_paths, build_structure, Graph, StructureKind, Unreachable};
use gadapter_lab::tensor::Tensor;
use gadapter_lab::training::{average_precision, roc_auc, Metric};
use proptest::prelude::*;

fn graph_strategy() -> impl Strategy<Value = Graph> {
    (1usize..10).prop_flat_map(|n| {
        proptest::collection::vec((0..n, 0..n), 0..2 * n).prop_map(move |pairs| {
            let edges = pairs.into_iter().filter(|(a, b)| a != b);
            Graph::new("p", n, edges, vec![0; n], 0.0).unwrap()
        })
    })
}

fn floyd_warshall(g: &Graph) -> Vec<Vec<usize>> {
    let n = g.num_nodes();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for (i, j) in g.edges() {
        d[i][j] = 1;
        d[j][i] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                d[i][j] = d[i][j].min(d[i][k] + d[k][j]);
            }
        }
    }
    d.into_iter()
        .map(|row| row.into_iter().map(|v| if v == inf { 0 } else { v }).collect())
        .collect()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            proptest::collection::vec(0u8..6, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 5.0).collect()),
            proptest::collection::vec(prop::bool::ANY, n),
        )
            .prop_filter_map("both classes", |(s, l)| {
                let pos = l.iter().filter(|&&b| b).count();
                (pos > 0 && pos < l.len()).then(|| (s, l.into_iter().map(|b| b as u8 as f64).collect()))
            })
    })
}

fn samples(values: &[Vec<f64>]) -> Vec<FeatureSample> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| FeatureSample {
            id: i.to_string(),
            vector: v.clone(),
        })
        .collect()
}

fn feature_sets() -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 1..12)
}

proptest! {
    #[test]
    fn shortest_paths_match_floyd_warshall(g in graph_strategy()) {
        prop_assert_eq!(all_pairs_shortest_paths(&g, Unreachable::Zero), floyd_warshall(&g));
    }

    #[test]
    fn normalized_structure_matches_dense_formula(g in graph_strategy()) {
        let s1 = build_structure(&g, StructureKind::S1, None, Unreachable::Zero).unwrap().matrix;
        let s2 = build_structure(&g, StructureKind::S2, None, Unreachable::Zero).unwrap().matrix;
        let n = g.num_nodes();
        let mut d = Tensor::zeros(&[n, n]);
        for i in 0..n {
            d.set(i, i, 1.0 / s1.row(i).iter().sum::<f64>().sqrt());
        }
        let dense = d.matmul(&s1).unwrap().matmul(&d).unwrap();
        prop_assert!(s2.max_abs_diff(&dense) < 1e-12);
        prop_assert!(s2.max_abs_diff(&s2.transpose().unwrap()) == 0.0);
    }

    #[test]
    fn mixed_structure_is_linear(g in graph_strategy(), alpha in -1.0f64..1.0, beta in -1.0f64..1.0) {
        let s2 = build_structure(&g, StructureKind::S2, None, Unreachable::Zero).unwrap().matrix;
        let s3 = build_structure(&g, StructureKind::S3, None, Unreachable::Zero).unwrap().matrix;
        let s4 = build_structure(&g, StructureKind::S4, Some((alpha, beta)), Unreachable::Zero).unwrap().matrix;
        let expect: Vec<f64> = s2.data().iter().zip(s3.data()).map(|(a, b)| alpha * a + beta * b).collect();
        prop_assert!(s4.max_abs_diff(&Tensor::new(s4.shape().to_vec(), expect).unwrap()) < 1e-12);
    }

    #[test]
    fn auc_matches_pair_counting((scores, labels) in scored_labels()) {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert!((roc_auc(&scores, &labels).unwrap() - wins / pairs).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_per_positive_precision((scores, labels) in scored_labels()) {
        let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1.0).collect();
        let mut total = 0.0;
        for &i in &positives {
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
            let hits = above.iter().filter(|&&j| labels[j] == 1.0).count();
            total += hits as f64 / above.len() as f64;
        }
        let expect = total / positives.len() as f64;
        prop_assert!((average_precision(&scores, &labels).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in matrix(3, 5), shift in -50.0f64..50.0) {
        let shifted = x.map(|v| v + shift);
        let mut tape = Tape::new();
        let a = tape.constant(&x);
        let b = tape.constant(&shifted);
        let sa = tape.softmax_rows(a).unwrap();
        let sb = tape.softmax_rows(b).unwrap();
        let (pa, pb) = (tape.value(sa), tape.value(sb));
        for r in 0..3 {
            prop_assert!((pa.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(pa.row(r).iter().all(|&p| p > 0.0));
        }
        prop_assert!(pa.max_abs_diff(pb) < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes_rows(x in matrix(4, 6)) {
        prop_assume!((0..4).all(|r| {
            let row = x.row(r);
            row.iter().any(|&v| (v - row[0]).abs() > 1e-3)
        }));
        let gamma = Tensor::ones(&[6]);
        let beta = Tensor::zeros(&[6]);
        let mut tape = Tape::new();
        let (xv, g, b) = (tape.constant(&x), tape.constant(&gamma), tape.constant(&beta));
        let y = tape.layer_norm(xv, g, b, 1e-12).unwrap();
        let y = tape.value(y);
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn kron_matches_index_formula(a in matrix(2, 3), b in matrix(3, 2)) {
        let k = kron(&a, &b).unwrap();
        prop_assert_eq!(k.shape(), &[6, 6]);
        for i in 0..2 {
            for j in 0..3 {
                for p in 0..3 {
                    for q in 0..2 {
                        prop_assert_eq!(k.get(i * 3 + p, j * 2 + q), a.get(i, j) * b.get(p, q));
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(&a), tape.constant(&b));
        let kv = tape.kron(av, bv).unwrap();
        prop_assert_eq!(tape.value(kv), &k);
    }

    #[test]
    fn kron_mixed_product(a in matrix(2, 2), b in matrix(2, 3), c in matrix(2, 2), d in matrix(3, 2)) {
        let lhs = kron(&a, &b).unwrap().matmul(&kron(&c, &d).unwrap()).unwrap();
        let rhs = kron(&a.matmul(&c).unwrap(), &b.matmul(&d).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn js_is_bounded_symmetric_and_zero_on_self(a in feature_sets(), b in feature_sets()) {
        let (sa, sb) = (samples(&a), samples(&b));
        let edges = shared_edges(&[&sa, &sb], 20).unwrap();
        let ha = build_histogram(&sa, &edges, 1e-8).unwrap();
        let hb = build_histogram(&sb, &edges, 1e-8).unwrap();
        let js = js_divergence(&ha, &hb).unwrap();
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&js));
        prop_assert!((js - js_divergence(&hb, &ha).unwrap()).abs() < 1e-15);
        prop_assert_eq!(js_divergence(&ha, &ha).unwrap(), 0.0);
        prop_assert!((ha.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_ignores_sample_order(a in feature_sets(), rot in 0usize..12) {
        let sa = samples(&a);
        let mut rotated = sa.clone();
        rotated.rotate_left(rot % sa.len());
        rotated.reverse();
        let edges = shared_edges(&[&sa], 15).unwrap();
        prop_assert_eq!(
            build_histogram(&sa, &edges, 1e-8).unwrap(),
            build_histogram(&rotated, &edges, 1e-8).unwrap()
        );
    }

    #[test]
    fn performance_gap_is_antisymmetric(values in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, prop::bool::ANY), 1..6)) {
        let mut p = BTreeMap::new();
        let mut f = BTreeMap::new();
        for (i, (x, y, reg)) in values.iter().enumerate() {
            let metric = if *reg { Metric::Rmse } else { Metric::Auc };
            p.insert(format!("d{i}"), Score { metric, value: *x });
            f.insert(format!("d{i}"), Score { metric, value: *y });
        }
        let fwd = performance_gap(&p, &f).unwrap();
        prop_assert!((fwd + performance_gap(&f, &p).unwrap()).abs() < 1e-15);
        prop_assert_eq!(performance_gap(&p, &p).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn split_partitions_the_dataset(seed in 0u64..1000, count in 30usize..80) {
        let ds = gen_data(&GenConfig {
            kind: DatasetKind::DiameterClf,
            count,
            seed,
            ..GenConfig::default()
        })
        .unwrap();
        let parts = split(&ds, [0.8, 0.1, 0.1], seed).unwrap();
        let mut ids: Vec<&str> = parts.iter().flat_map(|p| p.graphs.iter().map(|g| g.id.as_str())).collect();
        prop_assert_eq!(ids.len(), count);
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), count);
        prop_assert_eq!(parts[0].len(), (0.8 * count as f64).round() as usize);
        for part in &parts {
            let pos = part.labels().iter().filter(|&&y| y == 1.0).count();
            prop_assert!(pos > 0 && pos < part.len());
        }
    }
}
