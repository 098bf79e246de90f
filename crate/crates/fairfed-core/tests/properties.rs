//! Property suites for every module's numerical invariants, driven through
//! the public API only. Each suite runs at least 100 random cases.

use proptest::prelude::*;

use fairfed_core::debias::{DebiasStrategy, FairBatchState, ReweighTable, MIN_CELL_MASS};
use fairfed_core::fed::{metric_gap, EngineConfig, FedEngine, TrainOpts};
use fairfed_core::ingest::synth::{adult_synth_csv, adult_synth_schema};
use fairfed_core::ingest::{
    load_csv_text, prepare_table, standardize, train_test_split, PrepareMeta, PreparedDataset,
    SplitSpec, TabularDataset,
};
use fairfed_core::metrics::{
    accuracy, census, eod, m_global_component, metric, spd, tpr, AyCensus, DatasetStats,
    GroupCensus, MetricKind,
};
use fairfed_core::model::{local_train, loss, ModelParams, TrainConfig};
use fairfed_core::partition::{
    dirichlet_partition, single_group_partition, ClientPartition, GroupBy,
};
use fairfed_core::secagg::{privacy_audit, FixedPointCodec, SecaggError, SecaggSession};
use fairfed_core::harness::{summary_csv, sweep, PartitionSpec, RunConfig, SweepSpec};

fn feature_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

/// Random binary-labelled dataset with every (A, Y) cell populated at least
/// twice, so splits and federation-level metrics stay well defined.
fn dataset_strategy(
    max_rows: usize,
    max_features: usize,
) -> impl Strategy<Value = TabularDataset> {
    (1..=max_features, 0..max_rows).prop_flat_map(|(d, extra)| {
        let n = 8 + extra;
        (
            proptest::collection::vec(-2.0f64..2.0, n * d),
            proptest::collection::vec(0u8..2, n),
            proptest::collection::vec(0u8..2, n),
        )
            .prop_map(move |(features, mut labels, mut groups)| {
                // Pin the first eight rows to two copies of each (A, Y) cell.
                for (i, (a, y)) in [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .cycle()
                    .take(8)
                    .enumerate()
                {
                    groups[i] = *a;
                    labels[i] = *y;
                }
                TabularDataset::from_parts(feature_names(d), features, labels, groups).unwrap()
            })
    })
}

fn params_strategy(d: usize) -> impl Strategy<Value = ModelParams> {
    proptest::collection::vec(-1.0f64..1.0, d + 1).prop_map(|flat| {
        ModelParams::from_flat(&flat).unwrap()
    })
}

/// Assigns every row a client id in 0..k.
fn assignment_strategy(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(0..k, n)
}

fn manual_partition(k: usize, assignment: Vec<usize>) -> ClientPartition {
    ClientPartition {
        k,
        alpha: None,
        seed: 0,
        group_by: GroupBy::Sensitive,
        assignment,
    }
}

mod ingest_props {
    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        // Same raw table and schema twice: bit-identical encoded dataset.
        #[test]
        fn encoding_is_deterministic(rows in 120usize..300, seed in 0u64..1_000_000) {
            let schema = adult_synth_schema();
            let text = adult_synth_csv(rows, seed);
            let split = SplitSpec { test_fraction: 0.3, seed };
            let loaded = load_csv_text(&text, &schema).unwrap();
            let first = prepare_table(&loaded, &schema, &split, "prop");
            // Rare draws leave an (A, Y) cell too thin to split; skip those.
            prop_assume!(first.is_ok());
            let a = first.unwrap();
            let b = {
                let loaded = load_csv_text(&text, &schema).unwrap();
                prepare_table(&loaded, &schema, &split, "prop").unwrap()
            };
            for (ds_a, ds_b) in [(&a.train, &b.train), (&a.test, &b.test)] {
                prop_assert_eq!(ds_a.labels(), ds_b.labels());
                prop_assert_eq!(ds_a.groups(), ds_b.groups());
                prop_assert_eq!(ds_a.n_features(), ds_b.n_features());
                for i in 0..ds_a.n_rows() {
                    for (va, vb) in ds_a.row(i).iter().zip(ds_b.row(i)) {
                        prop_assert_eq!(va.to_bits(), vb.to_bits());
                    }
                }
            }
        }

        // Retained continuous features are centered and unit-variance on the
        // train split.
        #[test]
        fn standardization_centers_retained_features(
            train in dataset_strategy(80, 4),
            test in dataset_strategy(20, 4),
        ) {
            prop_assume!(train.n_features() == test.n_features());
            let continuous: Vec<usize> = (0..train.n_features()).collect();
            let out = standardize(&train, &test, &continuous);
            let ds = &out.train;
            let n = ds.n_rows() as f64;
            for j in 0..ds.n_features() {
                let mean: f64 = (0..ds.n_rows()).map(|i| ds.row(i)[j]).sum::<f64>() / n;
                let var: f64 = (0..ds.n_rows())
                    .map(|i| (ds.row(i)[j] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                prop_assert!(mean.abs() < 1e-9, "feature {} mean {}", j, mean);
                prop_assert!((var - 1.0).abs() < 1e-6, "feature {} var {}", j, var);
            }
        }

        // Every input row lands in exactly one split.
        #[test]
        fn split_partitions_rows_exactly(
            mut ds in dataset_strategy(200, 1),
            fraction in 0.1f64..0.9,
            seed in 0u64..1_000_000,
        ) {
            // Tag each row with its index so rows are identifiable post-split.
            let n = ds.n_rows();
            let tagged: Vec<f64> = (0..n).map(|i| i as f64).collect();
            ds = TabularDataset::from_parts(
                feature_names(1),
                tagged,
                ds.labels().to_vec(),
                ds.groups().to_vec(),
            )
            .unwrap();
            let n_test = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
            prop_assume!(n_test >= 4 && n - n_test >= 4);
            let (train, test) = train_test_split(&ds, &SplitSpec { test_fraction: fraction, seed })
                .unwrap();
            let mut seen = vec![0u32; n];
            for part in [&train, &test] {
                for i in 0..part.n_rows() {
                    seen[part.row(i)[0] as usize] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert_eq!(train.n_rows() + test.n_rows(), n);
        }
    }
}

mod partition_props {
    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        // The multiset union of client row sets is exactly the dataset rows,
        // and per-group client counts sum to each group's total.
        #[test]
        fn dirichlet_partition_is_exact(
            ds in dataset_strategy(300, 2),
            k in 1usize..8,
            alpha in 0.05f64..10.0,
            seed in 0u64..1_000_000,
            which in 0u8..3,
        ) {
            prop_assume!(ds.n_rows() >= k * 10);
            let group_by = match which {
                0 => GroupBy::Sensitive,
                1 => GroupBy::Label,
                _ => GroupBy::SensitiveXLabel,
            };
            let part = dirichlet_partition(&ds, k, alpha, group_by, seed).unwrap();
            part.validate_against(&ds).unwrap();
            prop_assert_eq!(part.assignment.len(), ds.n_rows());

            let mut seen = vec![false; ds.n_rows()];
            for c in 0..k {
                for row in part.client_rows(c) {
                    prop_assert!(!seen[row], "row {} assigned twice", row);
                    seen[row] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));

            // Largest-remainder rounding: client chunks of each group sum to
            // the group size.
            for a in [0u8, 1] {
                let total = ds.groups().iter().filter(|&&g| g == a).count();
                let spread: usize = (0..k)
                    .map(|c| {
                        part.client_rows(c)
                            .iter()
                            .filter(|&&r| ds.group(r) == a)
                            .count()
                    })
                    .sum();
                prop_assert_eq!(spread, total);
            }
        }

        // Single-group splits put exactly one sensitive value on each client.
        #[test]
        fn single_group_clients_are_pure(
            ds in dataset_strategy(200, 1),
            u in 1usize..4,
            p in 1usize..4,
            seed in 0u64..1_000_000,
        ) {
            let rows0 = ds.groups().iter().filter(|&&a| a == 0).count();
            let rows1 = ds.n_rows() - rows0;
            prop_assume!(rows0 >= 2 * u && rows1 >= 2 * p);
            let part = single_group_partition(&ds, u, p, seed).unwrap();
            part.validate_against(&ds).unwrap();
            for c in 0..(u + p) {
                let want = u8::from(c >= u);
                for row in part.client_rows(c) {
                    prop_assert_eq!(ds.group(row), want);
                }
            }
        }
    }

    // Statistical ordering: low alpha concentrates groups, so the
    // across-client variance of the A=0 share shrinks as alpha grows.
    #[test]
    fn heterogeneity_orders_share_variance() {
        let n = 1000;
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let groups: Vec<u8> = (0..n).map(|i| ((i / 2) % 2) as u8).collect();
        let features: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let ds = TabularDataset::from_parts(feature_names(1), features, labels, groups).unwrap();

        let mean_share_variance = |alpha: f64| -> f64 {
            let mut acc = 0.0;
            for seed in 0..60 {
                let part = dirichlet_partition(&ds, 5, alpha, GroupBy::Sensitive, seed).unwrap();
                let shares: Vec<f64> = (0..5)
                    .map(|c| {
                        let rows = part.client_rows(c);
                        let a0 = rows.iter().filter(|&&r| ds.group(r) == 0).count();
                        a0 as f64 / rows.len() as f64
                    })
                    .collect();
                let mean = shares.iter().sum::<f64>() / 5.0;
                acc += shares.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 5.0;
            }
            acc / 60.0
        };

        let spread_low = mean_share_variance(0.1);
        let spread_high = mean_share_variance(10.0);
        assert!(
            spread_low > spread_high,
            "variance at alpha 0.1 ({spread_low}) should exceed alpha 10 ({spread_high})"
        );
    }
}

mod model_props {
    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]

        // The gradient applied by one full-batch step matches central finite
        // differences of the loss, h = 1e-5, within 1e-4 relative.
        #[test]
        fn gradient_matches_finite_differences(
            ds in dataset_strategy(40, 4),
            seed in 0u64..1_000_000,
        ) {
            let d = ds.n_features();
            let n = ds.n_rows();
            let flat: Vec<f64> = (0..=d)
                .map(|j| -1.0 + 2.0 * ((seed.wrapping_mul(2654435761).wrapping_add(j as u64 * 97) % 1000) as f64 / 999.0))
                .collect();
            let params = ModelParams::from_flat(&flat).unwrap();
            let weights: Vec<f64> = (0..n)
                .map(|i| 0.1 + ((seed.wrapping_add(i as u64 * 131) % 100) as f64) / 40.0)
                .collect();

            // One epoch, one batch, unit rate: theta' = theta - grad(loss).
            let cfg = TrainConfig { learning_rate: 1.0, epochs: 1, batch_size: n, seed };
            let stepped = local_train(&params, &ds, &weights, &cfg).unwrap();
            let analytic: Vec<f64> = params
                .to_flat()
                .iter()
                .zip(stepped.to_flat())
                .map(|(before, after)| before - after)
                .collect();

            let h = 1e-5;
            for j in 0..=d {
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[j] += h;
                minus[j] -= h;
                let lp = loss(&ModelParams::from_flat(&plus).unwrap(), &ds, &weights).unwrap();
                let lm = loss(&ModelParams::from_flat(&minus).unwrap(), &ds, &weights).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let denom = fd.abs().max(1e-6);
                prop_assert!(
                    (analytic[j] - fd).abs() / denom < 1e-4,
                    "coordinate {}: analytic {} vs fd {}",
                    j, analytic[j], fd
                );
            }
        }

        // A linearly separable 20-point set trains to 100% accuracy within
        // 200 epochs at rate 0.1.
        #[test]
        fn separable_toy_reaches_full_accuracy(
            raw in proptest::collection::vec(-2.0f64..2.0, 20 * 2),
            direction in proptest::collection::vec(-1.0f64..1.0, 2),
            seed in 0u64..1_000_000,
        ) {
            let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(norm > 0.3);
            let unit: Vec<f64> = direction.iter().map(|v| v / norm).collect();

            // Push every point at least 1.0 away from the separating plane.
            let mut features = raw;
            let mut labels = Vec::with_capacity(20);
            for i in 0..20 {
                let row = &mut features[i * 2..i * 2 + 2];
                let margin: f64 = row.iter().zip(&unit).map(|(x, u)| x * u).sum();
                let signed = if margin >= 0.0 { 1.0 } else { -1.0 };
                let deficit = (1.0 - margin.abs()).max(0.0);
                for (x, u) in row.iter_mut().zip(&unit) {
                    *x += signed * deficit * u;
                }
                labels.push(u8::from(signed > 0.0));
            }
            let ds = TabularDataset::from_parts(
                feature_names(2),
                features,
                labels.clone(),
                vec![0; 20],
            )
            .unwrap();
            let cfg = TrainConfig { learning_rate: 0.1, epochs: 200, batch_size: 20, seed };
            let fitted = local_train(&ModelParams::zeros(2), &ds, &vec![1.0; 20], &cfg).unwrap();
            let counts = census(&fitted, &ds).unwrap();
            prop_assert_eq!(accuracy(&counts).unwrap(), 1.0);
        }

        // local_train is a pure function of its inputs.
        #[test]
        fn training_is_deterministic(
            ds in dataset_strategy(120, 3),
            lr in 0.001f64..0.2,
            epochs in 1u32..4,
            batch in 1usize..64,
            seed in 0u64..1_000_000,
        ) {
            let weights = vec![1.0; ds.n_rows()];
            let cfg = TrainConfig { learning_rate: lr, epochs, batch_size: batch, seed };
            let a = local_train(&ModelParams::zeros(ds.n_features()), &ds, &weights, &cfg).unwrap();
            let b = local_train(&ModelParams::zeros(ds.n_features()), &ds, &weights, &cfg).unwrap();
            let (fa, fb) = (a.to_flat(), b.to_flat());
            for (x, y) in fa.iter().zip(&fb) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

mod metrics_props {
    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(150))]

        // Summed per-client components reconstruct the centralized metric.
        #[test]
        fn decomposition_reconstructs_centralized_metric(
            ds in dataset_strategy(300, 3),
            k in 1usize..8,
            seed in 0u64..1_000_000,
            assignment_seed in 0u64..1_000_000,
        ) {
            let d = ds.n_features();
            let flat: Vec<f64> = (0..=d)
                .map(|j| -1.0 + 2.0 * ((seed.wrapping_add(j as u64 * 7919) % 997) as f64 / 996.0))
                .collect();
            let params = ModelParams::from_flat(&flat).unwrap();
            let assignment: Vec<usize> = (0..ds.n_rows())
                .map(|i| ((assignment_seed.wrapping_add((i as u64).wrapping_mul(6364136223846793005))) % k as u64) as usize)
                .collect();

            let pooled = census(&params, &ds).unwrap();
            for kind in [MetricKind::Eod, MetricKind::Spd] {
                let stats = match DatasetStats::from_census(kind, &pooled.ay_census()) {
                    Ok(s) => s,
                    Err(_) => continue,
                };
                let central = match metric(&pooled, kind) {
                    Some(v) => v,
                    None => continue,
                };
                let mut sum = 0.0;
                for c in 0..k {
                    let rows: Vec<usize> = assignment
                        .iter()
                        .enumerate()
                        .filter(|(_, &a)| a == c)
                        .map(|(i, _)| i)
                        .collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let local = census(&params, &ds.select(&rows)).unwrap();
                    sum += m_global_component(&local, &stats, ds.n_rows() as u64);
                }
                prop_assert!(
                    (sum - central).abs() < 1e-10,
                    "{:?}: sum {} vs central {}",
                    kind, sum, central
                );
            }
        }

        // EOD and SPD stay inside [-1, 1] whenever defined.
        #[test]
        fn metrics_lie_in_unit_interval(
            records in proptest::collection::vec((0u8..2, 0u8..2, 0u8..2), 1..400),
        ) {
            let mut c = GroupCensus::empty();
            for (a, y, yhat) in records {
                c.record(a, y, yhat);
            }
            if let Some(v) = eod(&c) {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
            if let Some(v) = spd(&c) {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }

        // Row-weighted client accuracies average to the pooled accuracy.
        #[test]
        fn weighted_accuracy_identity(
            ds in dataset_strategy(300, 2),
            k in 1usize..8,
            seed in 0u64..1_000_000,
        ) {
            let params = ModelParams::zeros(ds.n_features());
            let assignment: Vec<usize> = (0..ds.n_rows())
                .map(|i| ((seed.wrapping_add((i as u64).wrapping_mul(2862933555777941757))) % k as u64) as usize)
                .collect();
            let pooled_acc = accuracy(&census(&params, &ds).unwrap()).unwrap();
            let n = ds.n_rows() as f64;
            let mut acc_sum = 0.0;
            for c in 0..k {
                let rows: Vec<usize> = assignment
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| a == c)
                    .map(|(i, _)| i)
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let slice = ds.select(&rows);
                let local = accuracy(&census(&params, &slice).unwrap()).unwrap();
                acc_sum += local * slice.n_rows() as f64 / n;
            }
            prop_assert!((acc_sum - pooled_acc).abs() < 1e-12);
        }

        // Positive metric means the unprivileged group (A=0) outperforms.
        #[test]
        fn positive_metric_means_unprivileged_outperforms(
            records in proptest::collection::vec((0u8..2, 0u8..2, 0u8..2), 1..400),
        ) {
            let mut c = GroupCensus::empty();
            for (a, y, yhat) in records {
                c.record(a, y, yhat);
            }
            if let (Some(t0), Some(t1), Some(v)) = (tpr(&c, 0), tpr(&c, 1), eod(&c)) {
                prop_assert!((v - (t0 - t1)).abs() < 1e-15);
                if v > 0.0 {
                    prop_assert!(t0 > t1);
                }
            }
        }
    }
}

mod debias_props {
    use super::*;

    fn census_from_counts(counts: [u64; 4]) -> AyCensus {
        AyCensus::from_flat(counts)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(150))]

        // Reweighing decorrelates A and Y: weighted cell mass equals the
        // product of the marginals, so the weighted label distribution is
        // identical in both groups.
        #[test]
        fn reweighing_decorrelates_sensitive_and_label(
            counts in [1u64..300, 1u64..300, 1u64..300, 1u64..300],
        ) {
            let census = census_from_counts(counts);
            let table = ReweighTable::from_census(&census);
            let n = census.total() as f64;
            for a in [0u8, 1] {
                for y in [0u8, 1] {
                    let joint = census.count(a, y) as f64 / n;
                    let product = (census.group_total(a) as f64 / n)
                        * (census.label_total(y) as f64 / n);
                    let weighted = table.weight(a, y) * joint;
                    prop_assert!(
                        (weighted - product).abs() <= 1e-12 * product.max(1.0),
                        "cell ({}, {}): weighted {} vs product {}",
                        a, y, weighted, product
                    );
                }
            }
            // Weighted P(Y=1 | A=a) is the global P(Y=1) for both groups.
            let p_y1 = census.label_total(1) as f64 / n;
            for a in [0u8, 1] {
                let w1 = table.weight(a, 1) * census.count(a, 1) as f64;
                let w_all = w1 + table.weight(a, 0) * census.count(a, 0) as f64;
                prop_assert!((w1 / w_all - p_y1).abs() < 1e-12);
            }
        }

        // FairBatch cell masses stay a strictly positive distribution under
        // any disparity sequence.
        #[test]
        fn fairbatch_masses_stay_a_distribution(
            counts in [1u64..300, 1u64..300, 1u64..300, 1u64..300],
            step in 0.0001f64..0.05,
            disparities in proptest::collection::vec(
                proptest::option::of(-1.0f64..1.0), 0..30),
        ) {
            let mut state = FairBatchState::new(&census_from_counts(counts), step).unwrap();
            for d in disparities {
                state.update(d);
                let mut sum = 0.0;
                for a in [0u8, 1] {
                    for y in [0u8, 1] {
                        let m = state.mass(a, y);
                        prop_assert!(m > 0.0 && m >= MIN_CELL_MASS * 0.5);
                        sum += m;
                    }
                }
                prop_assert!((sum - 1.0).abs() < 1e-12, "masses sum to {}", sum);
            }
        }

        // A table from merged client censuses is bitwise the pooled table.
        #[test]
        fn merged_census_table_is_pooled_table(
            counts in [2u64..300, 2u64..300, 2u64..300, 2u64..300],
            cut in [0u64..100, 0u64..100, 0u64..100, 0u64..100],
        ) {
            let pooled = census_from_counts(counts);
            // Split each cell between two clients at the cut point.
            let mut left = [0u64; 4];
            let mut right = [0u64; 4];
            for i in 0..4 {
                let take = cut[i] % (counts[i] + 1);
                left[i] = take;
                right[i] = counts[i] - take;
            }
            let merged = census_from_counts(left).merge(&census_from_counts(right));
            let a = ReweighTable::from_census(&pooled);
            let b = ReweighTable::from_census(&merged);
            for g in [0u8, 1] {
                for y in [0u8, 1] {
                    prop_assert_eq!(a.weight(g, y).to_bits(), b.weight(g, y).to_bits());
                }
            }
        }
    }
}

mod secagg_props {
    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(150))]

        // Masked shares cancel exactly: the decoded sum is the fixed-point
        // ring sum, bit for bit, for any client count.
        #[test]
        fn masking_cancels_exactly(
            vectors in proptest::collection::vec(
                proptest::collection::vec(-4.0f64..4.0, 1..16), 1..12),
            seed in 0u64..1_000_000,
            tag in 0u32..10_000,
        ) {
            let len = vectors[0].len();
            let vectors: Vec<Vec<f64>> = vectors
                .into_iter()
                .map(|mut v| { v.resize(len, 0.0); v })
                .collect();
            let k = vectors.len();
            let codec = FixedPointCodec::default();
            let session = SecaggSession::new(seed, k).unwrap();

            let shares: Vec<_> = vectors
                .iter()
                .enumerate()
                .map(|(i, v)| session.mask(v, i as u16, tag, &codec).unwrap().0)
                .collect();
            let sums = session.secure_sum(&shares, tag, &codec).unwrap();

            let mut ring = vec![0u64; len];
            for v in &vectors {
                let (units, _) = codec.encode_vec(v).unwrap();
                for (r, u) in ring.iter_mut().zip(units) {
                    *r = r.wrapping_add(u);
                }
            }
            for (got, want) in sums.iter().zip(ring) {
                prop_assert_eq!(got.to_bits(), codec.decode(want).to_bits());
            }
        }

        // A different session seed changes every share but never the sum.
        #[test]
        fn session_seed_shifts_shares_not_sums(
            vectors in proptest::collection::vec(
                proptest::collection::vec(-4.0f64..4.0, 1..12), 2..8),
            seed in 0u64..1_000_000,
            tag in 0u32..10_000,
        ) {
            let len = vectors[0].len();
            let vectors: Vec<Vec<f64>> = vectors
                .into_iter()
                .map(|mut v| { v.resize(len, 0.0); v })
                .collect();
            let k = vectors.len();
            let codec = FixedPointCodec::default();
            let one = SecaggSession::new(seed, k).unwrap();
            let two = SecaggSession::new(seed ^ 0x9e3779b97f4a7c15, k).unwrap();

            let mask_all = |s: &SecaggSession| -> Vec<_> {
                vectors
                    .iter()
                    .enumerate()
                    .map(|(i, v)| s.mask(v, i as u16, tag, &codec).unwrap().0)
                    .collect::<Vec<_>>()
            };
            let shares_one = mask_all(&one);
            let shares_two = mask_all(&two);
            for (a, b) in shares_one.iter().zip(&shares_two) {
                prop_assert_ne!(&a.elements, &b.elements);
            }
            let sums_one = one.secure_sum(&shares_one, tag, &codec).unwrap();
            let sums_two = two.secure_sum(&shares_two, tag, &codec).unwrap();
            for (a, b) in sums_one.iter().zip(&sums_two) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        // Shares from one round tag never flow into another round's sum.
        #[test]
        fn round_tag_mismatch_is_rejected(
            values in proptest::collection::vec(-4.0f64..4.0, 1..8),
            k in 2usize..6,
            seed in 0u64..1_000_000,
            tag in 0u32..10_000,
        ) {
            let codec = FixedPointCodec::default();
            let session = SecaggSession::new(seed, k).unwrap();
            let mut shares: Vec<_> = (0..k)
                .map(|i| session.mask(&values, i as u16, tag, &codec).unwrap().0)
                .collect();
            // Whole batch under the wrong expected tag.
            let err = session.secure_sum(&shares, tag + 1, &codec).unwrap_err();
            let rejected = matches!(err, SecaggError::RoundTagMismatch { .. });
            prop_assert!(rejected, "got {:?}", err);
            // One stray share inside an otherwise consistent batch.
            shares[0] = session.mask(&values, 0, tag + 1, &codec).unwrap().0;
            let err = session.secure_sum(&shares, tag, &codec).unwrap_err();
            let rejected = matches!(err, SecaggError::RoundTagMismatch { .. });
            prop_assert!(rejected, "got {:?}", err);
        }
    }
}

mod fed_props {
    use super::*;

    /// Learnable two-feature dataset with all (A, Y) cells populated, sized
    /// for fast whole-engine property runs.
    fn engine_dataset(n: usize, seed: u64) -> TabularDataset {
        let mut features = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        let mut groups = Vec::with_capacity(n);
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        for i in 0..n {
            let (a, y) = if i < 8 {
                ((i as u8 / 2) % 2, (i % 2) as u8)
            } else {
                let a = u8::from(next() > 0.5);
                let y = u8::from(next() > 0.6);
                (a, y)
            };
            let signal = f64::from(y) * 2.0 - 1.0;
            features.push(signal + (next() - 0.5));
            features.push(0.3 * f64::from(a) + (next() - 0.5));
            labels.push(y);
            groups.push(a);
        }
        TabularDataset::from_parts(feature_names(2), features, labels, groups).unwrap()
    }

    fn prepared_from(train: TabularDataset, test: TabularDataset) -> PreparedDataset {
        let meta = PrepareMeta {
            version: 1,
            source: "prop".to_string(),
            schema_digest: String::new(),
            n_raw_rows: train.n_rows() + test.n_rows(),
            dropped_rows: 0,
            dropped_features: Vec::new(),
            split: SplitSpec::default(),
            feature_names: train.feature_names().to_vec(),
        };
        PreparedDataset { train, test, meta }
    }

    fn engine_config(beta: f64, eta: f64, metric: MetricKind, seed: u64) -> EngineConfig {
        EngineConfig {
            metric,
            beta,
            eta,
            rounds: 2,
            train: TrainOpts { learning_rate: 0.05, epochs: 1, batch_size: 32 },
            fairbatch_step: 0.01,
            seed,
            subsample: None,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        // Normalized aggregation weights sum to one every round.
        #[test]
        fn engine_weights_normalize_to_one(
            data_seed in 0u64..1_000_000,
            run_seed in 0u64..1_000_000,
            beta in 0.0f64..2.0,
            eta in 0.0f64..1.0,
            k in 2usize..5,
        ) {
            let train = engine_dataset(160, data_seed);
            let test = engine_dataset(40, data_seed ^ 7);
            let n = train.n_rows();
            let part = manual_partition(k, (0..n).map(|i| i % k).collect());
            let mut engine = FedEngine::setup(
                engine_config(beta, eta, MetricKind::Eod, run_seed),
                &prepared_from(train, test),
                &part,
                &vec![DebiasStrategy::LocalReweigh; k],
            )
            .unwrap();
            engine.bootstrap().unwrap();
            for t in 1..=2u32 {
                engine.round(t).unwrap();
                let weights = engine.client_weights();
                let total: f64 = weights.iter().sum();
                prop_assert!(total > 0.0);
                let normalized: f64 = weights.iter().map(|w| w / total).sum();
                prop_assert!((normalized - 1.0).abs() < 1e-12);
            }
        }

        // At beta = 0 the fairness signal is inert: weights never leave the
        // FedAvg baseline and the trajectory is independent of the metric.
        #[test]
        fn beta_zero_is_metric_blind(
            data_seed in 0u64..1_000_000,
            run_seed in 0u64..1_000_000,
            k in 2usize..5,
        ) {
            let run = |metric: MetricKind| {
                let train = engine_dataset(160, data_seed);
                let test = engine_dataset(40, data_seed ^ 7);
                let n = train.n_rows();
                let part = manual_partition(k, (0..n).map(|i| i % k).collect());
                let mut engine = FedEngine::setup(
                    engine_config(0.0, 1.0, metric, run_seed),
                    &prepared_from(train, test),
                    &part,
                    &vec![DebiasStrategy::None; k],
                )
                .unwrap();
                engine.bootstrap().unwrap();
                let base = engine.client_weights();
                for t in 1..=2u32 {
                    engine.round(t).unwrap();
                    let now = engine.client_weights();
                    for (b, w) in base.iter().zip(&now) {
                        assert_eq!(b.to_bits(), w.to_bits());
                    }
                }
                engine.theta().to_flat()
            };
            let with_eod = run(MetricKind::Eod);
            let with_spd = run(MetricKind::Spd);
            for (a, b) in with_eod.iter().zip(&with_spd) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        // At eta = 1 the gap is exactly the fairness mismatch; for any eta
        // it is the stated blend, and an undefined local metric falls back
        // to the accuracy gap.
        #[test]
        fn metric_gap_blends_exactly(
            f_k in -1.0f64..1.0,
            f_global in -1.0f64..1.0,
            acc in 0.0f64..1.0,
            acc_bar in 0.0f64..1.0,
            eta in 0.0f64..1.0,
        ) {
            let (pure_gap, fell_back) = metric_gap(Some(f_k), f_global, acc, acc_bar, 1.0);
            prop_assert!(!fell_back);
            prop_assert_eq!(pure_gap.to_bits(), (f_global - f_k).abs().to_bits());

            let (blend, fell_back) = metric_gap(Some(f_k), f_global, acc, acc_bar, eta);
            prop_assert!(!fell_back);
            let want = eta * (f_global - f_k).abs() + (1.0 - eta) * (acc - acc_bar).abs();
            prop_assert!((blend - want).abs() < 1e-15);

            let (fallback, fell_back) = metric_gap(None, f_global, acc, acc_bar, eta);
            prop_assert!(fell_back);
            prop_assert_eq!(fallback.to_bits(), (acc - acc_bar).abs().to_bits());
        }

        // One round from equal starting weights orders the budgets opposite
        // to the metric gaps.
        #[test]
        fn weight_ranking_reverses_delta_order(
            data_seed in 0u64..1_000_000,
            run_seed in 0u64..1_000_000,
            beta in 0.05f64..0.4,
            k in 2usize..5,
        ) {
            let train = engine_dataset(k * 40, data_seed);
            let test = engine_dataset(40, data_seed ^ 7);
            let n = train.n_rows();
            let part = manual_partition(k, (0..n).map(|i| i % k).collect());
            let mut engine = FedEngine::setup(
                engine_config(beta, 1.0, MetricKind::Eod, run_seed),
                &prepared_from(train, test),
                &part,
                &vec![DebiasStrategy::None; k],
            )
            .unwrap();
            engine.bootstrap().unwrap();
            let start = engine.client_weights();
            let spread = start.iter().fold(f64::NEG_INFINITY, |m, w| m.max(*w))
                - start.iter().fold(f64::INFINITY, |m, w| m.min(*w));
            prop_assert!(spread.abs() < 1e-15, "equal starting weights expected");

            engine.round(1).unwrap();
            let deltas = engine.last_deltas().to_vec();
            let weights = engine.client_weights();
            for i in 0..k {
                for j in 0..k {
                    prop_assert!(
                        (deltas[i] - deltas[j]) * (weights[i] - weights[j]) <= 0.0,
                        "client {} delta {} weight {} vs client {} delta {} weight {}",
                        i, deltas[i], weights[i], j, deltas[j], weights[j]
                    );
                }
            }
        }

        // The server-visible transcript never exposes an individual scalar.
        #[test]
        fn transcripts_stay_private(
            data_seed in 0u64..1_000_000,
            run_seed in 0u64..1_000_000,
            beta in 0.0f64..2.0,
            k in 2usize..5,
        ) {
            let train = engine_dataset(200, data_seed);
            let test = engine_dataset(40, data_seed ^ 7);
            let n = train.n_rows();
            let part = manual_partition(k, (0..n).map(|i| i % k).collect());
            let engine = FedEngine::setup(
                engine_config(beta, 1.0, MetricKind::Eod, run_seed),
                &prepared_from(train, test),
                &part,
                &vec![DebiasStrategy::LocalReweigh; k],
            )
            .unwrap();
            let result = engine.run().unwrap();
            let report = privacy_audit(
                &result.transcript,
                &result.secrets,
                &FixedPointCodec::default(),
            );
            prop_assert!(report.passed(), "findings: {:?}", report.findings);
        }
    }
}

mod harness_props {
    use super::*;
    use tempfile::tempdir;

    fn tiny_spec(
        rows: usize,
        alpha: f64,
        lr: f64,
        method: &str,
        seeds: Vec<u64>,
    ) -> SweepSpec {
        SweepSpec {
            base: RunConfig {
                rows,
                k: 2,
                partition: PartitionSpec::Dirichlet {
                    alpha,
                    group_by: GroupBy::Sensitive,
                    min_rows: 2,
                },
                rounds: 2,
                train: TrainOpts { learning_rate: lr, epochs: 1, batch_size: 64 },
                ..RunConfig::default()
            },
            methods: vec![method.to_string()],
            alphas: vec![alpha],
            betas: vec![1.0],
            etas: vec![1.0],
            learning_rates: vec![lr],
            seeds,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        // Re-running a sweep reproduces the summary byte for byte.
        #[test]
        fn sweep_summaries_are_reproducible(
            rows in 300usize..380,
            alpha in 0.2f64..5.0,
            lr in 0.02f64..0.2,
            seed in 0u64..1000,
            which in 0u8..3,
        ) {
            let method = match which {
                0 => "fedavg",
                1 => "local-rw",
                _ => "fairfed-rw",
            };
            let spec = tiny_spec(rows, alpha, lr, method, vec![seed, seed + 1]);
            let first = sweep(&spec, None, false).unwrap();
            prop_assume!(first.failures.is_empty());
            let second = sweep(&spec, None, false).unwrap();
            prop_assert_eq!(summary_csv(&first.cells), summary_csv(&second.cells));
        }

        // Every summary cell traces back to one record per seed on disk.
        #[test]
        fn summary_rows_trace_to_run_records(
            rows in 300usize..380,
            alpha in 0.2f64..5.0,
            seed in 0u64..1000,
        ) {
            let dir = tempdir().unwrap();
            let spec = tiny_spec(rows, alpha, 0.05, "fairfed-rw", vec![seed, seed + 1]);
            let result = sweep(&spec, Some(dir.path()), false).unwrap();
            prop_assume!(result.failures.is_empty());
            prop_assert_eq!(result.cells.len(), 1);
            prop_assert_eq!(result.cells[0].n_seeds, 2);

            let records = fairfed_core::harness::collect_records(dir.path()).unwrap();
            prop_assert_eq!(records.len(), 2);
            let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            prop_assert_eq!(seeds, vec![seed, seed + 1]);
            for r in &records {
                prop_assert_eq!(&r.method, "fairfed-rw");
                prop_assert_eq!(r.alpha, Some(alpha));
                prop_assert_eq!(r.lr, 0.05);
            }
        }
    }
}
