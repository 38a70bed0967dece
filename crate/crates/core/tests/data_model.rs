use fusionest::data::{pooled_rows, read_csv_from, validate, write_csv, FusedDataset, FusionSpec, ObservationRecord, Value};
use fusionest::nuisance::source_probs;
use fusionest::simulate::dgp::{LongitudinalDgp, Scenario};
use proptest::prelude::*;

fn rows(n: usize, k: usize, d: usize) -> Vec<ObservationRecord> {
    (0..n).map(|i| ObservationRecord::from_reals(&(0..d).map(|j| (i * d + j) as f64).collect::<Vec<_>>(), 1 + i % k)).collect()
}

#[test]
fn aligned_record_with_missing_history_is_flagged() {
    let spec = FusionSpec::new(2, 3, vec![(1, vec![1, 2, 3]), (2, vec![3])]);
    let mut recs = rows(6, 3, 2);
    recs[2].z[1] = Value::Missing;
    let v = validate(&FusedDataset::new(recs, spec));
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].record, Some(2));
    assert_eq!(v[0].rule, "history missing at j=2");
}

#[test]
fn single_source_dataset_is_valid() {
    let ds = FusedDataset::new(rows(10, 1, 3), FusionSpec::single_source(3));
    assert!(validate(&ds).is_empty());
}

#[test]
fn empty_fusion_set_is_a_spec_violation() {
    let spec = FusionSpec::new(5, 2, vec![(1, vec![1, 2]), (5, vec![])]);
    let v = spec.violations();
    assert!(v.iter().any(|x| x.rule == "empty fusion set at j=5" && x.record.is_none()));
}

#[test]
fn spec_json_with_empty_fusion_set_reports_violation() {
    let text = r#"{"d": 3, "k": 2, "J": [1, 3], "fusion_sets": {"1": [1, 2], "3": []}}"#;
    let spec = FusionSpec::from_json(text).unwrap();
    assert!(spec.violations().iter().any(|v| v.rule == "empty fusion set at j=3"));
}

#[test]
fn pooled_rows_keep_aligned_sources_in_order() {
    let spec = FusionSpec::new(3, 2, vec![(1, vec![1, 2]), (3, vec![1])]);
    let ds = FusedDataset::new(rows(7, 2, 3), spec);
    assert_eq!(pooled_rows(&ds, 1).unwrap().records, ds.records);
    let p3 = pooled_rows(&ds, 3).unwrap();
    assert!(p3.records.iter().all(|r| r.s == 1));
    assert_eq!(p3.records.len(), 4);
    assert_eq!(p3.records[1], ds.records[2]);
    assert!(pooled_rows(&ds, 2).is_err());
}

#[test]
fn pooled_rows_on_longitudinal_layout() {
    let ds = LongitudinalDgp::default().scaled(0.05).generate(Scenario::Complete, 3, 0).unwrap();
    let p = pooled_rows(&ds, 7).unwrap();
    assert!(!p.is_empty());
    assert!(p.records.iter().all(|r| [6, 8, 9].contains(&r.s)));
    let expect = ds.records.iter().filter(|r| [6, 8, 9].contains(&r.s)).count();
    assert_eq!(p.len(), expect);
}

#[test]
fn source_probability_counts_aligned_sizes() {
    let ds = LongitudinalDgp::default().generate(Scenario::Complete, 1, 0).unwrap();
    assert_eq!(ds.len(), 18800);
    assert_eq!(ds.source_prob(1).unwrap(), 6000.0 / 18800.0);
    assert_eq!(source_probs(&ds).unwrap()[&1], 6000.0 / 18800.0);
    assert!(validate(&ds).is_empty());
}

#[test]
fn single_source_probabilities_are_one() {
    let ds = FusedDataset::new(rows(5, 1, 2), FusionSpec::single_source(2));
    assert!(source_probs(&ds).unwrap().values().all(|&p| p == 1.0));
}

#[test]
fn csv_roundtrip_keeps_missing_and_weights() {
    let spec = FusionSpec::new(2, 2, vec![(1, vec![1, 2]), (2, vec![2])]);
    let mut recs = rows(4, 2, 2);
    recs[0].z[1] = Value::Missing;
    recs[3].w = 2.5;
    let ds = FusedDataset::new(recs, spec.clone());
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf).unwrap();
    let back = read_csv_from(buf.as_slice(), spec).unwrap();
    assert_eq!(back.records, ds.records);
}

#[test]
fn csv_nan_and_na_become_missing() {
    let text = "z1,z2,s\n1.5,NA,1\n2,NaN,1\n3,,1\n";
    let ds = read_csv_from(text.as_bytes(), FusionSpec::new(2, 1, vec![(1, vec![1])])).unwrap();
    assert!(ds.records.iter().all(|r| r.z[1].is_missing() && r.w == 1.0));
}

#[test]
fn csv_categorical_column_gets_sorted_codes() {
    let text = "z1,s\nb,1\na,1\nc,1\n";
    let ds = read_csv_from(text.as_bytes(), FusionSpec::single_source(1)).unwrap();
    let codes: Vec<f64> = ds.records.iter().map(|r| r.get(1).unwrap()).collect();
    assert_eq!(codes, vec![1.0, 0.0, 2.0]);
}

#[test]
fn csv_missing_column_is_a_data_error() {
    let err = read_csv_from("z1,s\n1,1\n".as_bytes(), FusionSpec::single_source(2)).unwrap_err();
    assert!(matches!(err, fusionest::FusionError::Data(_)));
}

proptest! {
    #[test]
    fn pooled_rows_partition_dataset(n in 1usize..40, k in 1usize..5, mask in proptest::collection::vec(any::<bool>(), 5)) {
        let set: Vec<usize> = (1..=k).filter(|s| mask[s - 1]).collect();
        prop_assume!(!set.is_empty());
        let spec = FusionSpec::new(2, k, vec![(1, (1..=k).collect()), (2, set.clone())]);
        let ds = FusedDataset::new(rows(n, k, 2), spec);
        let inside = pooled_rows(&ds, 2).unwrap();
        let outside: Vec<_> = ds.records.iter().filter(|r| !set.contains(&r.s)).cloned().collect();
        prop_assert_eq!(inside.len() + outside.len(), ds.len());
        let mut merged: Vec<_> = inside.records.iter().chain(&outside).cloned().collect();
        merged.sort_by(|a, b| a.get(1).partial_cmp(&b.get(1)).unwrap());
        prop_assert_eq!(merged, ds.records.clone());
    }

    #[test]
    fn validate_is_idempotent(n in 2usize..20, miss in 0usize..20) {
        let spec = FusionSpec::new(2, 2, vec![(1, vec![1, 2]), (2, vec![2])]);
        let mut recs = rows(n, 2, 2);
        if miss < n {
            recs[miss].z[1] = Value::Missing;
        }
        let ds = FusedDataset::new(recs, spec);
        let before = ds.clone();
        let a = validate(&ds);
        let b = validate(&ds);
        prop_assert_eq!(a.iter().map(|v| v.to_string()).collect::<Vec<_>>(), b.iter().map(|v| v.to_string()).collect::<Vec<_>>());
        prop_assert_eq!(&ds.records, &before.records);
        prop_assert_eq!(a.len(), usize::from(miss < n && ds.records[miss].s == 2));
    }
}
