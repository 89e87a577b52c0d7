use proptest::prelude::*;
use revdeblur::exit::{compute_exit_signal, d_rate, predict_classes, Bins, ExitPolicy, IncrementTable};
use revdeblur::Tensor;

fn gopro_train_table() -> IncrementTable {
    IncrementTable::from_rows(&[
        vec![11.134, 0.642, 0.351, 0.178],
        vec![10.959, 0.406, 0.211, 0.100],
        vec![9.184, 0.214, 0.105, 0.047],
        vec![6.215, 0.121, 0.050, 0.021],
        vec![3.468, 0.079, 0.024, 0.011],
        vec![2.380, 0.047, 0.016, 0.009],
    ])
}

#[test]
fn golden_exit_vector_strict() {
    let p = compute_exit_signal(&gopro_train_table(), 0.05, false);
    assert_eq!(p.exits, vec![4, 4, 3, 3, 2, 1]);
}

#[test]
fn golden_exit_vector_agrees_with_main_table_on_classes_1_and_3() {
    let p = compute_exit_signal(&gopro_train_table(), 0.05, false);
    let main_table = [4, 4, 3, 2, 1, 1];
    assert_eq!(p.exits[0], main_table[0]);
    assert_eq!(p.exits[2], main_table[2]);
}

#[test]
fn recorded_discrepancy_with_main_table_at_classes_4_and_5() {
    let p = compute_exit_signal(&gopro_train_table(), 0.05, false);
    let main_table = [4, 4, 3, 2, 1, 1];
    assert_ne!(p.exits[3], main_table[3]);
    assert_ne!(p.exits[4], main_table[4]);
    assert_eq!((p.exits[3], p.exits[4]), (3, 2));
}

#[test]
fn inclusive_comparison_moves_the_boundary_gain() {
    // class 4 has a gain of exactly 0.050 at column 3
    let p = compute_exit_signal(&gopro_train_table(), 0.05, true);
    assert_eq!(p.exits, vec![4, 4, 3, 2, 2, 1]);
}

#[test]
fn d_rate_of_golden_vector() {
    let p = compute_exit_signal(&gopro_train_table(), 0.05, false);
    assert!((d_rate(&p.exits, 4) - 17.0 / 24.0).abs() < 1e-12);
    assert_eq!(d_rate(&[4, 4, 4], 4), 1.0);
}

#[test]
fn exit_is_floored_at_one() {
    let t = IncrementTable::from_rows(&[vec![0.01, 0.01], vec![0.3, 0.2]]);
    let p = compute_exit_signal(&t, 0.05, false);
    assert_eq!(p.exits, vec![1, 2]);
}

#[test]
fn tau_below_every_gain_runs_all_columns() {
    let p = compute_exit_signal(&gopro_train_table(), 0.0, false);
    assert_eq!(p.exits, vec![4; 6]);
}

#[test]
fn empty_class_runs_all_columns() {
    let t = IncrementTable::from_psnrs(&[1, 1], &[vec![20.0, 25.0, 25.01], vec![22.0, 26.0, 26.0]], 3).unwrap();
    assert_eq!(t.counts, vec![2, 0, 0]);
    assert_eq!(t.gains[1], vec![None, None]);
    let p = compute_exit_signal(&t, 0.05, false);
    assert_eq!(p.exits, vec![1, 2, 2]);
}

#[test]
fn increment_table_from_psnrs_averages_gains() {
    let rows = vec![vec![20.0, 23.0, 23.5], vec![21.0, 25.0, 25.1], vec![30.0, 30.5, 30.52]];
    let t = IncrementTable::from_psnrs(&[1, 1, 2], &rows, 2).unwrap();
    let g0 = t.gains[0][0].unwrap();
    let g1 = t.gains[0][1].unwrap();
    assert!((g0 - 3.5).abs() < 1e-12);
    assert!((g1 - 0.3).abs() < 1e-12);
    assert!((t.gains[1][1].unwrap() - 0.02).abs() < 1e-12);
    assert_eq!(t.counts, vec![2, 1]);
}

#[test]
fn increment_table_rejects_bad_classes() {
    assert!(IncrementTable::from_psnrs(&[0], &[vec![1.0, 2.0]], 2).is_err());
    assert!(IncrementTable::from_psnrs(&[3], &[vec![1.0, 2.0]], 2).is_err());
    assert!(IncrementTable::from_psnrs(&[1, 1], &[vec![1.0, 2.0], vec![1.0]], 2).is_err());
}

#[test]
fn table_tsv_round_trip_keeps_missing_classes() {
    let t = IncrementTable::from_psnrs(&[1, 3], &[vec![20.0, 21.5, 22.0], vec![33.0, 33.2, 33.21]], 3).unwrap();
    let back = IncrementTable::from_tsv(&t.to_tsv(), "mem").unwrap();
    assert_eq!(back, t);
    assert!(t.to_tsv().contains("NA"));
}

#[test]
fn table_tsv_rejects_malformed_input() {
    assert!(IncrementTable::from_tsv("", "mem").is_err());
    assert!(IncrementTable::from_tsv("class\tdec2\tcount\n", "mem").is_err());
    assert!(IncrementTable::from_tsv("class\tdec1\tcount\n1\tx\t3\n", "mem").is_err());
    assert!(IncrementTable::from_tsv("class\tdec1\tcount\n2\t0.1\t3\n", "mem").is_err());
}

#[test]
fn policy_tsv_round_trip() {
    let p = compute_exit_signal(&gopro_train_table(), 0.05, true);
    let back = ExitPolicy::from_tsv(&p.to_tsv(), "mem").unwrap();
    assert_eq!(back, p);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.tsv");
    p.write(&path).unwrap();
    assert_eq!(ExitPolicy::read(&path).unwrap(), p);
}

#[test]
fn policy_tsv_rejects_gaps_and_zero_exits() {
    assert!(ExitPolicy::from_tsv("# tau=0.05\nclass\tE\n2\t3\n", "mem").is_err());
    assert!(ExitPolicy::from_tsv("# tau=0.05\nclass\tE\n1\t0\n", "mem").is_err());
    assert!(ExitPolicy::from_tsv("class\tE\n1\t1\n", "mem").is_err());
}

#[test]
fn exit_for_rejects_unknown_class() {
    let p = ExitPolicy::full(6, 4);
    assert_eq!(p.exit_for(6).unwrap(), 4);
    assert!(p.exit_for(0).is_err());
    assert!(p.exit_for(7).is_err());
}

#[test]
fn bins_assign_edge_values_to_the_lower_class() {
    let b = Bins::standard();
    assert_eq!(b.classes(), 6);
    assert_eq!(b.class_of(12.0), 1);
    assert_eq!(b.class_of(20.0), 1);
    assert_eq!(b.class_of(20.0001), 2);
    assert_eq!(b.class_of(35.0), 4);
    assert_eq!(b.class_of(100.0), 6);
    assert!(Bins::new(vec![25.0, 20.0]).is_err());
    assert_eq!(Bins::with_step(20.0, 5.0, 6).unwrap(), b);
}

#[test]
fn predicted_classes_break_ties_low() {
    let logits = Tensor::<f32>::from_vec([2, 3, 1, 1], vec![0.1, 0.7, 0.7, 2.0, -1.0, 0.0]).unwrap();
    assert_eq!(predict_classes(&logits), vec![2, 1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn exits_do_not_increase_with_tau(
        rows in prop::collection::vec(prop::collection::vec(-0.5f64..3.0, 4), 1..8),
        t1 in -0.5f64..1.0,
        dt in 0.0f64..1.0,
        inclusive in any::<bool>(),
    ) {
        let table = IncrementTable::from_rows(&rows);
        let lo = compute_exit_signal(&table, t1, inclusive);
        let hi = compute_exit_signal(&table, t1 + dt, inclusive);
        for (a, b) in lo.exits.iter().zip(&hi.exits) {
            prop_assert!(b <= a);
            prop_assert!((1..=4).contains(b));
        }
    }
}
