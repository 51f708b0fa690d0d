//! Finite-difference suites at f64 over 20 seeds, and the corrupted-op
//! negative control.

use std::time::Instant;

use lstrl_core::gradsuite::{run_suites, suites, NETWORK_TOLERANCE, OP_TOLERANCE};
use lstrl_core::tensor::gradcheck::relative_error;
use lstrl_core::tensor::tape::corrupt_gradient_of;

const SEEDS: u64 = 20;

#[test]
fn every_suite_passes_over_twenty_seeds() {
    let seeds: Vec<u64> = (0..SEEDS).collect();
    let start = Instant::now();
    let results = run_suites(&seeds, None).unwrap();
    let elapsed = start.elapsed();
    let names: Vec<&str> = results.iter().map(|r| r.name).collect();
    for required in ["matmul", "softmax_rows", "mae", "bme", "tiny_network", "batch_hard_triplet"] {
        assert!(names.contains(&required), "missing suite {required}");
    }
    for r in &results {
        let tol = if r.name == "tiny_network" { NETWORK_TOLERANCE } else { OP_TOLERANCE };
        assert_eq!(r.tolerance, tol, "{}", r.name);
        assert_eq!(r.seeds, SEEDS as usize);
        assert!(r.entries > 0, "{} compared nothing", r.name);
        assert!(
            r.passed,
            "{}: max rel err {:.3e} at {} ({} kinks / {} entries)",
            r.name, r.max_rel_err, r.worst, r.kinks, r.entries
        );
    }
    assert!(elapsed.as_secs() < 120, "gradient suites took {elapsed:?}");
}

#[test]
fn corrupted_backward_is_caught_and_named() {
    for op in ["softmax_rows", "broadcast_hadamard", "avg_pool2"] {
        corrupt_gradient_of(Some(op));
        let results = run_suites(&[0, 1], Some(op));
        corrupt_gradient_of(None);
        let results = results.unwrap();
        let own = results.iter().find(|r| r.name == op).expect("suite exists");
        assert!(!own.passed, "corrupting {op} went unnoticed");
    }
}

#[test]
fn suite_names_are_unique() {
    let mut names: Vec<&str> = suites().iter().map(|s| s.name).collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
}

#[test]
fn relative_error_uses_floor_for_tiny_values() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
}
