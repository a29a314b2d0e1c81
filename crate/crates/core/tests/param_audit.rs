use scalemixer_core::config::ModelConfig;
use scalemixer_core::forecaster::parameter_counts;

#[test]
fn paper_scale_counts_match_reported_sizes() {
    let counts = parameter_counts(&ModelConfig::paper_scale());
    println!("{counts:?}");
    let total_err = (counts.total as f64 - 1.07e9).abs() / 1.07e9;
    let global_err = (counts.global as f64 - 736e6).abs() / 736e6;
    assert!(total_err <= 0.05, "total {} off by {total_err}", counts.total);
    assert!(global_err <= 0.05, "global {} off by {global_err}", counts.global);
}

#[test]
fn desk_counts_are_small() {
    let counts = parameter_counts(&ModelConfig::desk());
    println!("{counts:?}");
    assert!(counts.total < 5_000_000);
}
