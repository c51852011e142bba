use fedsim_web::{communication_json, partition_json, simulate_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn simulation_learns_the_synthetic_task() {
    let v = parse(&simulate_json("dfl", 3, 5, 7, "zero", -1).unwrap());
    let rounds = v["rounds"].as_array().unwrap();
    assert_eq!(rounds.len(), 6);
    assert!((rounds[0]["loss"].as_f64().unwrap() - 10f64.ln()).abs() < 1e-6);
    assert!(v["final_accuracy"].as_f64().unwrap() > 0.9, "{v}");
    assert_eq!(
        v["total_bytes"].as_u64().unwrap(),
        5 * 6 * v["encoded_model_bytes"].as_u64().unwrap()
    );
}

#[test]
fn simulation_is_deterministic_and_validates_input() {
    let a = simulate_json("sdfl", 4, 2, 1, "uniform:1:8", 5).unwrap();
    let b = simulate_json("sdfl", 4, 2, 1, "uniform:1:8", 5).unwrap();
    assert_eq!(a, b);
    assert!(parse(&a)["rounds"][1]["aggregator"].is_u64());
    assert!(simulate_json("xfl", 3, 1, 1, "zero", -1)
        .unwrap_err()
        .contains("cfl"));
    assert!(simulate_json("cfl", 0, 1, 1, "zero", -1).is_err());
    assert!(simulate_json("cfl", 3, 1, 1, "slow", -1).is_err());
    assert!(simulate_json("cfl", 3, 1000, 1, "zero", -1).is_err());
}

#[test]
fn communication_rows_follow_the_topologies() {
    let v = parse(&communication_json(8).unwrap());
    let size = v["encoded_model_bytes"].as_u64().unwrap();
    assert_eq!(size, 940_620);
    for row in v["rows"].as_array().unwrap() {
        let n = row["n"].as_u64().unwrap();
        assert_eq!(row["cfl"]["transfers"].as_u64().unwrap(), 2 * n);
        assert_eq!(row["dfl"]["transfers"].as_u64().unwrap(), n * (n - 1));
        assert_eq!(row["sdfl"]["transfers"].as_u64().unwrap(), 2 * (n - 1));
        assert_eq!(row["dfl"]["bytes"].as_u64().unwrap(), n * (n - 1) * size);
    }
    assert!(communication_json(0).is_err());
}

#[test]
fn partitions_are_stratified() {
    let v = parse(&partition_json(4, 2000, 9).unwrap());
    let parts = v["parts"].as_array().unwrap();
    assert_eq!(parts.len(), 4);
    let total: u64 = v["sizes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_u64().unwrap())
        .sum();
    assert_eq!(total, v["samples"].as_u64().unwrap());
    for c in 0..10 {
        let counts: Vec<u64> = parts.iter().map(|p| p[c].as_u64().unwrap()).collect();
        assert!(
            counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1,
            "{counts:?}"
        );
    }
    assert!(partition_json(5, 3, 1).is_err());
}
