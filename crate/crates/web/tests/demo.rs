use serde_json::Value;
use toolplay_web::{aggregate, dropout, search};

const REGISTRY: &str = r#"{"tools": [{
    "name": "get_weather",
    "parameters": {"properties": {
        "city": {"type": "string", "description": "City name"},
        "units": {"type": "string", "description": "metric or imperial"}
    }},
    "executor": {"kind": "rest", "url": "http://localhost/weather"}
}]}"#;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn dropout_extremes_and_errors() {
    let none = parse(dropout(REGISTRY, 0.0, 1).unwrap());
    assert_eq!(none["dropped"], 0);
    let all = parse(dropout(REGISTRY, 1.0, 1).unwrap());
    assert_eq!(all["dropped"], 2);
    assert_eq!(all["registry"]["tools"][0]["parameters"]["properties"]["city"]["description"], "");
    assert_eq!(dropout(REGISTRY, 0.5, 9).unwrap(), dropout(REGISTRY, 0.5, 9).unwrap());
    assert!(dropout(REGISTRY, 2.0, 1).is_err());
    assert!(dropout("not json", 0.5, 1).is_err());
}

#[test]
fn search_reports_a_consistent_tree() {
    let beam = parse(search("beam", 3, 3, 3, 11).unwrap());
    let nodes = beam["nodes"].as_array().unwrap();
    // Three roots, then at most W*L proposals per depth.
    assert!(nodes.len() <= 3 + 3 * 9);
    let best = beam["best_reward"].as_f64().unwrap();
    let max = nodes.iter().map(|n| n["reward"].as_f64().unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(best, max);
    let by_depth: Vec<f64> = beam["best_by_depth"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(by_depth.windows(2).all(|w| w[0] <= w[1]));

    let mc = parse(search("monte_carlo", 3, 3, 3, 11).unwrap());
    assert!(mc["best_reward"].as_f64().unwrap() <= best);
    assert_eq!(search("beam", 3, 3, 3, 11).unwrap(), search("beam", 3, 3, 3, 11).unwrap());
    assert!(search("greedy", 3, 3, 3, 11).is_err());
    assert!(search("beam", 0, 3, 3, 11).is_err());
}

#[test]
fn aggregate_rounds_to_one_decimal() {
    let rows = r#"[{"name": "a", "accuracy": 96.0, "weight": 0.5}, {"name": "b", "accuracy": 70.0, "weight": 0.5},
        {"name": "c", "accuracy": 96.0, "weight": 1}, {"name": "d", "accuracy": 90.0, "weight": 1},
        {"name": "e", "accuracy": 77.5, "weight": 1}]"#;
    let report = parse(aggregate(rows).unwrap());
    assert_eq!(report["weighted"], 86.6);
    assert_eq!(report["unweighted"], 85.9);
    assert!(aggregate("[]").is_err());
}
