mod support;

use std::path::Path;

use support::*;
use toolplay::examples::{ExampleArtifact, ExampleOutcome};
use toolplay::docs::DocArtifact;
use toolplay::llm::{MockRule, PromptLibrary, Role};
use toolplay::pipeline::{
    replay, BackendSource, Pipeline, PipelineError, RunConfig, RunDir, RunManifest, Stage, UnitStatus,
};
use toolplay::registry::ToolRegistry;

fn small_config(seed: u64) -> RunConfig {
    let mut config = RunConfig::new(seed);
    config.example_search.width = 2;
    config.example_search.branching = 2;
    config.example_search.max_depth = 1;
    config.example_search.reflection_rollouts = 1;
    config.doc_search.width = 1;
    config.doc_search.branching = 1;
    config.doc_search.max_depth = 1;
    config
}

fn run_stages(dir: &Path, registry: &ToolRegistry, config: &RunConfig, backend: &BackendSource, queries: &str) {
    let library = PromptLibrary::default();
    let run = RunDir::open(dir, RunManifest::new(config, backend, registry)).unwrap();
    let p = Pipeline {
        config,
        registry,
        backend,
        library: &library,
        dir: &run,
    };
    let s = p.optimize_examples(&[]).unwrap();
    assert_eq!(s.exit_code(), 0, "{}", s.render());
    let s = p.optimize_docs(&[]).unwrap();
    assert_eq!(s.exit_code(), 0, "{}", s.render());
    p.evaluate(queries).unwrap();
}

const QUERIES: &str = r#"{"query": "Weather in Paris please", "gold": [{"name": "get_weather", "arguments": {"city": "Paris"}}], "category": "simple"}
{"query": "Is it cold in Oslo?", "gold": [{"name": "get_weather", "arguments": {"city": "Oslo"}}], "category": "simple"}
"#;

#[test]
fn full_run_writes_every_artifact() {
    let server = weather_server();
    let registry = ToolRegistry::from_json(&weather_registry(&server, 2)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let backend = BackendSource::Mock { script: weather_script() };
    let config = small_config(7);
    run_stages(tmp.path(), &registry, &config, &backend, QUERIES);

    for rel in [
        "manifest.json",
        "examples/get_weather.json",
        "examples/get_weather.trace.jsonl",
        "examples/get_weather_1.json",
        "docs/get_weather.json",
        "docs/get_weather.diff.txt",
        "docs/get_weather.trace.jsonl",
        "eval/report.json",
        "eval/report.txt",
    ] {
        assert!(tmp.path().join(rel).exists(), "missing {rel}");
    }
    let examples: ExampleArtifact =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("examples/get_weather.json")).unwrap()).unwrap();
    assert_eq!(examples.outcome, ExampleOutcome::Found);
    assert_eq!(examples.examples[0].example.query, "How warm is it in Paris right now?");
    let docs: DocArtifact =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("docs/get_weather.json")).unwrap()).unwrap();
    assert_eq!(docs.original_reward, 1.0);

    let text = std::fs::read_to_string(tmp.path().join("eval/report.txt")).unwrap();
    assert!(text.contains("baseline") && text.contains("optimized") && text.contains("delta"), "{text}");
}

#[test]
fn identical_conditions_give_zero_delta() {
    let server = weather_server();
    let registry = ToolRegistry::from_json(&weather_registry(&server, 1)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let backend = BackendSource::Mock { script: weather_script() };
    run_stages(tmp.path(), &registry, &small_config(1), &backend, QUERIES);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["delta"]["weighted"], 0.0);
    assert_eq!(report["baseline"]["summary"]["weighted"], 100.0);
}

#[test]
fn optimized_docs_can_help_the_task_model() {
    // The task model only answers correctly when it sees the revised wording.
    let server = weather_server();
    let registry = ToolRegistry::from_json(&weather_registry(&server, 1)).unwrap();
    let mut script = weather_script();
    script.rules.retain(|r| r.role != Some(Role::TaskModel));
    script.rules.push(
        MockRule::new(["English city name", "Oslo"], r#"[{"name": "get_weather", "arguments": {"city": "Oslo"}}]"#)
            .for_role(Role::TaskModel),
    );
    script.rules.push(
        MockRule::new(["English city name"], r#"[{"name": "get_weather", "arguments": {"city": "Paris"}}]"#)
            .for_role(Role::TaskModel),
    );
    script.rules.push(MockRule::new(Vec::<String>::new(), "[]").for_role(Role::TaskModel));
    let backend = BackendSource::Mock { script };
    let mut config = small_config(3);
    config.categories.insert(
        "simple".into(),
        toolplay::pipeline::CategoryConfig {
            weight: 0.5,
            ..Default::default()
        },
    );
    let tmp = tempfile::tempdir().unwrap();
    run_stages(tmp.path(), &registry, &config, &backend, QUERIES);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["baseline"]["summary"]["weighted"], 0.0);
    assert_eq!(report["optimized"]["summary"]["weighted"], 100.0);
    assert_eq!(report["delta"]["weighted"], 100.0);
    assert_eq!(report["optimized"]["summary"]["categories"][0]["weight"], 0.5);
}

#[test]
fn mismatched_configuration_is_rejected() {
    let server = weather_server();
    let registry = ToolRegistry::from_json(&weather_registry(&server, 1)).unwrap();
    let backend = BackendSource::Mock { script: weather_script() };
    let tmp = tempfile::tempdir().unwrap();
    RunDir::open(tmp.path(), RunManifest::new(&small_config(1), &backend, &registry)).unwrap();
    let err = RunDir::open(tmp.path(), RunManifest::new(&small_config(2), &backend, &registry))
        .err()
        .unwrap();
    assert!(matches!(err, PipelineError::ManifestMismatch { what: "configuration", .. }));
}

#[test]
fn docs_without_examples_are_skipped() {
    let server = weather_server();
    let registry = ToolRegistry::from_json(&weather_registry(&server, 2)).unwrap();
    let backend = BackendSource::Mock { script: weather_script() };
    let config = small_config(1);
    let tmp = tempfile::tempdir().unwrap();
    let library = PromptLibrary::default();
    let run = RunDir::open(tmp.path(), RunManifest::new(&config, &backend, &registry)).unwrap();
    let p = Pipeline {
        config: &config,
        registry: &registry,
        backend: &backend,
        library: &library,
        dir: &run,
    };
    p.optimize_examples(&["get_weather".into()]).unwrap();
    let s = p.optimize_docs(&[]).unwrap();
    assert_eq!(s.completed, vec!["get_weather".to_string()]);
    assert_eq!(s.skipped.len(), 1);
    assert_eq!(s.skipped[0].0, "get_weather_1");
    assert_eq!(s.exit_code(), 2);
}

#[test]
fn unplayable_tool_is_reported() {
    let server = weather_server();
    let registry = ToolRegistry::from_json(&weather_registry(&server, 1)).unwrap();
    let mut script = weather_script();
    script.rules[0] =
        MockRule::new([M1], r#"{"name": "get_weather", "parameters": {"properties": {"city": "Atlantis"}}}"#)
            .for_role(Role::ExampleGenerator);
    script.rules[1] = MockRule::new([M2], r#"{"analysis": "city is unknown", "err_code": -1}"#)
        .for_role(Role::ExampleGenerator);
    let backend = BackendSource::Mock { script };
    let config = small_config(1);
    let tmp = tempfile::tempdir().unwrap();
    let library = PromptLibrary::default();
    let run = RunDir::open(tmp.path(), RunManifest::new(&config, &backend, &registry)).unwrap();
    let p = Pipeline {
        config: &config,
        registry: &registry,
        backend: &backend,
        library: &library,
        dir: &run,
    };
    let s = p.optimize_examples(&[]).unwrap();
    assert_eq!(s.unplayable, vec!["get_weather".to_string()]);
    assert_eq!(s.exit_code(), 2);
    let unit = &run.manifest().stages[&Stage::Examples].units["get_weather"];
    assert_eq!(unit.status, UnitStatus::Unplayable);
    assert_eq!(unit.calls.tool, 8);
}

#[test]
fn replay_reproduces_artifacts() {
    let server = weather_server();
    let registry = ToolRegistry::from_json(&weather_registry(&server, 2)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let backend = BackendSource::Mock { script: weather_script() };
    let mut config = small_config(11);
    config.jobs = 2;
    config.judge = true;
    let original = tmp.path().join("run");
    run_stages(&original, &registry, &config, &backend, QUERIES);
    let checks = replay(&original, &tmp.path().join("again"), &PromptLibrary::default()).unwrap();
    assert!(checks.len() >= 9);
    assert!(checks.iter().all(|c| c.identical), "{checks:?}");
}
