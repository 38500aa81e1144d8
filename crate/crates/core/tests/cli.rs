mod common;

use std::collections::BTreeSet;

use common::{Workspace, BASE_CONFIG};

fn ids(rows: &[serde_json::Value]) -> BTreeSet<String> {
    rows.iter()
        .map(|r| r["pair_id"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn export_covers_exactly_the_correct_pairs() {
    let ws = Workspace::new(BASE_CONFIG);
    for stage in ["ingest", "split", "generate", "rewrite", "export"] {
        ws.expect(&[stage], 0);
    }
    let traces = ws.jsonl("traces.gen.jsonl");
    let correct: Vec<_> = traces
        .iter()
        .filter(|t| t["is_correct"] == true)
        .cloned()
        .collect();
    assert!(!correct.is_empty() && correct.len() < traces.len());

    let outcomes = ws.jsonl("outcomes.jsonl");
    assert_eq!(ids(&outcomes), ids(&correct));
    assert!(outcomes.iter().all(|o| o["final"]["is_correct"] == true));

    let sft = ws.jsonl("sft.jsonl");
    assert_eq!(ids(&sft), ids(&correct));
    for r in &sft {
        let keys: Vec<&String> = r.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 4);
        assert!(r["instruction"].as_str().unwrap().starts_with("Text: "));
        assert!(r["response"].as_str().unwrap().contains("[Final Answer: "));
    }
}

#[test]
fn five_contiguous_folds_over_twenty_topics() {
    let ws = Workspace::new(BASE_CONFIG);
    ws.expect(&["ingest"], 0);
    ws.expect(&["split"], 0);
    let folds: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.file("folds.json")).unwrap()).unwrap();
    let folds = folds["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 5);
    for (i, f) in folds.iter().enumerate() {
        let test: Vec<u64> = f["test_topics"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t.as_u64().unwrap())
            .collect();
        let start = 4 * i as u64 + 1;
        assert_eq!(test, (start..start + 4).collect::<Vec<_>>());
        assert_eq!(f["train_topics"].as_array().unwrap().len(), 16);
    }
    let manifest = std::fs::read_to_string(ws.file("manifest.json")).unwrap();
    assert!(manifest.contains("\"stage\": \"split\""));
}

#[test]
fn unreachable_endpoint_fails_without_partial_report() {
    let config = format!(
        "{BASE_CONFIG}\n[endpoints.down]\nbase_url = \"http://127.0.0.1:9/v1\"\nmodel = \"m\"\nretry = {{ max_attempts = 1, backoff_ms = [] }}\n"
    );
    let ws = Workspace::new(&config);
    ws.expect(&["ingest"], 0);
    ws.expect(&["split"], 0);
    let out = ws.expect(&["evaluate", "--endpoint", "subject=down"], 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed"));
    assert!(!ws.file("report.json").exists());
    assert!(!ws.file("predictions.jsonl").exists());
}

#[test]
fn config_errors_exit_before_work() {
    let ws = Workspace::new(&BASE_CONFIG.replace(
        "model = \"mock-target\"",
        "model = \"mock-target\"\ntemperature = 0.7",
    ));
    let out = ws.expect(&["ingest"], 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature"));
    assert!(!ws.path().join("out").exists());

    let ws = Workspace::new(BASE_CONFIG);
    ws.expect(&["split", "--fold", "9"], 2);
    ws.expect(&["evaluate", "--endpoint", "subject=nowhere"], 2);
    ws.expect(&["select", "--strategy", "best"], 2);
}

#[test]
fn missing_prerequisite_is_named() {
    let ws = Workspace::new(BASE_CONFIG);
    let out = ws.expect(&["rewrite"], 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.jsonl"));
    ws.expect(&["ingest"], 0);
    ws.expect(&["split"], 0);
    let out = ws.expect(&["rewrite"], 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("traces.gen.jsonl"));
}

#[test]
fn corpus_mean_gate_failure_ships_originals() {
    let ws = Workspace::new(BASE_CONFIG);
    // Rewrites from the target mock all contain "leads"; score them badly.
    std::fs::write(
        ws.path().join("mock/target.json"),
        r####"{"rules":[
            {"contains_all":["### Reference:","[Final Answer: Yes]"],"response":"It leads there. [Final Answer: Yes]"},
            {"contains_all":["### Reference:","[Final Answer: No]"],"response":"Nothing leads there. [Final Answer: No]"}],
           "score_rules":[{"response_contains":"leads","logprob":-4.0}]}"####,
    )
    .unwrap();
    for stage in ["ingest", "split", "generate"] {
        ws.expect(&[stage], 0);
    }
    let out = ws.expect(&["rewrite"], 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("gate failed"));
    let outcomes = ws.jsonl("outcomes.jsonl");
    assert!(!outcomes.is_empty());
    for o in &outcomes {
        assert_eq!(o["final"], o["original"]);
        assert_eq!(o["reason"], "perplexity_reverted");
    }
    // Re-running reports the same verdict without redoing work.
    ws.expect(&["rewrite"], 4);
    ws.expect(&["export"], 0);
    assert!(ws
        .jsonl("sft.jsonl")
        .iter()
        .all(|r| r["meta"]["stage"] == "generated"));
}

#[test]
fn per_trace_gate_mode_from_flag() {
    let ws = Workspace::new(BASE_CONFIG);
    for stage in ["ingest", "split", "generate"] {
        ws.expect(&[stage], 0);
    }
    ws.expect(&["rewrite", "--gate-mode", "per-trace"], 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.file("manifest.json")).unwrap()).unwrap();
    let rewrite = manifest["entries"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["stage"] == "rewrite")
        .unwrap();
    assert_eq!(rewrite["reports"]["gate"]["mode"], "per_trace");
    assert_eq!(rewrite["reports"]["gate"]["passed"], true);
}

#[test]
fn rerun_is_a_no_op() {
    let ws = Workspace::new(BASE_CONFIG);
    ws.expect(&["build"], 0);
    let manifest = std::fs::read(ws.file("manifest.json")).unwrap();
    let sft = std::fs::read(ws.file("sft.jsonl")).unwrap();
    let out = ws.expect(&["build"], 0);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.matches("up to date").count(), 6, "{stderr}");
    assert_eq!(std::fs::read(ws.file("manifest.json")).unwrap(), manifest);
    assert_eq!(std::fs::read(ws.file("sft.jsonl")).unwrap(), sft);
}

#[test]
fn changed_config_reruns_stage() {
    let ws = Workspace::new(BASE_CONFIG);
    ws.expect(&["ingest"], 0);
    ws.expect(&["split"], 0);
    let out = ws.expect(&["split", "--fold", "2"], 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("split: done"));
    let folds: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.file("folds.json")).unwrap()).unwrap();
    assert_eq!(folds["selected"], 2);
}

#[test]
fn locked_run_directory_is_refused() {
    let ws = Workspace::new(BASE_CONFIG);
    ws.expect(&["ingest"], 0);
    std::fs::write(ws.file(".lock"), "").unwrap();
    let out = ws.expect(&["split"], 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    assert!(!ws.file("folds.json").exists());
}

#[test]
fn selection_across_pools() {
    let config = BASE_CONFIG.replace(
        "[roles]",
        "[endpoints.gen_b]\nbase_url = \"mock://\"\nmodel = \"mock-generator-b\"\n\n[roles]\npool = [\"gen\", \"gen_b\"]",
    );
    let ws = Workspace::new(&config);
    ws.expect(&["build"], 0);
    let selected = ws.jsonl("selected.jsonl");
    let sources: BTreeSet<&str> = selected
        .iter()
        .map(|t| t["source_model_id"].as_str().unwrap())
        .collect();
    assert!(sources.len() >= 2, "{sources:?}");
    assert!(selected.iter().all(|t| t["perplexity"].as_f64().unwrap() > 0.0));
    assert_eq!(ids(&ws.jsonl("sft.jsonl")), ids(&selected));

    ws.expect(&["select", "--strategy", "per-model:gen_b"], 0);
    ws.expect(&["export", "--strategy", "per-model:gen_b"], 0);
    let only_b = ws.jsonl("selected.jsonl");
    assert!(only_b.iter().all(|t| t["source_model_id"] == "mock-generator-b"));
}

#[test]
fn evaluation_reports_and_csv() {
    let ws = Workspace::new(BASE_CONFIG);
    ws.expect(&["ingest"], 0);
    ws.expect(&["split"], 0);
    ws.expect(&["evaluate"], 0);
    ws.expect(&["robustness"], 0);
    ws.expect(&["report"], 0);
    let csv = std::fs::read_to_string(ws.file("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("label,mode,n_causal,n_non_causal,acc_causal"));
    assert!(lines[1].starts_with("target:zero_shot,standard,"));
    assert!(lines[2].starts_with("target:intervention,intervention,"));
    let preds = ws.jsonl("predictions.jsonl");
    assert_eq!(preds.len(), ws.jsonl("test.jsonl").len());

    ws.expect(&["evaluate", "--template", "few_shot_icl"], 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.file("report.json")).unwrap()).unwrap();
    assert_eq!(report["label"], "target:few_shot_icl");
}

#[test]
fn report_needs_an_evaluation() {
    let ws = Workspace::new(BASE_CONFIG);
    ws.expect(&["ingest"], 0);
    let out = ws.expect(&["report"], 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("report.json"));
}
