use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn covrank(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covrank"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("COVRANK_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = covrank(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

/// English and German each get 80 consistent votes a > b > c; Tamil gets 10.
fn write_votes(dir: &Path) -> PathBuf {
    let mut lines = Vec::new();
    let mut ts = 1_700_000_000;
    for (lang, n) in [("English", 40), ("German", 40), ("Tamil", 5)] {
        for k in 0..n {
            for (a, b) in [("a", "b"), ("b", "c")] {
                // one upset in ten keeps the fit finite
                let winner = if k % 10 == 9 { "model_b" } else { "model_a" };
                lines.push(format!(
                    r#"{{"model_a":"{a}","model_b":"{b}","winner":"{winner}","language":"{lang}","tasks":["general"],"timestamp":{ts}}}"#
                ));
                ts += 60;
            }
        }
    }
    let path = dir.join("votes.jsonl");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

fn setup() -> (TempDir, PathBuf, String) {
    let tmp = tempfile::tempdir().unwrap();
    let votes = write_votes(tmp.path());
    let out = tmp.path().join("out");
    (tmp, out, votes.to_str().unwrap().to_string())
}

fn ranking_files(out: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(out.join("rankings"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "index.json")
        .collect();
    names.sort();
    names
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_writes_global_plus_eligible_strata() {
    let (_tmp, out, votes) = setup();
    ok(&out, &["--votes", &votes, "fit", "--schemes", "global"]);
    assert_eq!(ranking_files(&out), vec!["global.json"]);

    ok(&out, &["--votes", &votes, "fit", "--schemes", "language"]);
    assert_eq!(ranking_files(&out), vec!["global.json", "language=English.json", "language=German.json"]);

    ok(&out, &["--votes", &votes, "fit", "--schemes", "language", "--min-votes", "100000"]);
    assert_eq!(ranking_files(&out), vec!["global.json"]);
}

#[test]
fn coverage_outputs_one_column_per_ranking() {
    let (_tmp, out, votes) = setup();
    ok(&out, &["--votes", &votes, "fit", "--schemes", "global"]);
    ok(&out, &["--votes", &votes, "coverage", "--csv"]);
    let summary = json(&out.join("coverage/summary.json"));
    assert_eq!(summary["n_rankings"], 1);
    assert_eq!(summary["rankings"][0], "global");

    // coverage at λ = 1 is the non-missing fraction, here everything
    let curve = fs::read_to_string(out.join("coverage/coverage_curve.csv")).unwrap();
    let rows: Vec<Vec<&str>> = curve.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let global: Vec<f64> = rows.iter().filter(|r| r[0] == "global").map(|r| r[2].parse().unwrap()).collect();
    assert!(global.windows(2).all(|w| w[0] <= w[1]));
    ok(&out, &["--votes", &votes, "--set", "coverage.lambdas=[0.5, 1.0]", "coverage"]);
    let curve = fs::read_to_string(out.join("coverage/coverage_curve.csv")).unwrap();
    assert!(curve.contains("global,1.000000,1.000000"));

    let diag = fs::read_to_string(out.join("coverage/diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 2);
}

#[test]
fn select_finds_single_global_ranking_on_easy_instance() {
    let (_tmp, out, votes) = setup();
    ok(&out, &["--votes", &votes, "fit", "--schemes", "language"]);
    ok(&out, &["--votes", &votes, "coverage"]);
    ok(&out, &["--votes", &votes, "select", "--lambdas", "0.95", "--methods", "greedy,exact,lp,phase2"]);
    for m in ["greedy", "exact", "lp", "phase2"] {
        let r = json(&out.join(format!("select/{m}/lambda_0.95.json")));
        assert_eq!(r["status"], "ok", "{m}");
        assert_eq!(r["k"], 1, "{m}");
    }
    assert_eq!(json(&out.join("select/greedy/lambda_0.95.json"))["selected"][0], "global");
}

#[test]
fn infeasible_targets_are_reported_and_exit_3() {
    let (_tmp, out, votes) = setup();
    ok(&out, &["--votes", &votes, "fit", "--schemes", "language"]);
    ok(&out, &["--votes", &votes, "coverage"]);
    // the upsets can never be covered at λ = 0.05
    let o = covrank(&out, &["--votes", &votes, "select", "--lambdas", "0.05", "--nu", "1.0"]);
    assert_eq!(o.status.code(), Some(3));
    let r = json(&out.join("select/greedy/lambda_0.05.json"));
    assert_eq!(r["status"], "infeasible");
    assert!(r["max_nu"].as_f64().unwrap() < 1.0);

    // one feasible λ is enough for success
    ok(&out, &["--votes", &votes, "select", "--lambdas", "0.05,0.95", "--nu", "1.0"]);
}

#[test]
fn llm_orderings_are_cumulative_and_global_follows_elo() {
    let (_tmp, out, votes) = setup();
    ok(&out, &["--votes", &votes, "fit", "--schemes", "language"]);
    ok(&out, &["--votes", &votes, "coverage"]);
    ok(&out, &["--votes", &votes, "llm-portfolio", "--k", "3"]);
    let table = fs::read_to_string(out.join("llm/orderings.csv")).unwrap();
    for source in ["greedy", "lp", "global"] {
        let cov: Vec<f64> = table
            .lines()
            .filter(|l| l.starts_with(&format!("{source},")))
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(cov.len(), 3, "{source}");
        assert!(cov.windows(2).all(|w| w[0] <= w[1]), "{source}");
    }
    let global: Vec<&str> =
        table.lines().filter(|l| l.starts_with("global,")).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(global, vec!["a", "b", "c"]);
}

#[test]
fn exit_codes_follow_error_kind() {
    let (tmp, out, _votes) = setup();
    // no vote file configured
    assert_eq!(covrank(&out, &["fit"]).status.code(), Some(2));
    // unknown config key
    assert_eq!(covrank(&out, &["--set", "select.bogus=1", "fit"]).status.code(), Some(2));
    // missing file
    let missing = tmp.path().join("nope.jsonl");
    assert_eq!(covrank(&out, &["--votes", missing.to_str().unwrap(), "fit"]).status.code(), Some(4));
    // select before coverage
    assert_eq!(covrank(&out, &["select"]).status.code(), Some(2));
}

#[test]
fn output_root_can_come_from_environment() {
    let (tmp, _out, votes) = setup();
    let root = tmp.path().join("from-env");
    let status = Command::new(env!("CARGO_BIN_EXE_covrank"))
        .args(["--votes", &votes, "fit", "--schemes", "global"])
        .env("COVRANK_OUT", &root)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(root.join("rankings/global.json").exists());
}

#[test]
fn synth_and_compas_emit_report_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    ok(&out, &["synth", "--preset", "mirror", "--n-votes", "500", "--tabular-rows", "400"]);
    for f in ["votes.jsonl", "ground_truth.json", "spec.json", "tabular.csv"] {
        assert!(out.join("synth").join(f).exists(), "{f}");
    }
    let data = out.join("synth/tabular.csv");
    ok(&out, &["--set", "compas.max_iter=200", "compas", "--data", data.to_str().unwrap()]);
    let models = json(&out.join("compas/models.json"));
    assert_eq!(models.as_array().unwrap().len(), 61);
    assert_eq!(models[0]["id"], "Global");

    let fpr = fs::read_to_string(out.join("compas/fpr.csv")).unwrap();
    let mut lines = fpr.lines();
    assert_eq!(lines.next().unwrap(), "portfolio,overall,F-AA,M-AA,F-C,M-C,F-O,M-O");
    assert_eq!(lines.count(), 5);

    let assign = fs::read_to_string(out.join("compas/assignment_lambda_0.40.csv")).unwrap();
    assert!(assign.starts_with("model,F-AA,M-AA,F-C,M-C,F-O,M-O"));
    assert!(assign.lines().last().unwrap().starts_with("No model,"));
}
