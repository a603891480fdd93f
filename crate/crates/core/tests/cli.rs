use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use sasaki::cli::{self, Command, Overrides, RunConfig};
use serde_json::Value;

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

/// Serves the shipped schemas for cross-file `$ref`s.
struct LocalSchemas;

impl jsonschema::Retrieve for LocalSchemas {
    fn retrieve(
        &self,
        uri: &jsonschema::Uri<String>,
    ) -> Result<Value, Box<dyn std::error::Error + Send + Sync>> {
        let name = uri.path().as_str().rsplit('/').next().unwrap_or_default().to_string();
        Ok(serde_json::from_str(&fs::read_to_string(schema_dir().join(name))?)?)
    }
}

fn validator(name: &str) -> jsonschema::Validator {
    let schema: Value = serde_json::from_str(&fs::read_to_string(schema_dir().join(name)).unwrap()).unwrap();
    jsonschema::options().with_retriever(LocalSchemas).build(&schema).unwrap()
}

fn assert_valid(dir: &Path, file: &str, schema: &str) {
    let inst: Value = serde_json::from_str(&fs::read_to_string(dir.join(file)).unwrap()).unwrap();
    let v = validator(schema);
    let errors: Vec<String> = v.iter_errors(&inst).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{file} vs {schema}: {errors:#?}");
}

fn cfg(command: Command, out: &Path) -> RunConfig {
    let mut c = RunConfig::new(command);
    c.output = out.to_path_buf();
    c
}

#[test]
fn verify_writes_schema_valid_report_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = cfg(Command::Verify, tmp.path());
    c.manifold = cli::ManifoldSpec::Hopf;
    c.grid = Some([24, 24, 8]);
    cli::run(&c).unwrap();
    assert_valid(tmp.path(), "structure_report.json", "structure_report.schema.json");
    assert_valid(tmp.path(), "manifest.json", "manifest.schema.json");
}

#[test]
fn convergence_study_table_is_schema_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = cfg(Command::ConvergenceStudy, tmp.path());
    c.manifold = cli::ManifoldSpec::Hopf;
    c.resolutions = vec![[16, 16, 8], [24, 24, 8], [32, 32, 8]];
    cli::run(&c).unwrap();
    assert_valid(tmp.path(), "structure_report.json", "structure_report.schema.json");
    let csv = fs::read_to_string(tmp.path().join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn bundle_and_flow_reports_are_schema_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = cfg(Command::Bundle, tmp.path());
    c.bundle = Some(cli::bundle_preset("ext_1_0").unwrap());
    cli::run(&c).unwrap();
    assert_valid(tmp.path(), "bundle_report.json", "bundle_report.schema.json");

    let mut f = cfg(Command::Flow, tmp.path());
    f.bundle = Some(cli::bundle_preset("line_1").unwrap());
    f.initial_metric = cli::InitialMetric::Random { eps: 0.2 };
    f.flow.max_steps = 50;
    cli::run(&f).unwrap();
    assert_valid(tmp.path(), "flow_report.json", "flow_report.schema.json");
    assert_valid(tmp.path(), "flow_config.json", "flow_config.schema.json");
    let trace = fs::read_to_string(tmp.path().join("flow_trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "step,t,sup_residual,energy,min_eig_H,eig_1");
    assert_eq!(trace.lines().count(), 52);
}

#[test]
fn moduli_reports_are_schema_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = cfg(Command::Moduli, tmp.path());
    let mut fam = cli::family_preset("jacobian").unwrap();
    fam.grid = [8, 8];
    fam.param_points = 5;
    c.family = Some(fam);
    cli::run(&c).unwrap();
    assert_valid(tmp.path(), "kahler_report.json", "kahler_report.schema.json");
    assert_valid(tmp.path(), "family_config.json", "family_config.schema.json");
    let csv = fs::read_to_string(tmp.path().join("moduli_form.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "index,s1_re,s1_im,g11_re,g11_im");
}

fn payloads(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn identical_config_and_seed_give_identical_payloads() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        let mut f = cfg(Command::Flow, dir);
        f.bundle = Some(cli::bundle_preset("ext_1_0").unwrap());
        f.initial_metric = cli::InitialMetric::Random { eps: 0.3 };
        f.seed = 7;
        f.flow.max_steps = 40;
        cli::run(&f).unwrap();
    }
    assert_eq!(payloads(a.path()), payloads(b.path()));
    let m = |d: &Path| -> Value { serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap() };
    assert_eq!(m(a.path())["inputs_hash"], m(b.path())["inputs_hash"]);
}

#[test]
fn different_seed_changes_the_random_start() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (dir, seed) in [(a.path(), 1), (b.path(), 2)] {
        let mut f = cfg(Command::Flow, dir);
        f.bundle = Some(cli::bundle_preset("line_0").unwrap());
        f.initial_metric = cli::InitialMetric::Random { eps: 0.3 };
        f.seed = seed;
        f.flow.max_steps = 3;
        cli::run(&f).unwrap();
    }
    assert_ne!(payloads(a.path()), payloads(b.path()));
}

#[test]
fn malformed_configs_exit_2_with_named_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"flow": {"dt": "fast"}}"#, "flow.dt"),
        (r#"{"flow": {"stepsize": 0.1}}"#, "flow.stepsize"),
        (r#"{"grid": [4, 4, 4]}"#, "grid"),
        (r#"{"bundle": {"rank": 2, "degrees": [0], "alpha": {"kind": "zero"}}}"#, "bundle.degrees"),
        (r#"{"bundle": "nonsense"}"#, "bundle"),
        (r#"{"resolutions": [[16,16,8],[16,16,8],[24,24,8]]}"#, "resolutions"),
    ];
    let commands = ["flow", "flow", "verify", "flow", "flow", "convergence-study"];
    for ((text, field), command) in cases.iter().zip(commands) {
        let path = tmp.path().join("cfg.json");
        let out = tmp.path().join("out");
        fs::write(&path, text).unwrap();
        let ov = Overrides {
            output: Some(out.clone()),
            bundle: if command == "flow" && !text.contains("bundle") {
                Some("ext_1_0".into())
            } else {
                None
            },
            ..Overrides::default()
        };
        let code = cli::execute(command, Some(&path), &ov);
        assert_eq!(code, cli::EXIT_VALIDATION, "{text}");
        let rec: cli::ErrorRecord = serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
        assert_eq!(rec.field.as_deref(), Some(*field), "{text}: {}", rec.message);
        assert_valid(&out, "error.json", "error.schema.json");
    }
}

#[test]
fn numerical_failure_exits_3() {
    // the literal sign convention is anti-parabolic: positivity is lost
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cfg.json");
    fs::write(
        &path,
        r#"{"bundle": "line_1", "initial_metric": {"kind": "random", "eps": 0.3},
            "flow": {"sign_convention": "paper_literal", "max_steps": 20000}}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let ov = Overrides {
        output: Some(out.clone()),
        ..Overrides::default()
    };
    assert_eq!(cli::execute("flow", Some(&path), &ov), cli::EXIT_NUMERICAL);
    let rec: cli::ErrorRecord = serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(rec.kind, "numerical");
}

#[test]
fn binary_honors_flags_and_thread_cap() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let status = Proc::new(env!("CARGO_BIN_EXE_sasaki"))
        .args(["verify", "--manifold", "hopf", "--grid", "16,16,8", "--output"])
        .arg(&out)
        .env("SASAKI_THREADS", "1")
        .status()
        .unwrap();
    assert!(status.success());
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["threads"], 1);
    assert_eq!(m["config"]["grid"], serde_json::json!([16, 16, 8]));

    let bad = Proc::new(env!("CARGO_BIN_EXE_sasaki"))
        .args(["verify", "--output"])
        .arg(&out)
        .env("SASAKI_THREADS", "zero")
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(2));
    let unknown = Proc::new(env!("CARGO_BIN_EXE_sasaki"))
        .args(["frobnicate", "--output"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(unknown.code(), Some(2));
}
