//! Runs CLI commands in-process and lists what they wrote. The same runs
//! are available as `sasaki verify --manifold hopf` and so on.
//!
//! cargo run --release --example cli_run [output-dir]

use sasaki::cli::{bundle_preset, run, Command, InitialMetric, ManifoldSpec, RunConfig};
use std::path::PathBuf;

fn main() -> sasaki::Result<()> {
    let root = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("sasaki_cli_run"), PathBuf::from);

    let mut verify = RunConfig::new(Command::Verify);
    verify.manifold = ManifoldSpec::Hopf;
    verify.grid = Some([24, 24, 16]);
    verify.output = root.join("verify");

    let mut flow = RunConfig::new(Command::Flow);
    flow.bundle = Some(bundle_preset("ext_1_0")?);
    flow.grid = Some([11, 11, 8]);
    flow.initial_metric = InitialMetric::Random { eps: 0.2 };
    flow.seed = 3;
    flow.flow.stop_sup_tol = 1e-7;
    flow.output = root.join("flow");

    // the JSON form of a config is what `--config` reads
    println!("{}", serde_json::to_string_pretty(&flow).expect("serializable"));

    for cfg in [verify, flow] {
        let out = run(&cfg)?;
        println!("{:?} -> {}", cfg.command, cfg.output.display());
        for f in out.files {
            println!("  {f}");
        }
    }
    Ok(())
}
