//! Batch front end: one JSON run configuration (plus flag overrides) per
//! invocation, one command per run, reports written to an output directory.
//!
//! Exit status: 0 on success, 2 when the configuration does not validate,
//! 3 when the numerics fail (positivity loss, divergence), 1 for anything
//! else (typically an unwritable output directory). Every failure writes
//! `error.json` next to where the reports would have gone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bundle::{
    curvature, degree, einstein_constant, einstein_constant_topological, he_residual_of, stability_oracle, AlphaSpec,
    ExtensionClass, HeResidual, HermitianMetric, HolomorphicStructure, SasakianBundle, ShapeDescriptor,
};
use crate::error::{Error, Result};
use crate::family::{
    build_family, check_kahler, chern_character_leading_check, ddbar_potential, jacobian_constant, moduli_form,
    write_moduli_csv, ChernCharacterReport, FamilyConfig, FamilyInvariants, FamilyKind, KahlerReport, PotentialFit,
};
use crate::flow::{blockwise_constants, run_flow, write_trace_csv, FlowConfig};
use crate::grid::{make_grid, BaseManifold, GridHandle, GridSpec};
use crate::structure::{boothby_wang, verify_sasakian_seeded, StructureReport};
use crate::Complex64;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Stable-extension parameter used by the `ext_a_b` presets.
pub const PRESET_EXTENSION_EPSILON: f64 = 0.84;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Verify,
    Bundle,
    Flow,
    Moduli,
    ConvergenceStudy,
}

impl Command {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.into()))
            .map_err(|_| Error::config("command", format!("unknown command `{s}`")))
    }
}

fn one() -> u32 {
    1
}
fn square_tau() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifoldSpec {
    /// Unit circle bundle of `O(1)` over the sphere of radius 1/2.
    Hopf,
    RoundSphere {
        #[serde(default = "one")]
        k_l: u32,
    },
    FlatTorus {
        #[serde(default = "square_tau")]
        tau: [f64; 2],
        #[serde(default = "one")]
        k_l: u32,
    },
}

impl Default for ManifoldSpec {
    fn default() -> Self {
        ManifoldSpec::FlatTorus { tau: square_tau(), k_l: 1 }
    }
}

impl ManifoldSpec {
    pub fn base(&self) -> BaseManifold {
        match *self {
            ManifoldSpec::Hopf => BaseManifold::hopf(),
            ManifoldSpec::RoundSphere { k_l } => BaseManifold::round_sphere(k_l),
            ManifoldSpec::FlatTorus { tau, k_l } => BaseManifold::flat_torus(Complex64::new(tau[0], tau[1]), k_l),
        }
    }

    pub fn grid_spec(&self, res: [usize; 3]) -> GridSpec {
        match self {
            ManifoldSpec::FlatTorus { .. } => GridSpec::torus(res[0], res[1], res[2]),
            _ => GridSpec::sphere(res[0], res[1], res[2]),
        }
    }
}

/// Starting metric of a flow run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialMetric {
    #[default]
    Reference,
    /// Seeded random perturbation of size `eps` of the reference metric.
    Random { eps: f64 },
}

fn default_output() -> PathBuf {
    PathBuf::from("sasaki_out")
}
fn default_samples() -> usize {
    4
}
fn default_potential_degree() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub manifold: ManifoldSpec,
    /// `[nx, ny, ntheta]`; defaults to `[16, 16, 8]` for bundle work and
    /// `[32, 32, 8]` for structure checks.
    #[serde(default)]
    pub grid: Option<[usize; 3]>,
    #[serde(default)]
    pub fd_order: Option<usize>,
    #[serde(default)]
    pub bundle: Option<ShapeDescriptor>,
    #[serde(default)]
    pub family: Option<FamilyConfig>,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub initial_metric: InitialMetric,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Random vector pairs per grid point in the structure checks.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Refining list of `[nx, ny, ntheta]` for `convergence-study`.
    #[serde(default)]
    pub resolutions: Vec<[usize; 3]>,
    /// Polynomial degree of the ∂∂̄-potential fit in `moduli`.
    #[serde(default = "default_potential_degree")]
    pub potential_degree: usize,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            manifold: ManifoldSpec::default(),
            grid: None,
            fd_order: None,
            bundle: None,
            family: None,
            flow: FlowConfig::default(),
            initial_metric: InitialMetric::default(),
            output: default_output(),
            seed: 0,
            samples: default_samples(),
            resolutions: Vec::new(),
            potential_degree: default_potential_degree(),
        }
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.grid.unwrap_or(match self.command {
            Command::Bundle | Command::Flow => [16, 16, 8],
            _ => [32, 32, 8],
        })
    }

    fn spec_at(&self, res: [usize; 3]) -> GridSpec {
        let s = self.manifold.grid_spec(res);
        match self.fd_order {
            Some(o) => s.with_fd_order(o),
            None => s,
        }
    }

    /// SHA-256 of the canonical JSON of everything except the output path.
    pub fn inputs_hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every referenced sub-configuration; cheap, runs before any
    /// computation.
    pub fn validate(&self) -> Result<()> {
        let base = self.manifold.base();
        base.validate().map_err(|e| Error::config("manifold", e.to_string()))?;
        base.check_integral().map_err(|e| Error::config("manifold", e.to_string()))?;
        self.spec_at(self.resolution())
            .validate()
            .map_err(|e| Error::config("grid", e.to_string()))?;
        if self.samples == 0 {
            return Err(Error::config("samples", "need at least one sample pair"));
        }
        match self.command {
            Command::Verify => Ok(()),
            Command::Bundle | Command::Flow => {
                let shape = self
                    .bundle
                    .as_ref()
                    .ok_or_else(|| Error::config("bundle", "this command needs a bundle descriptor"))?;
                shape.validate().map_err(prefixed("bundle"))?;
                if !base.is_torus() {
                    return Err(Error::config("manifold", "bundle computations need the flat torus base"));
                }
                if let InitialMetric::Random { eps } = self.initial_metric {
                    if !(eps.is_finite() && eps >= 0.0 && eps < 1.0) {
                        return Err(Error::config("initial_metric.eps", "must lie in [0, 1)"));
                    }
                }
                if self.command == Command::Flow {
                    let (bundle, _) = self.bundle_data()?;
                    self.flow.resolve(&bundle).map_err(prefixed("flow"))?;
                }
                Ok(())
            }
            Command::Moduli => {
                let fam = self
                    .family
                    .as_ref()
                    .ok_or_else(|| Error::config("family", "moduli needs a family configuration"))?;
                fam.validate().map_err(prefixed("family"))?;
                let base = BaseManifold::flat_torus(Complex64::new(fam.tau[0], fam.tau[1]), fam.k_l);
                base.validate().map_err(|e| Error::config("family.tau", e.to_string()))?;
                GridSpec::torus(fam.grid[0], fam.grid[1], fam.ntheta)
                    .validate()
                    .map_err(|e| Error::config("family.grid", e.to_string()))?;
                if self.potential_degree < 2 {
                    return Err(Error::config("potential_degree", "must be at least 2"));
                }
                Ok(())
            }
            Command::ConvergenceStudy => check_refining(&self.resolutions).and_then(|_| {
                for r in &self.resolutions {
                    self.spec_at(*r)
                        .validate()
                        .map_err(|e| Error::config("resolutions", e.to_string()))?;
                }
                Ok(())
            }),
        }
    }

    fn grid(&self) -> Result<GridHandle> {
        make_grid(self.manifold.base(), self.spec_at(self.resolution()))
    }

    fn bundle_data(&self) -> Result<(SasakianBundle, HolomorphicStructure)> {
        let shape = self.bundle.as_ref().ok_or_else(|| Error::config("bundle", "missing"))?;
        let bundle = SasakianBundle::new(&self.grid()?, &shape.degrees).map_err(prefixed("bundle"))?;
        let d = HolomorphicStructure::from_descriptor(&bundle, &shape.alpha).map_err(prefixed("bundle.alpha"))?;
        Ok((bundle, d))
    }

    fn initial(&self, bundle: &SasakianBundle) -> Result<HermitianMetric> {
        match self.initial_metric {
            InitialMetric::Reference => Ok(bundle.reference_metric()),
            InitialMetric::Random { eps } => HermitianMetric::random(bundle, self.seed, eps),
        }
    }
}

/// Re-labels a configuration error with the enclosing section.
fn prefixed(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{section}.{field}"),
            reason,
        },
        Error::InvalidGrid(m) | Error::InvalidBase(m) | Error::Unsupported(m) => Error::config(section, m),
        e => e,
    }
}

fn check_refining(res: &[[usize; 3]]) -> Result<()> {
    if res.len() < 3 {
        return Err(Error::config("resolutions", format!("need at least 3 resolutions, got {}", res.len())));
    }
    for w in res.windows(2) {
        if !(w[1][0] > w[0][0] && w[1][1] > w[0][1] && w[1][2] >= w[0][2]) {
            return Err(Error::config(
                "resolutions",
                format!("{:?} does not refine {:?}", w[1], w[0]),
            ));
        }
    }
    Ok(())
}

/// Flag overrides, applied on top of the configuration file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// `hopf`, `sphere` or `torus`.
    pub manifold: Option<String>,
    pub k_l: Option<u32>,
    pub tau: Option<[f64; 2]>,
    pub grid: Option<String>,
    pub fd_order: Option<usize>,
    /// Preset name (`line_k`, `split_a_b`, `ext_a_b`) or a JSON file.
    pub bundle: Option<String>,
    /// Preset name (`jacobian`, `extension`, `gauged_pair`, `constant`) or a JSON file.
    pub family: Option<String>,
    /// Number or `auto`.
    pub dt: Option<String>,
    pub max_steps: Option<usize>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub output: Option<PathBuf>,
    /// `nx,ny,nt;nx,ny,nt;...`
    pub resolutions: Option<String>,
    /// `reference` or `random:<eps>`.
    pub initial_metric: Option<String>,
    pub potential_degree: Option<usize>,
}

fn parse_triple(s: &str, field: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::config(field, format!("`{s}`: {e}")))?;
    v.try_into()
        .map_err(|v: Vec<usize>| Error::config(field, format!("expected 3 comma-separated sizes, got {}", v.len())))
}

/// Expands a bundle preset name into a shape descriptor.
pub fn bundle_preset(name: &str) -> Result<ShapeDescriptor> {
    let bad = || Error::config("bundle", format!("unknown bundle preset `{name}`"));
    let parts: Vec<&str> = name.split('_').collect();
    let ints = |xs: &[&str]| -> Result<Vec<i64>> {
        xs.iter().map(|x| x.parse::<i64>().map_err(|_| bad())).collect()
    };
    let shape = |degrees: Vec<i64>, alpha| ShapeDescriptor {
        rank: degrees.len(),
        degrees,
        alpha,
    };
    match parts.as_slice() {
        ["line", k] => Ok(shape(ints(&[k])?, AlphaSpec::Zero)),
        ["split", rest @ ..] if rest.len() >= 2 => Ok(shape(ints(rest)?, AlphaSpec::Zero)),
        // extension of O(a) by O(b): 0 → O(b) → E → O(a) → 0
        ["ext", a, b] => {
            let d = ints(&[b, a])?;
            Ok(shape(
                d,
                AlphaSpec::ExtensionClass(ExtensionClass {
                    epsilon: PRESET_EXTENSION_EPSILON,
                }),
            ))
        }
        _ => Err(bad()),
    }
}

/// Expands a family preset name into a family configuration.
pub fn family_preset(name: &str) -> Result<FamilyConfig> {
    let kind = match name {
        "jacobian" => FamilyKind::Jacobian,
        "extension" => FamilyKind::Extension {
            epsilon: PRESET_EXTENSION_EPSILON,
            coupling: 1.0,
        },
        "gauged_pair" => FamilyKind::GaugedPair {
            a: 0.3,
            b: 0.2,
            kappa: 0.4,
        },
        "constant" => FamilyKind::Constant { value: [0.3, -0.2] },
        _ => return Err(Error::config("family", format!("unknown family preset `{name}`"))),
    };
    let mut cfg = FamilyConfig::new(kind);
    if name == "gauged_pair" {
        // closed-form metrics: fine grids cost nothing
        cfg.param_points = 9;
        cfg.param_spacing = 0.1;
        cfg.grid = [8, 8];
    }
    Ok(cfg)
}

fn read_json_file(path: &Path, field: &str) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(field, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(field, format!("{}: {e}", path.display())))
}

fn obj(v: &mut Value) -> &mut serde_json::Map<String, Value> {
    if !v.is_object() {
        *v = json!({});
    }
    v.as_object_mut().expect("object")
}

/// Replaces preset names by their full JSON expansion.
fn expand_presets(v: &mut Value) -> Result<()> {
    let o = obj(v);
    if let Some(Value::String(name)) = o.get("bundle").cloned() {
        o.insert("bundle".into(), serde_json::to_value(bundle_preset(&name)?)?);
    }
    if let Some(Value::String(name)) = o.get("family").cloned() {
        o.insert("family".into(), serde_json::to_value(family_preset(&name)?)?);
    }
    if let Some(Value::String(name)) = o.get("manifold").cloned() {
        let m = match name.as_str() {
            "hopf" => json!({"kind": "hopf"}),
            "sphere" | "round_sphere" => json!({"kind": "round_sphere"}),
            "torus" | "flat_torus" => json!({"kind": "flat_torus"}),
            _ => return Err(Error::config("manifold", format!("unknown manifold `{name}`"))),
        };
        o.insert("manifold".into(), m);
    }
    Ok(())
}

fn apply_overrides(v: &mut Value, ov: &Overrides) -> Result<()> {
    let o = obj(v);
    if let Some(m) = &ov.manifold {
        o.insert("manifold".into(), Value::String(m.clone()));
    }
    if let Some(b) = &ov.bundle {
        let val = if b.ends_with(".json") {
            read_json_file(Path::new(b), "bundle")?
        } else {
            Value::String(b.clone())
        };
        o.insert("bundle".into(), val);
    }
    if let Some(f) = &ov.family {
        let val = if f.ends_with(".json") {
            read_json_file(Path::new(f), "family")?
        } else {
            Value::String(f.clone())
        };
        o.insert("family".into(), val);
    }
    expand_presets(v)?;
    let o = obj(v);
    if ov.k_l.is_some() || ov.tau.is_some() {
        let m = o.entry("manifold").or_insert_with(|| json!({"kind": "flat_torus"}));
        let mo = obj(m);
        if let Some(k) = ov.k_l {
            mo.insert("k_l".into(), json!(k));
        }
        if let Some(t) = ov.tau {
            mo.insert("tau".into(), json!(t));
        }
    }
    if let Some(g) = &ov.grid {
        o.insert("grid".into(), json!(parse_triple(g, "grid")?));
    }
    if let Some(f) = ov.fd_order {
        o.insert("fd_order".into(), json!(f));
    }
    if let Some(r) = &ov.resolutions {
        let list: Vec<[usize; 3]> = r
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse_triple(s, "resolutions"))
            .collect::<Result<_>>()?;
        o.insert("resolutions".into(), json!(list));
    }
    if let Some(s) = ov.seed {
        o.insert("seed".into(), json!(s));
    }
    if let Some(s) = ov.samples {
        o.insert("samples".into(), json!(s));
    }
    if let Some(p) = &ov.output {
        o.insert("output".into(), json!(p));
    }
    if let Some(p) = ov.potential_degree {
        o.insert("potential_degree".into(), json!(p));
    }
    if let Some(im) = &ov.initial_metric {
        let val = match im.split_once(':') {
            None if im == "reference" => json!({"kind": "reference"}),
            Some(("random", eps)) => {
                let eps: f64 = eps
                    .parse()
                    .map_err(|_| Error::config("initial_metric", format!("bad eps in `{im}`")))?;
                json!({"kind": "random", "eps": eps})
            }
            _ => return Err(Error::config("initial_metric", format!("expected `reference` or `random:<eps>`, got `{im}`"))),
        };
        o.insert("initial_metric".into(), val);
    }
    let flow_touched = ov.dt.is_some() || ov.max_steps.is_some() || ov.tol.is_some();
    if flow_touched {
        let is_moduli = o.get("command") == Some(&json!("moduli"));
        // flow flags steer the per-parameter flows of a family run
        let target = if is_moduli {
            let fam = o
                .get_mut("family")
                .ok_or_else(|| Error::config("family", "flow flags need a family"))?;
            obj(fam).entry("flow").or_insert_with(|| json!({}))
        } else {
            o.entry("flow").or_insert_with(|| json!({}))
        };
        let fo = obj(target);
        if let Some(dt) = &ov.dt {
            let val = if dt == "auto" {
                Value::Null
            } else {
                json!(dt
                    .parse::<f64>()
                    .map_err(|_| Error::config("flow.dt", format!("expected a number or `auto`, got `{dt}`")))?)
            };
            fo.insert("dt".into(), val);
        }
        if let Some(n) = ov.max_steps {
            fo.insert("max_steps".into(), json!(n));
        }
        if let Some(t) = ov.tol {
            fo.insert("stop_sup_tol".into(), json!(t));
        }
    }
    Ok(())
}

/// Builds the run configuration from an optional file plus overrides. The
/// positional command wins over any `command` in the file.
pub fn load_config(command: Command, file: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut v = match file {
        Some(p) => read_json_file(p, "config")?,
        None => json!({}),
    };
    obj(&mut v).insert("command".into(), serde_json::to_value(command)?);
    expand_presets(&mut v)?;
    apply_overrides(&mut v, ov)?;
    from_value(v)
}

/// Typed deserialization that reports the JSON path of the first bad field.
pub fn from_value(v: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        // the path already ends in the offending key, except at top level
        let field = match (path.as_str(), inner.split('`').nth(1)) {
            (".", Some(name)) if inner.starts_with("unknown field") => name.to_string(),
            (".", _) => "config".to_string(),
            _ => path,
        };
        Error::config(field, inner)
    })
}

/// Residual-vs-resolution table with fitted orders.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceTable {
    pub resolutions: Vec<[usize; 3]>,
    pub spacing: Vec<f64>,
    /// identity → residual per resolution
    pub residuals: BTreeMap<String, Vec<f64>>,
    /// identity → least-squares slope of log residual against log spacing;
    /// `None` when fewer than two residuals sit above the round-off floor.
    pub orders: BTreeMap<String, Option<f64>>,
    pub floor: f64,
}

/// Residuals below this are treated as round-off in order fits.
pub const ORDER_FLOOR: f64 = 1e-12;

/// Slope of `log r` against `log h` over the entries above `floor`.
pub fn fit_order(h: &[f64], r: &[f64], floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = h
        .iter()
        .zip(r)
        .filter(|(_, &r)| r.is_finite() && r > floor)
        .map(|(&h, &r)| (h.ln(), r.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// The identity residuals that enter the convergence table.
pub fn identity_residuals(r: &StructureReport) -> Vec<(&'static str, f64)> {
    vec![
        ("killing", r.killing_residual),
        ("phi_identity", r.phi_identity_residual),
        ("curvature_identity", r.curvature_identity_residual),
        ("lemma_domega", r.lemma_domega_residual),
        ("contact", (r.contact_nonvanishing_min - r.contact_analytic_constant).abs()),
        ("unit_length", r.unit_length_residual),
        ("contact_dual", r.contact_dual_residual),
        ("phi_square", r.phi_square_residual),
    ]
}

pub fn convergence_study(
    manifold: &ManifoldSpec,
    resolutions: &[[usize; 3]],
    fd_order: Option<usize>,
    samples: usize,
    seed: u64,
) -> Result<(Vec<StructureReport>, ConvergenceTable)> {
    check_refining(resolutions)?;
    let mut reports = Vec::new();
    for &res in resolutions {
        let mut spec = manifold.grid_spec(res);
        if let Some(o) = fd_order {
            spec = spec.with_fd_order(o);
        }
        let s = boothby_wang(manifold.base(), spec)?;
        reports.push(verify_sasakian_seeded(&s, samples, seed));
    }
    let spacing: Vec<f64> = resolutions.iter().map(|r| 1.0 / r[0] as f64).collect();
    let mut residuals: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &reports {
        for (name, v) in identity_residuals(r) {
            residuals.entry(name.to_string()).or_default().push(v);
        }
    }
    let orders = residuals
        .iter()
        .map(|(k, v)| (k.clone(), fit_order(&spacing, v, ORDER_FLOOR)))
        .collect();
    Ok((
        reports,
        ConvergenceTable {
            resolutions: resolutions.to_vec(),
            spacing,
            residuals,
            orders,
            floor: ORDER_FLOOR,
        },
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StructureReportFile {
    pub manifold: ManifoldSpec,
    pub reports: Vec<StructureReport>,
    pub convergence: Option<ConvergenceTable>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BundleReport {
    pub rank: usize,
    pub degrees: Vec<i64>,
    /// `∫c₁∧ω` of the reference metric.
    pub degree: f64,
    pub degree_topological: f64,
    pub slope: f64,
    pub summand_slopes: Vec<f64>,
    pub lambda: f64,
    pub lambda_topological: f64,
    /// Per-summand Einstein constants (limits of a split flow).
    pub blockwise_constants: Vec<f64>,
    /// HE residual of the initial metric.
    pub he_residual: HeResidual,
    /// `stable`, `polystable`, `strictly_semistable`, `unstable` or `undecidable`.
    pub stability: String,
    pub stability_note: Option<String>,
    pub lie_reeb_residual: f64,
}

pub fn bundle_report(cfg: &RunConfig) -> Result<BundleReport> {
    let shape = cfg.bundle.as_ref().ok_or_else(|| Error::config("bundle", "missing"))?;
    let (bundle, d) = cfg.bundle_data()?;
    let h = cfg.initial(&bundle)?;
    let deg = degree(&d, &bundle.reference_metric())?;
    let r = bundle.rank();
    let (stability, note) = match stability_oracle(shape) {
        Ok(v) => (serde_json::to_value(v)?.as_str().unwrap_or_default().to_string(), None),
        Err(Error::Unsupported(m)) => ("undecidable".to_string(), Some(m)),
        Err(e) => return Err(e),
    };
    let k = curvature(&d, &h)?;
    let lambda = einstein_constant(&d, &h)?;
    Ok(BundleReport {
        rank: r,
        degrees: shape.degrees.clone(),
        degree: deg,
        degree_topological: 2.0 * std::f64::consts::PI * shape.degrees.iter().sum::<i64>() as f64,
        slope: deg / r as f64,
        summand_slopes: shape
            .degrees
            .iter()
            .map(|&k| 2.0 * std::f64::consts::PI * k as f64)
            .collect(),
        lambda,
        lambda_topological: einstein_constant_topological(&bundle)?,
        blockwise_constants: blockwise_constants(&bundle)?,
        he_residual: he_residual_of(&bundle, &k, lambda),
        stability,
        stability_note: note,
        lie_reeb_residual: d.lie_reeb_residual()?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModuliReport {
    pub family: FamilyKind,
    pub parameter_dim: usize,
    pub parameter_points: usize,
    pub kahler: KahlerReport,
    pub potential: PotentialFit,
    /// One-parameter families only.
    pub chern_character: Option<ChernCharacterReport>,
    /// Closed-form `G` of the Jacobian family and the largest deviation
    /// of the sampled form from it.
    pub jacobian_constant: Option<f64>,
    pub jacobian_deviation: Option<f64>,
    pub invariants: FamilyInvariants,
    pub max_flow_steps: usize,
    pub note: String,
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

/// What a successful run produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutcome {
    pub files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: Command,
    inputs_hash: String,
    versions: BTreeMap<&'a str, &'a str>,
    seed: u64,
    threads: usize,
    started_unix: u64,
    wall_time_s: f64,
    files: &'a [String],
    config: &'a RunConfig,
}

/// Validates, computes, writes reports plus `manifest.json`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let out = &cfg.output;
    fs::create_dir_all(out)?;
    let _ = fs::remove_file(out.join("error.json"));
    let mut files: Vec<PathBuf> = Vec::new();
    match cfg.command {
        Command::Verify => {
            let s = boothby_wang(cfg.manifold.base(), cfg.spec_at(cfg.resolution()))?;
            let report = verify_sasakian_seeded(&s, cfg.samples, cfg.seed);
            let file = StructureReportFile {
                manifold: cfg.manifold.clone(),
                reports: vec![report],
                convergence: None,
            };
            files.push(write_json(out, "structure_report.json", &file)?);
        }
        Command::ConvergenceStudy => {
            let (reports, table) =
                convergence_study(&cfg.manifold, &cfg.resolutions, cfg.fd_order, cfg.samples, cfg.seed)?;
            let file = StructureReportFile {
                manifold: cfg.manifold.clone(),
                reports,
                convergence: Some(table.clone()),
            };
            files.push(write_json(out, "structure_report.json", &file)?);
            files.push(write_convergence_csv(&table, &out.join("convergence.csv"))?);
        }
        Command::Bundle => {
            files.push(write_json(out, "bundle_report.json", &bundle_report(cfg)?)?);
        }
        Command::Flow => {
            let (bundle, d) = cfg.bundle_data()?;
            let h0 = cfg.initial(&bundle)?;
            let resolved = cfg.flow.resolve_for(&d, &h0)?;
            files.push(write_json(out, "flow_config.json", &resolved)?);
            let runr = run_flow(&d, &h0, &resolved)?;
            let trace = out.join("flow_trace.csv");
            write_trace_csv(&runr.state.history, &trace)?;
            files.push(trace);
            files.push(write_json(out, "flow_report.json", &runr.report)?);
        }
        Command::Moduli => {
            let fcfg = cfg.family.as_ref().ok_or_else(|| Error::config("family", "missing"))?;
            files.push(write_json(out, "family_config.json", fcfg)?);
            let fam = build_family(fcfg)?;
            let sample = moduli_form(&fam)?;
            let csv_path = out.join("moduli_form.csv");
            write_moduli_csv(&sample, &csv_path)?;
            files.push(csv_path);
            let kahler = check_kahler(&fam, &sample)?;
            let potential = ddbar_potential(&sample, cfg.potential_degree)?;
            let chern = if fam.params.m == 1 {
                Some(chern_character_leading_check(&fam)?)
            } else {
                None
            };
            let (jc, jd) = if fcfg.family == FamilyKind::Jacobian {
                let c = jacobian_constant(&fam);
                let dev = sample
                    .points
                    .iter()
                    .map(|p| (Complex64::new(p.g[0][0], p.g[0][1]) - c).norm())
                    .fold(0.0, f64::max);
                (Some(c), Some(dev))
            } else {
                (None, None)
            };
            let report = ModuliReport {
                family: fcfg.family.clone(),
                parameter_dim: fam.params.m,
                parameter_points: fam.params.len(),
                kahler,
                potential,
                chern_character: chern,
                jacobian_constant: jc,
                jacobian_deviation: jd,
                invariants: fam.invariants()?,
                max_flow_steps: fam.flows.iter().map(|f| f.steps).max().unwrap_or(0),
                note: sample.note.clone(),
            };
            files.push(write_json(out, "kahler_report.json", &report)?);
        }
    }
    let names: Vec<String> = files
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let manifest = Manifest {
        command: cfg.command,
        inputs_hash: cfg.inputs_hash(),
        versions: BTreeMap::from([
            ("sasaki", env!("CARGO_PKG_VERSION")),
            ("report_format", "1"),
        ]),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        started_unix,
        wall_time_s: started.elapsed().as_secs_f64(),
        files: &names,
        config: cfg,
    };
    write_json(out, "manifest.json", &manifest)?;
    Ok(RunOutcome { files: names })
}

fn write_convergence_csv(t: &ConvergenceTable, path: &Path) -> Result<PathBuf> {
    let mut w = csv::Writer::from_path(path)?;
    let names: Vec<&String> = t.residuals.keys().collect();
    let mut header = vec!["nx".to_string(), "ny".into(), "ntheta".into(), "h".into()];
    header.extend(names.iter().map(|n| n.to_string()));
    w.write_record(&header)?;
    for (i, r) in t.resolutions.iter().enumerate() {
        let mut row = vec![r[0].to_string(), r[1].to_string(), r[2].to_string(), format!("{:e}", t.spacing[i])];
        row.extend(names.iter().map(|n| format!("{:e}", t.residuals[*n][i])));
        w.write_record(&row)?;
    }
    let mut row = vec!["order".to_string(), String::new(), String::new(), String::new()];
    row.extend(names.iter().map(|n| t.orders[*n].map_or(String::new(), |o| format!("{o:.3}"))));
    w.write_record(&row)?;
    w.flush()?;
    Ok(path.to_path_buf())
}

/// Machine-readable failure record.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorRecord {
    pub exit_code: i32,
    /// `validation`, `numerical` or `io`.
    pub kind: String,
    pub field: Option<String>,
    pub message: String,
}

pub fn error_record(e: &Error) -> ErrorRecord {
    let (exit_code, kind) = if e.is_numerical() {
        (EXIT_NUMERICAL, "numerical")
    } else if matches!(e, Error::Io(_) | Error::Csv(_)) {
        (EXIT_IO, "io")
    } else {
        (EXIT_VALIDATION, "validation")
    };
    let field = match e {
        Error::Config { field, .. } => Some(field.clone()),
        _ => None,
    };
    ErrorRecord {
        exit_code,
        kind: kind.into(),
        field,
        message: e.to_string(),
    }
}

/// Output directory to use for `error.json` when the configuration itself
/// may not parse.
fn output_hint(file: Option<&Path>, ov: &Overrides) -> PathBuf {
    if let Some(o) = &ov.output {
        return o.clone();
    }
    file.and_then(|p| fs::read_to_string(p).ok())
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| v.get("output").and_then(|o| o.as_str()).map(PathBuf::from))
        .unwrap_or_else(default_output)
}

/// Reads `SASAKI_THREADS`: `None` when unset, an error when not a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("SASAKI_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::config("SASAKI_THREADS", format!("expected a positive integer, got `{s}`"))),
        },
    }
}

/// Full invocation: load, run, and on failure write `error.json`. Returns
/// the exit status.
pub fn execute(command: &str, file: Option<&Path>, ov: &Overrides) -> i32 {
    let result = Command::parse(command)
        .and_then(|c| load_config(c, file, ov))
        .and_then(|cfg| run(&cfg).map(|o| (cfg, o)));
    match result {
        Ok((cfg, outcome)) => {
            for f in &outcome.files {
                println!("{}", cfg.output.join(f).display());
            }
            EXIT_OK
        }
        Err(e) => {
            let rec = error_record(&e);
            eprintln!("error: {}", rec.message);
            let dir = output_hint(file, ov);
            if fs::create_dir_all(&dir).is_ok() {
                let _ = write_json(&dir, "error.json", &rec);
            }
            rec.exit_code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_expand() {
        let e = bundle_preset("ext_1_0").unwrap();
        assert_eq!(e.degrees, vec![0, 1]);
        assert_eq!(bundle_preset("split_0_1").unwrap().alpha, AlphaSpec::Zero);
        assert_eq!(bundle_preset("line_-2").unwrap().degrees, vec![-2]);
        assert!(bundle_preset("ext_1").is_err());
        assert!(family_preset("nope").is_err());
    }

    #[test]
    fn unknown_field_is_named() {
        let v = json!({"command": "flow", "flow": {"dtt": 0.1}});
        match from_value(v) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "flow.dtt"),
            other => panic!("{other:?}"),
        }
        let v = json!({"command": "flow", "grid": [16, "x", 8]});
        match from_value(v) {
            Err(Error::Config { field, .. }) => assert!(field.starts_with("grid"), "{field}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_refining_resolutions_rejected() {
        assert!(check_refining(&[[16, 16, 8], [32, 32, 8]]).is_err());
        assert!(check_refining(&[[16, 16, 8], [32, 32, 8], [32, 32, 8]]).is_err());
        assert!(check_refining(&[[16, 16, 8], [24, 24, 8], [32, 32, 8]]).is_ok());
    }

    #[test]
    fn order_fit_recovers_power_law() {
        let h = [0.1, 0.05, 0.025];
        let r: Vec<f64> = h.iter().map(|x: &f64| 3.0 * x.powi(4)).collect();
        assert!((fit_order(&h, &r, 1e-300).unwrap() - 4.0).abs() < 1e-12);
        assert!(fit_order(&h, &[1e-16, 1e-16, 1e-16], ORDER_FLOOR).is_none());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let mut a = RunConfig::new(Command::Verify);
        let h = a.inputs_hash();
        a.output = PathBuf::from("elsewhere");
        assert_eq!(a.inputs_hash(), h);
        a.seed = 1;
        assert_ne!(a.inputs_hash(), h);
    }
}
