//! Run configuration, staged pipeline with an on-disk cache, and reports.
//!
//! Stages run in the order zeros, rho, complex, spectrum, recover. Each
//! stage output is cached under a key hashed from the configuration
//! sections it depends on and the keys of its dependencies, so a changed
//! tolerance never reuses a stale result.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gradient_flow::{estimate_rho, incidence_table, FlowOptions, IncidenceTable, RhoEstimate, RhoOptions};
use crate::integration_bridge::{build_charts, recovery_report, verify_chain_map, RecoveryOptions, RecoveryReport};
use crate::model_manifold::{presets, CriticalPoint, ManifoldSpec, ModelManifold, TrigTerm, ZeroOptions, TWO_PI};
use crate::novikov_complex::{assemble, homology_ranks, specialize, verify_d_squared};
use crate::witten_spectral::{verify_gap, Discretization, FormField, GapOptions, SpectralError, SpectrumReport};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// The model: a named preset or an explicit spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// One of `circle_exact`, `circle_novikov`, `torus_exact`, `torus_novikov`, `constant`.
    pub preset: Option<String>,
    /// Preset arguments: `[kappa, amplitude]` for `circle_novikov`,
    /// `[kappa, scale]` for `torus_novikov`, the periods for `constant`.
    #[serde(default)]
    pub params: Vec<f64>,
    pub dim: Option<usize>,
    pub periods: Option<Vec<f64>>,
    pub metric: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ManifoldSpec, ConfigError> {
        let p = &self.params;
        let need = |k: usize| -> Result<(), ConfigError> {
            if p.len() == k {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("preset expects {k} params, got {}", p.len())))
            }
        };
        match self.preset.as_deref() {
            Some(name) => {
                if self.dim.is_some() || self.periods.is_some() || self.metric.is_some() || !self.terms.is_empty() {
                    return Err(ConfigError::Invalid("a preset cannot be combined with explicit fields".into()));
                }
                match name {
                    "circle_exact" => need(0).map(|_| presets::circle_exact()),
                    "circle_novikov" => need(2).map(|_| presets::circle_novikov(p[0], p[1])),
                    "torus_exact" => need(0).map(|_| presets::torus_exact()),
                    "torus_novikov" => {
                        if p.is_empty() {
                            Ok(presets::torus_novikov_default())
                        } else {
                            need(2).map(|_| presets::torus_novikov(p[0], p[1]))
                        }
                    }
                    "constant" => Ok(presets::constant(p.clone())),
                    other => Err(ConfigError::Invalid(format!("unknown preset {other:?}"))),
                }
            }
            None => {
                let dim = self.dim.ok_or_else(|| ConfigError::Invalid("model.dim is required".into()))?;
                let periods = self.periods.clone().ok_or_else(|| ConfigError::Invalid("model.periods is required".into()))?;
                Ok(ManifoldSpec { dim, periods, metric: self.metric.clone(), terms: self.terms.clone() })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSelection {
    pub zeros: bool,
    pub rho: bool,
    pub complex: bool,
    pub spectrum: bool,
    pub recover: bool,
}

impl Default for StageSelection {
    fn default() -> Self {
        StageSelection { zeros: true, rho: true, complex: true, spectrum: true, recover: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    /// Seeds per axis for zero finding.
    pub zero_grid: usize,
    /// Explicit action bound; overrides `action_bound_periods`.
    pub action_bound: Option<f64>,
    /// Action bound as a multiple of the largest period.
    pub action_bound_periods: f64,
    /// Points `[re, im]` at which the complex is specialized for homology.
    pub s_values: Vec<[f64; 2]>,
    pub t_grid: Vec<f64>,
    /// Small counts must match from this `t` on.
    pub count_from_t: f64,
    pub grid: usize,
    pub recover_t: Vec<f64>,
    /// Random forms for the chain-map check in the recover stage.
    pub chain_map_forms: usize,
    pub chain_map_s: f64,
    pub chain_map_tol: f64,
    pub seed: u64,
    /// Worker threads (0 for all cores).
    pub threads: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            zero_grid: 16,
            action_bound: None,
            action_bound_periods: 3.0,
            s_values: vec![[0.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]],
            t_grid: vec![8.0, 12.0, 16.0, 20.0],
            count_from_t: 12.0,
            grid: 48,
            recover_t: vec![12.0, 16.0],
            chain_map_forms: 3,
            chain_map_s: 2.0,
            chain_map_tol: 1e-3,
            seed: 7,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    pub cache: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "novikov-out".into(), cache: true }
    }
}

/// Acceptance thresholds applied to stage results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Checks {
    pub max_rho: f64,
    pub max_small_log_slope: f64,
    pub max_large_rel_dev: f64,
}

impl Default for Checks {
    fn default() -> Self {
        Checks { max_rho: 0.1, max_small_log_slope: -0.05, max_large_rel_dev: 0.3 }
    }
}

/// A run configuration, read from TOML. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub stages: StageSelection,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub zeros: ZeroOptions,
    #[serde(default)]
    pub flow: FlowOptions,
    #[serde(default)]
    pub rho: RhoOptions,
    #[serde(default)]
    pub gap: GapOptions,
    #[serde(default)]
    pub recovery: RecoveryOptions,
    #[serde(default)]
    pub checks: Checks,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    /// Sets the seed of every randomized component.
    pub fn set_seed(&mut self, seed: u64) {
        self.numerics.seed = seed;
        self.gap.eigen.seed = seed;
        self.recovery.basis.eigen.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        let spec = self.model.spec()?;
        ModelManifold::new(spec).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let nm = &self.numerics;
        if nm.t_grid.len() < 4 || nm.t_grid.windows(2).any(|w| w[1] <= w[0]) || nm.t_grid[0] <= 0.0 {
            return bad("numerics.t_grid must be positive, strictly increasing, with at least 4 points");
        }
        if nm.recover_t.is_empty() || nm.recover_t.windows(2).any(|w| w[1] <= w[0]) || nm.recover_t[0] <= 0.0 {
            return bad("numerics.recover_t must be positive and strictly increasing");
        }
        if nm.grid < 8 || nm.zero_grid < 8 {
            return bad("numerics.grid and numerics.zero_grid must be at least 8");
        }
        if nm.action_bound.is_some_and(|r| !(r > 0.0)) || !(nm.action_bound_periods > 0.0) {
            return bad("action bounds must be positive");
        }
        if !(nm.chain_map_tol > 0.0) || !(nm.chain_map_s > 0.0) {
            return bad("chain-map parameters must be positive");
        }
        let f = &self.flow;
        let positive = [
            f.capture_radius,
            f.r0,
            f.bisection_tol,
            f.jump_tol,
            f.rtol,
            f.atol,
            self.gap.threshold,
            self.gap.eigen.tol,
            self.recovery.rel_tol,
            self.recovery.zero_tol,
            self.recovery.basis.leakage_tol,
            self.recovery.basis.charts.tail_tol,
            self.rho.stabilization_tol,
            self.zeros.newton_tol,
            self.zeros.dedupe,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return bad("all tolerances must be positive");
        }
        if f.r0 >= f.capture_radius {
            return bad("flow.r0 must be below flow.capture_radius");
        }
        Ok(())
    }

    /// Hash of everything that affects results (the output section is excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        hash_json(&c)
    }
}

fn hash_json<T: Serialize>(v: &T) -> String {
    let text = serde_json::to_string(v).expect("serializable");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Zeros,
    Rho,
    Complex,
    Spectrum,
    Recover,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Zeros, Stage::Rho, Stage::Complex, Stage::Spectrum, Stage::Recover];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Zeros => "zeros",
            Stage::Rho => "rho",
            Stage::Complex => "complex",
            Stage::Spectrum => "spectrum",
            Stage::Recover => "recover",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Zeros => &[],
            Stage::Rho | Stage::Complex | Stage::Spectrum => &[Stage::Zeros],
            Stage::Recover => &[Stage::Zeros, Stage::Complex, Stage::Spectrum],
        }
    }

    fn enabled(self, sel: &StageSelection) -> bool {
        match self {
            Stage::Zeros => sel.zeros,
            Stage::Rho => sel.rho,
            Stage::Complex => sel.complex,
            Stage::Spectrum => sel.spectrum,
            Stage::Recover => sel.recover,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pass,
    /// Ran, but an acceptance check failed.
    Fail,
    /// A numerical error stopped the stage.
    Error,
    Skipped,
    /// Nothing to do: there are no critical points.
    SkippedEmpty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Machine-readable reason for anything other than `pass`.
    pub reason: Option<String>,
    pub checks: Vec<CheckResult>,
    pub result: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: Stage,
    pub seconds: f64,
    pub cached: bool,
}

/// Everything a run produced. `payload` is deterministic for a fixed
/// config; `timings` is not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub payload: ReportPayload,
    pub timings: Vec<Timing>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPayload {
    pub version: String,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
}

impl RunReport {
    pub fn stage(&self, s: Stage) -> Option<&StageRecord> {
        self.payload.stages.iter().find(|r| r.stage == s)
    }

    /// 0 when everything passed, 3 on numerical failure, 2 on a failed check.
    pub fn exit_code(&self) -> i32 {
        let st = &self.payload.stages;
        if st.iter().any(|r| r.status == StageStatus::Error) {
            3
        } else if st.iter().any(|r| r.status == StageStatus::Fail) {
            2
        } else {
            0
        }
    }

    pub fn payload_json(&self) -> String {
        serde_json::to_string_pretty(&self.payload).expect("serializable")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Run only this stage and its dependencies.
    pub target: Option<Stage>,
    pub use_cache: bool,
}

/// Cached stage output: the record plus the data dependents need.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    record: StageRecord,
    data: serde_json::Value,
}

struct Cache {
    dir: Option<PathBuf>,
}

impl Cache {
    fn path(&self, stage: Stage, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}-{}.json", stage.name(), &key[..24])))
    }

    fn load(&self, stage: Stage, key: &str) -> Option<CacheEntry> {
        let text = fs::read_to_string(self.path(stage, key)?).ok()?;
        let wrapped: (String, CacheEntry) = serde_json::from_str(&text).ok()?;
        // Full-key comparison guards against prefix collisions.
        (wrapped.0 == key).then_some(wrapped.1)
    }

    fn store(&self, stage: Stage, key: &str, entry: &CacheEntry) {
        let Some(path) = self.path(stage, key) else { return };
        if let Some(parent) = path.parent() {
            let _ = fs::create_dir_all(parent);
        }
        if let Ok(text) = serde_json::to_string(&(key, entry)) {
            let _ = fs::write(path, text);
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn from_value<T: DeserializeOwned>(v: &serde_json::Value) -> Option<T> {
    serde_json::from_value(v.clone()).ok()
}

fn check(name: &str, pass: bool, detail: String) -> CheckResult {
    CheckResult { name: name.to_string(), pass, detail }
}

fn finish(stage: Stage, checks: Vec<CheckResult>, result: serde_json::Value) -> StageRecord {
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    let (status, reason) = if failed.is_empty() {
        (StageStatus::Pass, None)
    } else {
        (StageStatus::Fail, Some(format!("check-failed:{}", failed.join(","))))
    };
    StageRecord { stage, status, reason, checks, result }
}

fn numeric_error(stage: Stage, code: &str, err: impl std::fmt::Display) -> StageRecord {
    StageRecord {
        stage,
        status: StageStatus::Error,
        reason: Some(format!("numeric:{code}")),
        checks: vec![],
        result: serde_json::json!({ "error": err.to_string() }),
    }
}

fn action_bound(cfg: &RunConfig, m: &ModelManifold, points: &[CriticalPoint]) -> f64 {
    if let Some(r) = cfg.numerics.action_bound {
        return r;
    }
    let period = m.periods().iter().map(|k| TWO_PI * k.abs()).fold(0.0, f64::max);
    if period > 0.0 {
        cfg.numerics.action_bound_periods * period
    } else {
        let hs = points.iter().map(|c| c.h_value);
        let range = hs.clone().fold(f64::NEG_INFINITY, f64::max) - hs.fold(f64::INFINITY, f64::min);
        range.max(0.0) + 1.0
    }
}

struct Context {
    m: ModelManifold,
    points: Option<Vec<CriticalPoint>>,
    table: Option<IncidenceTable>,
}

/// Executes the enabled stages in dependency order.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> RunReport {
    let spec = cfg.model.spec().expect("validated config");
    let m = ModelManifold::new(spec).expect("validated config");
    let cache = Cache { dir: opts.use_cache.then(|| opts.out.join("cache")) };
    let wanted: Vec<Stage> = match opts.target {
        Some(t) => {
            let mut v = t.deps().to_vec();
            v.push(t);
            v
        }
        None => Stage::ALL.iter().copied().filter(|s| s.enabled(&cfg.stages)).collect(),
    };
    let mut ctx = Context { m, points: None, table: None };
    let mut keys: BTreeMap<Stage, String> = BTreeMap::new();
    let mut records: Vec<StageRecord> = Vec::new();
    let mut timings = Vec::new();
    for stage in Stage::ALL {
        if !wanted.contains(&stage) {
            records.push(StageRecord {
                stage,
                status: StageStatus::Skipped,
                reason: Some("not-selected".into()),
                checks: vec![],
                result: serde_json::Value::Null,
            });
            continue;
        }
        let failed_dep = stage.deps().iter().find(|d| {
            records.iter().find(|r| r.stage == **d).is_none_or(|r| matches!(r.status, StageStatus::Error | StageStatus::Skipped))
        });
        if let Some(d) = failed_dep {
            records.push(StageRecord {
                stage,
                status: StageStatus::Skipped,
                reason: Some(format!("dependency-unavailable:{}", d.name())),
                checks: vec![],
                result: serde_json::Value::Null,
            });
            continue;
        }
        let key = stage_key(cfg, stage, &keys);
        keys.insert(stage, key.clone());
        let start = Instant::now();
        let (entry, cached) = match cache.load(stage, &key) {
            Some(e) => (e, true),
            None => {
                let e = run_stage(cfg, stage, &ctx);
                if e.record.status != StageStatus::Error {
                    cache.store(stage, &key, &e);
                }
                (e, false)
            }
        };
        match stage {
            Stage::Zeros => ctx.points = from_value(&entry.data),
            Stage::Complex => ctx.table = from_value(&entry.data),
            _ => {}
        }
        timings.push(Timing { stage, seconds: start.elapsed().as_secs_f64(), cached });
        records.push(entry.record);
    }
    RunReport {
        payload: ReportPayload { version: env!("CARGO_PKG_VERSION").to_string(), config_hash: cfg.hash(), stages: records },
        timings,
    }
}

fn stage_key(cfg: &RunConfig, stage: Stage, keys: &BTreeMap<Stage, String>) -> String {
    let deps: Vec<&String> = stage.deps().iter().filter_map(|d| keys.get(d)).collect();
    let nm = &cfg.numerics;
    let own = match stage {
        Stage::Zeros => serde_json::json!([cfg.model, nm.zero_grid, cfg.zeros]),
        Stage::Rho => serde_json::json!([cfg.rho, cfg.flow, cfg.checks.max_rho]),
        Stage::Complex => serde_json::json!([cfg.flow, nm.action_bound, nm.action_bound_periods, nm.s_values]),
        Stage::Spectrum => serde_json::json!([cfg.gap, nm.t_grid, nm.grid, nm.count_from_t, cfg.checks]),
        Stage::Recover => serde_json::json!([
            cfg.recovery,
            nm.recover_t,
            nm.grid,
            nm.chain_map_forms,
            nm.chain_map_s,
            nm.chain_map_tol,
            nm.seed
        ]),
    };
    hash_json(&(env!("CARGO_PKG_VERSION"), stage.name(), own, deps))
}

fn run_stage(cfg: &RunConfig, stage: Stage, ctx: &Context) -> CacheEntry {
    let none = serde_json::Value::Null;
    let m = &ctx.m;
    let points = ctx.points.as_deref().unwrap_or(&[]);
    match stage {
        Stage::Zeros => match m.find_zeros(cfg.numerics.zero_grid, &cfg.zeros) {
            Ok(z) => {
                let mut counts = vec![0usize; m.dim() + 1];
                z.iter().for_each(|c| counts[c.index] += 1);
                let result = serde_json::json!({ "count": z.len(), "counts_by_index": counts, "points": z });
                CacheEntry { record: finish(stage, vec![], result), data: to_value(&z) }
            }
            Err(e) => CacheEntry { record: numeric_error(stage, "zeros", e), data: none },
        },
        Stage::Rho => {
            let mut estimates: Vec<RhoEstimate> = Vec::new();
            for c in points.iter().filter(|c| c.index > 0) {
                match estimate_rho(m, points, c, &cfg.rho, &cfg.flow) {
                    Ok(r) => estimates.push(r),
                    Err(e) => return CacheEntry { record: numeric_error(stage, "rho", e), data: none },
                }
            }
            let rho_hat = estimates.iter().map(|r| r.rho_hat).fold(0.0, f64::max);
            let mut checks = vec![];
            if m.dim() <= 2 {
                checks.push(check(
                    "rho_zero_in_low_dimension",
                    rho_hat <= cfg.checks.max_rho,
                    format!("max rho_hat = {rho_hat} (limit {})", cfg.checks.max_rho),
                ));
            }
            let result = serde_json::json!({ "rho_hat": rho_hat, "estimates": estimates });
            CacheEntry { record: finish(stage, checks, result), data: none }
        }
        Stage::Complex => {
            let r = action_bound(cfg, m, points);
            let table = match incidence_table(m, points, r, &cfg.flow) {
                Ok(t) => t,
                Err(e) => return CacheEntry { record: numeric_error(stage, "trajectories", e), data: none },
            };
            let complex = match assemble(&table, m, points) {
                Ok(c) => c,
                Err(e) => return CacheEntry { record: numeric_error(stage, "assemble", e), data: none },
            };
            let mut checks = vec![check("table_stabilized", table.stabilized, format!("{} directions", table.n_directions))];
            let dsq = verify_d_squared(&complex);
            checks.push(check(
                "d_squared_zero",
                dsq.is_ok(),
                match &dsq {
                    Ok(d) => format!("{} compositions checked", d.compositions_checked),
                    Err(e) => e.to_string(),
                },
            ));
            let homology: Vec<serde_json::Value> = cfg
                .numerics
                .s_values
                .iter()
                .map(|s| {
                    let s = Complex64::new(s[0], s[1]);
                    let h = homology_ranks(&specialize(&complex, s, None));
                    serde_json::json!({ "s": [s.re, s.im], "betti": h.betti, "ranks": h.ranks, "warnings": h.warnings })
                })
                .collect();
            let result = serde_json::json!({
                "action_bound": r,
                "dims": (0..=m.dim()).map(|q| complex.dim(q)).collect::<Vec<_>>(),
                "entries": table.entries,
                "complex": complex.to_text(),
                "homology": homology,
            });
            CacheEntry { record: finish(stage, checks, result), data: to_value(&table) }
        }
        Stage::Spectrum => {
            let mut reports: Vec<SpectrumReport> = Vec::new();
            let mut checks = Vec::new();
            for q in 0..=m.dim() {
                let rep = match verify_gap(m, points, q, &cfg.numerics.t_grid, cfg.numerics.grid, &cfg.gap) {
                    Ok(r) => r,
                    Err(SpectralError::CountMismatch { report, .. }) => *report,
                    Err(e) => return CacheEntry { record: numeric_error(stage, "spectrum", e), data: none },
                };
                checks.extend(spectrum_checks(cfg, &rep, !points.is_empty()));
                reports.push(rep);
            }
            let result = serde_json::json!({
                "small_counts": reports.iter().map(|r| r.expected_small).collect::<Vec<_>>(),
                "reports": reports,
            });
            CacheEntry { record: finish(stage, checks, result), data: none }
        }
        Stage::Recover => {
            let Some(table) = &ctx.table else {
                return CacheEntry { record: numeric_error(stage, "missing-table", "no incidence table"), data: none };
            };
            if points.is_empty() {
                return CacheEntry {
                    record: StageRecord {
                        stage,
                        status: StageStatus::SkippedEmpty,
                        reason: Some("no-critical-points".into()),
                        checks: vec![],
                        result: serde_json::Value::Null,
                    },
                    data: none,
                };
            }
            recover_stage(cfg, m, points, table)
        }
    }
}

fn spectrum_checks(cfg: &RunConfig, rep: &SpectrumReport, has_zeros: bool) -> Vec<CheckResult> {
    let q = rep.q;
    let mut out = Vec::new();
    let bad: Vec<f64> = rep
        .entries
        .iter()
        .filter(|e| e.t >= cfg.numerics.count_from_t && e.small_count != rep.expected_small)
        .map(|e| e.t)
        .collect();
    out.push(check(
        &format!("small_count_q{q}"),
        bad.is_empty(),
        format!("expected {} below {}; mismatches at t = {bad:?}", rep.expected_small, rep.threshold),
    ));
    if rep.expected_small > 0 {
        let (pass, detail) = match rep.small_log_slope {
            Some(s) => (s < cfg.checks.max_small_log_slope, format!("log slope {s:.4}")),
            None => (rep.small_below_floor, "small eigenvalues at the round-off floor".to_string()),
        };
        out.push(check(&format!("small_decay_q{q}"), pass, detail));
    }
    // Without zeros the spectrum grows like t^2 and no linear law is claimed.
    if has_zeros {
        out.push(check(
            &format!("large_linear_q{q}"),
            rep.large_max_rel_dev < cfg.checks.max_large_rel_dev,
            format!("slope {:.4}, max relative deviation {:.4}", rep.large_slope, rep.large_max_rel_dev),
        ));
    }
    if let Some(mm) = &rep.minimax {
        out.push(check(&format!("minimax_q{q}"), mm.pass, format!("a = {:.4e}, b = {:.4e}", mm.a, mm.b)));
    }
    out
}

fn recover_stage(cfg: &RunConfig, m: &ModelManifold, points: &[CriticalPoint], table: &IncidenceTable) -> CacheEntry {
    let none = serde_json::Value::Null;
    let stage = Stage::Recover;
    let complex = match assemble(table, m, points) {
        Ok(c) => c,
        Err(e) => return CacheEntry { record: numeric_error(stage, "assemble", e), data: none },
    };
    let nm = &cfg.numerics;
    let report: RecoveryReport = match recovery_report(m, points, table, &complex, &nm.recover_t, nm.grid, &cfg.recovery) {
        Ok(r) => r,
        Err(e) => return CacheEntry { record: numeric_error(stage, "recovery", e), data: none },
    };
    let mut checks = vec![
        check(
            "recovered_entries_match",
            report.all_within,
            format!(
                "max relative error {:.3e}",
                report.entries.iter().filter(|e| e.relative).map(|e| e.error).fold(0.0, f64::max)
            ),
        ),
        check("integer_counts_recovered", report.all_fits_match, format!("{} entries fitted", report.fits.len())),
    ];
    let mut chain = Vec::new();
    if nm.chain_map_forms > 0 && m.dim() >= 1 {
        let charts = build_charts(m, points, &cfg.recovery.basis.charts);
        let disc = Discretization::new(m, nm.grid).map(Arc::new);
        match (charts, disc) {
            (Ok(charts), Ok(disc)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(nm.seed);
                let mut worst = 0.0f64;
                for i in 0..nm.chain_map_forms {
                    let q = i % m.dim();
                    let a = FormField::random_band_limited(m.dim(), q, nm.grid, 4, &mut rng);
                    let s = Complex64::new(nm.chain_map_s, 0.0);
                    match verify_chain_map(&a, s, m, points, &charts, table, &disc, &cfg.recovery.basis.charts, f64::INFINITY) {
                        Ok(r) => {
                            worst = worst.max(r.max_residual);
                            chain.push(r.max_residual);
                        }
                        Err(e) => return CacheEntry { record: numeric_error(stage, "chain-map", e), data: none },
                    }
                }
                checks.push(check(
                    "chain_map",
                    worst < nm.chain_map_tol,
                    format!("max relative residual {worst:.3e} over {} forms", nm.chain_map_forms),
                ));
            }
            (Err(e), _) => return CacheEntry { record: numeric_error(stage, "charts", e), data: none },
            (_, Err(e)) => return CacheEntry { record: numeric_error(stage, "grid", e), data: none },
        }
    }
    let result = serde_json::json!({ "recovery": report, "chain_map_residuals": chain });
    CacheEntry { record: finish(stage, checks, result), data: none }
}

/// A delimiter-separated table.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl PlotTable {
    pub fn to_tsv(&self) -> String {
        let mut out = self.header.join("\t");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// Eigenvalue-vs-t, residual-vs-t, integral-vs-exhaustion and recovery tables.
pub fn emit_plots_data(report: &RunReport) -> Vec<PlotTable> {
    let mut tables = Vec::new();
    let hdr = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    if let Some(reports) = report
        .stage(Stage::Spectrum)
        .and_then(|r| r.result.get("reports"))
        .and_then(from_value::<Vec<SpectrumReport>>)
    {
        let mut lambda = Vec::new();
        let mut resid = Vec::new();
        for rep in &reports {
            for e in &rep.entries {
                for (i, (l, r)) in e.eigenvalues.iter().zip(&e.residuals).enumerate() {
                    lambda.push((e.q, e.t, i, *l));
                    resid.push((e.q, e.t, i, *r));
                }
            }
        }
        let sort = |v: &mut Vec<(usize, f64, usize, f64)>| {
            v.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
        };
        sort(&mut lambda);
        sort(&mut resid);
        let rows = |v: &[(usize, f64, usize, f64)]| {
            v.iter().map(|(q, t, i, x)| vec![format!("{t}"), q.to_string(), i.to_string(), format!("{x:.12e}")]).collect()
        };
        tables.push(PlotTable { name: "spectrum".into(), header: hdr(&["t", "q", "idx", "lambda"]), rows: rows(&lambda) });
        tables.push(PlotTable { name: "residuals".into(), header: hdr(&["t", "q", "idx", "residual"]), rows: rows(&resid) });
    }
    if let Some(estimates) =
        report.stage(Stage::Rho).and_then(|r| r.result.get("estimates")).and_then(from_value::<Vec<RhoEstimate>>)
    {
        let mut rows = Vec::new();
        for e in &estimates {
            for (ai, a) in e.a_grid.iter().enumerate() {
                for (ri, r) in e.radius_grid.iter().enumerate() {
                    rows.push(vec![e.x.to_string(), format!("{a}"), format!("{r}"), format!("{:.12e}", e.integrals[ai][ri])]);
                }
            }
        }
        tables.push(PlotTable { name: "exhaustion".into(), header: hdr(&["x", "a", "radius", "integral"]), rows });
    }
    if let Some(rec) =
        report.stage(Stage::Recover).and_then(|r| r.result.get("recovery")).and_then(from_value::<RecoveryReport>)
    {
        let mut entries = rec.entries.clone();
        entries.sort_by(|a, b| a.q.cmp(&b.q).then(a.t.total_cmp(&b.t)).then(a.x.cmp(&b.x)).then(a.y.cmp(&b.y)));
        let rows = entries
            .iter()
            .map(|e| {
                vec![
                    e.q.to_string(),
                    format!("{}", e.t),
                    e.x.to_string(),
                    e.y.to_string(),
                    format!("{:.12e}", e.spectral.re),
                    format!("{:.12e}", e.trajectory.re),
                    format!("{:.6e}", e.error),
                ]
            })
            .collect();
        tables.push(PlotTable {
            name: "recovery".into(),
            header: hdr(&["q", "t", "x", "y", "spectral", "trajectory", "error"]),
            rows,
        });
    }
    tables
}

/// Writes `report.json` and one `.tsv` per plot table under `dir`.
pub fn write_outputs(report: &RunReport, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir.join("plots"))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report).expect("serializable"))?;
    for t in emit_plots_data(report) {
        fs::write(dir.join("plots").join(format!("{}.tsv", t.name)), t.to_tsv())?;
    }
    Ok(())
}

/// One line per stage and check.
pub fn summary(report: &RunReport) -> String {
    let mut out = format!("config {}\n", &report.payload.config_hash[..16]);
    for r in &report.payload.stages {
        let t = report.timings.iter().find(|t| t.stage == r.stage);
        let timing = t.map(|t| format!(" ({:.2}s{})", t.seconds, if t.cached { ", cached" } else { "" })).unwrap_or_default();
        out.push_str(&format!(
            "{:<9} {:?}{}{}\n",
            r.stage.name(),
            r.status,
            r.reason.as_ref().map(|s| format!(" [{s}]")).unwrap_or_default(),
            timing
        ));
        for c in &r.checks {
            out.push_str(&format!("    {} {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[model]\npreset = \"circle_exact\"\n[numerics]\ngird = 32\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_toml("[model]\npreset = \"circle_exact\"\n").unwrap();
        assert_eq!(cfg.numerics, Numerics::default());
        assert_eq!(cfg.model.spec().unwrap(), presets::circle_exact());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "[model]\npreset = \"circle_exact\"\n[numerics]\nt_grid = [12.0, 8.0, 16.0, 20.0]\n",
            "[model]\npreset = \"circle_exact\"\n[flow]\nrtol = 0.0\n",
            "[model]\npreset = \"nope\"\n",
            "[model]\ndim = 2\n",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(ConfigError::Invalid(_))), "{text}");
        }
    }

    #[test]
    fn explicit_spec_matches_preset() {
        let text = "[model]\ndim = 1\nperiods = [0.0]\n[[model.terms]]\nfreq = [1]\namplitude = 1.0\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        let a = ModelManifold::new(cfg.model.spec().unwrap()).unwrap();
        let b = ModelManifold::new(presets::circle_exact()).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn hash_ignores_output_but_not_numerics() {
        let a = RunConfig::from_toml("[model]\npreset = \"circle_exact\"\n").unwrap();
        let mut b = a.clone();
        b.output.dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.set_seed(99);
        assert_ne!(a.hash(), b.hash());
    }
}
