//! Seeded synthetic-user experiments and their CSV artifacts.
//!
//! A run expands to one job per `(seed, engine)`. Each job walks the same
//! seeded user sequence through its engine and records one [`ResultRow`] per
//! iteration. Jobs are independent, so they run on a small worker pool and are
//! merged back in configuration order; output never depends on `jobs`.
//!
//! With `reoptimize` set, the engine state after the last user is frozen and
//! every user is optimized again from a fresh copy of that state.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::acquisition::AcquisitionParams;
use crate::baselines::{make_engine, EngineKind};
use crate::bench::{make_user, oracle_optimum, BaseFunction, SyntheticUser};
use crate::engine::{Engine, EngineConfig, Phase};
use crate::error::{Error, Result};
use crate::rng;

pub const RESULTS_FILE: &str = "results.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const FINALIZE_FILE: &str = "finalize.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const STATES_DIR: &str = "states";

pub const RESULT_HEADER: [&str; 10] = [
    "seed", "engine", "user", "iteration", "x1", "x2", "y", "regret", "best_regret", "phase",
];
pub const TIMING_HEADER: [&str; 6] = ["seed", "engine", "stage", "user", "iteration", "time_ms"];
pub const FINALIZE_HEADER: [&str; 7] = [
    "seed",
    "engine",
    "user",
    "meta_samples",
    "contributing_users",
    "train_loss",
    "time_ms",
];

/// File name for the re-optimization rows of one user.
pub fn reopt_file(user: usize) -> String {
    format!("reopt_user_{user:02}.csv")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub base: BaseFunction,
    pub n_users: usize,
    pub iterations: usize,
    pub shift_range: f64,
    pub scale_range: f64,
    pub engines: Vec<EngineKind>,
    pub seeds: Vec<u64>,
    /// Grid points per axis for the oracle optimum.
    pub oracle_resolution: usize,
    /// Standard deviation of additive observation noise. Regret always uses
    /// the noise-free value.
    pub noise_std: f64,
    /// Re-optimize every user from the frozen final engine state.
    pub reoptimize: bool,
    pub save_states: bool,
    pub engine: EngineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    build: fn() -> ExperimentConfig,
}

impl Preset {
    pub fn config(&self) -> ExperimentConfig {
        (self.build)()
    }
}

pub const PRESETS: [Preset; 4] = [
    Preset {
        name: "test1",
        summary: "Branin, 15 users x 30 iterations, shift 0.3, scale 0.2, all engines",
        build: test1,
    },
    Preset {
        name: "test2",
        summary: "McCormick, 15 users x 7 iterations, shift 0.5, scale 0.2, all engines",
        build: test2,
    },
    Preset {
        name: "test3",
        summary: "Branin, 10 users x 30 iterations, shift 0.4, scale 0.4, then re-optimization of every user",
        build: test3,
    },
    Preset {
        name: "userstudy_params",
        summary: "user-study hyperparameters (10 iterations, r0 6, alpha 5/0.2) on Branin users",
        build: userstudy_params,
    },
];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .map(Preset::config)
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

fn userstudy_params() -> ExperimentConfig {
    ExperimentConfig {
        name: "userstudy_params".into(),
        base: BaseFunction::Branin,
        n_users: 15,
        iterations: 10,
        shift_range: 0.3,
        scale_range: 0.2,
        engines: vec![EngineKind::Conbo, EngineKind::StandardBo],
        seeds: vec![0],
        oracle_resolution: 500,
        noise_std: 0.0,
        reoptimize: false,
        save_states: true,
        engine: EngineConfig::default(),
        output: None,
    }
}

fn test1() -> ExperimentConfig {
    let engine = EngineConfig {
        iterations: 30,
        acquisition: AcquisitionParams {
            alpha1: 16,
            alpha2: 0.1,
            r0: 16,
            d_r: 5,
            ..AcquisitionParams::default()
        },
        variance_threshold: 50.0,
        meta_grid_resolution: 30,
        meta_random_points: 50,
        meta_epochs: 1200,
        online_epochs: 15,
        taf_d1: 0,
        taf_d2: 0.05,
        ..EngineConfig::default()
    };
    ExperimentConfig {
        name: "test1".into(),
        n_users: 15,
        iterations: 30,
        shift_range: 0.3,
        scale_range: 0.2,
        engines: EngineKind::ALL.to_vec(),
        engine,
        ..userstudy_params()
    }
}

fn test2() -> ExperimentConfig {
    let t1 = test1();
    ExperimentConfig {
        name: "test2".into(),
        base: BaseFunction::Mccormick,
        iterations: 7,
        shift_range: 0.5,
        engine: EngineConfig {
            iterations: 7,
            acquisition: AcquisitionParams {
                alpha1: 3,
                alpha2: 0.15,
                r0: 3,
                d_r: 3,
                ..t1.engine.acquisition.clone()
            },
            variance_threshold: 10.0,
            taf_d2: 0.15,
            ..t1.engine.clone()
        },
        ..t1
    }
}

fn test3() -> ExperimentConfig {
    ExperimentConfig {
        name: "test3".into(),
        n_users: 10,
        shift_range: 0.4,
        scale_range: 0.4,
        engines: vec![EngineKind::Conbo, EngineKind::BnnNoReplay],
        reoptimize: true,
        ..test1()
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key, every
/// other value replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Parses a config document: an optional `preset` plus overrides. Without
    /// a preset the overrides apply to `userstudy_params`.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let base = match obj.remove("preset") {
            None => userstudy_params(),
            Some(Value::String(name)) => preset(&name)?,
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
        };
        let iterations_overridden = doc.get("iterations").is_some();
        let mut merged = serde_json::to_value(&base)?;
        merge(&mut merged, doc);
        // A top-level `iterations` carries over into the engine settings.
        if iterations_overridden {
            let t = merged["iterations"].clone();
            let explicit = merged["engine"]["iterations"].clone();
            if explicit != t && explicit != serde_json::to_value(base.engine.iterations)? {
                return Err(Error::Config("`iterations` and `engine.iterations` disagree".into()));
            }
            merged["engine"]["iterations"] = t;
        }
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_users == 0 || self.iterations == 0 {
            return bad("n_users and iterations must be positive");
        }
        if self.engine.iterations != self.iterations {
            return bad("engine.iterations must equal iterations");
        }
        if self.engine.dim != BaseFunction::DIM {
            return bad("benchmark users are two-dimensional; engine.dim must be 2");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.engines.is_empty() {
            return bad("engines must not be empty");
        }
        for (i, e) in self.engines.iter().enumerate() {
            if self.engines[..i].contains(e) {
                return Err(Error::Config(format!("engine `{e}` listed twice")));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::Config(format!("seed {s} listed twice")));
            }
        }
        if !(self.shift_range >= 0.0 && self.scale_range >= 0.0) {
            return bad("shift_range and scale_range must be non-negative");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if self.oracle_resolution < 100 {
            return bad("oracle_resolution must be at least 100");
        }
        self.engine.validate()
    }
}

/// The seeded user sequence shared by every engine of one seed.
pub fn user_sequence(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<SyntheticUser>> {
    (1..=cfg.n_users)
        .map(|u| make_user(cfg.base, rng::derive_seed(seed, "user", u as u64), cfg.shift_range, cfg.scale_range))
        .collect()
}

/// Engine seed for one experiment seed. All engine kinds share it, so their
/// random explorations coincide and comparisons are paired.
pub fn engine_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, "engine", 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Main,
    Reopt,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Main => "main",
            Stage::Reopt => "reopt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub engine: EngineKind,
    pub user: usize,
    pub iteration: usize,
    pub x: Vec<f64>,
    pub y: f64,
    pub regret: f64,
    pub best_regret: f64,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub seed: u64,
    pub engine: EngineKind,
    pub stage: Stage,
    pub user: usize,
    pub iteration: usize,
    pub millis: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalizeRow {
    pub seed: u64,
    pub engine: EngineKind,
    pub user: usize,
    pub meta_samples: usize,
    pub contributing_users: usize,
    pub train_loss: Option<f64>,
    pub millis: f64,
}

/// Everything one `(seed, engine)` job produced.
#[derive(Clone, Debug)]
pub struct JobOutput {
    pub seed: u64,
    pub engine: EngineKind,
    pub rows: Vec<ResultRow>,
    pub timings: Vec<TimingRow>,
    pub finalize: Vec<FinalizeRow>,
    /// Re-optimization rows, one entry per user in order.
    pub reopt: Vec<Vec<ResultRow>>,
    /// Engine state after the last user of the main sequence.
    pub state: Engine,
}

struct UserRun {
    rows: Vec<ResultRow>,
    timings: Vec<TimingRow>,
}

fn optimize_user(
    engine: &mut Engine,
    cfg: &ExperimentConfig,
    seed: u64,
    user_index: usize,
    user: &SyntheticUser,
    optimum: f64,
    stage: Stage,
) -> Result<UserRun> {
    engine.begin_user()?;
    let mut noise = rng::stream(rng::derive_seed(seed, "noise", user_index as u64));
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut timings = Vec::with_capacity(cfg.iterations);
    let mut best = f64::NEG_INFINITY;
    for iteration in 1..=cfg.iterations {
        let clock = Instant::now();
        let proposal = engine.propose()?;
        let mut elapsed = clock.elapsed();
        let truth = user.eval(&proposal.x);
        let y = if cfg.noise_std > 0.0 {
            truth + cfg.noise_std * standard_normal(&mut noise)
        } else {
            truth
        };
        let clock = Instant::now();
        engine.tell(&proposal.x, y)?;
        elapsed += clock.elapsed();
        best = best.max(truth);
        rows.push(ResultRow {
            seed,
            engine: engine.kind(),
            user: user_index,
            iteration,
            y,
            regret: optimum - truth,
            best_regret: optimum - best,
            phase: proposal.phase,
            x: proposal.x,
        });
        timings.push(TimingRow {
            seed,
            engine: engine.kind(),
            stage,
            user: user_index,
            iteration,
            millis: elapsed.as_secs_f64() * 1e3,
        });
    }
    Ok(UserRun { rows, timings })
}

fn standard_normal(r: &mut rng::StreamRng) -> f64 {
    // Box-Muller; one draw per call keeps the stream position simple.
    let u1: f64 = 1.0 - r.gen::<f64>();
    let u2: f64 = r.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Runs the whole user sequence (and re-optimization, if configured) for one
/// seed and engine kind.
pub fn run_job(cfg: &ExperimentConfig, seed: u64, kind: EngineKind) -> Result<JobOutput> {
    let users = user_sequence(cfg, seed)?;
    let optima: Vec<f64> = users.iter().map(|u| oracle_optimum(u, cfg.oracle_resolution).1).collect();
    let mut engine = make_engine(kind, &cfg.engine, engine_seed(seed))?;
    let mut out = JobOutput {
        seed,
        engine: kind,
        rows: Vec::new(),
        timings: Vec::new(),
        finalize: Vec::new(),
        reopt: Vec::new(),
        state: engine.clone(),
    };
    for (i, (user, optimum)) in users.iter().zip(&optima).enumerate() {
        let run = optimize_user(&mut engine, cfg, seed, i + 1, user, *optimum, Stage::Main)?;
        out.rows.extend(run.rows);
        out.timings.extend(run.timings);
        let clock = Instant::now();
        let report = engine.finalize_user()?;
        out.finalize.push(FinalizeRow {
            seed,
            engine: kind,
            user: i + 1,
            meta_samples: report.meta_samples,
            contributing_users: report.contributing_users,
            train_loss: report.train_loss,
            millis: clock.elapsed().as_secs_f64() * 1e3,
        });
        log::debug!("seed {seed} {kind}: user {} done", i + 1);
    }
    if cfg.reoptimize {
        for (i, (user, optimum)) in users.iter().zip(&optima).enumerate() {
            let mut frozen = engine.clone();
            let run = optimize_user(&mut frozen, cfg, seed, i + 1, user, *optimum, Stage::Reopt)?;
            out.reopt.push(run.rows);
            out.timings.extend(run.timings);
        }
    }
    out.state = engine;
    log::info!("seed {seed} {kind}: finished");
    Ok(out)
}

/// Runs every `(seed, engine)` job on up to `jobs` threads. Results come back
/// in configuration order: seeds outer, engines inner.
pub fn simulate(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<JobOutput>> {
    cfg.validate()?;
    let work: Vec<(u64, EngineKind)> = cfg
        .seeds
        .iter()
        .flat_map(|s| cfg.engines.iter().map(move |e| (*s, *e)))
        .collect();
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<JobOutput>>>> = work.iter().map(|_| Mutex::new(None)).collect();
    let workers = jobs.clamp(1, work.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(seed, kind)) = work.get(i) else {
                    break;
                };
                let result = run_job(cfg, seed, kind);
                let failed = result.is_err();
                *slots[i].lock().expect("slot lock") = Some(result);
                if failed {
                    // Stop handing out work; running jobs finish on their own.
                    next.store(work.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut outputs = Vec::with_capacity(work.len());
    for slot in slots {
        match slot.into_inner().expect("slot lock") {
            Some(r) => outputs.push(r?),
            None => continue,
        }
    }
    if outputs.len() != work.len() {
        return Err(Error::State("experiment stopped before all jobs ran".into()));
    }
    Ok(outputs)
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn write_rows(path: &Path, rows: impl Iterator<Item = ResultRow>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(RESULT_HEADER)?;
    for r in rows {
        let mut rec = vec![r.seed.to_string(), r.engine.name().to_string(), r.user.to_string(), r.iteration.to_string()];
        rec.extend(r.x.iter().map(|v| num(*v)));
        rec.extend([num(r.y), num(r.regret), num(r.best_regret), r.phase.name().to_string()]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Report(format!("{}: {other:?}", path.display())),
    }
}

/// Paths written by [`run_experiment`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub rows: usize,
    pub files: Vec<PathBuf>,
}

/// Validates the config, prepares `out`, runs all jobs and writes the CSV
/// artifacts. Nothing runs if the config is invalid or `out` is unwritable.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join(CONFIG_FILE);
    let mut resolved = cfg.clone();
    resolved.output = None;
    fs::write(&config_path, serde_json::to_string_pretty(&resolved)? + "\n").map_err(|e| Error::io(&config_path, e))?;

    let outputs = simulate(cfg, jobs)?;
    let mut files = vec![config_path];

    let results = out.join(RESULTS_FILE);
    write_rows(&results, outputs.iter().flat_map(|o| o.rows.iter().cloned()))?;
    let rows = outputs.iter().map(|o| o.rows.len()).sum();
    files.push(results);

    let timing = out.join(TIMING_FILE);
    let mut w = csv::Writer::from_path(&timing).map_err(|e| csv_io(&timing, e))?;
    w.write_record(TIMING_HEADER)?;
    for t in outputs.iter().flat_map(|o| &o.timings) {
        w.write_record([
            t.seed.to_string(),
            t.engine.name().to_string(),
            t.stage.name().to_string(),
            t.user.to_string(),
            t.iteration.to_string(),
            format!("{:.4}", t.millis),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&timing, e))?;
    files.push(timing);

    let finalize = out.join(FINALIZE_FILE);
    let mut w = csv::Writer::from_path(&finalize).map_err(|e| csv_io(&finalize, e))?;
    w.write_record(FINALIZE_HEADER)?;
    for f in outputs.iter().flat_map(|o| &o.finalize) {
        w.write_record([
            f.seed.to_string(),
            f.engine.name().to_string(),
            f.user.to_string(),
            f.meta_samples.to_string(),
            f.contributing_users.to_string(),
            f.train_loss.map(num).unwrap_or_default(),
            format!("{:.4}", f.millis),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&finalize, e))?;
    files.push(finalize);

    if cfg.reoptimize {
        for u in 0..cfg.n_users {
            let path = out.join(reopt_file(u + 1));
            write_rows(&path, outputs.iter().flat_map(|o| o.reopt[u].iter().cloned()))?;
            files.push(path);
        }
    }

    if cfg.save_states {
        let dir = out.join(STATES_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for o in &outputs {
            let path = dir.join(format!("{}_seed{}.json", o.engine.name(), o.seed));
            o.state.save_state(&path)?;
            files.push(path);
        }
    }

    Ok(RunSummary {
        out_dir: out.to_path_buf(),
        jobs: outputs.len(),
        rows,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_resolve() {
        for p in &PRESETS {
            let cfg = p.config();
            cfg.validate().unwrap();
            assert_eq!(cfg.name, p.name);
            assert_eq!(preset(p.name).unwrap(), cfg);
        }
        assert!(matches!(preset("test9"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn preset_values() {
        let t2 = preset("test2").unwrap();
        assert_eq!((t2.n_users, t2.iterations, t2.base), (15, 7, BaseFunction::Mccormick));
        assert_eq!((t2.engine.acquisition.r0, t2.engine.acquisition.d_r), (3, 3));
        assert_eq!(t2.engine.variance_threshold, 10.0);
        assert_eq!(t2.engine.taf_d2, 0.15);
        let t3 = preset("test3").unwrap();
        assert!(t3.reoptimize);
        assert_eq!((t3.n_users, t3.shift_range, t3.scale_range), (10, 0.4, 0.4));
        assert_eq!(t3.engine.meta_epochs, 1200);
    }

    #[test]
    fn overrides_merge_into_presets() {
        let cfg = ExperimentConfig::from_json(
            r#"{"preset": "test2", "n_users": 3, "seeds": [4, 5], "engine": {"meta_epochs": 10, "acquisition": {"alpha1": 4}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.n_users, 3);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.engine.meta_epochs, 10);
        assert_eq!(cfg.engine.acquisition.alpha1, 4);
        assert_eq!(cfg.engine.acquisition.alpha2, 0.15);
        assert_eq!(cfg.engine.iterations, 7);
    }

    #[test]
    fn top_level_iterations_reach_the_engine() {
        let cfg = ExperimentConfig::from_json(r#"{"preset": "test1", "iterations": 12}"#).unwrap();
        assert_eq!(cfg.engine.iterations, 12);
        let err = ExperimentConfig::from_json(r#"{"iterations": 12, "engine": {"iterations": 11}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            r#"{"preset": "nope"}"#,
            r#"{"seeds": []}"#,
            r#"{"engines": ["conbo", "conbo"]}"#,
            r#"{"engines": ["gradient_descent"]}"#,
            r#"{"unknown_field": 1}"#,
            r#"{"engine": {"bogus": 1}}"#,
            r#"{"oracle_resolution": 10}"#,
            r#"[1, 2]"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn user_sequence_ignores_engine_list() {
        let mut cfg = preset("test2").unwrap();
        let a = user_sequence(&cfg, 3).unwrap();
        cfg.engines = vec![EngineKind::Taf];
        assert_eq!(a, user_sequence(&cfg, 3).unwrap());
        assert_ne!(a, user_sequence(&cfg, 4).unwrap());
    }
}
