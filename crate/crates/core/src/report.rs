//! Summary tables over a results directory.
//!
//! Regret statistics aggregate over users and seeds together; cumulative
//! regret is the plain sum of per-row regrets for one seed and engine. Engine
//! pairs are compared with a one-sided sign test over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::experiment::{reopt_file, ExperimentConfig, CONFIG_FILE, RESULTS_FILE, TIMING_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// One parsed line of a results file.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub seed: u64,
    pub engine: String,
    pub user: usize,
    pub iteration: usize,
    pub y: f64,
    pub regret: f64,
    pub best_regret: f64,
    pub phase: String,
}

#[derive(Debug, Deserialize)]
struct TimingRecord {
    seed: u64,
    engine: String,
    stage: String,
    user: usize,
    #[allow(dead_code)]
    iteration: usize,
    time_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationStat {
    pub engine: String,
    pub iteration: usize,
    pub n: usize,
    pub mean_regret: f64,
    pub std_regret: f64,
    pub mean_best_regret: f64,
    pub std_best_regret: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedCumulative {
    pub engine: String,
    pub seed: u64,
    pub cumulative: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineSummary {
    pub engine: String,
    pub seeds: usize,
    pub mean_cumulative: f64,
    pub std_cumulative: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeStat {
    pub engine: String,
    pub user: usize,
    pub n: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Sign test of "`engine` has lower cumulative regret than `other`".
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub engine: String,
    pub other: String,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserCumulative {
    pub engine: String,
    pub seed: u64,
    pub user: usize,
    pub cumulative: f64,
}

/// A row whose best-so-far regret rose above the previous row's.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub file: String,
    pub seed: u64,
    pub engine: String,
    pub user: usize,
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub engines: Vec<String>,
    pub per_iteration: Vec<IterationStat>,
    pub per_seed: Vec<SeedCumulative>,
    pub summary: Vec<EngineSummary>,
    pub time_by_user: Vec<TimeStat>,
    pub comparisons: Vec<Comparison>,
    /// Per-user cumulative regret of the re-optimization phase, if any.
    pub reopt: Vec<UserCumulative>,
    pub violations: Vec<Violation>,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// One-sided sign test: `P(X ≥ wins)` for `X ~ Binomial(wins + losses, ½)`.
/// Ties are dropped before the test.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut coef = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += coef;
        }
        coef = coef * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

/// Reads a results-schema CSV file.
pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Report(format!("{}: missing column `{name}`", path.display())))
    };
    let idx = [
        col("seed")?,
        col("engine")?,
        col("user")?,
        col("iteration")?,
        col("y")?,
        col("regret")?,
        col("best_regret")?,
        col("phase")?,
    ];
    let bad = |line: u64, what: &str| Error::Report(format!("{}: line {line}: bad {what}", path.display()));
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let field = |k: usize| rec.get(idx[k]).unwrap_or("");
        out.push(ResultRecord {
            seed: field(0).parse().map_err(|_| bad(line, "seed"))?,
            engine: field(1).to_string(),
            user: field(2).parse().map_err(|_| bad(line, "user"))?,
            iteration: field(3).parse().map_err(|_| bad(line, "iteration"))?,
            y: field(4).parse().map_err(|_| bad(line, "y"))?,
            regret: field(5).parse().map_err(|_| bad(line, "regret"))?,
            best_regret: field(6).parse().map_err(|_| bad(line, "best_regret"))?,
            phase: field(7).to_string(),
        });
    }
    Ok(out)
}

fn first_seen(rows: &[ResultRecord]) -> Vec<String> {
    let mut engines: Vec<String> = Vec::new();
    for r in rows {
        if !engines.contains(&r.engine) {
            engines.push(r.engine.clone());
        }
    }
    engines
}

/// Every expected `(seed, engine, user, iteration)` must appear exactly once.
fn check_complete(file: &str, rows: &[ResultRecord], cfg: &ExperimentConfig, users: &[usize], missing: &mut Vec<String>) {
    let mut seen: BTreeMap<(u64, &str, usize, usize), usize> = BTreeMap::new();
    for r in rows {
        *seen.entry((r.seed, r.engine.as_str(), r.user, r.iteration)).or_default() += 1;
    }
    for seed in &cfg.seeds {
        for engine in &cfg.engines {
            for user in users {
                let present = (1..=cfg.iterations)
                    .filter(|t| seen.get(&(*seed, engine.name(), *user, *t)) == Some(&1))
                    .count();
                if present != cfg.iterations {
                    missing.push(format!(
                        "{file}: seed {seed} engine {} user {user} ({present}/{} iterations)",
                        engine.name(),
                        cfg.iterations
                    ));
                }
            }
        }
    }
}

fn violations(file: &str, rows: &[ResultRecord]) -> Vec<Violation> {
    let mut last: BTreeMap<(u64, &str, usize), (usize, f64)> = BTreeMap::new();
    let mut out = Vec::new();
    for r in rows {
        let key = (r.seed, r.engine.as_str(), r.user);
        if let Some((t, prev)) = last.get(&key) {
            if r.iteration > *t && r.best_regret > *prev {
                out.push(Violation {
                    file: file.to_string(),
                    seed: r.seed,
                    engine: r.engine.clone(),
                    user: r.user,
                    iteration: r.iteration,
                });
            }
        }
        last.insert(key, (r.iteration, r.best_regret));
    }
    out
}

/// Loads and checks a results directory and computes every summary table.
pub fn build_report(dir: &Path) -> Result<Report> {
    let config_path = dir.join(CONFIG_FILE);
    let results_path = dir.join(RESULTS_FILE);
    let timing_path = dir.join(TIMING_FILE);
    let absent: Vec<String> = [&config_path, &results_path, &timing_path]
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    if !absent.is_empty() {
        return Err(Error::Report(format!("{}: missing {}", dir.display(), absent.join(", "))));
    }
    let cfg = ExperimentConfig::load(&config_path)?;
    let users: Vec<usize> = (1..=cfg.n_users).collect();

    let rows = read_results(&results_path)?;
    let mut missing = Vec::new();
    check_complete(RESULTS_FILE, &rows, &cfg, &users, &mut missing);
    let mut reopt_rows = Vec::new();
    if cfg.reoptimize {
        for u in &users {
            let name = reopt_file(*u);
            let path = dir.join(&name);
            if !path.is_file() {
                missing.push(name);
                continue;
            }
            let r = read_results(&path)?;
            check_complete(&name, &r, &cfg, std::slice::from_ref(u), &mut missing);
            reopt_rows.push((name, r));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Report(format!("incomplete results: {}", missing.join("; "))));
    }

    let mut timing_rdr = csv::Reader::from_path(&timing_path)?;
    let timings: Vec<TimingRecord> = timing_rdr.deserialize().collect::<std::result::Result<_, _>>()?;

    let engines = first_seen(&rows);
    let mut found = violations(RESULTS_FILE, &rows);
    for (name, r) in &reopt_rows {
        found.extend(violations(name, r));
    }

    let mut per_iteration = Vec::new();
    for e in &engines {
        for t in 1..=cfg.iterations {
            let sel: Vec<&ResultRecord> = rows.iter().filter(|r| &r.engine == e && r.iteration == t).collect();
            let (mean_regret, std_regret) = mean_std(&sel.iter().map(|r| r.regret).collect::<Vec<_>>());
            let (mean_best_regret, std_best_regret) = mean_std(&sel.iter().map(|r| r.best_regret).collect::<Vec<_>>());
            per_iteration.push(IterationStat {
                engine: e.clone(),
                iteration: t,
                n: sel.len(),
                mean_regret,
                std_regret,
                mean_best_regret,
                std_best_regret,
            });
        }
    }

    let mut per_seed = Vec::new();
    for e in &engines {
        for s in &cfg.seeds {
            let cumulative = rows.iter().filter(|r| &r.engine == e && r.seed == *s).map(|r| r.regret).sum();
            per_seed.push(SeedCumulative {
                engine: e.clone(),
                seed: *s,
                cumulative,
            });
        }
    }
    let cumulative_of = |e: &str| -> Vec<f64> { per_seed.iter().filter(|c| c.engine == e).map(|c| c.cumulative).collect() };

    let summary = engines
        .iter()
        .map(|e| {
            let v = cumulative_of(e);
            let (mean_cumulative, std_cumulative) = mean_std(&v);
            EngineSummary {
                engine: e.clone(),
                seeds: v.len(),
                mean_cumulative,
                std_cumulative,
            }
        })
        .collect();

    let mut comparisons = Vec::new();
    for a in &engines {
        for b in &engines {
            if a == b {
                continue;
            }
            let (va, vb) = (cumulative_of(a), cumulative_of(b));
            let wins = va.iter().zip(&vb).filter(|(x, y)| x < y).count();
            let losses = va.iter().zip(&vb).filter(|(x, y)| x > y).count();
            comparisons.push(Comparison {
                engine: a.clone(),
                other: b.clone(),
                wins,
                losses,
                ties: va.len() - wins - losses,
                p_value: sign_test(wins, losses),
            });
        }
    }

    let mut time_by_user = Vec::new();
    for e in &engines {
        for u in &users {
            let v: Vec<f64> = timings
                .iter()
                .filter(|t| &t.engine == e && t.user == *u && t.stage == "main" && cfg.seeds.contains(&t.seed))
                .map(|t| t.time_ms)
                .collect();
            let (mean_ms, std_ms) = mean_std(&v);
            time_by_user.push(TimeStat {
                engine: e.clone(),
                user: *u,
                n: v.len(),
                mean_ms,
                std_ms,
            });
        }
    }

    let mut reopt = Vec::new();
    for (_, r) in &reopt_rows {
        for e in &engines {
            for s in &cfg.seeds {
                let sel: Vec<&ResultRecord> = r.iter().filter(|x| &x.engine == e && x.seed == *s).collect();
                if let Some(first) = sel.first() {
                    reopt.push(UserCumulative {
                        engine: e.clone(),
                        seed: *s,
                        user: first.user,
                        cumulative: sel.iter().map(|x| x.regret).sum(),
                    });
                }
            }
        }
    }

    Ok(Report {
        engines,
        per_iteration,
        per_seed,
        summary,
        time_by_user,
        comparisons,
        reopt,
        violations: found,
    })
}

struct Table {
    name: &'static str,
    title: &'static str,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn tables(report: &Report) -> Vec<Table> {
    let mut out = vec![
        Table {
            name: "cumulative_summary",
            title: "Cumulative regret (mean and std over seeds)",
            header: vec!["engine", "seeds", "mean_cumulative_regret", "std_cumulative_regret"],
            rows: report
                .summary
                .iter()
                .map(|s| vec![s.engine.clone(), s.seeds.to_string(), fmt(s.mean_cumulative), fmt(s.std_cumulative)])
                .collect(),
        },
        Table {
            name: "cumulative_by_seed",
            title: "Cumulative regret per seed",
            header: vec!["engine", "seed", "cumulative_regret"],
            rows: report
                .per_seed
                .iter()
                .map(|c| vec![c.engine.clone(), c.seed.to_string(), fmt(c.cumulative)])
                .collect(),
        },
        Table {
            name: "regret_by_iteration",
            title: "Regret per iteration (over users and seeds)",
            header: vec![
                "engine",
                "iteration",
                "n",
                "mean_regret",
                "std_regret",
                "mean_best_regret",
                "std_best_regret",
            ],
            rows: report
                .per_iteration
                .iter()
                .map(|s| {
                    vec![
                        s.engine.clone(),
                        s.iteration.to_string(),
                        s.n.to_string(),
                        fmt(s.mean_regret),
                        fmt(s.std_regret),
                        fmt(s.mean_best_regret),
                        fmt(s.std_best_regret),
                    ]
                })
                .collect(),
        },
        Table {
            name: "time_by_user",
            title: "Iteration time per user (propose and tell, milliseconds)",
            header: vec!["engine", "user", "n", "mean_ms", "std_ms"],
            rows: report
                .time_by_user
                .iter()
                .map(|t| vec![t.engine.clone(), t.user.to_string(), t.n.to_string(), fmt(t.mean_ms), fmt(t.std_ms)])
                .collect(),
        },
        Table {
            name: "comparisons",
            title: "Sign tests: engine has lower cumulative regret than other",
            header: vec!["engine", "other", "wins", "losses", "ties", "p_value"],
            rows: report
                .comparisons
                .iter()
                .map(|c| {
                    vec![
                        c.engine.clone(),
                        c.other.clone(),
                        c.wins.to_string(),
                        c.losses.to_string(),
                        c.ties.to_string(),
                        fmt(c.p_value),
                    ]
                })
                .collect(),
        },
    ];
    if !report.reopt.is_empty() {
        out.push(Table {
            name: "reopt_cumulative",
            title: "Re-optimization cumulative regret per user",
            header: vec!["engine", "seed", "user", "cumulative_regret"],
            rows: report
                .reopt
                .iter()
                .map(|c| vec![c.engine.clone(), c.seed.to_string(), c.user.to_string(), fmt(c.cumulative)])
                .collect(),
        });
    }
    out.push(Table {
        name: "violations",
        title: "Best-so-far regret increases",
        header: vec!["file", "seed", "engine", "user", "iteration"],
        rows: report
            .violations
            .iter()
            .map(|v| vec![v.file.clone(), v.seed.to_string(), v.engine.clone(), v.user.to_string(), v.iteration.to_string()])
            .collect(),
    });
    out
}

pub fn render_markdown(report: &Report) -> String {
    let mut s = String::from("# Experiment report\n");
    for t in tables(report) {
        let _ = write!(s, "\n## {}\n\n", t.title);
        if t.rows.is_empty() {
            s.push_str("none\n");
            continue;
        }
        let _ = writeln!(s, "| {} |", t.header.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(t.header.len()));
        for r in &t.rows {
            let _ = writeln!(s, "| {} |", r.join(" | "));
        }
    }
    s
}

/// Writes the report under `<dir>/report/` and returns the written paths.
pub fn write_report(report: &Report, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    let out = dir.join("report");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match format {
        Format::Markdown => {
            let path = out.join("report.md");
            fs::write(&path, render_markdown(report)).map_err(|e| Error::io(&path, e))?;
            Ok(vec![path])
        }
        Format::Csv => {
            let mut paths = Vec::new();
            for t in tables(report) {
                let path = out.join(format!("{}.csv", t.name));
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(&t.header)?;
                for r in &t.rows {
                    w.write_record(r)?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
                paths.push(path);
            }
            Ok(paths)
        }
    }
}
