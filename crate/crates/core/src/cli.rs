//! `generate`, `simulate` and `compare` commands.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::control::StrategyKind;
use crate::flat_map::FlatStateRef;
use crate::scenario::LoadedScenario;
use crate::sim::{build_reference, run_scenario, Metrics, Scenario, TraceRow, WindProfile, TRACE_HEADER};

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Columns of the dense reference CSV.
pub const REFERENCE_HEADER: [&str; 11] = ["t", "x", "y", "z", "phi", "theta", "psi", "T", "tau_phi", "tau_theta", "tau_psi"];

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.as_ref().iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    write_csv(path, &TRACE_HEADER, trace.iter().map(TraceRow::fields))
}

/// Numeric rows of a trace CSV written by [`write_trace_csv`].
pub fn read_trace_csv(path: &Path) -> Result<Vec<[f64; 26]>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    anyhow::ensure!(header == TRACE_HEADER, "unexpected trace header {header:?}");
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let mut row = [0.0; 26];
            anyhow::ensure!(rec.len() == 26, "row {} has {} fields", i + 2, rec.len());
            for (dst, field) in row.iter_mut().zip(rec.iter()) {
                *dst = field.parse().with_context(|| format!("row {}: bad number `{field}`", i + 2))?;
            }
            Ok(row)
        })
        .collect()
}

fn reference_fields(r: &FlatStateRef) -> [f64; 11] {
    [
        r.t,
        r.position[0],
        r.position[1],
        r.position[2],
        r.attitude[0],
        r.attitude[1],
        r.attitude[2],
        r.thrust,
        r.torque[0],
        r.torque[1],
        r.torque[2],
    ]
}

/// Fitted curve and yaw channel as written by `generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDump {
    pub order: usize,
    pub knots: Vec<f64>,
    pub control_points: Vec<[f64; 3]>,
    pub yaw: YawDump,
}

/// `z4(t) = tan(psi/2)` as a degree-9 polynomial in `s = (t - t0) / duration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YawDump {
    pub t0: f64,
    pub duration: f64,
    /// Ascending powers of `s`.
    pub coefficients: Vec<f64>,
}

/// Writes `trajectory.json` and `reference.csv` into `out`.
pub fn cmd_generate(loaded: &LoadedScenario, out: &Path, dt: Option<f64>) -> Result<TrajectoryDump> {
    let s = &loaded.scenario;
    let reference = build_reference(s, dt.unwrap_or(s.control_period))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let dump = TrajectoryDump {
        order: reference.curve.order(),
        knots: reference.curve.knots().knots().to_vec(),
        control_points: reference.curve.control_points().iter().map(|p| [p[0], p[1], p[2]]).collect(),
        yaw: YawDump {
            t0: reference.yaw.start_time(),
            duration: reference.yaw.duration(),
            coefficients: reference.yaw.coefficients().to_vec(),
        },
    };
    fs::write(out.join("trajectory.json"), serde_json::to_string_pretty(&dump)? + "\n")?;
    write_csv(&out.join("reference.csv"), &REFERENCE_HEADER, reference.states.iter().map(reference_fields))?;
    log::info!("{} reference rows written to {}", reference.states.len(), out.display());
    Ok(dump)
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub tool: String,
    pub version: String,
    pub scenario_digest: String,
    pub strategy: StrategyKind,
    pub wind: WindProfile,
    pub metrics: Metrics,
}

/// Runs the scenario and writes `trace.csv` and `metrics.json` into `out`.
pub fn cmd_simulate(loaded: &LoadedScenario, out: &Path, dt: Option<f64>) -> Result<SimulationReport> {
    let s = with_period(&loaded.scenario, dt);
    let run = run_scenario(&s)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_trace_csv(&out.join("trace.csv"), &run.trace)?;
    let report = SimulationReport {
        tool: TOOL.into(),
        version: VERSION.into(),
        scenario_digest: loaded.digest.clone(),
        strategy: s.strategy,
        wind: s.wind,
        metrics: run.metrics,
    };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

fn with_period(s: &Scenario, dt: Option<f64>) -> Scenario {
    match dt {
        Some(dt) => Scenario { control_period: dt, ..s.clone() },
        None => s.clone(),
    }
}

/// One cell of the strategy × wind grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareCell {
    pub strategy: StrategyKind,
    pub windy: bool,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub scenario_digest: String,
    /// Wind used for the second column.
    pub wind: WindProfile,
    /// Strategy-major, calm column first.
    pub cells: Vec<CompareCell>,
}

impl RunReport {
    pub fn iae(&self, strategy: StrategyKind, windy: bool) -> Option<f64> {
        self.cells.iter().find(|c| c.strategy == strategy && c.windy == windy)?.metrics.map(|m| m.iae)
    }

    /// IAE table, one row per strategy.
    pub fn table(&self) -> String {
        let mut out = format!("{:<14} {:>12} {:>12}\n", "strategy", "no wind", "wind");
        for kind in StrategyKind::ALL {
            let cell = |windy| self.iae(kind, windy).map_or("failed".to_string(), |v| format!("{v:.4}"));
            out += &format!("{:<14} {:>12} {:>12}\n", kind.name(), cell(false), cell(true));
        }
        out
    }
}

/// Wind for the second column: the scenario's own, or the 25 km/h gust
/// when the scenario is calm.
pub fn compare_wind(s: &Scenario) -> WindProfile {
    if s.wind.is_none() {
        WindProfile::default_gust()
    } else {
        s.wind
    }
}

/// Runs every strategy with and without wind. Cells run concurrently; a
/// failing cell is recorded and does not stop the others.
pub fn cmd_compare(loaded: &LoadedScenario, out: Option<&Path>, dt: Option<f64>) -> Result<RunReport> {
    let base = with_period(&loaded.scenario, dt);
    let wind = compare_wind(&base);
    let jobs: Vec<(StrategyKind, bool)> =
        StrategyKind::ALL.iter().flat_map(|&k| [(k, false), (k, true)]).collect();
    let cells: Vec<CompareCell> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(strategy, windy)| {
                let s = base.with_strategy(strategy).with_wind(if windy { wind } else { WindProfile::None });
                scope.spawn(move || {
                    let (metrics, error) = match run_scenario(&s) {
                        Ok(run) => (Some(run.metrics), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    CompareCell { strategy, windy, metrics, error }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("compare worker panicked")).collect()
    });
    let report = RunReport {
        tool: TOOL.into(),
        version: VERSION.into(),
        scenario_digest: loaded.digest.clone(),
        wind,
        cells,
    };
    if let Some(out) = out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("compare.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}
