//! Parameter sweeps.
//!
//! A sweep runs the cross product of one axis' values and a list of master
//! seeds. Each point is an independent experiment written to
//! `<out>/<axis>_<value>/seed_<seed>/`; `sweep_summary.csv` lists every point
//! sorted by `(axis_value, seed)` with header
//! `axis_value,seed,mean_accuracy,final_round,status`. A failing point is
//! recorded with an `error: ...` status and empty metrics instead of
//! aborting the sweep.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use crate::config::{Ablation, Algorithm, ExperimentConfig};
use crate::data::PartitionScheme;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::orchestrator::run_experiment_with;
use crate::output::write_outputs;

pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisValue {
    /// Dirichlet concentration.
    Alpha(f64),
    LocalEpochs(usize),
    /// Pathological partition with this many classes per client.
    ClassesPerClient(usize),
    Algorithm(Algorithm),
    Ablation(Ablation),
}

impl AxisValue {
    pub fn axis_name(&self) -> &'static str {
        match self {
            AxisValue::Alpha(_) => "alpha",
            AxisValue::LocalEpochs(_) => "local_epochs",
            AxisValue::ClassesPerClient(_) => "classes_per_client",
            AxisValue::Algorithm(_) => "algorithm",
            AxisValue::Ablation(_) => "ablation",
        }
    }

    pub fn label(&self) -> String {
        match self {
            AxisValue::Alpha(a) => a.to_string(),
            AxisValue::LocalEpochs(e) => e.to_string(),
            AxisValue::ClassesPerClient(k) => k.to_string(),
            AxisValue::Algorithm(a) => a.to_string(),
            AxisValue::Ablation(a) => a.to_string(),
        }
    }

    pub fn apply(&self, config: &mut ExperimentConfig) {
        match *self {
            AxisValue::Alpha(alpha) => config.data.scheme = PartitionScheme::Dirichlet { alpha },
            AxisValue::LocalEpochs(e) => config.hyper.local_epochs = e,
            AxisValue::ClassesPerClient(k) => {
                config.data.scheme = PartitionScheme::Pathological { classes_per_client: k }
            }
            AxisValue::Algorithm(a) => config.algorithm = a,
            AxisValue::Ablation(a) => config.ablation = a,
        }
    }

    fn sort_cmp(&self, other: &AxisValue) -> Ordering {
        match (self, other) {
            (AxisValue::Alpha(a), AxisValue::Alpha(b)) => a.total_cmp(b),
            (AxisValue::LocalEpochs(a), AxisValue::LocalEpochs(b))
            | (AxisValue::ClassesPerClient(a), AxisValue::ClassesPerClient(b)) => a.cmp(b),
            _ => self.label().cmp(&other.label()),
        }
    }
}

/// One axis with its values.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub values: Vec<AxisValue>,
}

impl SweepAxis {
    pub const NAMES: [&'static str; 5] = ["alpha", "local_epochs", "classes_per_client", "algorithm", "ablation"];

    /// Parse an axis name and a comma-separated value list.
    pub fn parse(name: &str, values: &str) -> Result<Self> {
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(Error::config("values", "at least one axis value is required"));
        }
        let bad = |v: &str| Error::config("values", format!("`{v}` is not a valid {name} value"));
        let values = items
            .iter()
            .map(|&v| -> Result<AxisValue> {
                Ok(match name {
                    "alpha" => {
                        let a: f64 = v.parse().map_err(|_| bad(v))?;
                        if !(a > 0.0 && a.is_finite()) {
                            return Err(bad(v));
                        }
                        AxisValue::Alpha(a)
                    }
                    "local_epochs" => AxisValue::LocalEpochs(v.parse().map_err(|_| bad(v))?),
                    "classes_per_client" => AxisValue::ClassesPerClient(v.parse().map_err(|_| bad(v))?),
                    "algorithm" => AxisValue::Algorithm(v.parse()?),
                    "ablation" => AxisValue::Ablation(v.parse()?),
                    other => {
                        return Err(Error::config(
                            "axis",
                            format!(
                                "unknown axis `{other}`, expected one of {}",
                                SweepAxis::NAMES.join(", ")
                            ),
                        ))
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepAxis { values })
    }

    pub fn name(&self) -> &'static str {
        self.values.first().map_or("alpha", AxisValue::axis_name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: AxisValue,
    pub seed: u64,
    pub mean_accuracy: Option<f64>,
    pub final_round: Option<usize>,
    /// `ok` or `error: <message>`.
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

fn csv_safe(text: &str) -> String {
    text.replace([',', '\n', '\r'], " ")
}

pub fn sweep_summary_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis_value,seed,mean_accuracy,final_round,status\n");
    for row in rows {
        let acc = row.mean_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        let fin = row.final_round.map(|r| r.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{acc},{fin},{}\n",
            row.axis_value.label(),
            row.seed,
            csv_safe(&row.status)
        ));
    }
    out
}

/// Run every `(value, seed)` point, write per-point outputs and the summary.
/// Points run concurrently on `executor`; each experiment itself runs
/// sequentially.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path, executor: &Executor) -> Result<Vec<SweepRow>> {
    if spec.axis.values.is_empty() {
        return Err(Error::config("values", "axis has no values"));
    }
    if spec.seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let mut points: Vec<(AxisValue, u64)> = spec
        .axis
        .values
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |&s| (*v, s)))
        .collect();
    points.sort_by(|a, b| a.0.sort_cmp(&b.0).then(a.1.cmp(&b.1)));
    fs::create_dir_all(out_dir)?;

    let rows = executor.map(points.len(), |k| {
        let (value, seed) = points[k];
        let mut config = spec.base.clone();
        value.apply(&mut config);
        config.seed = seed;
        let dir = out_dir
            .join(format!("{}_{}", value.axis_name(), value.label()))
            .join(format!("seed_{seed}"));
        let outcome = config
            .validate()
            .and_then(|_| run_experiment_with(&config, &Executor::sequential()))
            .and_then(|result| {
                write_outputs(&result, &dir)?;
                fs::write(dir.join("config.json"), config.to_json() + "\n")?;
                Ok(result)
            });
        match outcome {
            Ok(result) => SweepRow {
                axis_value: value,
                seed,
                mean_accuracy: Some(result.mean_accuracy),
                final_round: Some(result.rounds),
                status: "ok".to_string(),
            },
            Err(e) => SweepRow {
                axis_value: value,
                seed,
                mean_accuracy: None,
                final_round: None,
                status: format!("error: {e}"),
            },
        }
    });
    fs::write(out_dir.join(SWEEP_SUMMARY_FILE), sweep_summary_csv(&rows))?;
    Ok(rows)
}
