//! Setting × seed grids over one configuration knob.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::{mean_std, run_training};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// `env.action_repeat`; settings are integers.
    ActionRepeat,
    /// Conv encoder/decoder size; settings are `DEPTHxCHANNELS`, e.g. `4x32`.
    Capacity,
    /// `ae.beta`; settings are floats.
    Beta,
}

impl AblationKind {
    pub const ALL: [AblationKind; 3] = [AblationKind::ActionRepeat, AblationKind::Capacity, AblationKind::Beta];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::ActionRepeat => "action_repeat",
            AblationKind::Capacity => "capacity",
            AblationKind::Beta => "beta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown ablation kind {s:?}; valid kinds: {}", valid.join(", ")))
        })
    }

    /// `base` with one grid setting applied, validated.
    pub fn apply(self, base: &ExperimentConfig, setting: &str) -> Result<ExperimentConfig> {
        let bad = || Error::Config(format!("invalid {} setting {setting:?}", self.name()));
        let mut cfg = base.clone();
        match self {
            AblationKind::ActionRepeat => cfg.env.action_repeat = setting.parse().map_err(|_| bad())?,
            AblationKind::Capacity => {
                let (d, c) = setting.split_once('x').ok_or_else(bad)?;
                cfg.net.conv_depth = d.parse().map_err(|_| bad())?;
                cfg.net.conv_channels = c.parse().map_err(|_| bad())?;
            }
            AblationKind::Beta => cfg.ae.beta = setting.parse().map_err(|_| bad())?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub setting: String,
    pub seed: u64,
    pub run_id: String,
    pub final_mean: f64,
}

/// One grid setting aggregated over its seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub seeds: Vec<u64>,
    pub final_mean: f64,
    pub final_std: f64,
    pub cells: Vec<CellResult>,
}

fn worker_count(cells: usize) -> usize {
    let cap = std::env::var("PIXELRL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(cells).max(1)
}

/// Runs every `setting × seed` cell of `grid` (seeds from the base config)
/// and aggregates final scores per setting. Cells run on up to
/// `PIXELRL_THREADS` threads; results do not depend on the thread count.
pub fn ablation_grid(base: &ExperimentConfig, kind: AblationKind, grid: &[String], out: Option<&Path>) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid must contain at least one setting".into()));
    }
    // Validate every setting before launching anything.
    let cfgs = grid.iter().map(|s| kind.apply(base, s)).collect::<Result<Vec<_>>>()?;
    let seeds = &base.experiment.seeds;
    let cells: Vec<(usize, u64)> = (0..grid.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..worker_count(cells.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(i, seed)) = cells.get(k) else { break };
                let r = run_training(&cfgs[i], seed, out).map(|run| CellResult {
                    setting: grid[i].clone(),
                    seed,
                    final_mean: run.final_mean().unwrap_or(f64::NAN),
                    run_id: run.run_id,
                });
                results.lock().unwrap()[k] = Some(r);
            });
        }
    });

    let mut results = results.into_inner().unwrap().into_iter();
    let mut rows = Vec::new();
    for setting in grid {
        let cells = (0..seeds.len())
            .map(|_| results.next().flatten().expect("every cell ran"))
            .collect::<Result<Vec<_>>>()?;
        let finals: Vec<f64> = cells.iter().map(|c| c.final_mean).collect();
        let (final_mean, final_std) = mean_std(&finals);
        rows.push(AblationRow {
            setting: setting.clone(),
            seeds: seeds.clone(),
            final_mean,
            final_std,
            cells,
        });
    }
    Ok(rows)
}

/// CSV with header `setting,seed,final_mean,final_std`: one row per setting,
/// seeds joined with `;`, std over seeds.
pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut text = String::from("setting,seed,final_mean,final_std\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        text += &format!("{},{},{},{}\n", r.setting, seeds.join(";"), r.final_mean, r.final_std);
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
