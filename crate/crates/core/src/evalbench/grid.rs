use super::{
    run_experiment, AugmentationKind, EvalError, ExperimentConfig, MetricsReport, OptimizerName,
    Result, RunContext,
};
use crate::nnet::HeadVersion;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const GRID_LEARNING_RATES: [f64; 3] = [0.001, 0.005, 0.01];
pub const GRID_OPTIMIZERS: [OptimizerName; 2] = [OptimizerName::Sgd, OptimizerName::Adam];
pub const GRID_EPOCHS: [usize; 3] = [10, 20, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    /// Learning rate x optimizer x epochs.
    Hyper,
    /// Original head plus versions 1 to 8.
    Heads,
    /// No augmentation, aug1, aug2.
    Aug,
}

impl GridKind {
    pub fn name(self) -> &'static str {
        match self {
            GridKind::Hyper => "hyper",
            GridKind::Heads => "heads",
            GridKind::Aug => "aug",
        }
    }
}

impl std::str::FromStr for GridKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hyper" => Ok(GridKind::Hyper),
            "heads" => Ok(GridKind::Heads),
            "aug" => Ok(GridKind::Aug),
            other => Err(EvalError::Config(format!(
                "unknown grid {other:?} (hyper, heads, aug)"
            ))),
        }
    }
}

/// The configs of a grid, in row order. Fields the grid does not vary are
/// taken from `base`.
pub fn grid_cells(base: &ExperimentConfig, kind: GridKind) -> Vec<ExperimentConfig> {
    match kind {
        GridKind::Hyper => {
            let mut cells = Vec::with_capacity(18);
            for lr in GRID_LEARNING_RATES {
                for opt in GRID_OPTIMIZERS {
                    for epochs in GRID_EPOCHS {
                        let mut c = base.clone();
                        c.learning_rate = lr;
                        c.optimizer = opt;
                        c.epochs = epochs;
                        cells.push(c);
                    }
                }
            }
            cells
        }
        GridKind::Heads => HeadVersion::all()
            .map(|v| {
                let mut c = base.clone();
                c.model.head_version = v;
                c
            })
            .collect(),
        GridKind::Aug => AugmentationKind::ALL
            .into_iter()
            .map(|a| {
                let mut c = base.clone();
                c.augmentation = a;
                c
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub cell: String,
    pub config: ExperimentConfig,
    pub status: CellStatus,
    pub error: Option<String>,
    pub best_epoch: Option<usize>,
    pub metrics: Option<MetricsReport>,
    /// Highest test accuracy in the grid, lowest learning rate on ties.
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub grid: GridKind,
    pub rows: Vec<GridRow>,
}

#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    /// Where per-cell results are stored for resuming.
    pub cell_dir: Option<PathBuf>,
    /// Reuse completed cells found in `cell_dir`.
    pub resume: bool,
}

fn cell_path(dir: &Path, row_index: usize, id: &str) -> PathBuf {
    dir.join(format!("{row_index:02}_{id}.json"))
}

fn load_done(path: &Path, config: &ExperimentConfig) -> Option<GridRow> {
    let text = std::fs::read_to_string(path).ok()?;
    let row: GridRow = serde_json::from_str(&text).ok()?;
    (row.status == CellStatus::Ok && &row.config == config).then_some(row)
}

/// Index of the best row: highest test accuracy, then lowest learning rate,
/// then earliest row.
pub fn best_row(rows: &[GridRow]) -> Option<usize> {
    rows.iter()
        .enumerate()
        .filter_map(|(i, r)| {
            r.metrics
                .as_ref()
                .map(|m| (i, m.accuracy, r.config.learning_rate))
        })
        .fold(None, |best: Option<(usize, f64, f64)>, cur| match best {
            Some(b) if b.1 > cur.1 || (b.1 == cur.1 && b.2 <= cur.2) => Some(b),
            _ => Some(cur),
        })
        .map(|b| b.0)
}

/// Runs every cell of the grid in order. A failing cell is recorded and the
/// grid continues. `progress` sees each finished row with the row count.
pub fn run_grid(
    base: &ExperimentConfig,
    kind: GridKind,
    options: &GridOptions,
    ctx: &mut RunContext,
    progress: &mut dyn FnMut(&GridRow, usize, bool),
) -> Result<GridReport> {
    base.validate()?;
    let cells = grid_cells(base, kind);
    if let Some(dir) = &options.cell_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (index, config) in cells.into_iter().enumerate() {
        let id = config.cell_id();
        let path = options.cell_dir.as_ref().map(|d| cell_path(d, index, &id));
        if options.resume {
            if let Some(row) = path.as_deref().and_then(|p| load_done(p, &config)) {
                progress(&row, rows.len() + 1, true);
                rows.push(row);
                continue;
            }
        }
        let row = match run_experiment(&config, ctx) {
            Ok(out) => GridRow {
                index,
                cell: id,
                config,
                status: CellStatus::Ok,
                error: None,
                best_epoch: Some(out.history.best_epoch),
                metrics: Some(out.test.metrics),
                best: false,
            },
            Err(e) => GridRow {
                index,
                cell: id,
                config,
                status: CellStatus::Failed,
                error: Some(e.to_string()),
                best_epoch: None,
                metrics: None,
                best: false,
            },
        };
        if let Some(p) = &path {
            std::fs::write(
                p,
                serde_json::to_string_pretty(&row).expect("row serializes") + "\n",
            )?;
        }
        progress(&row, rows.len() + 1, false);
        rows.push(row);
    }
    if let Some(b) = best_row(&rows) {
        rows[b].best = true;
    }
    Ok(GridReport { grid: kind, rows })
}

const CSV_HEADER: [&str; 17] = [
    "index",
    "cell",
    "learning_rate",
    "optimizer",
    "epochs",
    "head_version",
    "head",
    "augmentation",
    "seed",
    "split_seed",
    "status",
    "best_epoch",
    "accuracy",
    "macro_precision",
    "macro_recall",
    "macro_f1",
    "best",
];

impl GridReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| EvalError::Io(std::io::Error::other(e));
        let mut header: Vec<String> = CSV_HEADER.iter().map(|s| s.to_string()).collect();
        header.push("error".into());
        w.write_record(&header).map_err(io)?;
        for r in &self.rows {
            let c = &r.config;
            let metric = |f: fn(&MetricsReport) -> f64| {
                r.metrics
                    .as_ref()
                    .map(|m| f(m).to_string())
                    .unwrap_or_default()
            };
            w.write_record([
                r.index.to_string(),
                r.cell.clone(),
                c.learning_rate.to_string(),
                c.optimizer.name().to_string(),
                c.epochs.to_string(),
                c.model.head_version.get().to_string(),
                c.model.head_version.label(),
                c.augmentation.name().to_string(),
                c.seed.to_string(),
                c.dataset.split_seed.to_string(),
                format!("{:?}", r.status).to_lowercase(),
                r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                metric(|m| m.accuracy),
                metric(|m| m.macro_precision),
                metric(|m| m.macro_recall),
                metric(|m| m.macro_f1),
                r.best.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Table with one row per cell, the best cell in bold.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Cell | LR | Optimizer | Epochs | Head | Augmentation | Precision | Recall | F1 | Accuracy |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let c = &r.config;
            let cells = match &r.metrics {
                Some(m) => [m.macro_precision, m.macro_recall, m.macro_f1, m.accuracy].map(|v| {
                    if r.best {
                        format!("**{v:.3}**")
                    } else {
                        format!("{v:.3}")
                    }
                }),
                None => std::array::from_fn(|_| "failed".to_string()),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.cell,
                c.learning_rate,
                c.optimizer.name(),
                c.epochs,
                c.model.head_version.label(),
                c.augmentation.name(),
                cells.join(" | ")
            );
        }
        let _ = writeln!(
            s,
            "\nMacro-averaged precision, recall and F1 on the test split."
        );
        s
    }
}

/// Writes `grid.csv`, `grid.json` and `grid.md` into `dir`.
pub fn write_reports(report: &GridReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("grid.csv");
    report.write_csv(std::fs::File::create(&csv_path)?)?;
    let json_path = dir.join("grid.json");
    std::fs::write(&json_path, report.to_json())?;
    let md_path = dir.join("grid.md");
    std::fs::write(&md_path, report.to_markdown())?;
    Ok(vec![csv_path, json_path, md_path])
}
