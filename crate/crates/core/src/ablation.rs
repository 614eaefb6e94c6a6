//! Variant grids run over several seeds.
//!
//! Every cell of one seed trains on the same dataset instance and with the
//! same run seed, so cells differ only in their switches. A failing cell is
//! recorded and the grid carries on.

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;

use crate::artifacts::SummaryRow;
use crate::config::{RunConfig, TRAIN_KEYS};
use crate::data::{generate_openset, GeneratorConfig, OpenSetDataset};
use crate::error::{Error, Result};
use crate::eval::{MetricsRecord, RunMetrics};
use crate::trainer::{train_ssb, TrainConfig};

/// One axis of a grid: a config key and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

/// Cartesian product of axes; the first axis varies slowest.
///
/// Text form: `key:v1|v2;key2:v3|v4`, or one of the presets `table1`
/// (filter off/confidence × head none/shared/separate), `table3` (filter
/// detector/detector_tuned/confidence) and `table5` (pl_mode
/// none/standard/pseudo_negative).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub axes: Vec<Axis>,
}

fn axis(key: &str, values: &[&str]) -> Axis {
    Axis {
        key: key.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
    }
}

impl Grid {
    pub fn table1() -> Self {
        Self {
            axes: vec![
                axis("filter", &["off", "confidence"]),
                axis("head_mode", &["none", "shared", "separate"]),
            ],
        }
    }

    pub fn table3() -> Self {
        Self {
            axes: vec![axis("filter", &["detector", "detector_tuned", "confidence"])],
        }
    }

    pub fn table5() -> Self {
        Self {
            axes: vec![axis("pl_mode", &["none", "standard", "pseudo_negative"])],
        }
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Expands the grid on top of `base`. Values are checked here, so a bad
    /// value fails before any training starts.
    pub fn variants(&self, base: &TrainConfig) -> Result<Vec<Variant>> {
        let mut out = vec![(Vec::new(), base.clone())];
        for ax in &self.axes {
            let mut next = Vec::with_capacity(out.len() * ax.values.len());
            for (name, cfg) in &out {
                for v in &ax.values {
                    let mut rc = RunConfig {
                        train: cfg.clone(),
                        ..RunConfig::default()
                    };
                    rc.set(&ax.key, v)?;
                    let mut name: Vec<String> = name.clone();
                    name.push(format!("{}={v}", ax.key));
                    next.push((name, rc.train));
                }
            }
            out = next;
        }
        Ok(out
            .into_iter()
            .map(|(name, config)| Variant {
                name: if name.is_empty() { "base".into() } else { name.join(",") },
                config,
            })
            .collect())
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "table1" => return Ok(Self::table1()),
            "table3" => return Ok(Self::table3()),
            "table5" => return Ok(Self::table5()),
            _ => {}
        }
        let mut axes = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once(':')
                .ok_or_else(|| Error::config(format!("grid axis {part:?} is not `key:v1|v2`")))?;
            let key = key.trim();
            // generator keys would change the dataset between cells of a seed
            if !TRAIN_KEYS.contains(&key) || key == "seed" {
                return Err(Error::config(format!("`{key}` cannot be a grid axis")));
            }
            let values: Vec<String> = values.split('|').map(|v| v.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(Error::config(format!("empty value in grid axis {part:?}")));
            }
            axes.push(Axis {
                key: key.to_string(),
                values,
            });
        }
        if axes.is_empty() {
            return Err(Error::config("empty grid"));
        }
        Ok(Self { axes })
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .axes
            .iter()
            .map(|a| format!("{}:{}", a.key, a.values.join("|")))
            .collect();
        f.write_str(&parts.join(";"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub variant: String,
    pub seed: u64,
    pub outcome: std::result::Result<RunMetrics, String>,
}

impl Cell {
    pub fn final_record(&self) -> Option<&MetricsRecord> {
        self.outcome.as_ref().ok().and_then(RunMetrics::last)
    }
}

/// Mean and sample standard deviation over the seeds that produced a value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { n, mean, std })
    }
}

pub const AGGREGATED: [&str; 10] = [
    "accuracy",
    "auroc_seen",
    "auroc_unseen",
    "auroc_avg",
    "utilization_unlabeled",
    "utilization_ood",
    "pseudo_inlier_precision",
    "inlier_recall",
    "pseudo_neg_precision",
    "pseudo_label_precision",
];

fn metric(r: &MetricsRecord, name: &str) -> Option<f64> {
    match name {
        "accuracy" => r.accuracy,
        "auroc_seen" => r.auroc_seen,
        "auroc_unseen" => r.auroc_unseen,
        "auroc_avg" => r.auroc_avg,
        "utilization_unlabeled" => Some(r.utilization_unlabeled),
        "utilization_ood" => r.utilization_ood,
        "pseudo_inlier_precision" => r.pseudo_inlier_precision,
        "inlier_recall" => r.inlier_recall,
        "pseudo_neg_precision" => r.pseudo_neg_precision,
        "pseudo_label_precision" => r.pseudo_label_precision,
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub metrics: Vec<(&'static str, Option<Aggregate>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Seed-major: all variants of the first seed, then the next seed.
    pub cells: Vec<Cell>,
}

impl AblationReport {
    pub fn cell(&self, variant: &str, seed: u64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.variant == variant && c.seed == seed)
    }

    /// Final records of `variant` in seed order; failed cells give `None`.
    pub fn finals(&self, variant: &str) -> Vec<Option<&MetricsRecord>> {
        self.seeds
            .iter()
            .map(|&s| self.cell(variant, s).and_then(Cell::final_record))
            .collect()
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        self.variants
            .iter()
            .map(|v| {
                let finals = self.finals(&v.name);
                let n_ok = finals.iter().flatten().count();
                let metrics = AGGREGATED
                    .iter()
                    .map(|&m| {
                        let vals: Vec<f64> = finals.iter().flatten().filter_map(|r| metric(r, m)).collect();
                        (m, Aggregate::of(&vals))
                    })
                    .collect();
                ReportRow {
                    variant: v.name.clone(),
                    n_ok,
                    n_failed: finals.len() - n_ok,
                    metrics,
                }
            })
            .collect()
    }

    /// One row per variant: counts, then `<metric>_mean` / `<metric>_std`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["variant".to_string(), "n_ok".into(), "n_failed".into()];
        for m in AGGREGATED {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        w.write_record(&header).expect("in-memory write");
        for row in self.rows() {
            let mut rec = vec![row.variant, row.n_ok.to_string(), row.n_failed.to_string()];
            for (_, agg) in row.metrics {
                match agg {
                    Some(a) => {
                        rec.push(a.mean.to_string());
                        rec.push(a.std.to_string());
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// One `summary.csv` row per cell.
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.cells
            .iter()
            .map(|c| SummaryRow {
                run: c.variant.clone(),
                seed: c.seed,
                outcome: match &c.outcome {
                    Ok(m) => m.last().cloned().ok_or_else(|| "no evaluation points".to_string()),
                    Err(e) => Err(e.clone()),
                },
            })
            .collect()
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Runs every variant for every seed. `dataset_for(seed)` builds the data a
/// seed's cells share; `progress` sees each cell as it finishes.
pub fn run_ablation_with(
    grid: &[Variant],
    seeds: &[u64],
    mut dataset_for: impl FnMut(u64) -> Result<OpenSetDataset>,
    mut progress: impl FnMut(&Cell),
) -> Result<AblationReport> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs at least one variant and one seed"));
    }
    let mut cells = Vec::with_capacity(grid.len() * seeds.len());
    for &seed in seeds {
        let dataset = dataset_for(seed).map_err(|e| e.to_string());
        for v in grid {
            let outcome = match &dataset {
                Err(e) => Err(format!("dataset: {e}")),
                Ok(ds) => {
                    let cfg = TrainConfig {
                        seed,
                        ..v.config.clone()
                    };
                    match catch_unwind(AssertUnwindSafe(|| train_ssb(ds, &cfg))) {
                        Ok(Ok(out)) => Ok(out.metrics),
                        Ok(Err(e)) => Err(e.to_string()),
                        Err(p) => Err(format!("panicked: {}", panic_message(p))),
                    }
                }
            };
            let cell = Cell {
                variant: v.name.clone(),
                seed,
                outcome,
            };
            progress(&cell);
            cells.push(cell);
        }
    }
    Ok(AblationReport {
        variants: grid.to_vec(),
        seeds: seeds.to_vec(),
        cells,
    })
}

/// [`run_ablation_with`] on synthetic data generated with each seed.
pub fn run_ablation(generator: &GeneratorConfig, grid: &[Variant], seeds: &[u64]) -> Result<AblationReport> {
    run_ablation_with(
        grid,
        seeds,
        |seed| {
            generate_openset(&GeneratorConfig {
                seed,
                ..generator.clone()
            })
        },
        |_| {},
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadMode;
    use crate::trainer::FilterStrategy;

    fn small_gen() -> GeneratorConfig {
        GeneratorConfig {
            dim: 4,
            n_inlier: 3,
            n_seen: 1,
            n_unseen: 1,
            train_per_class: 40,
            test_per_class: 20,
            label_fraction: 0.25,
            ..GeneratorConfig::default()
        }
    }

    fn small_train() -> TrainConfig {
        TrainConfig {
            iterations: 30,
            warmup: 15,
            eval_every: 10,
            batch_labeled: 8,
            batch_unlabeled: 8,
            feat_dim: 6,
            proj_dim: 6,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn table1_has_six_named_variants() {
        let vs = Grid::table1().variants(&TrainConfig::default()).unwrap();
        assert_eq!(vs.len(), 6);
        assert_eq!(vs[0].name, "filter=off,head_mode=none");
        assert_eq!(vs[5].name, "filter=confidence,head_mode=separate");
        assert_eq!(vs[3].config.head_mode, HeadMode::None);
        assert_eq!(vs[3].config.filter, FilterStrategy::Confidence);
        assert_eq!(Grid::table3().len(), 3);
        assert_eq!(Grid::table5().len(), 3);
    }

    #[test]
    fn grid_text_round_trip_and_errors() {
        let g: Grid = "tau:0.9|0.95; head_mode:none".parse().unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.to_string().parse::<Grid>().unwrap(), g);
        assert!("".parse::<Grid>().is_err());
        assert!("sigma:1|2".parse::<Grid>().is_err());
        assert!("seed:1|2".parse::<Grid>().is_err());
        assert!("tau:".parse::<Grid>().is_err());
        assert!("nonsense".parse::<Grid>().is_err());
        let bad: Grid = "head_mode:none|both".parse().unwrap();
        assert!(bad.variants(&TrainConfig::default()).is_err());
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let a = Aggregate::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_close!(a.mean, 2.0, 1e-15);
        assert_close!(a.std, 1.0, 1e-15);
        assert_eq!(Aggregate::of(&[4.0]).unwrap().std, 0.0);
        assert!(Aggregate::of(&[]).is_none());
    }

    #[test]
    fn single_cell_matches_a_plain_run() {
        let gen = small_gen();
        let cfg = TrainConfig { seed: 3, ..small_train() };
        let grid = vec![Variant {
            name: "only".into(),
            config: cfg.clone(),
        }];
        let report = run_ablation(&gen, &grid, &[3]).unwrap();
        let ds = generate_openset(&GeneratorConfig { seed: 3, ..gen }).unwrap();
        let direct = train_ssb(&ds, &cfg).unwrap();
        assert_eq!(report.cells.len(), 1);
        assert_eq!(report.cells[0].outcome.as_ref().unwrap(), &direct.metrics);
    }

    #[test]
    fn failures_stay_in_their_cell() {
        let good = small_train();
        let bad = TrainConfig { tau: 1.5, ..small_train() };
        let grid = vec![
            Variant {
                name: "good".into(),
                config: good,
            },
            Variant {
                name: "bad".into(),
                config: bad,
            },
        ];
        let mut seen = 0;
        let report = run_ablation_with(
            &grid,
            &[0, 1],
            |seed| {
                if seed == 1 {
                    Err(Error::config("no data for seed 1"))
                } else {
                    generate_openset(&small_gen())
                }
            },
            |_| seen += 1,
        )
        .unwrap();
        assert_eq!(seen, 4);
        assert!(report.cell("good", 0).unwrap().outcome.is_ok());
        assert!(report.cell("bad", 0).unwrap().outcome.as_ref().unwrap_err().contains("tau"));
        assert!(report.cell("good", 1).unwrap().outcome.as_ref().unwrap_err().contains("dataset"));
        let rows = report.rows();
        assert_eq!((rows[0].n_ok, rows[0].n_failed), (1, 1));
        assert_eq!((rows[1].n_ok, rows[1].n_failed), (0, 2));
        assert!(rows[1].metrics.iter().all(|(_, a)| a.is_none()));

        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(report.summary_rows().len(), 4);
        assert!(run_ablation_with(&[], &[0], |_| generate_openset(&small_gen()), |_| {}).is_err());
    }
}
