//! Ablation grids: every cell is the base run config plus a few overrides,
//! trained with matched seeds and probed on the same held-out clips.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Result, StoaError};
use crate::harness::config::RunConfig;
use crate::harness::probe::{run_probe, ProbeReport, ProbeTask};
use crate::harness::train::pretrain_on;
use crate::kv::{self, KvSection};
use crate::synthetic_world::{read_corpus, SampleRecord};

/// Parsed grid file:
///
/// ```text
/// base_config=run.cfg   # optional, desk defaults otherwise
/// seeds=1,2,3
/// tasks=retrieval       # comma list of retrieval, caption, qa
/// [base]
/// obj=off
/// [full]
/// ```
#[derive(Clone, Debug)]
pub struct AblationGrid {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub tasks: Vec<ProbeTask>,
    pub cells: Vec<(String, KvSection)>,
    base_dir: PathBuf,
}

impl AblationGrid {
    pub fn parse_text(text: &str, base_dir: &Path) -> Result<Self> {
        let sections = kv::parse(text)?;
        let head = &sections[0];
        let base = match head.get("base_config") {
            Some(p) => RunConfig::load(&base_dir.join(p))?,
            None => RunConfig::desk(),
        };
        let seeds = match head.get("seeds") {
            Some(v) => v
                .split(',')
                .map(|s| kv::parse_num("seeds", s.trim()))
                .collect::<Result<Vec<u64>>>()?,
            None => vec![base.seed],
        };
        let tasks = match head.get("tasks") {
            Some(v) => v
                .split(',')
                .map(|s| ProbeTask::parse(s.trim()))
                .collect::<Result<Vec<_>>>()?,
            None => vec![ProbeTask::Retrieval],
        };
        for (k, _) in &head.entries {
            if !["base_config", "seeds", "tasks"].contains(&k.as_str()) {
                return Err(StoaError::Config(format!("grid: unknown key {k:?}")));
            }
        }
        let mut cells: Vec<(String, KvSection)> = sections[1..]
            .iter()
            .map(|s| (s.name.clone().unwrap_or_default(), s.clone()))
            .collect();
        if cells.is_empty() {
            cells.push(("default".into(), KvSection::default()));
        }
        if seeds.is_empty() {
            return Err(StoaError::Config("grid: no seeds".into()));
        }
        let grid = Self {
            base,
            seeds,
            tasks,
            cells,
            base_dir: base_dir.to_path_buf(),
        };
        for name in grid.cell_names() {
            grid.cell_config(&name, grid.seeds[0])?;
        }
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StoaError::io(path, e))?;
        Self::parse_text(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn cell_names(&self) -> Vec<String> {
        self.cells.iter().map(|c| c.0.clone()).collect()
    }

    /// Run config of one cell and seed.
    pub fn cell_config(&self, name: &str, seed: u64) -> Result<RunConfig> {
        let (_, section) = self
            .cells
            .iter()
            .find(|c| c.0 == name)
            .ok_or_else(|| StoaError::Config(format!("grid: no cell {name:?}")))?;
        let mut cfg = self.base.clone();
        cfg.apply(section, &self.base_dir)?;
        cfg.seed = seed;
        cfg.out_dir = self.base.out_dir.join(name).join(format!("seed-{seed}"));
        Ok(cfg)
    }
}

/// Per-cell results over all seeds.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cell: String,
    pub seeds: Vec<u64>,
    pub reports: Vec<ProbeReport>,
    pub final_loss: Vec<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl AblationRow {
    pub fn mean_t2v_r1(&self) -> Option<f64> {
        mean(
            self.reports
                .iter()
                .filter_map(|r| r.retrieval.map(|x| x.text_to_video[0])),
        )
    }

    pub fn mean_v2t_r1(&self) -> Option<f64> {
        mean(
            self.reports
                .iter()
                .filter_map(|r| r.retrieval.map(|x| x.video_to_text[0])),
        )
    }

    pub fn mean_r1(&self) -> Option<f64> {
        mean(self.reports.iter().filter_map(|r| r.retrieval.map(|x| x.mean_r1())))
    }

    pub fn mean_caption_exact(&self) -> Option<f64> {
        mean(
            self.reports
                .iter()
                .filter_map(|r| r.caption.as_ref().map(|c| c.exact_match)),
        )
    }

    pub fn mean_qa(&self) -> Option<f64> {
        mean(self.reports.iter().filter_map(|r| r.qa.as_ref().map(|q| q.accuracy)))
    }
}

/// Trains every cell for every seed on `train` and probes on `eval`.
/// Checkpoints are written under each cell's out_dir when `write` is set.
pub fn run_ablation(
    grid: &AblationGrid,
    train: &[SampleRecord],
    eval: &[SampleRecord],
    write: bool,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for name in grid.cell_names() {
        let mut row = AblationRow {
            cell: name.clone(),
            seeds: grid.seeds.clone(),
            reports: Vec::new(),
            final_loss: Vec::new(),
        };
        for &seed in &grid.seeds {
            let cfg = grid.cell_config(&name, seed)?;
            let out = write.then_some(cfg.out_dir.as_path());
            let (trained, summary) = pretrain_on(&cfg, train, out)?;
            row.final_loss
                .push(summary.history.last().map_or(f64::NAN, |b| b.total));
            let mut report = ProbeReport::default();
            for &task in &grid.tasks {
                let r = run_probe(&trained, task, eval)?;
                report.retrieval = report.retrieval.or(r.retrieval);
                report.caption = report.caption.or(r.caption);
                report.qa = report.qa.or(r.qa);
            }
            row.reports.push(report);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Loads the corpora named by the base config and runs the grid.
pub fn ablate(grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    let need = |p: &Option<PathBuf>, what: &str| {
        p.clone()
            .ok_or_else(|| StoaError::Config(format!("grid base config lacks {what}")))
    };
    let train = read_corpus(&need(&grid.base.train_corpus, "train_corpus")?)?;
    let eval = read_corpus(&need(&grid.base.eval_corpus, "eval_corpus")?)?;
    run_ablation(grid, &train, &eval, true)
}

/// Plain-text table, one row per cell; probe columns read `-` when not run.
pub fn format_table(rows: &[AblationRow]) -> String {
    let cell_w = rows.iter().map(|r| r.cell.len()).max().unwrap_or(4).max(4);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<cell_w$}  seeds  t2v_R@1  v2t_R@1  mean_R@1  cap_exact  qa_acc  final_loss",
        "cell"
    );
    let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    for r in rows {
        let _ = writeln!(
            s,
            "{:<cell_w$}  {:>5}  {:>7}  {:>7}  {:>8}  {:>9}  {:>6}  {:>10}",
            r.cell,
            r.seeds.len(),
            f(r.mean_t2v_r1()),
            f(r.mean_v2t_r1()),
            f(r.mean_r1()),
            f(r.mean_caption_exact()),
            f(r.mean_qa()),
            f(mean(r.final_loss.iter().copied())),
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cells_override_base() {
        let g = AblationGrid::parse_text(
            "seeds=4,5\n[base]\nobj=off\nact=off\nloss.ota=off\nloss.asp=off\n[full]\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(g.cell_names(), vec!["base", "full"]);
        let b = g.cell_config("base", 5).unwrap();
        assert!(!b.model.use_objects && b.seed == 5);
        assert!(g.cell_config("full", 4).unwrap().model.use_objects);
    }

    #[test]
    fn single_cell_grid() {
        let g = AblationGrid::parse_text("seeds=1\n", Path::new(".")).unwrap();
        assert_eq!(g.cell_names(), vec!["default"]);
        let rows = vec![AblationRow {
            cell: "default".into(),
            seeds: vec![1],
            reports: vec![ProbeReport::default()],
            final_loss: vec![2.0],
        }];
        let table = format_table(&rows);
        assert_eq!(table.lines().count(), 2);
        assert!(table.contains("2.0000"));
    }

    #[test]
    fn bad_grid_cell_is_rejected() {
        assert!(AblationGrid::parse_text("[x]\nN=abc\n", Path::new(".")).is_err());
        assert!(AblationGrid::parse_text("what=1\n", Path::new(".")).is_err());
    }
}
