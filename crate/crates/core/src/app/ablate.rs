use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Precision, RunConfig};
use super::evaluate_pq;
use crate::denoiser::Denoiser;
use crate::diffusion::SamplerConfig;
use crate::error::{config, PathContext, Result};
use crate::imageio::RgbImage;
use crate::mask::PanopticMask;
use crate::scalar::Scalar;
use crate::scenes::{dataset, Split};
use crate::train::{LossKind, TrainSample, TrainState};

/// Axes of an ablation run. Each non-empty axis produces one table that
/// varies that factor alone, all others held at the run config's values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub scales: Vec<f64>,
    pub losses: Vec<LossKind>,
    pub weight_powers: Vec<f64>,
    pub steps: Vec<usize>,
    pub td: Vec<f64>,
    pub min_pixels: Vec<usize>,
    /// Optimization steps for every trained cell.
    pub train_steps: u64,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            scales: vec![0.03, 0.1, 0.3, 1.0],
            losses: vec![LossKind::CrossEntropy, LossKind::L2],
            weight_powers: vec![0.0, 0.2, 0.4, 0.6],
            steps: vec![5, 10, 20, 50],
            td: Vec::new(),
            min_pixels: Vec::new(),
            train_steps: 150,
            train_size: 2000,
            val_size: 50,
        }
    }
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_steps == 0 || self.train_size == 0 || self.val_size == 0 {
            return Err(config(
                "ablate: train_steps, train_size and val_size must be positive",
            ));
        }
        if self.steps.contains(&0) {
            return Err(config("ablate: sampling steps must be positive"));
        }
        if self.scales.iter().any(|&b| !(b > 0.0)) {
            return Err(config("ablate: input scales must be positive"));
        }
        Ok(())
    }
}

/// One grid cell's scores. `train_seconds` is zero for cells that reuse a
/// model trained for an earlier cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub value: String,
    pub pq: Option<f64>,
    pub pq_thing: Option<f64>,
    pub pq_stuff: Option<f64>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub reused_model: bool,
}

impl AblationRow {
    pub fn seconds(&self) -> f64 {
        self.train_seconds + self.eval_seconds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    Increasing,
    Decreasing,
    Flat,
    Mixed,
}

impl std::fmt::Display for Trend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Trend::Increasing => "increasing",
            Trend::Decreasing => "decreasing",
            Trend::Flat => "flat",
            Trend::Mixed => "non-monotonic",
        })
    }
}

/// Direction of PQ along a table's rows, in row order.
pub fn trend(pq: &[f64]) -> Trend {
    let diffs: Vec<f64> = pq.windows(2).map(|w| w[1] - w[0]).collect();
    if diffs.iter().all(|&d| d == 0.0) {
        Trend::Flat
    } else if diffs.iter().all(|&d| d >= 0.0) {
        Trend::Increasing
    } else if diffs.iter().all(|&d| d <= 0.0) {
        Trend::Decreasing
    } else {
        Trend::Mixed
    }
}

#[derive(Clone, Copy)]
struct TrainKey {
    scale: f64,
    loss: LossKind,
    p: f64,
}

impl TrainKey {
    fn id(self) -> (u64, LossKind, u64) {
        (self.scale.to_bits(), self.loss, self.p.to_bits())
    }
}

#[derive(Clone, Copy)]
struct InferKey {
    steps: usize,
    td: f64,
    min_pixels: usize,
}

fn loss_name(l: LossKind) -> &'static str {
    match l {
        LossKind::CrossEntropy => "ce",
        LossKind::L2 => "l2",
    }
}

/// Trains and evaluates every cell of `grid`, calling `on_row` as each
/// finishes, then writes `ablation.csv` and `ablation.txt` into `out`.
/// Cells sharing training settings share one trained model.
pub fn cmd_ablate<F>(
    cfg: &RunConfig,
    grid: &GridSpec,
    out: &Path,
    on_row: F,
) -> Result<Vec<AblationRow>>
where
    F: FnMut(&AblationRow),
{
    cfg.validate()?;
    grid.validate()?;
    let rows = match cfg.precision {
        Precision::F32 => ablate_impl::<f32, F>(cfg, grid, on_row)?,
        Precision::F64 => ablate_impl::<f64, F>(cfg, grid, on_row)?,
    };
    std::fs::create_dir_all(out).at(out)?;
    let csv_path = out.join("ablation.csv");
    std::fs::write(&csv_path, ablation_csv(&rows)?).at(&csv_path)?;
    let txt_path = out.join("ablation.txt");
    std::fs::write(&txt_path, ablation_table(&rows)).at(&txt_path)?;
    cfg.dump(out)?;
    let grid_path = out.join("grid.json");
    let grid_json = serde_json::to_string_pretty(grid).expect("grid serializes");
    std::fs::write(&grid_path, grid_json + "\n").at(&grid_path)?;
    Ok(rows)
}

fn ablate_impl<T: Scalar, F: FnMut(&AblationRow)>(
    cfg: &RunConfig,
    grid: &GridSpec,
    mut on_row: F,
) -> Result<Vec<AblationRow>> {
    let base_train = TrainKey {
        scale: cfg.net.codec.scale,
        loss: cfg.train.loss,
        p: cfg.train.weight_power,
    };
    let base_infer = InferKey {
        steps: cfg.sampler.steps,
        td: cfg.sampler.td,
        min_pixels: cfg.eval.min_pixels,
    };
    let mut cells: Vec<(&str, String, TrainKey, InferKey)> = Vec::new();
    for &b in &grid.scales {
        cells.push((
            "input_scale",
            format!("{b}"),
            TrainKey {
                scale: b,
                ..base_train
            },
            base_infer,
        ));
    }
    for &l in &grid.losses {
        cells.push((
            "loss",
            loss_name(l).into(),
            TrainKey {
                loss: l,
                ..base_train
            },
            base_infer,
        ));
    }
    for &p in &grid.weight_powers {
        cells.push((
            "loss_weight_p",
            format!("{p}"),
            TrainKey { p, ..base_train },
            base_infer,
        ));
    }
    for &s in &grid.steps {
        cells.push((
            "sampling_steps",
            s.to_string(),
            base_train,
            InferKey {
                steps: s,
                ..base_infer
            },
        ));
    }
    for &td in &grid.td {
        cells.push((
            "td",
            format!("{td}"),
            base_train,
            InferKey { td, ..base_infer },
        ));
    }
    for &m in &grid.min_pixels {
        cells.push((
            "min_pixels",
            m.to_string(),
            base_train,
            InferKey {
                min_pixels: m,
                ..base_infer
            },
        ));
    }

    let train_data: Vec<(RgbImage, PanopticMask)> =
        dataset(&cfg.scene, Split::Train, grid.train_size)
            .map(|(_, i, m)| (i, m))
            .collect();
    let val: Vec<(u64, RgbImage, PanopticMask)> =
        dataset(&cfg.scene, Split::Val, grid.val_size).collect();
    let samples: Vec<TrainSample<T>> = train_data
        .iter()
        .map(|(img, m)| TrainSample {
            image: img.to_tensor(),
            mask: m.clone(),
            past: Vec::new(),
        })
        .collect();
    let is_thing = cfg.scene.is_thing();
    let mut models: HashMap<(u64, LossKind, u64), Denoiser<T>> = HashMap::new();
    let mut rows = Vec::with_capacity(cells.len());
    for (table, value, tk, ik) in cells {
        let reused = models.contains_key(&tk.id());
        let t0 = Instant::now();
        if !reused {
            let mut net_cfg = cfg.net;
            net_cfg.codec.scale = tk.scale;
            let mut tcfg = cfg.train;
            tcfg.loss = tk.loss;
            tcfg.weight_power = tk.p;
            tcfg.steps = grid.train_steps;
            let mut state = TrainState::new(tcfg, Denoiser::<T>::new(net_cfg, tcfg.seed)?)?;
            state.fit(&samples, |_, _| Ok(()))?;
            let net = if cfg.eval.use_ema {
                state.ema_net()
            } else {
                state.net
            };
            models.insert(tk.id(), net);
        }
        let train_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let sampler = SamplerConfig {
            steps: ik.steps,
            td: ik.td,
            ..cfg.sampler
        };
        let report = evaluate_pq(
            &models[&tk.id()],
            &val,
            &sampler,
            &cfg.train.schedule,
            ik.min_pixels,
            &is_thing,
        )?;
        let row = AblationRow {
            table: table.to_string(),
            value,
            pq: report.pq,
            pq_thing: report.pq_thing,
            pq_stuff: report.pq_stuff,
            train_seconds,
            eval_seconds: t1.elapsed().as_secs_f64(),
            reused_model: reused,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is UTF-8"))
}

/// One fixed-width table per ablated factor, each followed by the direction
/// PQ moves in as the factor grows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x));
    let mut tables: Vec<&str> = Vec::new();
    for r in rows {
        if !tables.contains(&r.table.as_str()) {
            tables.push(&r.table);
        }
    }
    let mut s = String::new();
    for table in tables {
        let group: Vec<&AblationRow> = rows.iter().filter(|r| r.table == table).collect();
        let _ = writeln!(s, "{table}");
        let _ = writeln!(
            s,
            "{:>10}  {:>6}  {:>8}  {:>8}  {:>9}",
            "value", "PQ", "PQ^thing", "PQ^stuff", "seconds"
        );
        for r in &group {
            let _ = writeln!(
                s,
                "{:>10}  {:>6}  {:>8}  {:>8}  {:>9.1}",
                r.value,
                pct(r.pq),
                pct(r.pq_thing),
                pct(r.pq_stuff),
                r.seconds()
            );
        }
        let pq: Vec<f64> = group.iter().map(|r| r.pq.unwrap_or(0.0)).collect();
        let _ = writeln!(s, "trend: PQ {} along {table}\n", trend(&pq));
    }
    s
}
