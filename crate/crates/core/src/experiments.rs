//! Ablation sweeps over one axis, their results CSV, and the report/SVG
//! generated from that CSV.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::losses::BlockSet;
use crate::scenegen::{AppearanceProtocol, SceneConfig, SceneDataset, SceneError, DUSK_ID};
use crate::trainer::{evaluate, train_dg, train_uda, Alignment, EvalSet, Mode, TargetImages, TrainConfig, TrainError};

/// First layout index of the held-out evaluation split.
pub const EVAL_OFFSET: u64 = 1_000_000;
/// First layout index of the unlabeled UDA target split.
pub const TARGET_OFFSET: u64 = 2_000_000;
pub const SEEN_APPEARANCES: [usize; 4] = [0, 1, 2, 3];
pub const UNSEEN_APPEARANCES: [usize; 1] = [DUSK_ID];

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error("invalid results csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Appearance,
    Metric,
    Blocks,
    DatasetSize,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Appearance => "appearance",
            Axis::Metric => "metric",
            Axis::Blocks => "blocks",
            Axis::DatasetSize => "dataset_size",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Appearance => &["sunset", "noon", "night", "fog", "fixed", "random"],
            Axis::Metric => &["none", "consistency", "l2", "mmd", "cs"],
            Axis::Blocks => &["1", "2", "3", "4", "1+2", "1+2+3", "1+2+3+4"],
            Axis::DatasetSize => &["250", "500", "1000", "2000"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, ExperimentError> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "appearance" => Ok(Axis::Appearance),
            "metric" => Ok(Axis::Metric),
            "blocks" => Ok(Axis::Blocks),
            "dataset_size" | "size" => Ok(Axis::DatasetSize),
            other => Err(ExperimentError::Spec(format!("unknown axis `{other}`"))),
        }
    }
}

/// A one-axis sweep, crossed with `seeds`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub base: TrainConfig,
    pub axis: Axis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    /// Training layouts unless the axis is `dataset_size`.
    pub layouts: usize,
    pub eval_layouts: usize,
    pub width: usize,
    pub height: usize,
    pub data_seed: u64,
}

/// One point of the sweep: the training config and the number of layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSetting {
    pub value: String,
    pub config: TrainConfig,
    pub layouts: usize,
}

impl ExperimentSpec {
    pub fn new(name: impl Into<String>, base: TrainConfig, axis: Axis) -> Self {
        Self {
            name: name.into(),
            base,
            axis,
            values: axis.default_values(),
            seeds: vec![0, 1, 2],
            layouts: 500,
            eval_layouts: 100,
            width: 64,
            height: 48,
            data_seed: 7,
        }
    }

    /// Flat `key = value` text. Spec keys are `name`, `axis`, `values`
    /// (comma separated), `seeds` (a count), `layouts`, `eval.layouts`,
    /// `width`, `height`, `data.seed`; every other key configures training.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut base = TrainConfig::default();
        let mut kv = Vec::new();
        let mut axis = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ExperimentError::Spec(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim().trim_matches('"'));
            match k {
                "axis" => axis = Some(v.parse::<Axis>()?),
                "name" | "values" | "seeds" | "layouts" | "eval.layouts" | "width" | "height" | "data.seed" => {
                    kv.push((k.to_string(), v.to_string()))
                }
                _ => base.set(k, v)?,
            }
        }
        let axis = axis.ok_or_else(|| ExperimentError::Spec("missing `axis`".into()))?;
        let mut spec = Self::new("ablation", base, axis);
        let int = |k: &str, v: &str| v.parse::<usize>().map_err(|_| ExperimentError::Spec(format!("bad `{k}` = `{v}`")));
        for (k, v) in kv {
            match k.as_str() {
                "name" => spec.name = v,
                "values" => spec.values = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                "seeds" => spec.seeds = (0..int(&k, &v)? as u64).collect(),
                "layouts" => spec.layouts = int(&k, &v)?,
                "eval.layouts" => spec.eval_layouts = int(&k, &v)?,
                "width" => spec.width = int(&k, &v)?,
                "height" => spec.height = int(&k, &v)?,
                "data.seed" => spec.data_seed = int(&k, &v)? as u64,
                _ => unreachable!(),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Spec("at least one seed is required".into()));
        }
        if self.values.is_empty() {
            return Err(ExperimentError::Spec("no sweep values".into()));
        }
        if self.eval_layouts == 0 || self.layouts == 0 {
            return Err(ExperimentError::Spec("layouts and eval.layouts must be positive".into()));
        }
        SceneConfig::with_size(self.width, self.height).validate()?;
        for v in &self.values {
            self.setting(v)?;
        }
        Ok(())
    }

    /// Applies one sweep value to the base config.
    pub fn setting(&self, value: &str) -> Result<RunSetting, ExperimentError> {
        let mut config = self.base.clone();
        let mut layouts = self.layouts;
        let bad = |why: String| ExperimentError::Spec(format!("{} value `{value}`: {why}", self.axis));
        match self.axis {
            Axis::Appearance => {
                let protocol: AppearanceProtocol = value.parse().map_err(bad)?;
                if matches!(protocol, AppearanceProtocol::Single(_)) {
                    config.align = Alignment::None;
                }
                config.protocol = protocol;
            }
            Axis::Metric => config.set("align.metric", value).map_err(|e| bad(e.to_string()))?,
            Axis::Blocks => config.blocks = value.parse::<BlockSet>().map_err(|e| bad(e.to_string()))?,
            Axis::DatasetSize => {
                layouts = value.parse().map_err(|_| bad("not a layout count".into()))?;
                if layouts == 0 {
                    return Err(bad("must be positive".into()));
                }
            }
        }
        config.validate().map_err(|e| bad(e.to_string()))?;
        Ok(RunSetting { value: value.to_string(), config, layouts })
    }
}

/// One CSV row of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub experiment: String,
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub status: String,
    /// Held-out layouts under the four training appearances.
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    /// Held-out layouts under the unseen dusk appearance.
    pub miou_unseen: Option<f64>,
    pub macc_unseen: Option<f64>,
    pub wall_clock_s: f64,
}

impl RunRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub const RESULTS_HEADER: &str = "experiment,axis,value,seed,status,miou,macc,miou_unseen,macc_unseen,wall_clock_s";

/// Trains and scores settings, caching datasets and finished runs so that
/// identical settings across sweeps run once.
pub struct Runner {
    width: usize,
    height: usize,
    data_seed: u64,
    eval: Arc<SceneDataset>,
    datasets: Mutex<HashMap<usize, Arc<SceneDataset>>>,
    targets: Mutex<HashMap<(usize, usize), Arc<TargetImages>>>,
    memo: Mutex<HashMap<(String, usize), Outcome>>,
    threads: usize,
}

#[derive(Clone, Debug)]
struct Outcome {
    status: String,
    scores: [Option<f64>; 4],
    wall_clock_s: f64,
}

/// Worker count from `ALIGNLAB_THREADS`, else the available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("ALIGNLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

impl Runner {
    pub fn new(width: usize, height: usize, data_seed: u64, eval_layouts: usize) -> Result<Self, ExperimentError> {
        let cfg = SceneConfig::with_size(width, height);
        let eval = SceneDataset::generate(data_seed, &cfg, EVAL_OFFSET..EVAL_OFFSET + eval_layouts as u64, true)?;
        Ok(Self {
            width,
            height,
            data_seed,
            eval: Arc::new(eval),
            datasets: Mutex::new(HashMap::new()),
            targets: Mutex::new(HashMap::new()),
            memo: Mutex::new(HashMap::new()),
            threads: thread_budget(),
        })
    }

    pub fn for_spec(spec: &ExperimentSpec) -> Result<Self, ExperimentError> {
        Self::new(spec.width, spec.height, spec.data_seed, spec.eval_layouts)
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn eval_split(&self) -> &SceneDataset {
        &self.eval
    }

    fn dataset(&self, layouts: usize) -> Result<Arc<SceneDataset>, ExperimentError> {
        if let Some(d) = self.datasets.lock().unwrap().get(&layouts) {
            return Ok(d.clone());
        }
        let cfg = SceneConfig::with_size(self.width, self.height);
        let d = Arc::new(SceneDataset::generate(self.data_seed, &cfg, 0..layouts as u64, false)?);
        Ok(self.datasets.lock().unwrap().entry(layouts).or_insert(d).clone())
    }

    fn target(&self, layouts: usize, appearance: usize) -> Result<Arc<TargetImages>, ExperimentError> {
        if let Some(t) = self.targets.lock().unwrap().get(&(layouts, appearance)) {
            return Ok(t.clone());
        }
        let cfg = SceneConfig::with_size(self.width, self.height);
        let range = TARGET_OFFSET..TARGET_OFFSET + layouts as u64;
        let data = SceneDataset::generate_with(self.data_seed, &cfg, range, &[appearance])?;
        let t = Arc::new(TargetImages::from_dataset(&data, appearance)?);
        Ok(self.targets.lock().unwrap().entry((layouts, appearance)).or_insert(t).clone())
    }

    fn execute(&self, setting: &RunSetting) -> Outcome {
        let run = || -> Result<[Option<f64>; 4], ExperimentError> {
            let data = self.dataset(setting.layouts)?;
            let out = match setting.config.mode {
                Mode::Dg => train_dg(&setting.config, &data, None)?,
                Mode::Uda => {
                    let target = self.target(setting.layouts, setting.config.target_appearance)?;
                    train_uda(&setting.config, &data, &target, None)?
                }
            };
            let seen = evaluate(&out.params, EvalSet { data: &self.eval, appearances: &SEEN_APPEARANCES })?.scores();
            let unseen = evaluate(&out.params, EvalSet { data: &self.eval, appearances: &UNSEEN_APPEARANCES })?.scores();
            Ok([seen.miou, seen.macc, unseen.miou, unseen.macc])
        };
        let started = std::time::Instant::now();
        let (status, scores) = match run() {
            Ok(s) => ("ok".to_string(), s),
            Err(e) => (format!("failed: {e}").replace([',', '\n'], ";"), [None; 4]),
        };
        Outcome { status, scores, wall_clock_s: started.elapsed().as_secs_f64() }
    }

    /// Runs (or recalls) every `(setting, seed)` job, in parallel up to the
    /// thread budget, and returns outcomes in job order.
    fn run_jobs(&self, jobs: &[(RunSetting, u64)]) -> Vec<Outcome> {
        let keyed: Vec<(String, usize)> = jobs
            .iter()
            .map(|(s, seed)| {
                let mut c = s.config.clone();
                c.seed = *seed;
                (c.to_text(), s.layouts)
            })
            .collect();
        let mut pending: Vec<usize> = Vec::new();
        {
            let memo = self.memo.lock().unwrap();
            for (i, k) in keyed.iter().enumerate() {
                if !memo.contains_key(k) && !pending.iter().any(|&p| keyed[p] == *k) {
                    pending.push(i);
                }
            }
        }
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..self.threads.min(pending.len()) {
                scope.spawn(|| loop {
                    let n = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&i) = pending.get(n) else { break };
                    let (setting, seed) = &jobs[i];
                    let mut s = setting.clone();
                    s.config.seed = *seed;
                    let outcome = self.execute(&s);
                    self.memo.lock().unwrap().insert(keyed[i].clone(), outcome);
                });
            }
        });
        let memo = self.memo.lock().unwrap();
        keyed.iter().map(|k| memo[k].clone()).collect()
    }

    /// Runs the full cross product of sweep values and seeds.
    pub fn ablate(&self, spec: &ExperimentSpec) -> Result<Vec<RunRow>, ExperimentError> {
        spec.validate()?;
        let mut jobs = Vec::new();
        for v in &spec.values {
            let setting = spec.setting(v)?;
            for &seed in &spec.seeds {
                jobs.push((setting.clone(), seed));
            }
        }
        let outcomes = self.run_jobs(&jobs);
        Ok(jobs
            .iter()
            .zip(outcomes)
            .map(|((setting, seed), o)| RunRow {
                experiment: spec.name.clone(),
                axis: spec.axis.name().to_string(),
                value: setting.value.clone(),
                seed: *seed,
                status: o.status,
                miou: o.scores[0],
                macc: o.scores[1],
                miou_unseen: o.scores[2],
                macc_unseen: o.scores[3],
                wall_clock_s: o.wall_clock_s,
            })
            .collect())
    }
}

pub fn rows_to_csv(rows: &[RunRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    if rows.is_empty() {
        return format!("{RESULTS_HEADER}\n");
    }
    for r in rows {
        w.serialize(r).expect("rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

pub fn rows_from_csv(text: &str) -> Result<Vec<RunRow>, ExperimentError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| ExperimentError::Csv(e.to_string()))?.iter().collect::<Vec<_>>().join(",");
    if header != RESULTS_HEADER {
        return Err(ExperimentError::Csv(format!("unexpected header `{header}`")));
    }
    r.deserialize().collect::<Result<Vec<RunRow>, _>>().map_err(|e| ExperimentError::Csv(e.to_string()))
}

/// Means over successful seeds of one sweep value.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueSummary {
    pub value: String,
    pub runs: usize,
    pub failed: usize,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    pub miou_unseen: Option<f64>,
    pub macc_unseen: Option<f64>,
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Groups rows by value in first-appearance order.
pub fn summarize(rows: &[RunRow]) -> Vec<ValueSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.value.as_str()) {
            order.push(&r.value);
        }
    }
    order
        .into_iter()
        .map(|value| {
            let group: Vec<&RunRow> = rows.iter().filter(|r| r.value == value).collect();
            let ok: Vec<&&RunRow> = group.iter().filter(|r| r.ok()).collect();
            ValueSummary {
                value: value.to_string(),
                runs: ok.len(),
                failed: group.len() - ok.len(),
                miou: mean(ok.iter().map(|r| r.miou)),
                macc: mean(ok.iter().map(|r| r.macc)),
                miou_unseen: mean(ok.iter().map(|r| r.miou_unseen)),
                macc_unseen: mean(ok.iter().map(|r| r.macc_unseen)),
            }
        })
        .collect()
}

/// Least-squares slope of `y` against `x`.
pub fn slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

/// Markdown table of per-value means, regenerated from results CSV text.
pub fn report_text(csv_text: &str) -> Result<String, ExperimentError> {
    let rows = rows_from_csv(csv_text)?;
    let title = rows.first().map(|r| format!("{} ({})", r.experiment, r.axis)).unwrap_or_else(|| "empty".into());
    let mut out = format!("# {title}\n\n| value | runs | failed | mIoU | mAcc | mIoU unseen | mAcc unseen |\n|---|---|---|---|---|---|---|\n");
    for s in summarize(&rows) {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            s.value,
            s.runs,
            s.failed,
            pct(s.miou),
            pct(s.macc),
            pct(s.miou_unseen),
            pct(s.macc_unseen)
        );
    }
    Ok(out)
}

/// Line chart of mean mIoU per value with per-seed markers, for both
/// evaluation splits.
pub fn report_svg(csv_text: &str) -> Result<String, ExperimentError> {
    let rows = rows_from_csv(csv_text)?;
    let summary = summarize(&rows);
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 20.0, 40.0, 60.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let ys: Vec<f64> = rows.iter().filter(|r| r.ok()).flat_map(|r| [r.miou, r.miou_unseen]).flatten().collect();
    let lo = (ys.iter().cloned().fold(f64::INFINITY, f64::min) * 20.0).floor() / 20.0;
    let hi = (ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * 20.0).ceil() / 20.0;
    let (lo, hi) = if ys.is_empty() { (0.0, 1.0) } else if hi > lo { (lo, hi) } else { (lo - 0.05, hi + 0.05) };
    let n = summary.len().max(1);
    let x_of = |i: usize| left + plot_w * (i as f64 + 0.5) / n as f64;
    let y_of = |v: f64| top + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    let title = rows.first().map(|r| format!("{}: mIoU by {}", r.experiment, r.axis)).unwrap_or_default();
    let _ = writeln!(svg, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", w / 2.0, title);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            "<line x1=\"{left}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\n<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{:.1}</text>",
            w - right,
            left - 6.0,
            y + 4.0,
            100.0 * v
        );
    }
    let _ = writeln!(
        svg,
        "<path d=\"M{left} {top} V{:.2} H{:.2}\" fill=\"none\" stroke=\"black\"/>",
        top + plot_h,
        w - right
    );
    for (i, s) in summary.iter().enumerate() {
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", x_of(i), top + plot_h + 18.0, s.value);
    }
    let series: [(&str, &str, fn(&RunRow) -> Option<f64>, fn(&ValueSummary) -> Option<f64>); 2] = [
        ("seen appearances", "#1f77b4", |r| r.miou, |s| s.miou),
        ("unseen appearance", "#d62728", |r| r.miou_unseen, |s| s.miou_unseen),
    ];
    for (k, (label, color, per_run, per_value)) in series.iter().enumerate() {
        let mut d = String::new();
        for (i, s) in summary.iter().enumerate() {
            if let Some(v) = per_value(s) {
                let _ = write!(d, "{}{:.2} {:.2}", if d.is_empty() { "M" } else { " L" }, x_of(i), y_of(v));
            }
            for r in rows.iter().filter(|r| r.ok() && r.value == s.value) {
                if let Some(v) = per_run(r) {
                    let _ = writeln!(
                        svg,
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"none\" stroke=\"{color}\"/>",
                        x_of(i),
                        y_of(v)
                    );
                }
            }
        }
        if !d.is_empty() {
            let _ = writeln!(svg, "<path d=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>");
        }
        let ly = top + plot_h + 40.0;
        let lx = left + 200.0 * k as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{:.0}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{:.0}\" y=\"{:.0}\">{label} (mean; circles per seed)</text>",
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
