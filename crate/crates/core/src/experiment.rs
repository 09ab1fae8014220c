//! Run manifests and the end-to-end pipeline steps driven by the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::data::{format_timestamp, load_speed_csv, make_windows, write_speed_csv, SpeedSeries, SplitDatasets, SplitSpec};
use crate::error::{input_err, Result, StgcnError};
use crate::evaluation::{metrics, truths, HistoricalAverage, ReportRow};
use crate::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::graph::io::{load_adjacency, load_distances, save_adjacency};
use crate::graph::{build_adjacency_with_ids, normalized_laplacian, AdjacencyConfig, LaplacianBundle, WeightedGraph};
use crate::layers::{BlockChannels, GraphConvKind, GraphConvLayer, ModelConfig, OutputHead, StConvBlock, StgcnModel, TemporalConvLayer};
use crate::synth::{generate, write_distances, SynthConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{history_csv, predict_direct, rollout_dataset, rollout_predict, train, TrainConfig, TrainOutcome};

/// Scalar type used for model parameters and activations. Graph operators
/// are always computed in `f64` and converted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cheb,
    FirstOrder,
}

/// Everything one run needs. Relative paths resolve against the directory
/// holding the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub speed_csv: Option<PathBuf>,
    pub distance_csv: Option<PathBuf>,
    /// Used instead of `distance_csv` when set.
    pub adjacency_csv: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub variant: Variant,
    /// Chebyshev order `K` (ignored by `first_order`).
    pub cheb_k: usize,
    pub kt: usize,
    pub blocks: Vec<BlockChannels>,
    pub layer_norm_eps: f64,
    /// History length `M`.
    pub history: usize,
    /// Forecast horizons in steps.
    pub horizons: Vec<usize>,
    pub interval_minutes: u32,
    pub split: SplitSpec,
    pub adjacency: AdjacencyConfig,
    pub train: TrainConfig,
    /// Drop Saturdays and Sundays before windowing.
    pub workdays_only: bool,
    /// Seeds parameter initialization and batch shuffling.
    pub seed: u64,
    pub precision: Precision,
    /// Generator settings, recorded by `synth`.
    pub synthetic: Option<SynthConfig>,
}

impl Default for RunManifest {
    fn default() -> Self {
        let standard = ModelConfig::standard(1);
        Self {
            speed_csv: None,
            distance_csv: None,
            adjacency_csv: None,
            output_dir: PathBuf::from("out"),
            variant: Variant::Cheb,
            cheb_k: 3,
            kt: standard.kt,
            blocks: standard.blocks,
            layer_norm_eps: standard.layer_norm_eps,
            history: standard.history,
            horizons: vec![3, 6, 9],
            interval_minutes: 5,
            split: SplitSpec::default(),
            adjacency: AdjacencyConfig::default(),
            train: TrainConfig::default(),
            workdays_only: false,
            seed: 0,
            precision: Precision::F64,
            synthetic: None,
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunManifest {
    /// Reads a manifest and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Reads a manifest, applies `key=value` overrides in order, then
    /// resolves relative paths (including overridden ones).
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| StgcnError::io(path, e))?;
        let mut m: RunManifest =
            serde_json::from_str(&text).map_err(|e| input_err!("manifest {}: {e}", path.display()))?;
        for o in overrides {
            m.apply_override(o)?;
        }
        m.validate()?;
        m.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(m)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.speed_csv);
        resolve(base, &mut self.distance_csv);
        resolve(base, &mut self.adjacency_csv);
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    /// Applies `key=value` with a dotted key such as `train.epochs`. The
    /// value is parsed as JSON, falling back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| input_err!("override {assignment:?} is not key=value"))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut slot = &mut tree;
        for part in key.split('.') {
            let obj = slot
                .as_object_mut()
                .ok_or_else(|| input_err!("override key {key:?}: {part:?} is not inside an object"))?;
            slot = obj.entry(part.to_string()).or_insert(Value::Null);
        }
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| input_err!("override {assignment:?}: {e}"))?;
        Ok(())
    }

    pub fn graph_conv(&self) -> GraphConvKind {
        match self.variant {
            Variant::Cheb => GraphConvKind::Chebyshev { k: self.cheb_k },
            Variant::FirstOrder => GraphConvKind::FirstOrder,
        }
    }

    pub fn model_config(&self, nodes: usize) -> ModelConfig {
        ModelConfig {
            nodes,
            history: self.history,
            kt: self.kt,
            graph_conv: self.graph_conv(),
            blocks: self.blocks.clone(),
            layer_norm_eps: self.layer_norm_eps,
        }
    }

    pub fn max_horizon(&self) -> usize {
        self.horizons.iter().copied().max().unwrap_or(1).max(self.train.target_step)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(input_err!("horizons must be a nonempty list of steps >= 1"));
        }
        self.train.validate()?;
        self.adjacency.validate()?;
        self.model_config(1).validate()
    }

    fn speed_path(&self) -> Result<&Path> {
        self.speed_csv.as_deref().ok_or_else(|| input_err!("manifest has no speed_csv"))
    }

    fn ensure_output_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir).map_err(|e| StgcnError::io(&self.output_dir, e))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.stgc")
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| StgcnError::io(path, e))
}

/// Reads the speed series and applies interpolation and workday filtering.
pub fn load_series(m: &RunManifest) -> Result<SpeedSeries> {
    let raw = load_speed_csv(m.speed_path()?, m.interval_minutes)?;
    let series = raw.interpolate_missing()?;
    if m.workdays_only {
        series.filter_workdays()
    } else {
        Ok(series)
    }
}

/// Builds the graph from the adjacency file or the distance file. With
/// `station_order`, nodes follow that order.
pub fn load_graph(m: &RunManifest, station_order: Option<&[String]>) -> Result<WeightedGraph<f64>> {
    if let Some(path) = &m.adjacency_csv {
        let graph = load_adjacency(path)?;
        return match station_order {
            Some(order) if order != graph.node_ids() => {
                let perm = order
                    .iter()
                    .map(|id| {
                        graph
                            .node_ids()
                            .iter()
                            .position(|g| g == id)
                            .ok_or_else(|| input_err!("station {id} missing from adjacency file"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if perm.len() != graph.n() {
                    return Err(input_err!("adjacency has {} stations, speeds have {}", graph.n(), perm.len()));
                }
                graph.permuted(&perm)
            }
            _ => Ok(graph),
        };
    }
    let path = m
        .distance_csv
        .as_deref()
        .ok_or_else(|| input_err!("manifest needs distance_csv or adjacency_csv"))?;
    let table = load_distances(path, station_order)?;
    build_adjacency_with_ids(table.node_ids, &table.records, &m.adjacency)
}

/// Series, graph, Laplacian bundle and windowed splits of one manifest.
pub struct Prepared {
    pub series: SpeedSeries,
    pub graph: WeightedGraph<f64>,
    pub bundle: LaplacianBundle<f64>,
    pub datasets: SplitDatasets,
}

pub fn prepare(m: &RunManifest) -> Result<Prepared> {
    m.validate()?;
    let series = load_series(m)?;
    let graph = load_graph(m, Some(&series.station_ids))?;
    let bundle = normalized_laplacian(&graph)?;
    let datasets = make_windows(&series, m.history, m.max_horizon(), &m.split)?;
    Ok(Prepared { series, graph, bundle, datasets })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphSummary {
    pub n: usize,
    pub edges: usize,
    pub lambda_max: f64,
}

/// Writes `adjacency.csv` and `graph_summary.json` to the output directory.
pub fn run_build_graph(m: &RunManifest) -> Result<GraphSummary> {
    m.adjacency.validate()?;
    let order = match &m.speed_csv {
        Some(_) => Some(load_series(m)?.station_ids),
        None => None,
    };
    let graph = load_graph(m, order.as_deref())?;
    let bundle = normalized_laplacian(&graph)?;
    let summary = GraphSummary {
        n: graph.n(),
        edges: graph.edge_count(),
        lambda_max: bundle.lambda_max,
    };
    if summary.edges == 0 {
        log::warn!("graph has no edges above epsilon={}; every node is isolated", m.adjacency.epsilon);
    }
    m.ensure_output_dir()?;
    save_adjacency(&graph, &m.output_dir.join("adjacency.csv"))?;
    write_file(&m.output_dir.join("graph_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Calls `$f::<T>($args)` with `T` chosen by the manifest precision.
macro_rules! with_precision {
    ($m:expr, $f:ident($($arg:expr),*)) => {
        match $m.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn train_typed<T: Scalar>(m: &RunManifest, p: &Prepared) -> Result<TrainOutcome> {
    let bundle = p.bundle.cast::<T>();
    let model = StgcnModel::<T>::new(m.model_config(p.graph.n()), &bundle, m.seed)?;
    log::info!(
        "training {} parameters on {} windows ({} validation)",
        model.parameter_count(),
        p.datasets.train.len(),
        p.datasets.val.len()
    );
    train(&model, &p.datasets.train, &p.datasets.val, &m.train_config())
}

/// Trains from scratch and writes `checkpoint.stgc` and `history.csv`.
pub fn run_train(m: &RunManifest) -> Result<TrainOutcome> {
    let p = prepare(m)?;
    m.ensure_output_dir()?;
    let outcome = match with_precision!(m, train_typed(m, &p)) {
        Ok(o) => o,
        Err(StgcnError::Diverged { message, last_good }) => {
            let path = m.output_dir.join("last_good.stgc");
            last_good.save(&path)?;
            return Err(StgcnError::Diverged {
                message: format!("{message}; last good parameters saved to {}", path.display()),
                last_good,
            });
        }
        Err(e) => return Err(e),
    };
    outcome.best.save(&m.checkpoint_path())?;
    write_file(&m.output_dir.join("history.csv"), history_csv(&outcome.history))?;
    Ok(outcome)
}

fn model_label(m: &RunManifest) -> &'static str {
    match m.variant {
        Variant::Cheb => "STGCN(Cheb)",
        Variant::FirstOrder => "STGCN(1st)",
    }
}

fn model_reports<T: Scalar>(m: &RunManifest, p: &Prepared, ckpt: &Checkpoint) -> Result<Vec<ReportRow>> {
    let test = &p.datasets.test;
    let model = ckpt.restore(&p.bundle.cast::<T>())?;
    let step = ckpt.descriptor.target_step;
    let row = |pred: &[f64], h: usize| -> Result<ReportRow> {
        Ok(ReportRow {
            model: model_label(m).to_string(),
            report: metrics(pred, &truths(test, h), h, m.interval_minutes)?,
        })
    };
    if step == 1 {
        let max_h = m.horizons.iter().copied().max().unwrap_or(1);
        let preds = rollout_dataset(&model, test, max_h, m.train.eval_batch_size)?;
        m.horizons.iter().map(|&h| row(&preds[h - 1], h)).collect()
    } else {
        if !m.horizons.contains(&step) {
            log::warn!("checkpoint predicts step {step} directly; other horizons are skipped");
        }
        Ok(vec![row(&predict_direct(&model, test, m.train.eval_batch_size)?, step)?])
    }
}

/// Test-split metrics of the checkpoint (when given) and the historical
/// average at every manifest horizon. Writes `report.csv`.
pub fn run_eval(m: &RunManifest, checkpoint: Option<&Path>) -> Result<Vec<ReportRow>> {
    let p = prepare(m)?;
    let test = &p.datasets.test;
    if test.is_empty() {
        return Err(input_err!("test split has no windows"));
    }
    let mut rows = Vec::new();
    if let Some(path) = checkpoint {
        let ckpt = Checkpoint::load(path)?;
        rows.extend(with_precision!(m, model_reports(m, &p, &ckpt))?);
    }
    let ha = HistoricalAverage::fit(&p.datasets.train)?;
    for &h in &m.horizons {
        let report = metrics(&ha.predict(test, h), &truths(test, h), h, m.interval_minutes)?;
        rows.push(ReportRow { model: "HA".to_string(), report });
    }
    rows.sort_by_key(|r| r.report.horizon_steps);
    m.ensure_output_dir()?;
    write_file(&m.output_dir.join("report.csv"), crate::evaluation::report_csv(&rows))?;
    Ok(rows)
}

fn forecast_typed<T: Scalar>(m: &RunManifest, p: &Prepared, ckpt: &Checkpoint, window: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let model = ckpt.restore(&p.bundle.cast::<T>())?;
    let stats = ckpt.descriptor.zscore.unwrap_or(p.datasets.stats);
    let history = p.datasets.test.history_raw(window);
    let n = p.graph.n();
    let step = ckpt.descriptor.target_step;
    if step == 1 {
        let h = m.horizons.iter().copied().max().unwrap_or(1);
        let out = rollout_predict(&model, history, h, &stats)?;
        Ok((1..=h).map(|s| (s, out[(s - 1) * n..s * n].to_vec())).collect())
    } else {
        Ok(vec![(step, rollout_predict(&model, history, 1, &stats)?)])
    }
}

/// Forecast for test window `window` (the last one when `None`) as CSV rows
/// `step,timestamp,<station ids>`, in original units.
pub fn run_predict(m: &RunManifest, checkpoint: &Path, window: Option<usize>) -> Result<String> {
    let p = prepare(m)?;
    let test = &p.datasets.test;
    if test.is_empty() {
        return Err(input_err!("test split has no windows"));
    }
    let i = window.unwrap_or(test.len() - 1);
    if i >= test.len() {
        return Err(input_err!("window {i} out of range; the test split has {}", test.len()));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let forecasts = with_precision!(m, forecast_typed(m, &p, &ckpt, i))?;

    let mut out = format!("step,timestamp,{}\n", p.series.station_ids.join(","));
    let last = test.target_row(i, 1) - 1;
    let interval = chrono::Duration::minutes(i64::from(m.interval_minutes));
    for (s, values) in forecasts {
        let ts = p
            .series
            .timestamps
            .as_ref()
            .map(|ts| format_timestamp(&(ts[last] + interval * s as i32)))
            .unwrap_or_default();
        let cells: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("{s},{ts},{}\n", cells.join(",")));
    }
    m.ensure_output_dir()?;
    write_file(&m.output_dir.join("forecast.csv"), &out)?;
    Ok(out)
}

/// Generates a synthetic dataset into `dir`: `speeds.csv`, `distances.csv`
/// and a ready-to-run `manifest.json`.
pub fn run_synth(cfg: &SynthConfig, dir: &Path) -> Result<RunManifest> {
    let data = generate(cfg)?;
    fs::create_dir_all(dir).map_err(|e| StgcnError::io(dir, e))?;
    let speeds = dir.join("speeds.csv");
    let file = fs::File::create(&speeds).map_err(|e| StgcnError::io(&speeds, e))?;
    write_speed_csv(&data.series, std::io::BufWriter::new(file)).map_err(|e| StgcnError::io(&speeds, e))?;
    let distances = dir.join("distances.csv");
    let file = fs::File::create(&distances).map_err(|e| StgcnError::io(&distances, e))?;
    write_distances(&data.distances, file).map_err(|e| StgcnError::io(&distances, e))?;

    let manifest = RunManifest {
        speed_csv: Some("speeds.csv".into()),
        distance_csv: Some("distances.csv".into()),
        output_dir: "out".into(),
        interval_minutes: cfg.interval_minutes,
        adjacency: cfg.adjacency,
        seed: cfg.seed,
        synthetic: Some(cfg.clone()),
        ..RunManifest::default()
    };
    write_file(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], param: bool) -> Result<Tensor<f64>> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    if param {
        Tensor::param(shape, data)
    } else {
        Tensor::new(shape, data)
    }
}

/// Random weighted graph on `n` nodes with roughly half the pairs connected.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Result<WeightedGraph<f64>> {
    let mut dense = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.5) {
                let w = rng.random_range(0.1..1.0);
                dense[i * n + j] = w;
                dense[j * n + i] = w;
            }
        }
    }
    WeightedGraph::from_dense((0..n).map(|i| i.to_string()).collect(), &dense)
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output coordinate
/// contributes a distinct weight.
fn projected_loss(out: &Tensor<f64>, r: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(out.mul(r)?.sum())
}

fn with_prefix(prefix: &str, params: Vec<(String, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    params.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Finite-difference checks for every layer type on small random instances.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradCheckConfig { seed, ..GradCheckConfig::default() };
    let n = 5;
    let bundle = normalized_laplacian(&random_graph(&mut rng, n)?)?;
    let mut reports = Vec::new();

    for (label, kind) in [
        ("graph_conv_cheb", GraphConvKind::Chebyshev { k: 3 }),
        ("graph_conv_first_order", GraphConvKind::FirstOrder),
    ] {
        let layer = GraphConvLayer::new(kind, 2, 3, &bundle, &mut rng)?;
        let x = random_tensor(&mut rng, &[2, 3, n, 2], true)?;
        let r = random_tensor(&mut rng, &[2, 3, n, 3], false)?;
        let mut inputs = with_prefix("layer", layer.parameters());
        inputs.push(("input".into(), x.clone()));
        reports.push(check_gradients(label, &inputs, || projected_loss(&layer.forward(&x)?, &r), cfg)?);
    }

    for (label, ci, co) in [("temporal_conv_projected", 2, 3), ("temporal_conv_identity", 3, 3)] {
        let layer = TemporalConvLayer::new(3, ci, co, &mut rng)?;
        let x = random_tensor(&mut rng, &[2, 6, n, ci], true)?;
        let r = random_tensor(&mut rng, &[2, 4, n, co], false)?;
        let mut inputs = with_prefix("layer", layer.parameters());
        inputs.push(("input".into(), x.clone()));
        reports.push(check_gradients(label, &inputs, || projected_loss(&layer.forward(&x)?, &r), cfg)?);
    }

    {
        let x = random_tensor(&mut rng, &[2, 3, n, 4], true)?;
        let gain = random_tensor(&mut rng, &[n, 4], true)?;
        let bias = random_tensor(&mut rng, &[n, 4], true)?;
        let r = random_tensor(&mut rng, &[2, 3, n, 4], false)?;
        let inputs = vec![("input".into(), x.clone()), ("gain".into(), gain.clone()), ("bias".into(), bias.clone())];
        reports.push(check_gradients(
            "layer_norm",
            &inputs,
            || projected_loss(&x.layer_norm(&gain, &bias, 1e-5)?, &r),
            cfg,
        )?);
    }

    {
        let block = StConvBlock::new((2, 3, 4), 2, GraphConvKind::Chebyshev { k: 2 }, &bundle, 1e-5, &mut rng)?;
        let x = random_tensor(&mut rng, &[2, 7, n, 2], true)?;
        let r = random_tensor(&mut rng, &[2, 5, n, 4], false)?;
        let mut inputs = with_prefix("block", block.parameters());
        inputs.push(("input".into(), x.clone()));
        reports.push(check_gradients("st_conv_block", &inputs, || projected_loss(&block.forward(&x)?, &r), cfg)?);
    }

    {
        let head = OutputHead::new(3, 4, &mut rng)?;
        let x = random_tensor(&mut rng, &[2, 3, n, 4], true)?;
        let r = random_tensor(&mut rng, &[2, n, 1], false)?;
        let mut inputs = with_prefix("head", head.parameters());
        inputs.push(("input".into(), x.clone()));
        reports.push(check_gradients("output_head", &inputs, || projected_loss(&head.forward(&x)?, &r), cfg)?);
    }

    {
        let config = ModelConfig {
            nodes: n,
            history: 8,
            kt: 2,
            graph_conv: GraphConvKind::Chebyshev { k: 2 },
            blocks: vec![BlockChannels(1, 2, 3), BlockChannels(3, 2, 3)],
            layer_norm_eps: 1e-5,
        };
        let model = StgcnModel::new(config, &bundle, rng.random())?;
        let x = random_tensor(&mut rng, &[2, 8, n, 1], false)?;
        let y = random_tensor(&mut rng, &[2, n, 1], false)?;
        reports.push(check_gradients(
            "full_model",
            &model.parameters(),
            || crate::training::l2_loss(&model.forward(&x)?, &y),
            cfg,
        )?);
    }
    Ok(reports)
}
