//! Experiment harness: configuration, dataset cache, accuracy grids, the
//! window and penetration sweeps, placement runs, acceptance checks and the
//! report directory.
//!
//! Everything written to a report directory is a deterministic function of
//! the configuration. Wall-clock timings are only returned in memory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{self, DecisionTree, EvalReport, TreeParams};
use crate::dynamics_sim::{self, DatasetManifest, ScenarioConfig, ScenarioCounts, ScenarioRecord};
use crate::error::{Error, Result};
use crate::features::{self, AdAggregate, FeatureMode, FeatureOptions, FeatureVector, PredictionDomain, DEFAULT_JUMP_THRESHOLD};
use crate::grid_model::{BusId, NetworkModel};
use crate::measurement::{self, ChannelErrorModel, DEFAULT_PMU_SIGMA};
use crate::placement::{self, PlacementProblem, PlacementSolution, SolveMode};
use crate::seed;
use crate::stats;

/// Scenario generation knobs beyond counts, wind and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioKnobs {
    pub horizon_s: f64,
    pub dt: f64,
    pub t_c_range: (f64, f64),
    pub load_scale_range: (f64, f64),
    pub clearing_time_range: (f64, f64),
    pub damping_pu: f64,
    pub fault_retention: f64,
    pub max_cut_branches: usize,
    pub max_cuts: usize,
    pub cut_pool: usize,
    pub min_island_buses: usize,
    pub island_mismatch: Option<(f64, f64)>,
    pub max_retries: usize,
}

impl Default for ScenarioKnobs {
    fn default() -> Self {
        let c = ScenarioConfig::new(
            ScenarioCounts {
                islanding: 1,
                non_islanding: 1,
            },
            0.0,
            0,
            Vec::new(),
        );
        ScenarioKnobs {
            horizon_s: c.horizon_s,
            dt: c.dt,
            t_c_range: c.t_c_range,
            load_scale_range: c.load_scale_range,
            clearing_time_range: c.clearing_time_range,
            damping_pu: c.damping_pu,
            fault_retention: c.fault_retention,
            max_cut_branches: c.max_cut_branches,
            max_cuts: c.max_cuts,
            cut_pool: c.cut_pool,
            min_island_buses: c.min_island_buses,
            island_mismatch: c.island_mismatch,
            max_retries: c.max_retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementConfig {
    pub mode: SolveMode,
    pub substation_cost: f64,
    pub dulr_cost: f64,
    pub strict: bool,
    pub node_budget: u64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            mode: SolveMode::Exact,
            substation_cost: 1.0,
            dulr_cost: 0.1,
            strict: false,
            node_budget: placement::DEFAULT_NODE_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Bundled network name or path to a network JSON file.
    pub network: String,
    pub wind_fractions: Vec<f64>,
    /// Instrumentation offset half-widths, degrees.
    pub instr_ranges: Vec<f64>,
    pub pmu_sigma: f64,
    pub modes: Vec<FeatureMode>,
    /// Post-contingency window, samples.
    pub window: usize,
    pub trials: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub counts: ScenarioCounts,
    pub seed: u64,
    /// PMU buses; empty means "take them from the placement solution".
    pub pmu_buses: Vec<BusId>,
    pub placement: PlacementConfig,
    pub jump_threshold: f64,
    pub domain: PredictionDomain,
    pub ad_aggregate: AdAggregate,
    pub cuspad_abs: bool,
    pub window_sweep: Vec<usize>,
    /// Error level the window sweep is scored at, degrees.
    pub window_sweep_instr_range: f64,
    pub scenario: ScenarioKnobs,
    /// Errors injected into the training features too (ablation); `None`
    /// trains on the true angles.
    pub train_errors: Option<ChannelErrorModel>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::net18()
    }
}

fn overlay(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// 18-bus system with its built-in wind farm.
    pub fn net18() -> Self {
        ExperimentConfig {
            network: "net18".into(),
            wind_fractions: vec![0.0],
            instr_ranges: vec![0.0, 0.1, 1.0, 2.0, 4.0],
            pmu_sigma: DEFAULT_PMU_SIGMA,
            modes: FeatureMode::ALL.to_vec(),
            window: 30,
            trials: 50,
            max_depth: 5,
            min_leaf: 1,
            counts: ScenarioCounts {
                islanding: 200,
                non_islanding: 267,
            },
            seed: 42,
            pmu_buses: vec![1, 11, 14, 23, 31],
            placement: PlacementConfig::default(),
            jump_threshold: DEFAULT_JUMP_THRESHOLD,
            domain: PredictionDomain::Phasor,
            ad_aggregate: AdAggregate::MaxAbs,
            cuspad_abs: false,
            window_sweep: vec![5, 10, 20, 30, 40, 50, 60],
            window_sweep_instr_range: 4.0,
            scenario: ScenarioKnobs {
                island_mismatch: Some((0.03, 0.10)),
                ..ScenarioKnobs::default()
            },
            train_errors: None,
        }
    }

    /// 118-bus system at 10-30% wind, PMUs from the placement solution.
    pub fn net118() -> Self {
        ExperimentConfig {
            network: "net118".into(),
            wind_fractions: vec![0.1, 0.2, 0.3],
            max_depth: 4,
            counts: ScenarioCounts {
                islanding: 1000,
                non_islanding: 1000,
            },
            pmu_buses: Vec::new(),
            window_sweep: Vec::new(),
            ..ExperimentConfig::net18()
        }
    }

    /// Preset for a bundled network name; other names start from `net18`.
    pub fn preset(network: &str) -> Self {
        match network {
            "net118" => ExperimentConfig::net118(),
            _ => ExperimentConfig {
                network: network.into(),
                ..ExperimentConfig::net18()
            },
        }
    }

    /// Reads a config whose missing fields, nested ones included, take the
    /// preset of its `network` (default `net18`).
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let parse = |source| Error::Parse {
            what: "experiment config".into(),
            source,
        };
        let given: serde_json::Value = serde_json::from_str(text).map_err(parse)?;
        let network = given.get("network").and_then(|v| v.as_str()).unwrap_or("net18");
        let mut merged = serde_json::to_value(Self::preset(network)).map_err(parse)?;
        overlay(&mut merged, given);
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(parse)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.wind_fractions.is_empty() || self.wind_fractions.iter().any(|w| !(0.0..1.0).contains(w)) {
            return bad(format!("wind fractions must be in [0, 1): {:?}", self.wind_fractions));
        }
        if self.instr_ranges.is_empty() || self.instr_ranges.iter().any(|r| !(*r >= 0.0)) {
            return bad(format!("bad instrumentation ranges {:?}", self.instr_ranges));
        }
        if !(self.pmu_sigma >= 0.0) {
            return bad(format!("bad pmu_sigma {}", self.pmu_sigma));
        }
        if self.modes.is_empty() {
            return bad("no feature modes".into());
        }
        let samples = (self.scenario.horizon_s * dynamics_sim::PMU_RATE).round() as usize + 1;
        if self.window == 0 || self.window + 4 > samples {
            return bad(format!("window {} does not fit {samples} samples", self.window));
        }
        if let Some(w) = self.window_sweep.iter().find(|w| !(5..=60).contains(*w)) {
            return bad(format!("window sweep size {w} outside [5, 60]"));
        }
        if self.trials == 0 || self.min_leaf == 0 {
            return bad("trials and min_leaf must be positive".into());
        }
        if self.counts.islanding == 0 || self.counts.non_islanding == 0 {
            return bad("scenario counts must be positive".into());
        }
        if !(self.jump_threshold > 0.0) {
            return bad(format!("bad jump threshold {}", self.jump_threshold));
        }
        Ok(())
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("config serialises"))
    }

    pub fn feature_options(&self, mode: FeatureMode, window: usize) -> FeatureOptions {
        FeatureOptions {
            mode,
            window,
            jump_threshold: self.jump_threshold,
            domain: self.domain,
            ad_aggregate: self.ad_aggregate,
            cuspad_abs: self.cuspad_abs,
        }
    }

    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
        }
    }

    pub fn scenario_config(&self, wind_fraction: f64, recorded_buses: Vec<BusId>) -> ScenarioConfig {
        let k = &self.scenario;
        ScenarioConfig {
            counts: self.counts,
            wind_fraction,
            seed: self.seed,
            recorded_buses,
            horizon_s: k.horizon_s,
            dt: k.dt,
            t_c_range: k.t_c_range,
            load_scale_range: k.load_scale_range,
            clearing_time_range: k.clearing_time_range,
            damping_pu: k.damping_pu,
            fault_retention: k.fault_retention,
            max_cut_branches: k.max_cut_branches,
            max_cuts: k.max_cuts,
            cut_pool: k.cut_pool,
            min_island_buses: k.min_island_buses,
            island_mismatch: k.island_mismatch,
            max_retries: k.max_retries,
        }
    }

    /// Seed of the evaluation trials; shared by every error level.
    pub fn eval_seed(&self, wind_fraction: f64) -> u64 {
        seed::derive(self.seed, &[seed::TAG_TRIAL, wind_fraction.to_bits()])
    }

    pub fn error_model(&self, instr_range: f64) -> Result<ChannelErrorModel> {
        ChannelErrorModel::new(self.pmu_sigma, instr_range)
    }
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn cell_err(wind: f64, instr_range: f64) -> impl Fn(Error) -> Error {
    move |e| Error::Cell {
        wind,
        instr_range,
        source: Box::new(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub network: String,
    pub config: PlacementConfig,
    pub exact: PlacementSolution,
    pub greedy: PlacementSolution,
    pub exact_observable: bool,
    pub greedy_observable: bool,
    /// Greedy cost minus exact cost.
    pub gap: f64,
}

pub fn run_placement(net: &NetworkModel, pc: &PlacementConfig) -> Result<PlacementReport> {
    let p = PlacementProblem::from_network(net, pc.substation_cost, pc.dulr_cost, pc.strict)?;
    let exact = placement::exact(&p, pc.node_budget);
    let greedy = placement::greedy(&p);
    Ok(PlacementReport {
        network: net.name.clone(),
        config: pc.clone(),
        exact_observable: placement::verify_observability(&exact, &p),
        greedy_observable: placement::verify_observability(&greedy, &p),
        gap: greedy.total_cost - exact.total_cost,
        exact,
        greedy,
    })
}

/// PMU buses from the config, or from the configured placement mode.
pub fn resolve_pmu_buses(cfg: &ExperimentConfig, net: &NetworkModel) -> Result<Vec<BusId>> {
    if !cfg.pmu_buses.is_empty() {
        let mut b = cfg.pmu_buses.clone();
        b.sort_unstable();
        b.dedup();
        return Ok(b);
    }
    let r = run_placement(net, &cfg.placement)?;
    Ok(match cfg.placement.mode {
        SolveMode::Exact => r.exact.pmu_buses,
        SolveMode::Greedy => r.greedy.pmu_buses,
    })
}

/// Cache key of the dataset for one wind fraction.
pub fn dataset_hash(cfg: &ExperimentConfig, wind_fraction: f64, buses: &[BusId]) -> String {
    let key = serde_json::json!({
        "network": cfg.network,
        "wind_fraction": wind_fraction,
        "counts": cfg.counts,
        "seed": cfg.seed,
        "buses": buses,
        "scenario": cfg.scenario,
    });
    short_hash(key.to_string().as_bytes())
}

/// Generates the dataset, or loads it from `cache/<hash>` when present.
pub fn build_dataset(
    cfg: &ExperimentConfig,
    net: &NetworkModel,
    wind_fraction: f64,
    buses: &[BusId],
    cache: Option<&Path>,
) -> Result<Vec<ScenarioRecord>> {
    let hash = dataset_hash(cfg, wind_fraction, buses);
    let dir = cache.map(|c| c.join(format!("{}_{hash}", net.name)));
    if let Some(dir) = &dir {
        if dir.join("manifest.json").exists() {
            let (m, records) = dynamics_sim::load_dataset(dir)?;
            if m.config_hash == hash && records.len() == m.records {
                return Ok(records);
            }
        }
    }
    let records = dynamics_sim::generate_scenarios(net, &cfg.scenario_config(wind_fraction, buses.to_vec()))?;
    if let Some(dir) = &dir {
        let manifest = DatasetManifest {
            network: net.name.clone(),
            seed: cfg.seed,
            wind_fraction,
            counts: cfg.counts,
            non_islanding_mix: vec!["line_trip".into(), "generator_trip".into(), "bus_fault".into()],
            recorded_buses: buses.to_vec(),
            records: records.len(),
            config_hash: hash,
        };
        dynamics_sim::save_dataset(dir, &manifest, &records)?;
    }
    Ok(records)
}

/// Trains one tree per option set on error-free features.
pub fn train_clean(records: &[ScenarioRecord], opts: &[FeatureOptions], params: TreeParams) -> Result<Vec<DecisionTree>> {
    opts.iter()
        .map(|o| {
            let (fvs, labels) = classifier::clean_features(records, o);
            classifier::train_on_features(&fvs, &labels, params)
        })
        .collect()
}

/// Trains one tree per option set, on true angles unless
/// `cfg.train_errors` asks for corrupted training features.
pub fn train_trees(
    cfg: &ExperimentConfig,
    records: &[ScenarioRecord],
    wind: f64,
    opts: &[FeatureOptions],
) -> Result<Vec<DecisionTree>> {
    let Some(model) = cfg.train_errors else {
        return train_clean(records, opts, cfg.tree_params());
    };
    let per_record: Vec<Vec<FeatureVector>> = records
        .par_iter()
        .map(|r| {
            let s = seed::derive(cfg.seed, &[seed::TAG_TRAIN, wind.to_bits(), r.id as u64]);
            features::features_many(&measurement::inject_errors(r, &model, s).traces, opts)
        })
        .collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    (0..opts.len())
        .map(|k| {
            let fvs: Vec<FeatureVector> = per_record.iter().map(|v| v[k].clone()).collect();
            classifier::train_on_features(&fvs, &labels, cfg.tree_params())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub wind_fraction: f64,
    pub instr_range: f64,
    pub mode: FeatureMode,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsGrid {
    pub network: String,
    pub config_hash: String,
    pub pmu_buses: Vec<BusId>,
    pub window: usize,
    pub cells: Vec<GridCell>,
}

impl ResultsGrid {
    pub fn get(&self, wind_fraction: f64, instr_range: f64, mode: FeatureMode) -> Option<&EvalReport> {
        self.cells
            .iter()
            .find(|c| c.wind_fraction == wind_fraction && c.instr_range == instr_range && c.mode == mode)
            .map(|c| &c.report)
    }

    pub fn wind_fractions(&self) -> Vec<f64> {
        let mut w: Vec<f64> = self.cells.iter().map(|c| c.wind_fraction).collect();
        w.dedup();
        w
    }

    pub fn instr_ranges(&self) -> Vec<f64> {
        let mut r: Vec<f64> = Vec::new();
        for c in &self.cells {
            if !r.contains(&c.instr_range) {
                r.push(c.instr_range);
            }
        }
        r
    }
}

/// Error levels x modes for one dataset, with trees trained on clean data.
fn grid_for_dataset(
    cfg: &ExperimentConfig,
    records: &[ScenarioRecord],
    wind: f64,
    opts: &[FeatureOptions],
    instr_ranges: &[f64],
) -> Result<Vec<GridCell>> {
    let trees = train_trees(cfg, records, wind, opts).map_err(cell_err(wind, f64::NAN))?;
    let models: Vec<(FeatureOptions, &DecisionTree)> = opts.iter().copied().zip(trees.iter()).collect();
    let mut cells = Vec::new();
    for &r in instr_ranges {
        let model = cfg.error_model(r).map_err(cell_err(wind, r))?;
        let reports = classifier::evaluate_multi(&models, records, &model, cfg.trials, cfg.eval_seed(wind))
            .map_err(cell_err(wind, r))?;
        for (o, report) in opts.iter().zip(reports) {
            cells.push(GridCell {
                wind_fraction: wind,
                instr_range: r,
                mode: o.mode,
                report,
            });
        }
    }
    Ok(cells)
}

/// One tree per (wind fraction, mode), clean-trained by default; error
/// levels only change the test corruption.
pub fn run_accuracy_grid(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<ResultsGrid> {
    cfg.validate()?;
    let net = NetworkModel::resolve(&cfg.network)?;
    let buses = resolve_pmu_buses(cfg, &net)?;
    let opts: Vec<FeatureOptions> = cfg.modes.iter().map(|&m| cfg.feature_options(m, cfg.window)).collect();
    let mut cells = Vec::new();
    for &wind in &cfg.wind_fractions {
        let records = build_dataset(cfg, &net, wind, &buses, cache).map_err(cell_err(wind, f64::NAN))?;
        cells.extend(grid_for_dataset(cfg, &records, wind, &opts, &cfg.instr_ranges)?);
    }
    Ok(ResultsGrid {
        network: net.name.clone(),
        config_hash: cfg.hash(),
        pmu_buses: buses,
        window: cfg.window,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSweep {
    pub wind_fraction: f64,
    pub instr_range: f64,
    pub entries: BTreeMap<usize, EvalReport>,
}

/// CUSPAD accuracy per window size at `cfg.window_sweep_instr_range`, on
/// the dataset of the first wind fraction.
pub fn run_window_sweep(cfg: &ExperimentConfig, sizes: &[usize], cache: Option<&Path>) -> Result<WindowSweep> {
    cfg.validate()?;
    if let Some(w) = sizes.iter().find(|w| !(5..=60).contains(*w)) {
        return Err(Error::Config(format!("window size {w} outside [5, 60]")));
    }
    let net = NetworkModel::resolve(&cfg.network)?;
    let buses = resolve_pmu_buses(cfg, &net)?;
    let wind = cfg.wind_fractions[0];
    let records = build_dataset(cfg, &net, wind, &buses, cache)?;
    window_sweep_on(cfg, &records, wind, sizes)
}

fn window_sweep_on(cfg: &ExperimentConfig, records: &[ScenarioRecord], wind: f64, sizes: &[usize]) -> Result<WindowSweep> {
    let r = cfg.window_sweep_instr_range;
    let mut entries = BTreeMap::new();
    for &w in sizes {
        let opts = [cfg.feature_options(FeatureMode::Cuspad, w)];
        let cell = grid_for_dataset(cfg, records, wind, &opts, &[r])?;
        entries.insert(w, cell.into_iter().next().expect("one cell").report);
    }
    Ok(WindowSweep {
        wind_fraction: wind,
        instr_range: r,
        entries,
    })
}

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    #[serde(skip)]
    pub elapsed_s: f64,
}

impl Check {
    fn new(id: u8, name: &str, passed: bool, detail: String, started: Instant) -> Self {
        Check {
            id,
            name: name.into(),
            passed,
            detail,
            elapsed_s: started.elapsed().as_secs_f64(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}. {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

fn random_walk(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let mut x = vec![rng.random_range(-170.0..170.0)];
    let step_at = rng.random_range(10..len - 40);
    for n in 1..len {
        let jump = if n == step_at {
            rng.random_range(5.0..30.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        } else {
            0.0
        };
        let prev = x[n - 1];
        x.push(prev + rng.random_range(-0.3..0.3) + jump);
    }
    x
}

/// Offset cancellation in the cumulative sums and offset invariance of
/// the residuals.
pub fn check_offset_cancellation(streams: usize, seed_value: u64) -> Check {
    let start = Instant::now();
    let mut rng = seed::rng(seed_value, &[1]);
    let mut worst_sum = 0.0f64;
    let mut worst_res = 0.0f64;
    let mut undetected = 0;
    for _ in 0..streams {
        let x = random_walk(&mut rng, 121);
        let c = rng.random_range(-10.0..=10.0);
        let mk = |samples: Vec<f64>| dynamics_sim::AngleTrace {
            bus: 1,
            rate: dynamics_sim::PMU_RATE,
            t0: 0.0,
            samples,
            unwrapped: true,
        };
        let t = mk(x.clone());
        let m = mk(x.iter().map(|v| v + c).collect());
        for domain in [PredictionDomain::Phasor, PredictionDomain::Angle] {
            let mut a = features::ResidualMonitor::new(domain);
            let mut b = features::ResidualMonitor::new(domain);
            for (&xt, &xm) in t.samples.iter().zip(&m.samples) {
                if let (Some(ra), Some(rb)) = (a.push(xt), b.push(xm)) {
                    worst_res = worst_res.max((ra - rb).abs());
                }
            }
        }
        let (Some(rt), Some(rm)) = (
            features::detect_reference(&t, DEFAULT_JUMP_THRESHOLD),
            features::detect_reference(&m, DEFAULT_JUMP_THRESHOLD),
        ) else {
            undetected += 1;
            continue;
        };
        if rt.t_ref != rm.t_ref {
            worst_sum = f64::INFINITY;
            continue;
        }
        let w = 30.min(t.samples.len() - rt.t_ref - 1);
        let st = features::cuspad_sum(&t, &rt, w).expect("window fits");
        let sm = features::cuspad_sum(&m, &rm, w).expect("window fits");
        worst_sum = worst_sum.max((sm - st).abs() / (1.0 + st.abs()));
    }
    let passed = worst_sum <= 1e-9 && worst_res <= 1e-12 && undetected == 0;
    Check::new(
        1,
        "offset cancellation",
        passed,
        format!(
            "{streams} streams: max |S^m-S^t|/(1+|S^t|) = {worst_sum:.2e} (tol 1e-9), max residual change = {worst_res:.2e} (tol 1e-12), undetected = {undetected}"
        ),
        start,
    )
}

/// With no PMU noise, measured AD minus true AD equals the offset difference.
pub fn check_ad_propagation(records: &[ScenarioRecord], instr_range: f64, seed_value: u64) -> Check {
    let start = Instant::now();
    let model = ChannelErrorModel::new(0.0, instr_range).expect("valid model");
    let mut worst = 0.0f64;
    let mut samples = 0usize;
    for rec in records {
        let ms = measurement::inject_errors(rec, &model, seed::derive(seed_value, &[rec.id as u64]));
        let buses: Vec<BusId> = rec.traces.keys().copied().collect();
        for (i, j) in features::pair_order(&buses) {
            let (ti, tj) = (&rec.traces[&i].samples, &rec.traces[&j].samples);
            let (mi, mj) = (&ms.traces[&i].samples, &ms.traces[&j].samples);
            let expect = ms.offsets[&i] - ms.offsets[&j];
            for n in 0..ti.len() {
                let truth = features::angle_difference(ti[n], tj[n], false);
                let meas = features::angle_difference(mi[n], mj[n], false);
                worst = worst.max(measurement::wrap_deg(meas - truth - expect).abs());
                samples += 1;
            }
        }
    }
    Check::new(
        2,
        "AD error propagation",
        worst <= 1e-12,
        format!(
            "{} scenarios, {samples} pair samples: max |(AD^m - AD^t) - (e_i - e_j)| = {worst:.2e} deg (tol 1e-12)",
            records.len()
        ),
        start,
    )
}

/// Zero residual on quadratic angle sequences and |r| = 6|a3| on cubics.
pub fn check_tsqpa_oracle(sequences: usize, seed_value: u64) -> Check {
    let start = Instant::now();
    let mut rng = seed::rng(seed_value, &[3]);
    let mut worst_quad = 0.0f64;
    let mut worst_cubic = 0.0f64;
    let mut sign_ok = true;
    for _ in 0..sequences {
        let a0 = rng.random_range(-90.0..90.0);
        let a1 = rng.random_range(-3.0..3.0);
        let a2 = rng.random_range(-0.3..0.3);
        let a3 = rng.random_range(-0.02..0.02);
        let mut quad = features::ResidualMonitor::new(PredictionDomain::Angle);
        let mut cubic = features::ResidualMonitor::new(PredictionDomain::Angle);
        for n in 0..20 {
            let t = n as f64;
            let q = a0 + a1 * t + a2 * t * t;
            if let Some(r) = quad.push(q) {
                worst_quad = worst_quad.max(r.abs());
            }
            if let Some(r) = cubic.push(q + a3 * t * t * t) {
                worst_cubic = worst_cubic.max((r.abs() - 6.0 * a3.abs()).abs());
                sign_ok &= a3 == 0.0 || r.signum() == -a3.signum();
            }
        }
    }
    Check::new(
        3,
        "three-sample predictor oracle",
        worst_quad <= 1e-12 && worst_cubic <= 1e-9 && sign_ok,
        format!(
            "{sequences} quadratics: max |r| = {worst_quad:.2e} (tol 1e-12); cubics: max ||r| - 6|a3|| = {worst_cubic:.2e} (tol 1e-9), r = -6 a3 for r = pred - meas: {sign_ok}"
        ),
        start,
    )
}

fn trend_check(
    id: u8,
    name: &str,
    grid: &ResultsGrid,
    wind: f64,
    ad_drop_min: f64,
    started: Instant,
) -> Check {
    let get = |r: f64, m: FeatureMode| grid.get(wind, r, m);
    let (Some(c0), Some(c4), Some(a0), Some(a4)) = (
        get(0.0, FeatureMode::Cuspad),
        get(4.0, FeatureMode::Cuspad),
        get(0.0, FeatureMode::Ad),
        get(4.0, FeatureMode::Ad),
    ) else {
        return Check::new(id, name, false, "grid lacks the 0 and 4 degree cells".into(), started);
    };
    let cuspad_flat = (c4.mean_accuracy - c0.mean_accuracy).abs() <= 2.0;
    let ad_drop = a0.mean_accuracy - a4.mean_accuracy;
    let ad_degrades = ad_drop >= ad_drop_min;
    let chain: Vec<&EvalReport> = [0.1, 1.0, 2.0, 4.0]
        .iter()
        .filter_map(|&r| get(r, FeatureMode::Ad))
        .collect();
    let monotone = chain.len() == 4
        && chain
            .windows(2)
            .all(|p| p[1].mean_accuracy <= p[0].mean_accuracy + p[0].ci95_halfwidth + p[1].ci95_halfwidth);
    let ad_series: Vec<String> = chain
        .iter()
        .map(|r| format!("{:.2}±{:.2}", r.mean_accuracy, r.ci95_halfwidth))
        .collect();
    Check::new(
        id,
        name,
        cuspad_flat && ad_degrades && monotone,
        format!(
            "CUSPAD {:.2} -> {:.2} (|diff| {:.2} <= 2: {cuspad_flat}); AD {:.2} -> {:.2} (drop {ad_drop:.2} >= {ad_drop_min}: {ad_degrades}); AD 0.1/1/2/4 = [{}] non-increasing within CI: {monotone}",
            c0.mean_accuracy,
            c4.mean_accuracy,
            (c4.mean_accuracy - c0.mean_accuracy).abs(),
            a0.mean_accuracy,
            a4.mean_accuracy,
            ad_series.join(", ")
        ),
        started,
    )
}

/// Flat CUSPAD and degrading AD on the 118-bus grid at 30% wind.
pub fn check_table_118(grid: &ResultsGrid, started: Instant) -> Check {
    trend_check(4, "118-bus accuracy trend (30% wind)", grid, 0.3, 15.0, started)
}

/// Flat CUSPAD and degrading AD on the 18-bus grid.
pub fn check_table_18(grid: &ResultsGrid, started: Instant) -> Check {
    let wind = grid.wind_fractions().first().copied().unwrap_or(0.0);
    trend_check(5, "18-bus accuracy trend", grid, wind, 4.0, started)
}

/// Diminishing return of longer CUSPAD windows.
pub fn check_window_trend(sweep: &WindowSweep, started: Instant) -> Check {
    let acc = |w| sweep.entries.get(&w).map(|r: &EvalReport| r.mean_accuracy);
    let (Some(a20), Some(a30), Some(a40)) = (acc(20), acc(30), acc(40)) else {
        return Check::new(6, "window-size trend", false, "sweep lacks w = 20, 30, 40".into(), started);
    };
    let (g1, g2) = (a30 - a20, a40 - a30);
    Check::new(
        6,
        "window-size trend",
        g2 < g1,
        format!("acc(20) {a20:.2}, acc(30) {a30:.2}, acc(40) {a40:.2}: gain 30->40 = {g2:.2} < gain 20->30 = {g1:.2}"),
        started,
    )
}

/// Exact solver against enumeration, and observability of every solution.
pub fn check_placement(reports: &[PlacementReport], graphs: usize, seed_value: u64, started: Instant) -> Check {
    let mut rng = seed::rng(seed_value, &[7]);
    let mut mismatches = 0;
    let mut infeasible = 0;
    for _ in 0..graphs {
        let p = placement::random_problem(&mut rng, 8);
        let sol = placement::exact(&p, placement::DEFAULT_NODE_BUDGET);
        let oracle = placement::brute_force_cost(&p).expect("connected problem is feasible");
        if (sol.total_cost - oracle).abs() > 1e-9 || !sol.proven_optimal {
            mismatches += 1;
        }
        if !placement::verify_observability(&sol, &p) || !placement::verify_observability(&placement::greedy(&p), &p) {
            infeasible += 1;
        }
    }
    let nets_ok = reports.iter().all(|r| r.exact_observable && r.greedy_observable);
    let per_net: Vec<String> = reports
        .iter()
        .map(|r| {
            format!(
                "{} exact {:.2} ({} PMU buses, {}) greedy {:.2}, observable {}/{}",
                r.network,
                r.exact.total_cost,
                r.exact.pmu_buses.len(),
                if r.exact.proven_optimal { "proven" } else { "budget hit" },
                r.greedy.total_cost,
                r.exact_observable,
                r.greedy_observable
            )
        })
        .collect();
    Check::new(
        7,
        "placement optimality and observability",
        mismatches == 0 && infeasible == 0 && nets_ok && !reports.is_empty(),
        format!(
            "{graphs} random graphs: {mismatches} cost mismatches, {infeasible} unobservable; {}",
            per_net.join("; ")
        ),
        started,
    )
}

/// Noise spread, constant offsets and uniform offset distribution.
pub fn check_error_statistics(seed_value: u64) -> Check {
    let start = Instant::now();
    let flat = |channels: u32, len: usize| ScenarioRecord {
        id: 0,
        label: 0,
        t_c: 1.0,
        traces: (1..=channels)
            .map(|b| {
                (
                    b,
                    dynamics_sim::AngleTrace {
                        bus: b,
                        rate: dynamics_sim::PMU_RATE,
                        t0: 0.0,
                        samples: vec![0.0; len],
                        unwrapped: true,
                    },
                )
            })
            .collect(),
        meta: dynamics_sim::ScenarioMeta {
            network: "synthetic".into(),
            wind_fraction: 0.0,
            script: dynamics_sim::ContingencyScript {
                contingency: dynamics_sim::Contingency::Steady,
                t_c: 1.0,
            },
            load_scale: 1.0,
            island_mismatch: None,
            seed: 0,
        },
    };
    let noise = measurement::inject_errors(
        &flat(100, 1000),
        &ChannelErrorModel::new(DEFAULT_PMU_SIGMA, 0.0).expect("valid"),
        seed::derive(seed_value, &[8, 1]),
    );
    let all: Vec<f64> = noise.traces.values().flat_map(|t| t.samples.iter().copied()).collect();
    let sd = stats::std_dev(&all);
    let sd_ok = (sd - DEFAULT_PMU_SIGMA).abs() <= 0.05 * DEFAULT_PMU_SIGMA;

    let range = 4.0;
    let model = ChannelErrorModel::new(0.0, range).expect("valid");
    let mut offsets = Vec::with_capacity(10_000);
    let mut max_spread = 0.0f64;
    for k in 0..100u64 {
        let ms = measurement::inject_errors(&flat(100, 121), &model, seed::derive(seed_value, &[8, 2, k]));
        for (bus, t) in &ms.traces {
            // measured - true, the true angle being 0 everywhere
            let first = t.samples[0];
            max_spread = t.samples.iter().fold(max_spread, |m, &x| m.max((x - first).abs()));
            offsets.push(ms.offsets[bus]);
        }
    }
    let (d, p) = stats::ks_test(&offsets, |x| ((x + range) / (2.0 * range)).clamp(0.0, 1.0));
    Check::new(
        8,
        "error-model statistics",
        sd_ok && max_spread == 0.0 && p > 0.01,
        format!(
            "noise std {sd:.5} over {} samples (target 0.104 ± 5%: {sd_ok}); max in-channel offset spread {max_spread:e}; KS over {} channels D = {d:.4}, p = {p:.3} (> 0.01)",
            all.len(),
            offsets.len()
        ),
        start,
    )
}

/// Result of [`reproduce_all`].
#[derive(Debug, Clone)]
pub struct ReproduceOutcome {
    pub checks: Vec<Check>,
    pub grid18: ResultsGrid,
    pub grid118: ResultsGrid,
    pub window_sweep: WindowSweep,
    pub placements: Vec<PlacementReport>,
    /// Seconds spent on the 118-bus 30% wind cell block.
    pub elapsed_118_30: f64,
}

impl ReproduceOutcome {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone)]
pub struct ReproduceOptions {
    pub seed: u64,
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
}

pub fn reproduce_configs(seed_value: u64) -> (ExperimentConfig, ExperimentConfig) {
    let mut c18 = ExperimentConfig::net18();
    let mut c118 = ExperimentConfig::net118();
    c18.seed = seed_value;
    c118.seed = seed_value;
    (c18, c118)
}

/// Runs every experiment and writes the report directory.
pub fn reproduce_all(opts: &ReproduceOptions, progress: &mut dyn FnMut(&str)) -> Result<ReproduceOutcome> {
    let (c18, c118) = reproduce_configs(opts.seed);
    c18.validate()?;
    c118.validate()?;
    let cache = opts.cache.as_deref();
    let mut checks = Vec::new();

    progress("math checks");
    checks.push(check_offset_cancellation(1000, opts.seed));
    checks.push(check_tsqpa_oracle(1000, opts.seed));
    checks.push(check_error_statistics(opts.seed));

    progress("placement");
    let t = Instant::now();
    let net18 = NetworkModel::resolve(&c18.network)?;
    let net118 = NetworkModel::resolve(&c118.network)?;
    let placements = vec![
        run_placement(&net18, &c18.placement)?,
        run_placement(&net118, &c118.placement)?,
    ];
    checks.push(check_placement(&placements, 50, opts.seed, t));

    progress("18-bus grid");
    let t = Instant::now();
    let buses18 = resolve_pmu_buses(&c18, &net18)?;
    let wind18 = c18.wind_fractions[0];
    let records18 = build_dataset(&c18, &net18, wind18, &buses18, cache)?;
    checks.push(check_ad_propagation(&records18[..100.min(records18.len())], 4.0, opts.seed));
    let opts18: Vec<FeatureOptions> = c18.modes.iter().map(|&m| c18.feature_options(m, c18.window)).collect();
    let grid18 = ResultsGrid {
        network: net18.name.clone(),
        config_hash: c18.hash(),
        pmu_buses: buses18.clone(),
        window: c18.window,
        cells: grid_for_dataset(&c18, &records18, wind18, &opts18, &c18.instr_ranges)?,
    };
    checks.push(check_table_18(&grid18, t));

    progress("window sweep");
    let t = Instant::now();
    let window_sweep = window_sweep_on(&c18, &records18, wind18, &c18.window_sweep)?;
    checks.push(check_window_trend(&window_sweep, t));
    drop(records18);

    let buses118 = match &placements[1].config.mode {
        SolveMode::Exact => placements[1].exact.pmu_buses.clone(),
        SolveMode::Greedy => placements[1].greedy.pmu_buses.clone(),
    };
    let opts118: Vec<FeatureOptions> = c118.modes.iter().map(|&m| c118.feature_options(m, c118.window)).collect();
    let mut cells = Vec::new();
    let mut elapsed_118_30 = 0.0;
    let mut check118 = None;
    for &wind in &c118.wind_fractions {
        progress(&format!("118-bus grid, wind {wind}"));
        let t = Instant::now();
        let records = build_dataset(&c118, &net118, wind, &buses118, cache)?;
        let block = grid_for_dataset(&c118, &records, wind, &opts118, &c118.instr_ranges)?;
        cells.extend(block);
        if wind == 0.3 {
            elapsed_118_30 = t.elapsed().as_secs_f64();
            check118 = Some(t);
        }
    }
    let grid118 = ResultsGrid {
        network: net118.name.clone(),
        config_hash: c118.hash(),
        pmu_buses: buses118,
        window: c118.window,
        cells,
    };
    let mut c4 = check_table_118(&grid118, check118.unwrap_or_else(Instant::now));
    c4.elapsed_s = elapsed_118_30;
    checks.push(c4);
    checks.sort_by_key(|c| c.id);

    let outcome = ReproduceOutcome {
        checks,
        grid18,
        grid118,
        window_sweep,
        placements,
        elapsed_118_30,
    };
    progress("writing report");
    write_report(&opts.out, &outcome, &c18, &c118)?;
    Ok(outcome)
}

/// Table with one row per error level: `Error | AD Accuracy (95%) | AD Depth | CUSPAD ...`.
pub fn format_table(grid: &ResultsGrid, wind: f64) -> String {
    let modes: Vec<FeatureMode> = FeatureMode::ALL
        .into_iter()
        .filter(|&m| grid.cells.iter().any(|c| c.mode == m))
        .collect();
    let mut s = format!("{:<11}", "Error (deg)");
    for m in &modes {
        let _ = write!(s, " | {:<22} | {:<5}", format!("{} Accuracy (95%)", m.name()), "Depth");
    }
    s.push('\n');
    for r in grid.instr_ranges() {
        let _ = write!(s, "{:<11}", format!("{r}"));
        for &m in &modes {
            match grid.get(wind, r, m) {
                Some(e) => {
                    let _ = write!(
                        s,
                        " | {:<22} | {:<5}",
                        format!("{:.2} ± {:.2}", e.mean_accuracy, e.ci95_halfwidth),
                        e.depth
                    );
                }
                None => {
                    let _ = write!(s, " | {:<22} | {:<5}", "-", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

fn grid_csv(grid: &ResultsGrid) -> String {
    let mut s = String::from("wind_fraction,instr_range_deg,mode,mean_accuracy,ci95_halfwidth,depth,trials\n");
    for c in &grid.cells {
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{},{}",
            c.wind_fraction,
            c.instr_range,
            c.mode.name(),
            c.report.mean_accuracy,
            c.report.ci95_halfwidth,
            c.report.depth,
            c.report.per_trial.len()
        );
    }
    s
}

fn long_rows(s: &mut String, experiment: &str, grid: &ResultsGrid) {
    for c in &grid.cells {
        let _ = writeln!(
            s,
            "{experiment},{},{},{},{},{},{:.4},{:.4},{}",
            grid.network,
            c.wind_fraction,
            c.instr_range,
            c.mode.name(),
            grid.window,
            c.report.mean_accuracy,
            c.report.ci95_halfwidth,
            c.report.depth
        );
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_report(out: &Path, o: &ReproduceOutcome, c18: &ExperimentConfig, c118: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    #[derive(Serialize)]
    struct Cfg<'a> {
        hash: String,
        config: &'a ExperimentConfig,
    }
    dynamics_sim::write_json(&out.join("config_net18.json"), &Cfg { hash: c18.hash(), config: c18 })?;
    dynamics_sim::write_json(&out.join("config_net118.json"), &Cfg { hash: c118.hash(), config: c118 })?;

    let mut tables = String::new();
    let _ = writeln!(tables, "18-bus system (config {})\n", o.grid18.config_hash);
    tables.push_str(&format_table(&o.grid18, c18.wind_fractions[0]));
    for &w in &c118.wind_fractions {
        let _ = writeln!(tables, "\n118-bus system, {:.0}% wind (config {})\n", w * 100.0, o.grid118.config_hash);
        tables.push_str(&format_table(&o.grid118, w));
    }
    write_file(&out.join("tables.txt"), &tables)?;

    write_file(&out.join("grid_net18.csv"), &grid_csv(&o.grid18))?;
    write_file(&out.join("grid_net118.csv"), &grid_csv(&o.grid118))?;
    dynamics_sim::write_json(&out.join("grid_net18.json"), &o.grid18)?;
    dynamics_sim::write_json(&out.join("grid_net118.json"), &o.grid118)?;

    let mut ws = String::from("window,instr_range_deg,mean_accuracy,ci95_halfwidth,depth\n");
    for (w, r) in &o.window_sweep.entries {
        let _ = writeln!(
            ws,
            "{w},{},{:.4},{:.4},{}",
            o.window_sweep.instr_range, r.mean_accuracy, r.ci95_halfwidth, r.depth
        );
    }
    write_file(&out.join("window_sweep.csv"), &ws)?;

    let mut pen = String::from("wind_fraction,instr_range_deg,mode,mean_accuracy,ci95_halfwidth\n");
    for c in &o.grid118.cells {
        let _ = writeln!(
            pen,
            "{},{},{},{:.4},{:.4}",
            c.wind_fraction,
            c.instr_range,
            c.mode.name(),
            c.report.mean_accuracy,
            c.report.ci95_halfwidth
        );
    }
    write_file(&out.join("penetration_sweep.csv"), &pen)?;

    let mut long = String::from("experiment,network,wind_fraction,instr_range_deg,mode,window,mean_accuracy,ci95_halfwidth,depth\n");
    long_rows(&mut long, "grid", &o.grid18);
    long_rows(&mut long, "grid", &o.grid118);
    for (w, r) in &o.window_sweep.entries {
        let _ = writeln!(
            long,
            "window_sweep,{},{},{},CUSPAD,{w},{:.4},{:.4},{}",
            o.grid18.network, o.window_sweep.wind_fraction, o.window_sweep.instr_range, r.mean_accuracy, r.ci95_halfwidth, r.depth
        );
    }
    write_file(&out.join("results_long.csv"), &long)?;

    for p in &o.placements {
        dynamics_sim::write_json(&out.join(format!("placement_{}.json", p.network)), p)?;
    }

    let mut acc = String::new();
    for c in &o.checks {
        let _ = writeln!(acc, "{}", c.line());
    }
    let _ = writeln!(
        acc,
        "[----] 9. determinism: needs two runs; see `reproduce --verify`"
    );
    let passed = o.checks.iter().filter(|c| c.passed).count();
    let _ = writeln!(acc, "\n{passed}/{} single-run criteria passed", o.checks.len());
    write_file(&out.join("acceptance.txt"), &acc)?;
    dynamics_sim::write_json(&out.join("acceptance.json"), &o.checks)?;
    Ok(())
}

/// Paths (relative) and contents of every file under `dir`, sorted.
pub fn snapshot_dir(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.insert(path.strip_prefix(root).expect("under root").to_path_buf(), bytes);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
