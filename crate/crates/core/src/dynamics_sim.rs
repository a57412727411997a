//! Reduced-order angle dynamics and labeled scenario generation.
//!
//! Synchronous machines follow the classical swing equation behind a
//! transient reactance. The network is DC-coupled: bus angles are an affine
//! function of the machine internal angles, recomputed whenever the
//! topology changes. Loads are constant power. Inverter-based units inject
//! their dispatch as constant power and carry no inertia.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{self, BranchKind, BusId, IslandCut, NetworkModel};
use crate::measurement;
use crate::seed;

/// Output rate of the PMU stream handed to the detector.
pub const PMU_RATE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Contingency {
    /// No event; used to check equilibrium persistence.
    Steady,
    Island { cut: IslandCut },
    LineTrip { branch: usize },
    GeneratorTrip { generator: usize },
    BusFault { bus: BusId, clearing_time: f64 },
}

impl Contingency {
    pub fn is_islanding(&self) -> bool {
        matches!(self, Contingency::Island { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyScript {
    pub contingency: Contingency,
    /// Contingency time, seconds from the start of the run.
    pub t_c: f64,
}

/// An angle stream for one bus, in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleTrace {
    pub bus: BusId,
    /// Samples per second.
    pub rate: f64,
    pub t0: f64,
    pub samples: Vec<f64>,
    pub unwrapped: bool,
}

impl AngleTrace {
    pub fn time_of(&self, k: usize) -> f64 {
        self.t0 + k as f64 / self.rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub dt: f64,
    pub horizon: f64,
    /// Lumped load and governor damping, pu power per pu speed on the machine base.
    pub damping_pu: f64,
    /// Fraction of branch susceptance left at a faulted bus while the fault is on.
    pub fault_retention: f64,
    /// Multiplier on every load; dispatch follows.
    pub load_scale: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt: 1.0 / 600.0,
            horizon: 4.0,
            damping_pu: 20.0,
            fault_retention: 0.05,
            load_scale: 1.0,
        }
    }
}

/// Machine-base transient reactance used when a generator does not give one.
const DEFAULT_XD_MACHINE_PU: f64 = 0.3;

struct Machine {
    bus: usize,
    b_int: f64,
    h_sys: f64,
    d_sys: f64,
    pm: f64,
}

/// Network state between two events.
#[derive(Clone)]
struct Phase {
    branch_b: Vec<f64>,
    machine_on: Vec<bool>,
    machine_b: Vec<f64>,
    p_bus: Vec<f64>,
}

/// θ = A δ + c for the buses, and Pe = K δ + p0 for the machines.
struct LinearMap {
    a: DMatrix<f64>,
    c: DVector<f64>,
    k: DMatrix<f64>,
    p0: DVector<f64>,
}

struct Model<'a> {
    net: &'a NetworkModel,
    ends: Vec<(usize, usize)>,
    machines: Vec<Machine>,
    /// Index of the machine for each generator, `None` for inverter-based units.
    gen_machine: Vec<Option<usize>>,
    base: Phase,
}

impl<'a> Model<'a> {
    fn new(net: &'a NetworkModel, params: &SimParams) -> Result<Self> {
        let index = net.bus_index();
        let n = net.buses.len();
        let base_mva = net.base_mva;
        let total_load: f64 = net.loads.iter().map(|l| l.p_mw).sum::<f64>() * params.load_scale;
        let capacity = net.total_capacity_mw();
        let mut p_bus = vec![0.0; n];
        for l in &net.loads {
            p_bus[index[&l.bus]] -= l.p_mw * params.load_scale / base_mva;
        }
        let mut machines = Vec::new();
        let mut gen_machine = Vec::new();
        for g in &net.generators {
            let dispatch = total_load * g.rated_mw / capacity / base_mva;
            if g.inverter_based {
                p_bus[index[&g.bus]] += dispatch;
                gen_machine.push(None);
                continue;
            }
            let machine_base = g.rated_mw / base_mva;
            let xd = g.xd_pu.unwrap_or(DEFAULT_XD_MACHINE_PU / machine_base);
            gen_machine.push(Some(machines.len()));
            machines.push(Machine {
                bus: index[&g.bus],
                b_int: 1.0 / xd,
                h_sys: g.h_s * machine_base,
                d_sys: params.damping_pu * machine_base,
                pm: dispatch,
            });
        }
        if machines.is_empty() {
            return Err(Error::NoSynchronousMachine(net.buses[0]));
        }
        let base = Phase {
            branch_b: net.branches.iter().map(|b| b.b_pu).collect(),
            machine_on: vec![true; machines.len()],
            machine_b: machines.iter().map(|m| m.b_int).collect(),
            p_bus,
        };
        Ok(Model {
            net,
            ends: net.branch_ends(),
            machines,
            gen_machine,
            base,
        })
    }

    fn linear_map(&self, phase: &Phase) -> Result<LinearMap> {
        let n = self.net.buses.len();
        let g = self.machines.len();
        // Every island needs a machine to anchor its angles.
        let removed: Vec<bool> = phase.branch_b.iter().map(|&b| b == 0.0).collect();
        let (comp, count) = grid_model::components(self.net, &removed);
        let mut anchored = vec![false; count];
        for (m, mach) in self.machines.iter().enumerate() {
            if phase.machine_on[m] {
                anchored[comp[mach.bus]] = true;
            }
        }
        if let Some(i) = (0..n).find(|&i| !anchored[comp[i]]) {
            return Err(Error::NoSynchronousMachine(self.net.buses[i]));
        }

        let mut b_bus = DMatrix::<f64>::zeros(n, n);
        for (&(i, j), &b) in self.ends.iter().zip(&phase.branch_b) {
            b_bus[(i, i)] += b;
            b_bus[(j, j)] += b;
            b_bus[(i, j)] -= b;
            b_bus[(j, i)] -= b;
        }
        let mut rhs = DMatrix::<f64>::zeros(n, g + 1);
        for i in 0..n {
            rhs[(i, g)] = phase.p_bus[i];
        }
        for (m, mach) in self.machines.iter().enumerate() {
            if phase.machine_on[m] {
                let b = phase.machine_b[m];
                b_bus[(mach.bus, mach.bus)] += b;
                rhs[(mach.bus, m)] = b;
            }
        }
        let sol = b_bus
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SimSetup("singular network matrix".into()))?;
        let a = sol.columns(0, g).into_owned();
        let c = sol.column(g).into_owned();
        let mut k = DMatrix::<f64>::zeros(g, g);
        let mut p0 = DVector::<f64>::zeros(g);
        for (m, mach) in self.machines.iter().enumerate() {
            if !phase.machine_on[m] {
                continue;
            }
            let b = phase.machine_b[m];
            for col in 0..g {
                k[(m, col)] = -b * a[(mach.bus, col)];
            }
            k[(m, m)] += b;
            p0[m] = -b * c[mach.bus];
        }
        Ok(LinearMap { a, c, k, p0 })
    }

    /// Internal angles with Pe = Pm everywhere, first machine at zero.
    fn equilibrium(&self, map: &LinearMap) -> Result<DVector<f64>> {
        let g = self.machines.len();
        let pm = DVector::from_iterator(g, self.machines.iter().map(|m| m.pm));
        let mut delta = DVector::<f64>::zeros(g);
        if g > 1 {
            let k_red = map.k.view((1, 1), (g - 1, g - 1)).into_owned();
            let rhs = (&pm - &map.p0).rows(1, g - 1).into_owned();
            let sol = k_red
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::NoEquilibrium(f64::INFINITY))?;
            delta.rows_mut(1, g - 1).copy_from(&sol);
        }
        let mismatch = (&map.k * &delta + &map.p0 - &pm).amax();
        if !(mismatch < 1e-8) {
            return Err(Error::NoEquilibrium(mismatch));
        }
        Ok(delta)
    }

    /// Phases and their start times for a script.
    fn schedule(&self, script: &ContingencyScript, params: &SimParams) -> Result<Vec<(f64, Phase)>> {
        let mut out = vec![(f64::NEG_INFINITY, self.base.clone())];
        let mut post = self.base.clone();
        match &script.contingency {
            Contingency::Steady => return Ok(out),
            Contingency::Island { cut } => {
                for &id in &cut.removed_branches {
                    post.branch_b[id] = 0.0;
                }
            }
            Contingency::LineTrip { branch } => {
                post.branch_b[*branch] = 0.0;
            }
            Contingency::GeneratorTrip { generator } => match self.gen_machine.get(*generator) {
                Some(Some(m)) => post.machine_on[*m] = false,
                _ => {
                    return Err(Error::SimSetup(format!(
                        "generator {generator} is not a synchronous machine"
                    )))
                }
            },
            Contingency::BusFault { bus, clearing_time } => {
                let k = self.net.bus_index()[bus];
                let mut faulted = self.base.clone();
                for (id, &(i, j)) in self.ends.iter().enumerate() {
                    if i == k || j == k {
                        faulted.branch_b[id] *= params.fault_retention;
                    }
                }
                for (m, mach) in self.machines.iter().enumerate() {
                    if mach.bus == k {
                        faulted.machine_b[m] *= params.fault_retention;
                    }
                }
                faulted.p_bus[k] = 0.0;
                out.push((script.t_c, faulted));
                out.push((script.t_c + clearing_time, post));
                return Ok(out);
            }
        }
        out.push((script.t_c, post));
        Ok(out)
    }
}

/// Integrates the swing dynamics with fixed-step RK4 and returns the angle
/// trajectory of every bus in degrees at the integration rate.
pub fn simulate(
    net: &NetworkModel,
    script: &ContingencyScript,
    params: &SimParams,
) -> Result<BTreeMap<BusId, AngleTrace>> {
    if !(params.dt > 0.0 && params.dt <= 1.0 / 120.0 + 1e-15) {
        return Err(Error::SimSetup(format!("dt {} must be at most 1/120 s", params.dt)));
    }
    if script.contingency != Contingency::Steady
        && (script.t_c < 1.0 || params.horizon < script.t_c + 2.0)
    {
        return Err(Error::SimSetup(format!(
            "t_c {} needs 1 s before and 2 s after within horizon {}",
            script.t_c, params.horizon
        )));
    }
    let model = Model::new(net, params)?;
    let schedule = model.schedule(script, params)?;
    let maps = schedule
        .iter()
        .map(|(_, phase)| model.linear_map(phase))
        .collect::<Result<Vec<_>>>()?;
    let phase_at = |t: f64| {
        schedule
            .iter()
            .rposition(|(start, _)| t >= *start - 1e-9)
            .unwrap_or(0)
    };

    let g = model.machines.len();
    let omega_s = 2.0 * PI * net.base_frequency_hz;
    let pm = DVector::from_iterator(g, model.machines.iter().map(|m| m.pm));
    let inv_2h = DVector::from_iterator(g, model.machines.iter().map(|m| 0.5 / m.h_sys));
    let damping = DVector::from_iterator(g, model.machines.iter().map(|m| m.d_sys));

    let steps = (params.horizon / params.dt).round() as usize;
    let n = net.buses.len();
    let mut delta = model.equilibrium(&maps[0])?;
    let mut omega = DVector::<f64>::zeros(g);
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(steps + 1); n];

    let deriv = |map: &LinearMap, on: &[bool], d: &DVector<f64>, w: &DVector<f64>| {
        let pe = &map.k * d + &map.p0;
        let mut dd = w * omega_s;
        let mut dw = DVector::<f64>::zeros(g);
        for m in 0..g {
            if on[m] {
                dw[m] = (pm[m] - pe[m] - damping[m] * w[m]) * inv_2h[m];
            } else {
                dd[m] = 0.0;
            }
        }
        (dd, dw)
    };

    for step in 0..=steps {
        let t = step as f64 * params.dt;
        let p = phase_at(t);
        let map = &maps[p];
        let theta = &map.a * &delta + &map.c;
        for i in 0..n {
            out[i].push(theta[i].to_degrees());
        }
        if step == steps {
            break;
        }
        let on = &schedule[p].1.machine_on;
        let h = params.dt;
        let (k1d, k1w) = deriv(map, on, &delta, &omega);
        let (k2d, k2w) = deriv(map, on, &(&delta + &k1d * (h / 2.0)), &(&omega + &k1w * (h / 2.0)));
        let (k3d, k3w) = deriv(map, on, &(&delta + &k2d * (h / 2.0)), &(&omega + &k2w * (h / 2.0)));
        let (k4d, k4w) = deriv(map, on, &(&delta + &k3d * h), &(&omega + &k3w * h));
        delta += (k1d + k2d * 2.0 + k3d * 2.0 + k4d) * (h / 6.0);
        omega += (k1w + k2w * 2.0 + k3w * 2.0 + k4w) * (h / 6.0);
        if !delta.iter().all(|x| x.is_finite() && x.abs() < 1e5) {
            return Err(Error::BlowUp(t + h));
        }
    }

    let rate = (1.0 / params.dt).round();
    Ok(net
        .buses
        .iter()
        .zip(out)
        .map(|(&bus, samples)| {
            (
                bus,
                AngleTrace {
                    bus,
                    rate,
                    t0: 0.0,
                    samples,
                    unwrapped: true,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioCounts {
    pub islanding: usize,
    pub non_islanding: usize,
}

/// Knobs for batch scenario generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub counts: ScenarioCounts,
    pub wind_fraction: f64,
    pub seed: u64,
    /// Buses whose angles are recorded (the PMU buses).
    pub recorded_buses: Vec<BusId>,
    pub horizon_s: f64,
    pub dt: f64,
    pub t_c_range: (f64, f64),
    pub load_scale_range: (f64, f64),
    pub clearing_time_range: (f64, f64),
    pub damping_pu: f64,
    pub fault_retention: f64,
    pub max_cut_branches: usize,
    pub max_cuts: usize,
    /// Distinct island configurations drawn for the islanding cases; 0 uses
    /// every eligible cut.
    pub cut_pool: usize,
    /// Minimum bus count of the smaller island.
    pub min_island_buses: usize,
    /// Magnitude range of the smaller island's power mismatch, as a fraction
    /// of its synchronous capacity. Loads are rescaled per islanding case to
    /// hit a drawn value; `None` keeps the network's own mismatch.
    #[serde(default)]
    pub island_mismatch: Option<(f64, f64)>,
    pub max_retries: usize,
}

impl ScenarioConfig {
    pub fn new(counts: ScenarioCounts, wind_fraction: f64, seed: u64, recorded_buses: Vec<BusId>) -> Self {
        ScenarioConfig {
            counts,
            wind_fraction,
            seed,
            recorded_buses,
            horizon_s: 4.0,
            dt: 1.0 / 600.0,
            t_c_range: (1.0, 1.5),
            load_scale_range: (0.9, 1.1),
            clearing_time_range: (0.05, 0.2),
            damping_pu: SimParams::default().damping_pu,
            fault_retention: SimParams::default().fault_retention,
            max_cut_branches: 5,
            max_cuts: 500,
            cut_pool: 0,
            min_island_buses: 1,
            island_mismatch: None,
            max_retries: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub network: String,
    pub wind_fraction: f64,
    pub script: ContingencyScript,
    pub load_scale: f64,
    /// Drawn mismatch of the smaller island after load rescaling.
    #[serde(default)]
    pub island_mismatch: Option<f64>,
    pub seed: u64,
}

/// One labeled case: true angles at the recorded buses, at the PMU rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub id: usize,
    /// 1 for islanding, 0 otherwise.
    pub label: u8,
    pub t_c: f64,
    pub traces: BTreeMap<BusId, AngleTrace>,
    pub meta: ScenarioMeta,
}

/// Generation minus load on `side` at the proportional dispatch, as a
/// fraction of the synchronous capacity on that side.
pub fn island_imbalance(net: &NetworkModel, side: &[BusId]) -> f64 {
    let capacity = net.total_capacity_mw();
    let total_load: f64 = net.loads.iter().map(|l| l.p_mw).sum();
    let on_side = |b: &BusId| side.binary_search(b).is_ok();
    let gen: f64 = net
        .generators
        .iter()
        .filter(|g| on_side(&g.bus))
        .map(|g| total_load * g.rated_mw / capacity)
        .sum();
    let sync: f64 = net
        .generators
        .iter()
        .filter(|g| on_side(&g.bus) && !g.inverter_based)
        .map(|g| g.rated_mw)
        .sum();
    let load: f64 = net.loads.iter().filter(|l| on_side(&l.bus)).map(|l| l.p_mw).sum();
    (gen - load) / sync
}

/// Rescales loads inside `side` and outside it, keeping the total, so that
/// [`island_imbalance`] of `side` becomes `mismatch`. `None` when that would
/// need a non-positive load scale on either part.
pub fn rebalance_island(net: &NetworkModel, side: &[BusId], mismatch: f64) -> Option<NetworkModel> {
    let on_side = |b: &BusId| side.binary_search(b).is_ok();
    let total: f64 = net.loads.iter().map(|l| l.p_mw).sum();
    let inside: f64 = net.loads.iter().filter(|l| on_side(&l.bus)).map(|l| l.p_mw).sum();
    let outside = total - inside;
    let rated: f64 = net.generators.iter().filter(|g| on_side(&g.bus)).map(|g| g.rated_mw).sum();
    let sync: f64 = net
        .generators
        .iter()
        .filter(|g| on_side(&g.bus) && !g.inverter_based)
        .map(|g| g.rated_mw)
        .sum();
    if inside <= 0.0 || outside <= 0.0 || sync <= 0.0 {
        return None;
    }
    let new_inside = total * rated / net.total_capacity_mw() - mismatch * sync;
    let alpha = new_inside / inside;
    let beta = (total - new_inside) / outside;
    if !(alpha > 0.0 && beta > 0.0) {
        return None;
    }
    let mut out = net.clone();
    for l in &mut out.loads {
        let k = if on_side(&l.bus) { alpha } else { beta };
        l.p_mw *= k;
        l.q_mvar *= k;
    }
    Some(out)
}

/// Cuts usable for islanding cases after wind conversion.
pub fn eligible_cuts(net: &NetworkModel, cfg: &ScenarioConfig) -> Vec<IslandCut> {
    let sync_buses: Vec<BusId> = net
        .generators
        .iter()
        .filter(|g| !g.inverter_based)
        .map(|g| g.bus)
        .collect();
    let side_ok = |side: &[BusId]| {
        side.iter().any(|b| sync_buses.contains(b))
            && side.iter().any(|b| cfg.recorded_buses.contains(b))
    };
    grid_model::enumerate_island_cuts(net, cfg.max_cut_branches, cfg.max_cuts)
        .into_iter()
        .filter(|c| {
            side_ok(&c.side_a)
                && side_ok(&c.side_b)
                && c.side_a.len().min(c.side_b.len()) >= cfg.min_island_buses
        })
        .collect()
}

/// Builds the labeled dataset. Records `0..islanding` are islanding cases;
/// the rest cycle line trip, generator trip and cleared fault.
pub fn generate_scenarios(net: &NetworkModel, cfg: &ScenarioConfig) -> Result<Vec<ScenarioRecord>> {
    if cfg.counts.islanding == 0 || cfg.counts.non_islanding == 0 {
        return Err(Error::Config("scenario counts must be at least 1".into()));
    }
    if cfg.recorded_buses.is_empty() {
        return Err(Error::Config("no recorded buses".into()));
    }
    let net = grid_model::apply_wind_penetration(net, cfg.wind_fraction)?;
    let mut cuts = eligible_cuts(&net, cfg);
    if cuts.is_empty() {
        return Err(Error::Config("no eligible island cut".into()));
    }
    if cfg.cut_pool > 0 && cfg.cut_pool < cuts.len() {
        cuts.shuffle(&mut seed::rng(cfg.seed, &[seed::TAG_POOL]));
        cuts.truncate(cfg.cut_pool);
        cuts.sort_by(|a, b| {
            (a.removed_branches.len(), &a.removed_branches)
                .cmp(&(b.removed_branches.len(), &b.removed_branches))
        });
    }
    let adj = net.adjacency();
    let bridge = grid_model::bridges(&adj, &vec![false; net.branches.len()]);
    let trippable: Vec<usize> = (0..net.branches.len())
        .filter(|&i| net.branches[i].kind == BranchKind::Line && !bridge[i])
        .collect();
    let sync_gens: Vec<usize> = (0..net.generators.len())
        .filter(|&i| !net.generators[i].inverter_based)
        .collect();
    let total = cfg.counts.islanding + cfg.counts.non_islanding;

    (0..total)
        .into_par_iter()
        .map(|id| {
            let mut last = String::new();
            for attempt in 0..cfg.max_retries.max(1) {
                let mut rng = seed::rng(cfg.seed, &[seed::TAG_SCENARIO, id as u64, attempt as u64]);
                let t_c = rng.random_range(cfg.t_c_range.0..=cfg.t_c_range.1);
                let load_scale = rng.random_range(cfg.load_scale_range.0..=cfg.load_scale_range.1);
                let mut case_net = None;
                let mut mismatch = None;
                let contingency = if id < cfg.counts.islanding {
                    let cut = cuts[rng.random_range(0..cuts.len())].clone();
                    if let Some((lo, hi)) = cfg.island_mismatch {
                        let m = rng.random_range(lo..=hi) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        let small = if cut.side_a.len() <= cut.side_b.len() { &cut.side_a } else { &cut.side_b };
                        let mut small = small.clone();
                        small.sort_unstable();
                        match rebalance_island(&net, &small, m / load_scale) {
                            Some(n) => case_net = Some(n),
                            None => {
                                last = format!("cannot rebalance island {small:?} to {m}");
                                continue;
                            }
                        }
                        mismatch = Some(m);
                    }
                    Contingency::Island { cut }
                } else {
                    match (id - cfg.counts.islanding) % 3 {
                        0 if !trippable.is_empty() => Contingency::LineTrip {
                            branch: trippable[rng.random_range(0..trippable.len())],
                        },
                        1 if sync_gens.len() > 1 => Contingency::GeneratorTrip {
                            generator: sync_gens[rng.random_range(0..sync_gens.len())],
                        },
                        _ => Contingency::BusFault {
                            bus: net.buses[rng.random_range(0..net.buses.len())],
                            clearing_time: rng.random_range(
                                cfg.clearing_time_range.0..=cfg.clearing_time_range.1,
                            ),
                        },
                    }
                };
                let script = ContingencyScript { contingency, t_c };
                let params = SimParams {
                    dt: cfg.dt,
                    horizon: cfg.horizon_s,
                    damping_pu: cfg.damping_pu,
                    fault_retention: cfg.fault_retention,
                    load_scale,
                };
                match simulate(case_net.as_ref().unwrap_or(&net), &script, &params) {
                    Ok(all) => {
                        let mut traces = BTreeMap::new();
                        for &bus in &cfg.recorded_buses {
                            let trace = all.get(&bus).ok_or_else(|| {
                                Error::Config(format!("recorded bus {bus} not in network"))
                            })?;
                            traces.insert(bus, measurement::resample_30hz(trace)?);
                        }
                        return Ok(ScenarioRecord {
                            id,
                            label: u8::from(script.contingency.is_islanding()),
                            t_c,
                            traces,
                            meta: ScenarioMeta {
                                network: net.name.clone(),
                                wind_fraction: cfg.wind_fraction,
                                script,
                                load_scale,
                                island_mismatch: mismatch,
                                seed: seed::derive(
                                    cfg.seed,
                                    &[seed::TAG_SCENARIO, id as u64, attempt as u64],
                                ),
                            },
                        });
                    }
                    Err(e) => last = e.to_string(),
                }
            }
            Err(Error::ScenarioRetries {
                attempts: cfg.max_retries,
                last,
            })
        })
        .collect()
}

/// `manifest.json` of a persisted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub network: String,
    pub seed: u64,
    pub wind_fraction: f64,
    pub counts: ScenarioCounts,
    /// Non-islanding mix, in the order cases are cycled.
    pub non_islanding_mix: Vec<String>,
    pub recorded_buses: Vec<BusId>,
    pub records: usize,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct RecordSidecar {
    id: usize,
    label: u8,
    t_c: f64,
    rate: f64,
    t0: f64,
    meta: ScenarioMeta,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Parse {
        what: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        what: path.display().to_string(),
        source,
    })
}

/// Writes `time_s, bus_<id>_deg, ...` for a set of equally sampled traces.
pub(crate) fn write_trace_csv(path: &Path, traces: &BTreeMap<BusId, AngleTrace>) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["time_s".to_string()];
    header.extend(traces.keys().map(|b| format!("bus_{b}_deg")));
    w.write_record(&header).map_err(csv_err)?;
    let first = traces.values().next();
    let len = first.map_or(0, |t| t.samples.len());
    for k in 0..len {
        let mut row = vec![first.unwrap().time_of(k).to_string()];
        row.extend(traces.values().map(|t| t.samples[k].to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_trace_csv(path: &Path, rate: f64, t0: f64, unwrapped: bool) -> Result<BTreeMap<BusId, AngleTrace>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let buses: Vec<BusId> = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .skip(1)
        .map(|h| {
            h.trim_start_matches("bus_")
                .trim_end_matches("_deg")
                .parse()
                .map_err(|_| Error::Config(format!("bad column {h:?} in {}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); buses.len()];
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        for (c, field) in row.iter().skip(1).enumerate() {
            cols[c].push(
                field
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value {field:?} in {}", path.display())))?,
            );
        }
    }
    Ok(buses
        .into_iter()
        .zip(cols)
        .map(|(bus, samples)| {
            (
                bus,
                AngleTrace {
                    bus,
                    rate,
                    t0,
                    samples,
                    unwrapped,
                },
            )
        })
        .collect())
}

pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, records: &[ScenarioRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("manifest.json"), manifest)?;
    for rec in records {
        let first = rec.traces.values().next();
        write_json(
            &dir.join(format!("record_{:05}.json", rec.id)),
            &RecordSidecar {
                id: rec.id,
                label: rec.label,
                t_c: rec.t_c,
                rate: first.map_or(PMU_RATE, |t| t.rate),
                t0: first.map_or(0.0, |t| t.t0),
                meta: rec.meta.clone(),
            },
        )?;
        write_trace_csv(&dir.join(format!("record_{:05}.csv", rec.id)), &rec.traces)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<ScenarioRecord>)> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let records = (0..manifest.records)
        .map(|id| {
            let side: RecordSidecar = read_json(&dir.join(format!("record_{id:05}.json")))?;
            let traces = read_trace_csv(&dir.join(format!("record_{id:05}.csv")), side.rate, side.t0, true)?;
            Ok(ScenarioRecord {
                id: side.id,
                label: side.label,
                t_c: side.t_c,
                traces,
                meta: side.meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_area() -> NetworkModel {
        // Two machines joined by a double tie; area 2 carries most load.
        NetworkModel::from_json_str(
            r#"{"name": "two_area", "base_frequency_hz": 60, "buses": [1, 2, 3, 4],
            "branches": [
                {"from": 1, "to": 2, "kind": "line", "b_pu": 10},
                {"from": 2, "to": 3, "kind": "line", "b_pu": 5},
                {"from": 2, "to": 3, "kind": "line", "b_pu": 5},
                {"from": 3, "to": 4, "kind": "line", "b_pu": 10}],
            "generators": [
                {"bus": 1, "h_s": 5, "rated_mw": 300},
                {"bus": 4, "h_s": 5, "rated_mw": 300},
                {"bus": 2, "h_s": 4, "rated_mw": 100}],
            "loads": [{"bus": 2, "p_mw": 50}, {"bus": 3, "p_mw": 250}]}"#,
        )
        .unwrap()
    }

    fn max_drift(traces: &BTreeMap<BusId, AngleTrace>) -> f64 {
        traces
            .values()
            .flat_map(|t| t.samples.iter().map(move |s| (s - t.samples[0]).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn steady_state_holds() {
        for net in [two_area(), NetworkModel::bundled("net118").unwrap()] {
            let script = ContingencyScript {
                contingency: Contingency::Steady,
                t_c: 1.0,
            };
            let out = simulate(&net, &script, &SimParams::default()).unwrap();
            assert!(max_drift(&out) < 1e-6, "{}", max_drift(&out));
        }
    }

    #[test]
    fn island_angles_diverge() {
        let net = two_area();
        let cut = grid_model::enumerate_island_cuts(&net, 2, 10)
            .into_iter()
            .find(|c| c.removed_branches == vec![1, 2])
            .unwrap();
        let script = ContingencyScript {
            contingency: Contingency::Island { cut },
            t_c: 1.0,
        };
        let params = SimParams {
            horizon: 6.0,
            ..SimParams::default()
        };
        let out = simulate(&net, &script, &params).unwrap();
        let spread = |k: usize| out[&1].samples[k] - out[&4].samples[k];
        let s2 = spread(1800);
        let s4 = spread(2400);
        let s6 = spread(3600);
        // area 1 has surplus and runs ahead; the gap keeps growing
        assert!(s4 > s2 + 5.0 && s6 > s4 + 5.0, "{s2} {s4} {s6}");
    }

    #[test]
    fn generator_trip_stays_bounded() {
        let net = two_area();
        let script = ContingencyScript {
            contingency: Contingency::GeneratorTrip { generator: 2 },
            t_c: 1.0,
        };
        let params = SimParams {
            horizon: 8.0,
            ..SimParams::default()
        };
        let out = simulate(&net, &script, &params).unwrap();
        let spread = |k: usize| {
            let v: Vec<f64> = out.values().map(|t| t.samples[k]).collect();
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        };
        let late: Vec<f64> = (3000..=4800).step_by(300).map(spread).collect();
        let early_max = (600..3000).map(spread).fold(0.0, f64::max);
        // common drift is allowed, but the spread must settle
        for w in late.windows(2) {
            assert!((w[1] - w[0]).abs() < 0.05, "{late:?}");
        }
        assert!(late[0] <= early_max + 1e-9);
        // and the system as a whole did slow down
        assert!(out[&1].samples[4800] < out[&1].samples[0] - 1.0);
    }

    #[test]
    fn fault_recovers_to_prefault_spread() {
        let net = two_area();
        let script = ContingencyScript {
            contingency: Contingency::BusFault {
                bus: 3,
                clearing_time: 0.1,
            },
            t_c: 1.0,
        };
        let params = SimParams {
            horizon: 10.0,
            ..SimParams::default()
        };
        let out = simulate(&net, &script, &params).unwrap();
        let d0 = out[&1].samples[0] - out[&4].samples[0];
        let d_end = out[&1].samples[6000] - out[&4].samples[6000];
        assert!((d0 - d_end).abs() < 0.01, "{d0} {d_end}");
    }

    #[test]
    fn rejects_coarse_step() {
        let params = SimParams {
            dt: 0.01,
            ..SimParams::default()
        };
        let script = ContingencyScript {
            contingency: Contingency::Steady,
            t_c: 1.0,
        };
        assert!(simulate(&two_area(), &script, &params).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let net = NetworkModel::bundled("net18").unwrap();
        let cfg = ScenarioConfig::new(
            ScenarioCounts {
                islanding: 1,
                non_islanding: 1,
            },
            0.0,
            9,
            vec![1, 11, 14, 23, 31],
        );
        let a = generate_scenarios(&net, &cfg).unwrap();
        let b = generate_scenarios(&net, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].label, 1);
        assert_eq!(a[1].label, 0);
        let len = a[0].traces[&1].samples.len();
        assert_eq!(len, 121);
        assert!(a.iter().all(|r| r.traces.values().all(|t| t.rate == 30.0 && t.samples.len() == len)));

        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            network: "net18".into(),
            seed: 9,
            wind_fraction: 0.0,
            counts: cfg.counts,
            non_islanding_mix: vec!["line_trip".into()],
            recorded_buses: cfg.recorded_buses.clone(),
            records: a.len(),
            config_hash: "x".into(),
        };
        save_dataset(dir.path(), &manifest, &a).unwrap();
        let (m2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(back, a);
    }
}
