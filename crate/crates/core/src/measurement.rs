//! Turns true angle trajectories into PMU-like measurements.
//!
//! The measured angle is the true angle plus a per-channel instrumentation
//! offset, drawn once from `U(-instr_range, instr_range)` and held for the
//! whole stream, plus independent Gaussian PMU noise on every sample.
//! Measurements are reported wrapped to (-180, 180] like a real PMU.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics_sim::{self, AngleTrace, ScenarioRecord, PMU_RATE};
use crate::error::{Error, Result};
use crate::grid_model::BusId;
use crate::seed;

/// PMU angle noise standard deviation, degrees.
pub const DEFAULT_PMU_SIGMA: f64 = 0.104;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelErrorModel {
    pub pmu_sigma: f64,
    /// Half-width of the uniform instrumentation offset, degrees.
    pub instr_range: f64,
}

impl ChannelErrorModel {
    pub fn new(pmu_sigma: f64, instr_range: f64) -> Result<Self> {
        if !(pmu_sigma >= 0.0) || !(instr_range >= 0.0) {
            return Err(Error::Config(format!(
                "error model needs non-negative parameters, got ({pmu_sigma}, {instr_range})"
            )));
        }
        Ok(ChannelErrorModel {
            pmu_sigma,
            instr_range,
        })
    }

    pub const fn clean() -> Self {
        ChannelErrorModel {
            pmu_sigma: 0.0,
            instr_range: 0.0,
        }
    }

    /// Short tag for file names, e.g. `s0.104_r4`.
    pub fn tag(&self) -> String {
        format!("s{}_r{}", self.pmu_sigma, self.instr_range)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredScenario {
    pub base_id: usize,
    pub label: u8,
    pub traces: BTreeMap<BusId, AngleTrace>,
    /// Applied instrumentation offsets. Audit only; never fed to a detector.
    pub offsets: BTreeMap<BusId, f64>,
    pub seed: u64,
}

/// Wraps an angle into (-180, 180].
pub fn wrap_deg(x: f64) -> f64 {
    if x > -180.0 && x <= 180.0 {
        return x;
    }
    let r = x.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Decimates to 30 samples/s, keeping the sample at `t0`.
pub fn resample_30hz(trace: &AngleTrace) -> Result<AngleTrace> {
    let ratio = trace.rate / PMU_RATE;
    let step = ratio.round();
    if !(step >= 1.0) || (ratio - step).abs() > 1e-9 {
        return Err(Error::RateNotMultiple(trace.rate));
    }
    Ok(AngleTrace {
        samples: trace.samples.iter().step_by(step as usize).copied().collect(),
        rate: PMU_RATE,
        ..trace.clone()
    })
}

/// Adds instrumentation offsets and PMU noise to every channel.
///
/// Offsets come from one stream and noise from another, both keyed by
/// `seed`. Two calls with the same seed but different `instr_range`
/// therefore see the same noise and offsets that differ only in scale.
pub fn inject_errors(scenario: &ScenarioRecord, model: &ChannelErrorModel, seed_value: u64) -> MeasuredScenario {
    let mut offset_rng = seed::rng(seed_value, &[seed::TAG_OFFSET]);
    let mut noise_rng = seed::rng(seed_value, &[seed::TAG_NOISE]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut traces = BTreeMap::new();
    let mut offsets = BTreeMap::new();
    for (&bus, trace) in &scenario.traces {
        let u: f64 = offset_rng.random_range(-1.0..=1.0);
        let offset = u * model.instr_range;
        let samples = trace
            .samples
            .iter()
            .map(|&x| {
                let noise = model.pmu_sigma * normal.sample(&mut noise_rng);
                wrap_deg(x + offset + noise)
            })
            .collect();
        offsets.insert(bus, offset);
        traces.insert(
            bus,
            AngleTrace {
                samples,
                unwrapped: false,
                ..trace.clone()
            },
        );
    }
    MeasuredScenario {
        base_id: scenario.id,
        label: scenario.label,
        traces,
        offsets,
        seed: seed_value,
    }
}

/// Removes ±360° jumps so consecutive deltas lie in (-180, 180].
pub fn unwrap(trace: &AngleTrace) -> AngleTrace {
    let mut samples = Vec::with_capacity(trace.samples.len());
    let mut shift = 0.0;
    let mut prev: Option<f64> = None;
    for &x in &trace.samples {
        if let Some(p) = prev {
            let step = x - p;
            let wrapped = wrap_deg(step);
            shift += wrapped - step;
        }
        prev = Some(x);
        samples.push(x + shift);
    }
    AngleTrace {
        samples,
        unwrapped: true,
        ..trace.clone()
    }
}

#[derive(Serialize)]
struct OffsetSidecar<'a> {
    base_id: usize,
    seed: u64,
    model: &'a ChannelErrorModel,
    offsets: &'a BTreeMap<BusId, f64>,
}

/// Writes `measured_<tag>.csv` and `measured_<tag>_offsets.json` into `dir`.
pub fn save_measured(dir: &Path, ms: &MeasuredScenario, model: &ChannelErrorModel) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tag = model.tag();
    dynamics_sim::write_trace_csv(&dir.join(format!("measured_{tag}.csv")), &ms.traces)?;
    dynamics_sim::write_json(
        &dir.join(format!("measured_{tag}_offsets.json")),
        &OffsetSidecar {
            base_id: ms.base_id,
            seed: ms.seed,
            model,
            offsets: &ms.offsets,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics_sim::{Contingency, ContingencyScript, ScenarioMeta};
    use proptest::prelude::*;

    fn trace(samples: Vec<f64>, rate: f64) -> AngleTrace {
        AngleTrace {
            bus: 1,
            rate,
            t0: 0.0,
            samples,
            unwrapped: true,
        }
    }

    fn record(traces: Vec<(BusId, Vec<f64>)>) -> ScenarioRecord {
        ScenarioRecord {
            id: 0,
            label: 1,
            t_c: 1.0,
            traces: traces
                .into_iter()
                .map(|(b, s)| {
                    (
                        b,
                        AngleTrace {
                            bus: b,
                            ..trace(s, 30.0)
                        },
                    )
                })
                .collect(),
            meta: ScenarioMeta {
                network: "t".into(),
                wind_fraction: 0.0,
                script: ContingencyScript {
                    contingency: Contingency::Steady,
                    t_c: 1.0,
                },
                load_scale: 1.0,
                island_mismatch: None,
                seed: 0,
            },
        }
    }

    #[test]
    fn decimates_every_twentieth() {
        let t = trace((0..600).map(f64::from).collect(), 600.0);
        let r = resample_30hz(&t).unwrap();
        assert_eq!(r.samples.len(), 30);
        assert_eq!(r.rate, 30.0);
        assert!(r.samples.iter().enumerate().all(|(k, &x)| x == (20 * k) as f64));
    }

    #[test]
    fn thirty_hz_is_identity() {
        let t = trace(vec![1.0, 2.0, 5.0], 30.0);
        assert_eq!(resample_30hz(&t).unwrap(), t);
        let c = trace(vec![7.5; 120], 120.0);
        assert!(resample_30hz(&c).unwrap().samples.iter().all(|&x| x == 7.5));
    }

    #[test]
    fn odd_rate_rejected() {
        assert!(matches!(
            resample_30hz(&trace(vec![0.0; 10], 50.0)),
            Err(Error::RateNotMultiple(_))
        ));
    }

    #[test]
    fn zero_model_is_identity() {
        let rec = record(vec![(1, vec![10.0, 11.0, 12.5]), (2, vec![-3.0, -3.0, -2.0])]);
        let ms = inject_errors(&rec, &ChannelErrorModel::clean(), 5);
        for (bus, t) in &ms.traces {
            assert_eq!(t.samples, rec.traces[bus].samples);
        }
    }

    #[test]
    fn offsets_are_constant_and_bounded() {
        let rec = record(
            (1..=20)
                .map(|b| (b, (0..90).map(|k| 0.3 * k as f64 - 50.0).collect()))
                .collect(),
        );
        let model = ChannelErrorModel::new(0.0, 4.0).unwrap();
        let ms = inject_errors(&rec, &model, 77);
        for (bus, t) in &ms.traces {
            let diffs: Vec<f64> = t
                .samples
                .iter()
                .zip(&rec.traces[bus].samples)
                .map(|(m, x)| m - x)
                .collect();
            assert!(diffs.iter().all(|d| (d - diffs[0]).abs() < 1e-12));
            assert!(diffs[0].abs() <= 4.0);
            assert!((diffs[0] - ms.offsets[bus]).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_std_matches_sigma() {
        let rec = record((1..=10).map(|b| (b, vec![0.0; 10_000])).collect());
        let model = ChannelErrorModel::new(DEFAULT_PMU_SIGMA, 0.0).unwrap();
        let ms = inject_errors(&rec, &model, 3);
        let all: Vec<f64> = ms.traces.values().flat_map(|t| t.samples.clone()).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.099..=0.109).contains(&std), "{std}");
    }

    #[test]
    fn same_seed_scales_offsets() {
        let rec = record(vec![(1, vec![0.0; 5]), (2, vec![0.0; 5])]);
        let a = inject_errors(&rec, &ChannelErrorModel::new(0.1, 1.0).unwrap(), 11);
        let b = inject_errors(&rec, &ChannelErrorModel::new(0.1, 4.0).unwrap(), 11);
        for bus in [1, 2] {
            assert!((b.offsets[&bus] - 4.0 * a.offsets[&bus]).abs() < 1e-12);
        }
        assert_ne!(a.offsets[&1], a.offsets[&2]);
    }

    #[test]
    fn unwrap_single_crossing() {
        let u = unwrap(&trace(vec![179.0, -179.0], 30.0));
        assert_eq!(u.samples, vec![179.0, 181.0]);
        assert!(u.unwrapped);
    }

    #[test]
    fn unwrap_continuous_unchanged() {
        let s = vec![-20.0, -10.0, 5.0, 100.0, 170.0];
        assert_eq!(unwrap(&trace(s.clone(), 30.0)).samples, s);
    }

    #[test]
    fn unwrap_recovers_ramp() {
        let ramp: Vec<f64> = (0..600).map(|k| -170.0 + 7.3 * k as f64).collect();
        let wrapped: Vec<f64> = ramp.iter().map(|&x| wrap_deg(x)).collect();
        let u = unwrap(&trace(wrapped, 30.0));
        for (a, b) in u.samples.iter().zip(&ramp) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn unwrap_inverts_wrap(
            start in -179.0f64..180.0,
            steps in proptest::collection::vec(-170.0f64..170.0, 1..200),
        ) {
            let mut x = vec![start];
            for s in steps {
                let last = *x.last().unwrap();
                x.push(last + s);
            }
            let wrapped: Vec<f64> = x.iter().map(|&v| wrap_deg(v)).collect();
            let u = unwrap(&trace(wrapped.clone(), 30.0));
            for ((a, b), w) in u.samples.iter().zip(&x).zip(&wrapped) {
                prop_assert!((a - b).abs() < 1e-9);
                prop_assert!(wrap_deg(a - w).abs() < 1e-9);
            }
        }
    }
}
