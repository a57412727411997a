use cuspad::classifier;
use cuspad::dynamics_sim::{self, ScenarioCounts};
use cuspad::experiment::{self, ExperimentConfig};
use cuspad::features::FeatureMode;
use cuspad::grid_model::{self, NetworkModel};
use cuspad::measurement;

fn small(sigma: f64) -> ExperimentConfig {
    ExperimentConfig {
        counts: ScenarioCounts {
            islanding: 20,
            non_islanding: 24,
        },
        trials: 3,
        pmu_sigma: sigma,
        instr_ranges: vec![0.0, 1.0, 4.0],
        ..ExperimentConfig::net18()
    }
}

#[test]
fn noiseless_cuspad_is_flat_across_offsets() {
    let cfg = small(0.0);
    let grid = experiment::run_accuracy_grid(&cfg, None).unwrap();
    assert_eq!(grid.cells.len(), 6);
    let base = grid.get(0.0, 0.0, FeatureMode::Cuspad).unwrap();
    for r in [1.0, 4.0] {
        let cell = grid.get(0.0, r, FeatureMode::Cuspad).unwrap();
        // Offsets cancel to rounding, so every prediction is the same.
        assert_eq!(cell.per_trial, base.per_trial, "range {r}");
    }
}

#[test]
fn zero_error_accuracy_equals_clean_tree_accuracy() {
    let cfg = small(0.0);
    let net = NetworkModel::bundled("net18").unwrap();
    let records = experiment::build_dataset(&cfg, &net, 0.0, &cfg.pmu_buses, None).unwrap();
    let opts = cfg.feature_options(FeatureMode::Ad, cfg.window);
    let tree = experiment::train_clean(&records, &[opts], cfg.tree_params()).unwrap().remove(0);
    let (fvs, labels) = classifier::clean_features(&records, &opts);
    let x: Vec<Vec<f64>> = fvs.iter().map(|f| f.values.clone()).collect();
    let clean = 100.0 * tree.accuracy(&x, &labels).unwrap();

    let grid = experiment::run_accuracy_grid(&cfg, None).unwrap();
    let cell = grid.get(0.0, 0.0, FeatureMode::Ad).unwrap();
    for &a in &cell.per_trial {
        assert!((a - clean).abs() < 1e-9, "{a} vs {clean}");
    }
    assert_eq!(cell.ci95_halfwidth, 0.0);
}

#[test]
fn dataset_roundtrip_through_disk() {
    let cfg = small(0.104);
    let net = NetworkModel::bundled("net18").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = experiment::build_dataset(&cfg, &net, 0.0, &cfg.pmu_buses, Some(dir.path())).unwrap();
    let b = experiment::build_dataset(&cfg, &net, 0.0, &cfg.pmu_buses, Some(dir.path())).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|r| r.label == 1).count(), 20);
    for r in a.iter().filter(|r| r.label == 1) {
        let dynamics_sim::Contingency::Island { cut } = &r.meta.script.contingency else {
            panic!("islanding record without a cut");
        };
        // Label soundness, re-checked on the graph.
        let mut removed = vec![false; net.branches.len()];
        for &id in &cut.removed_branches {
            removed[id] = true;
        }
        assert_eq!(grid_model::components(&net, &removed).1, 2);
        let m = r.meta.island_mismatch.expect("preset rescales islands");
        assert!((0.03..=0.10).contains(&m.abs()));
    }
}

#[test]
fn measured_angles_keep_the_offset_constant() {
    let cfg = small(0.0);
    let net = NetworkModel::bundled("net18").unwrap();
    let records = experiment::build_dataset(&cfg, &net, 0.0, &cfg.pmu_buses, None).unwrap();
    let model = measurement::ChannelErrorModel::new(0.0, 4.0).unwrap();
    let ms = measurement::inject_errors(&records[0], &model, 9);
    for (bus, t) in &ms.traces {
        let truth = &records[0].traces[bus];
        let m = measurement::unwrap(t);
        let d0 = m.samples[0] - truth.samples[0];
        assert!((d0 - ms.offsets[bus]).abs() < 1e-9);
        for (x, y) in m.samples.iter().zip(&truth.samples) {
            assert!((x - y - d0).abs() < 1e-9);
        }
    }
}

#[test]
fn network_file_schema_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("three.json");
    std::fs::write(
        &path,
        r#"{"name": "three", "base_frequency_hz": 50, "buses": [10, 20, 30],
            "branches": [{"from": 10, "to": 20, "kind": "line", "b_pu": 8},
                         {"from": 20, "to": 30, "kind": "transformer", "b_pu": 20}],
            "generators": [{"bus": 10, "h_s": 5, "rated_mw": 100, "inverter_based": false},
                           {"bus": 30, "h_s": 0, "rated_mw": 40, "inverter_based": true}],
            "loads": [{"bus": 20, "p_mw": 90, "q_mvar": 10}]}"#,
    )
    .unwrap();
    let net = NetworkModel::resolve(path.to_str().unwrap()).unwrap();
    assert_eq!(net.buses, vec![10, 20, 30]);
    assert_eq!(net.base_frequency_hz, 50.0);
    assert_eq!(net.inverter_capacity_mw(), 40.0);
    let subs = grid_model::group_substations(&net, 1.0);
    assert_eq!(subs.groups, vec![vec![10], vec![20, 30]]);
}
