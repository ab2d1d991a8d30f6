mod common;

use aesm2::data::{SampleCounts, SyntheticSpec};
use aesm2::eval::{auc, evaluate, metrics_table, scenario_utilization, transfer_matrix, utilization};
use aesm2::model::{ModelConfig, ModelKind};
use aesm2::train::{init_model, train, TrainConfig};
use common::{model, model_with, synthetic};
use proptest::prelude::*;

fn brute_force(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

proptest! {
    #[test]
    fn auc_matches_pair_counting(data in proptest::collection::vec((0u8..20, 0u8..2), 2..120)) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 7.0).collect();
        let labels: Vec<u8> = data.iter().map(|(_, y)| *y).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let fast = auc(&scores, &labels).unwrap();
        prop_assert!((fast - brute_force(&scores, &labels)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&fast));
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 2.0).collect();
        prop_assert_eq!(auc(&squashed, &labels).unwrap(), fast);
    }
}

#[test]
fn untrained_models_score_at_chance() {
    let mut sums = vec![(0.0, 0.0); 5];
    let seeds = 5;
    for seed in 0..seeds {
        let test = synthetic(20_000, 100 + seed);
        let report = evaluate(&model(ModelKind::Aesm2, seed), &test).unwrap();
        for (cell, acc) in report.scenarios.iter().chain([&report.all]).zip(sums.iter_mut()) {
            acc.0 += cell.ctr_auc.unwrap() / seeds as f64;
            acc.1 += cell.ctcvr_auc.unwrap() / seeds as f64;
        }
    }
    for (ctr, ctcvr) in sums {
        assert!((0.45..=0.55).contains(&ctr), "ctr {ctr}");
        assert!((0.45..=0.55).contains(&ctcvr), "ctcvr {ctcvr}");
    }
}

#[test]
fn evaluation_is_deterministic_and_tables_align() {
    let test = synthetic(3000, 4);
    let a = model(ModelKind::Aesm2, 1);
    let h = model(ModelKind::HardSharing, 1);
    let ra = evaluate(&a, &test).unwrap();
    assert_eq!(ra, evaluate(&a, &test).unwrap());
    let rh = evaluate(&h, &test).unwrap();
    let table = metrics_table(&[("aesm2".into(), &ra), ("hard_sharing".into(), &rh)]).unwrap();
    let lines: Vec<_> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("model,channel0/domain0:ctr_auc"));
    assert_eq!(lines[1].split(',').count(), lines[2].split(',').count());
}

#[test]
fn single_class_cells_are_absent() {
    let mut test = synthetic(2000, 4);
    for inst in &mut test.instances {
        if test.schema.scenario_index(&inst.scenario_path) == 1 {
            inst.conversion = 0;
        }
    }
    let r = evaluate(&model(ModelKind::Aesm2, 1), &test).unwrap();
    assert_eq!(r.scenarios[1].ctcvr_auc, None);
    assert!(r.scenarios[1].ctr_auc.is_some());
    let table = metrics_table(&[("m".into(), &r)]).unwrap();
    assert!(table.lines().nth(1).unwrap().contains(",,"));
}

#[test]
fn utilization_frequencies_sum_to_k() {
    let test = synthetic(1500, 2);
    for (k_sp, k_sh) in [(1, 1), (2, 3)] {
        let m = model_with(ModelConfig { k_specific: k_sp, k_shared: k_sh, ..ModelConfig::default() }, 3);
        let report = utilization(&m, &test).unwrap();
        assert_eq!(report.layers.len(), 4);
        for layer in &report.layers {
            for b in &layer.branches {
                let sp: f64 = b.specific_freq.iter().sum();
                let sh: f64 = b.shared_freq.iter().sum();
                assert!((sp - k_sp as f64).abs() < 1e-9 && (sh - k_sh as f64).abs() < 1e-9);
                assert!(b.specific_freq.iter().chain(&b.shared_freq).all(|f| (0.0..=1.0).contains(f)));
            }
        }
    }
}

#[test]
fn flat_gates_always_pick_expert_zero() {
    let test = synthetic(500, 2);
    let mut m = model(ModelKind::Aesm2, 3);
    for p in m.params_mut() {
        if p.name.contains(".gate") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let report = utilization(&m, &test).unwrap();
    for layer in &report.layers {
        for b in &layer.branches {
            assert_eq!(b.specific_freq[0], 1.0);
            assert_eq!(b.shared_freq[0], 1.0);
        }
    }
    let csv = report.to_csv();
    assert!(csv.starts_with("layer,branch,expert,specific_freq,shared_freq\n"));
    assert!(csv.contains("scenario0,0,0,1,1"));
}

#[test]
fn utilization_needs_a_selecting_model_and_data() {
    let test = synthetic(100, 2);
    assert!(utilization(&model(ModelKind::Mmoe, 1), &test).is_err());
    let mut empty = test.clone();
    empty.instances.clear();
    assert!(utilization(&model(ModelKind::Aesm2, 1), &empty).is_err());
}

#[test]
fn transfer_matrix_is_square() {
    let test = synthetic(4000, 6);
    let models: Vec<_> = (0..4).map(|s| model(ModelKind::HardSharing, s)).collect();
    let tests: Vec<_> = (0..4).map(|s| test.filter_scenario(s)).collect();
    let t = transfer_matrix(&models, &tests).unwrap();
    assert_eq!(t.ctr.len(), 4);
    assert!(t.ctr.iter().chain(&t.ctcvr).all(|row| row.len() == 4));
    assert!(transfer_matrix(&models[..3], &tests).is_err());
    assert_eq!(t.to_csv().lines().count(), 1 + 8);
}

/// Per-scenario selection profile over every layer.
fn profile(m: &aesm2::model::Model, test: &aesm2::data::Dataset, s: usize) -> Vec<f64> {
    let path = test.schema.scenario_path(s);
    let report = scenario_utilization(m, test, s).unwrap();
    let mut v = Vec::new();
    for layer in &report.layers {
        let branches: Vec<usize> = match layer.kind {
            aesm2::selection::LayerKind::Scenario => vec![path[layer.layer]],
            aesm2::selection::LayerKind::Task => (0..layer.branches.len()).collect(),
        };
        for b in branches {
            v.extend(&layer.branches[b].specific_freq);
            v.extend(&layer.branches[b].shared_freq);
        }
    }
    v
}

#[test]
fn channel_siblings_have_closer_utilization() {
    let spec = SyntheticSpec { samples: SampleCounts { train: 20_000, val: 0, test: 6000 }, ..Default::default() };
    let mut wins = 0;
    for seed in 0..5 {
        let splits = aesm2::data::generate_splits(&spec, seed).unwrap();
        let cfg = TrainConfig { epochs: 2, seed, ..Default::default() };
        let m = init_model(ModelConfig::default(), common::layout(), seed).unwrap();
        let m = train(m, &splits.train, None, &cfg, &mut ()).unwrap().model;
        let p: Vec<Vec<f64>> = (0..4).map(|s| profile(&m, &splits.test, s)).collect();
        let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        // scenarios 0,1 share channel 0; 2,3 share channel 1
        let same = (l1(&p[0], &p[1]) + l1(&p[2], &p[3])) / 2.0;
        let cross = (l1(&p[0], &p[2]) + l1(&p[0], &p[3]) + l1(&p[1], &p[2]) + l1(&p[1], &p[3])) / 4.0;
        if same < cross {
            wins += 1;
        }
    }
    assert!(wins >= 3, "channel siblings closer in {wins} of 5 seeds");
}

#[test]
fn trained_model_beats_chance_in_every_cell() {
    let spec = SyntheticSpec {
        level_mix: vec![0.5, 0.5],
        samples: SampleCounts { train: 20_000, val: 4_000, test: 10_000 },
        ..SyntheticSpec::default()
    };
    let s = aesm2::data::generate_splits(&spec, 8).unwrap();
    let cfg = TrainConfig { epochs: 6, seed: 8, ..TrainConfig::default() };
    let (_, report) =
        aesm2::train::fit_and_evaluate(ModelConfig::default(), &s.train, Some(&s.val), &s.test, &cfg).unwrap();
    for cell in report.scenarios.iter().chain([&report.all]) {
        assert!(cell.ctr_auc.unwrap() > 0.55, "{cell:?}");
        assert!(cell.ctcvr_auc.unwrap() > 0.55, "{cell:?}");
    }
}

/// Single pairs of independent scenarios can correlate by chance through the
/// low-dimensional ground truth, so chance level is checked on the mean.
#[test]
fn independent_scenarios_transfer_at_chance_on_average() {
    let spec = SyntheticSpec {
        samples: SampleCounts { train: 40_000, val: 8_000, test: 20_000 },
        ..SyntheticSpec::default().independent_scenarios()
    };
    let mut off = Vec::new();
    for seed in 0..3 {
        let s = aesm2::data::generate_splits(&spec, seed).unwrap();
        let cfg = TrainConfig { epochs: 6, seed, ..TrainConfig::default() };
        let t = aesm2::train::train_transfer(&ModelConfig::default(), &s.train, Some(&s.val), &s.test, &cfg).unwrap();
        for task in [&t.ctr, &t.ctcvr] {
            for (i, row) in task.iter().enumerate() {
                off.extend(row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v.unwrap()));
            }
        }
    }
    let mean = off.iter().sum::<f64>() / off.len() as f64;
    assert!((mean - 0.5).abs() <= 0.03, "mean off-diagonal auc {mean}");
}
