use gop_core::baselines::{run_pmlp_baseline, run_pop_baseline, BaselineKind, PopConfig, SearchSide};
use gop_core::cost::count_params;
use gop_core::data::{gaussian_blobs, split_dataset, two_moons, SplitArrays, SplitFractions};
use gop_core::train::{LrStage, TrainSpec};
use gop_core::{model_io, OperatorSet, LIBRARY_SIZE};

fn arrays(ds: &gop_core::data::Dataset, seed: u64) -> SplitArrays {
    let fr = SplitFractions {
        train: 0.6,
        val: 0.0,
        test: 0.4,
        stratified: true,
    };
    split_dataset(ds, &fr, seed).unwrap().split_arrays().unwrap()
}

fn quick(template: Vec<usize>, target_mse: f64) -> PopConfig {
    PopConfig {
        template,
        target_mse,
        epochs_per_candidate: 1,
        train_spec: TrainSpec {
            lr_schedule: vec![LrStage { lr: 0.01, epochs: 2 }],
            ..TrainSpec::default()
        },
        seed: 5,
        ..PopConfig::default()
    }
}

#[test]
fn one_layer_template_logs_four_sweeps() {
    let a = arrays(&two_moons(120, 0.2, 1), 1);
    let (net, rep) = run_pop_baseline(&a.progression_data(), &quick(vec![4], 0.0)).unwrap();
    assert_eq!(rep.method, BaselineKind::Pop);
    assert_eq!(rep.candidate_trainings(), 4 * LIBRARY_SIZE);
    assert_eq!(rep.layers.len(), 1);
    assert_eq!(rep.layers[0].candidate_trainings, 4 * LIBRARY_SIZE);
    for pass in 1..=2 {
        for side in [SearchSide::Output, SearchSide::Hidden] {
            let n = rep.search.iter().filter(|c| c.pass == pass && c.side == side).count();
            assert_eq!(n, LIBRARY_SIZE);
        }
    }
    // The kept output op-set is the best of the last output sweep.
    let last_hidden: Vec<_> = rep.search.iter().filter(|c| c.pass == 2 && c.side == SearchSide::Hidden).collect();
    assert!(last_hidden.iter().all(|c| c.output_op == rep.layers[0].output_op));
    assert!(rep.template_exhausted);
    let layer = &net.layers()[0];
    assert_eq!(layer.blocks().len(), 1);
    assert_eq!(layer.blocks()[0].op_set, rep.layers[0].hidden_op);
    assert_eq!(rep.params, count_params(&net));
}

#[test]
fn pmlp_matches_perceptron_only_pop() {
    let a = arrays(&two_moons(120, 0.2, 2), 2);
    let cfg = quick(vec![5, 5], 0.0);
    let (pm, pm_rep) = run_pmlp_baseline(&a.progression_data(), &cfg).unwrap();
    let pop_cfg = PopConfig {
        library: Some(vec![OperatorSet::PERCEPTRON]),
        ..cfg
    };
    let (pop, pop_rep) = run_pop_baseline(&a.progression_data(), &pop_cfg).unwrap();
    assert!(pm_rep.search.is_empty());
    assert_eq!(pm_rep.method, BaselineKind::Pmlp);
    assert_eq!(pop_rep.candidate_trainings(), 4 * 2);
    assert_eq!(model_io::to_json(&pm), model_io::to_json(&pop));
    assert_eq!(pm_rep.layers.len(), pop_rep.layers.len());
    for (a, b) in pm_rep.layers.iter().zip(&pop_rep.layers) {
        assert_eq!((a.width, a.hidden_op, a.output_op), (b.width, b.hidden_op, b.output_op));
    }
}

#[test]
fn reaching_the_target_stops_layer_growth() {
    let a = arrays(&gaussian_blobs(150, 2, 2, 6.0, 0.4, 3), 3);
    let mut cfg = quick(vec![8, 8, 8], 0.2);
    cfg.library = Some(vec![OperatorSet::PERCEPTRON]);
    cfg.epochs_per_candidate = 40;
    cfg.candidate_lr = 0.1;
    let (net, rep) = run_pop_baseline(&a.progression_data(), &cfg).unwrap();
    assert_eq!(rep.layers.len(), 1, "{:?}", rep.layers);
    assert!(!rep.template_exhausted);
    assert!(rep.layers[0].train_mse <= 0.2);
    // hidden + output GOP layers of the single-hidden-layer network
    assert_eq!(net.layers().len(), 2);
}

#[test]
fn baseline_runs_are_deterministic() {
    let a = arrays(&two_moons(100, 0.2, 4), 4);
    let mut cfg = quick(vec![3], 0.0);
    cfg.library = Some((0..6).map(|i| OperatorSet::from_index(i * 23).unwrap()).collect());
    let (n1, r1) = run_pop_baseline(&a.progression_data(), &cfg).unwrap();
    let (n2, r2) = run_pop_baseline(&a.progression_data(), &cfg).unwrap();
    assert_eq!(n1, n2);
    assert_eq!(r1.to_json(), r2.to_json());
}
