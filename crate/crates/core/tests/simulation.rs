use fogsim::model::{evaluate, generate_partitions, local_update, Dataset, ParameterVector};
use fogsim::netmodel::{EventKind, Phase};
use fogsim::sim::{run_centralized, run_simulation, run_star, SimulationConfig};
use fogsim::topology::{build_tree, AggregationMode, D2dModel, LayerSpec};

fn small(devices: usize, cluster: usize, mid: usize) -> SimulationConfig {
    let mut cfg = SimulationConfig::three_layer(devices, cluster, mid);
    cfg.data.samples_per_device = 40;
    cfg.data.feature_dim = 4;
    cfg.data.class_count = 3;
    cfg.data.test_samples = 200;
    cfg.training.global_rounds = 6;
    cfg.training.local_steps = 3;
    cfg
}

fn device_data(cfg: &SimulationConfig) -> Vec<Dataset> {
    generate_partitions(&cfg.partition_spec(), cfg.seed)
        .unwrap()
        .devices
}

fn close(a: &ParameterVector, b: &ParameterVector, tol: f64) -> bool {
    a.distance(b) <= tol * b.norm().max(1.0)
}

/// Accumulate-then-divide average, written out separately from the library.
fn average(models: &[(ParameterVector, f64)]) -> ParameterVector {
    let len = models[0].0.as_slice().len();
    let mut sum = vec![0.0; len];
    let mut total = 0.0;
    for (m, w) in models {
        for (s, x) in sum.iter_mut().zip(m.as_slice()) {
            *s += w * x;
        }
        total += w;
    }
    ParameterVector::from_vec(sum.into_iter().map(|s| s / total).collect())
}

#[test]
fn single_cluster_run_matches_flat_fedavg_loop() {
    let mut cfg = small(6, 6, 1);
    cfg.layers = vec![
        LayerSpec::new(6, 6),
        LayerSpec::new(1, 1),
        LayerSpec::root(),
    ];
    let out = run_simulation(&cfg).unwrap();
    let parts = generate_partitions(&cfg.partition_spec(), cfg.seed).unwrap();
    let data = parts.devices;

    let mut global = ParameterVector::zeros(cfg.param_len());
    for r in 0..cfg.training.global_rounds {
        let updated: Vec<_> = data
            .iter()
            .map(|d| {
                let p = local_update(
                    &global,
                    d,
                    cfg.training.local_steps,
                    cfg.training.learning_rate,
                )
                .unwrap()
                .params;
                (p, d.len() as f64)
            })
            .collect();
        global = average(&updated);
        let loss = evaluate(&global, &parts.test).unwrap().loss;
        assert!(
            (loss - out.rows[r].global_loss).abs() <= 1e-12,
            "round {}",
            r + 1
        );
    }
    assert!(close(&out.final_params, &global, 1e-12));
}

#[test]
fn no_op_phases_reproduce_hierarchical_fedavg() {
    let plain = small(12, 3, 2);
    let mut padded = plain.clone();
    padded.sampling.fraction = 1.0;
    padded.offloading = true;
    padded.deadline = Some(1e9);
    padded.mobility.rate = 0.0;
    let a = run_simulation(&plain).unwrap();
    let b = run_simulation(&padded).unwrap();
    assert_eq!(a.final_params, b.final_params);
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.global_loss, y.global_loss);
        assert_eq!(x.uplink_params, y.uplink_params);
    }

    // two-level weighted average by sample counts
    let tree = build_tree(&plain.layers, plain.seed).unwrap();
    let data = device_data(&plain);
    let mut global = ParameterVector::zeros(plain.param_len());
    for _ in 0..plain.training.global_rounds {
        let mut heads = Vec::new();
        for c in tree.layer_clusters(0) {
            let members: Vec<_> = c
                .members
                .iter()
                .map(|m| {
                    let d = &data[m.0 as usize];
                    let p = local_update(
                        &global,
                        d,
                        plain.training.local_steps,
                        plain.training.learning_rate,
                    )
                    .unwrap()
                    .params;
                    (p, d.len() as f64)
                })
                .collect();
            let weight: f64 = members.iter().map(|(_, w)| w).sum();
            heads.push((average(&members), weight));
        }
        global = average(&heads);
    }
    assert!(close(&a.final_params, &global, 1e-12));
}

#[test]
fn star_with_one_step_follows_centralized_descent() {
    let mut cfg = small(8, 4, 2);
    cfg.data.dirichlet_alpha = 1e3;
    cfg.training.local_steps = 1;
    cfg.training.global_rounds = 10;
    let star = run_star(&cfg).unwrap();
    let central = run_centralized(&cfg).unwrap();
    assert!(close(&star.final_params, &central.final_params, 1e-9));
    for (s, c) in star.rows.iter().zip(&central.rows) {
        assert!((s.global_loss - c.global_loss).abs() <= 1e-9);
    }
}

#[test]
fn centralized_loss_is_not_above_federated() {
    let mut cfg = small(12, 4, 3);
    cfg.data.dirichlet_alpha = 0.3;
    cfg.training.global_rounds = 15;
    let central = run_centralized(&cfg).unwrap().final_row().global_loss;
    let fog = run_simulation(&cfg).unwrap().final_row().global_loss;
    let star = run_star(&cfg).unwrap().final_row().global_loss;
    assert!(central <= fog + 1e-3, "centralized {central} vs fog {fog}");
    assert!(
        central <= star + 1e-3,
        "centralized {central} vs star {star}"
    );
}

#[test]
fn consensus_cluster_uploads_once_per_aggregation() {
    let mut server = small(8, 4, 2);
    server.layers[0] = LayerSpec::new(8, 4).with_d2d(D2dModel::Complete, false);
    let mut consensus = server.clone();
    consensus
        .consensus
        .modes
        .insert(0, AggregationMode::D2dConsensus);

    let tree = build_tree(&server.layers, server.seed).unwrap();
    let members = tree.clusters()[0].members.clone();
    let g = server.param_len() as u64;
    let uplink = |cfg: &SimulationConfig, round: u64, inside: bool| -> u64 {
        run_simulation(cfg)
            .unwrap()
            .events
            .iter()
            .filter(|e| {
                e.round == round && e.kind == EventKind::Uplink && e.phase == Phase::Aggregate
            })
            .filter(|e| members.contains(&e.src) == inside)
            .map(|e| e.params)
            .sum()
    };
    for round in 1..=server.training.global_rounds as u64 {
        assert_eq!(uplink(&server, round, true), members.len() as u64 * g);
        assert_eq!(uplink(&consensus, round, true), g);
        assert_eq!(
            uplink(&server, round, false),
            uplink(&consensus, round, false)
        );
    }
}

#[test]
fn zero_rounds_evaluate_the_uniform_model() {
    let mut cfg = small(4, 2, 1);
    cfg.training.global_rounds = 0;
    let out = run_simulation(&cfg).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert_eq!(out.rows[0].round, 0);
    assert!((out.rows[0].global_loss - 3f64.ln()).abs() < 1e-12);
    assert_eq!(out.rows[0].uplink_params, 0);
}

#[test]
fn run_totals_equal_row_sums() {
    let mut cfg = small(12, 3, 2);
    cfg.layers[0] = cfg.layers[0].clone().with_d2d(D2dModel::Ring, true);
    cfg.sampling.fraction = 0.5;
    let out = run_simulation(&cfg).unwrap();
    let up: u64 = out.rows.iter().map(|r| r.uplink_params).sum();
    let down: u64 = out.rows.iter().map(|r| r.downlink_params).sum();
    let d2d: u64 = out.rows.iter().map(|r| r.d2d_params).sum();
    assert_eq!(
        (up, down, d2d),
        (
            out.ledger.uplink_params,
            out.ledger.downlink_params,
            out.ledger.d2d_params
        )
    );
    assert!(out.rows.iter().all(|r| r.clusters_sampled == 2));
}
