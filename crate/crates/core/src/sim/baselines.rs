use super::config::{BlockConfig, SamplingConfig, SimulationConfig};
use super::engine::{run_simulation, setup};
use super::{MetricsRow, SimError, SimulationOutput, StepError};
use crate::model::{evaluate, local_update, Dataset, ParameterVector};
use crate::netmodel::{Ledger, Phase};
use crate::topology::{LayerSpec, MobilitySpec};

/// The star-topology variant of `config`: every device uploads straight to
/// the root each round. Data, model, training, deadline, compression and
/// costs stay the same; sampling, blocks, mobility, offloading, caching and
/// consensus are switched off.
pub fn star_config(config: &SimulationConfig) -> SimulationConfig {
    let n = config.device_count();
    let mut star = config.clone();
    star.layers = vec![LayerSpec::new(n, n.max(1)), LayerSpec::root()];
    star.consensus.modes.clear();
    star.sampling = SamplingConfig {
        fraction: 1.0,
        ..config.sampling.clone()
    };
    star.blocks = BlockConfig::default();
    star.mobility = MobilitySpec::default();
    star.offloading = false;
    star.cache_fraction = 0.0;
    star
}

pub fn run_star(config: &SimulationConfig) -> Result<SimulationOutput, SimError> {
    run_simulation(&star_config(config))
}

/// Full-batch descent on the pooled device data, `local_steps` steps per
/// round from the zero model. Traffic counters are zero.
pub fn run_centralized(config: &SimulationConfig) -> Result<SimulationOutput, SimError> {
    let violations = config.validate();
    if !violations.is_empty() {
        return Err(SimError::InvalidConfig(violations));
    }
    let (tree, test) = setup(config).map_err(SimError::Setup)?;
    let pooled = Dataset::pooled(tree.datasets.values());
    let fail = |round: u64| {
        move |e| SimError::Round {
            round,
            phase: Phase::Train,
            cause: StepError::Model(e),
        }
    };
    let row = |round: u64, params: &ParameterVector| -> Result<MetricsRow, SimError> {
        let report = evaluate(params, &test).map_err(fail(round))?;
        Ok(MetricsRow {
            round,
            global_loss: report.loss,
            global_accuracy: report.accuracy,
            uplink_params: 0,
            downlink_params: 0,
            d2d_params: 0,
            total_energy_j: 0.0,
            round_delay_s: 0.0,
            stragglers_dropped: 0,
            clusters_sampled: 0,
            samples_moved: 0,
        })
    };
    let mut params = ParameterVector::zeros(config.param_len());
    let rounds = config.training.global_rounds as u64;
    let mut rows = Vec::new();
    if rounds == 0 {
        rows.push(row(0, &params)?);
    }
    for r in 1..=rounds {
        params = local_update(
            &params,
            &pooled,
            config.training.local_steps,
            config.training.learning_rate,
        )
        .map_err(fail(r))?
        .params;
        rows.push(row(r, &params)?);
    }
    Ok(SimulationOutput {
        consensus_error: vec![None; rows.len()],
        rows,
        final_params: params,
        events: Vec::new(),
        ledger: Ledger::new(config.sample_width()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Baselines {
    pub star: Option<SimulationOutput>,
    pub centralized: Option<SimulationOutput>,
}

/// Runs whichever baselines the configuration enables.
pub fn run_baselines(config: &SimulationConfig) -> Result<Baselines, SimError> {
    Ok(Baselines {
        star: config
            .baselines
            .star
            .then(|| run_star(config))
            .transpose()?,
        centralized: config
            .baselines
            .centralized
            .then(|| run_centralized(config))
            .transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimulationConfig {
        let mut c = SimulationConfig::three_layer(10, 5, 2);
        c.data.samples_per_device = 30;
        c.data.test_samples = 100;
        c.training.global_rounds = 4;
        c
    }

    #[test]
    fn star_uplink_is_devices_times_g() {
        let c = cfg();
        let star = run_star(&c).unwrap();
        for row in &star.rows {
            assert_eq!(row.uplink_params, 10 * c.param_len() as u64);
        }
    }

    #[test]
    fn centralized_rows_have_no_traffic() {
        let out = run_centralized(&cfg()).unwrap();
        assert_eq!(out.rows.len(), 4);
        assert!(out
            .rows
            .iter()
            .all(|r| r.uplink_params == 0 && r.total_energy_j == 0.0));
    }
}
