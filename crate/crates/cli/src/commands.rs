use std::fmt::Write as _;
use std::path::Path;

use fogsim::report::{events_log, float, metrics_csv, Provenance};
use fogsim::sim::{
    run_centralized, run_simulation, run_star, SimError, SimulationConfig, SimulationOutput,
};

use crate::{io_failure, load_config, Failure};

pub fn simulate(
    f: fn(&SimulationConfig) -> Result<SimulationOutput, SimError>,
    config: &SimulationConfig,
) -> Result<SimulationOutput, Failure> {
    f(config).map_err(|e| match e {
        SimError::InvalidConfig(_) => Failure::Config(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    })
}

pub fn write(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| io_failure(&path, e))
}

pub fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

pub fn write_manifest(
    dir: &Path,
    provenance: &Provenance,
    seeds: &[u64],
    artifacts: &[String],
) -> Result<(), Failure> {
    let manifest = serde_json::json!({
        "config_sha256": provenance.config_hash,
        "seeds": seeds,
        "output_dir": dir.display().to_string(),
        "artifacts": artifacts,
    });
    write(dir, "manifest.json", &format!("{manifest:#}\n"))
}

/// Compares new output with what an earlier run left in the directory.
fn check_previous(dir: &Path, provenance: &Provenance, metrics: &str) {
    let Ok(previous) = std::fs::read_to_string(dir.join("metrics.csv")) else {
        return;
    };
    match provenance.verify(&previous) {
        Ok(()) if previous == metrics => {
            eprintln!("fogsim: metrics.csv reproduces the previous run")
        }
        Ok(()) => eprintln!(
            "fogsim: warning: same config and seed, but metrics.csv differs from the previous run"
        ),
        Err(_) => eprintln!("fogsim: replacing output from a different config or seed"),
    }
}

fn summary(provenance: &Provenance, out: &SimulationOutput) -> String {
    let last = out.final_row();
    let l = &out.ledger;
    let mut s = provenance.header();
    s.push('\n');
    let _ = writeln!(s, "rounds {}", last.round);
    let _ = writeln!(s, "final_loss {}", float(last.global_loss));
    let _ = writeln!(s, "final_accuracy {}", float(last.global_accuracy));
    let _ = writeln!(s, "uplink_params {}", l.uplink_params);
    let _ = writeln!(s, "downlink_params {}", l.downlink_params);
    let _ = writeln!(s, "d2d_params {}", l.d2d_params);
    let _ = writeln!(s, "total_energy_j {}", float(l.total_energy_j));
    let delay: f64 = out.rows.iter().map(|r| r.round_delay_s).sum();
    let _ = writeln!(s, "total_delay_s {}", float(delay));
    let _ = writeln!(s, "stragglers_dropped {}", l.stragglers_dropped);
    let _ = writeln!(s, "samples_moved {}", l.data_samples_moved);
    match out.final_consensus_error() {
        Some(e) => {
            let _ = writeln!(s, "final_consensus_error {}", float(e));
        }
        None => s.push_str("final_consensus_error none\n"),
    }
    s
}

pub fn run(config: &Path, seed: Option<u64>, dir: &Path) -> Result<(), Failure> {
    let config = load_config(config, seed)?;
    let out = simulate(run_simulation, &config)?;
    let provenance = Provenance::of(&config);
    let metrics = metrics_csv(&out.rows, &provenance);
    create_dir(dir)?;
    check_previous(dir, &provenance, &metrics);
    write(dir, "metrics.csv", &metrics)?;
    write(dir, "events.log", &events_log(&out.events, &provenance))?;
    write(dir, "summary.txt", &summary(&provenance, &out))?;
    let artifacts = ["metrics.csv", "events.log", "summary.txt"].map(String::from);
    write_manifest(dir, &provenance, &[config.seed], &artifacts)
}

/// `numerator / denominator`, with 0/0 read as no change.
fn ratio(numerator: f64, denominator: f64) -> f64 {
    if numerator == 0.0 && denominator == 0.0 {
        1.0
    } else {
        numerator / denominator
    }
}

pub fn compare(config: &Path, seed: Option<u64>, dir: &Path) -> Result<(), Failure> {
    let config = load_config(config, seed)?;
    let fog = simulate(run_simulation, &config)?;
    let star = simulate(run_star, &config)?;
    let central = simulate(run_centralized, &config)?;
    let provenance = Provenance::of(&config);

    let mut csv = provenance.header();
    csv.push_str(
        "\nround,fog_accuracy,star_accuracy,centralized_accuracy,accuracy_gap,\
         fog_uplink_params,star_uplink_params,uplink_reduction,\
         fog_energy_j,star_energy_j,energy_reduction\n",
    );
    for ((f, s), c) in fog.rows.iter().zip(&star.rows).zip(&central.rows) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            f.round,
            float(f.global_accuracy),
            float(s.global_accuracy),
            float(c.global_accuracy),
            float(f.global_accuracy - c.global_accuracy),
            f.uplink_params,
            s.uplink_params,
            float(ratio(s.uplink_params as f64, f.uplink_params as f64)),
            float(f.total_energy_j),
            float(s.total_energy_j),
            float(ratio(s.total_energy_j, f.total_energy_j)),
        );
    }

    let (f, c) = (fog.final_row(), central.final_row());
    let mut text = provenance.header();
    text.push('\n');
    let _ = writeln!(text, "fog_final_accuracy {}", float(f.global_accuracy));
    let _ = writeln!(
        text,
        "star_final_accuracy {}",
        float(star.final_row().global_accuracy)
    );
    let _ = writeln!(
        text,
        "centralized_final_accuracy {}",
        float(c.global_accuracy)
    );
    let _ = writeln!(
        text,
        "accuracy_gap {}",
        float(f.global_accuracy - c.global_accuracy)
    );
    let _ = writeln!(
        text,
        "uplink_reduction {}",
        float(ratio(
            star.ledger.uplink_params as f64,
            fog.ledger.uplink_params as f64
        ))
    );
    let _ = writeln!(
        text,
        "energy_reduction {}",
        float(ratio(star.ledger.total_energy_j, fog.ledger.total_energy_j))
    );

    create_dir(dir)?;
    write(dir, "compare.csv", &csv)?;
    write(dir, "summary.txt", &text)?;
    write(dir, "metrics_fog.csv", &metrics_csv(&fog.rows, &provenance))?;
    write(
        dir,
        "metrics_star.csv",
        &metrics_csv(&star.rows, &provenance),
    )?;
    write(
        dir,
        "metrics_centralized.csv",
        &metrics_csv(&central.rows, &provenance),
    )?;
    let artifacts = [
        "compare.csv",
        "summary.txt",
        "metrics_fog.csv",
        "metrics_star.csv",
        "metrics_centralized.csv",
    ]
    .map(String::from);
    write_manifest(dir, &provenance, &[config.seed], &artifacts)
}
