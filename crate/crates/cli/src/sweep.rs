use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fogsim::report::{float, metrics_csv, Provenance};
use fogsim::sim::{run_simulation, SimulationConfig};
use serde_json::Value;

use crate::commands::{create_dir, simulate, write, write_manifest};
use crate::{check, load_config, Failure};

pub struct SweepRequest<'a> {
    pub config: &'a Path,
    pub param: &'a str,
    pub values: &'a [String],
    pub seeds: &'a [u64],
    pub out: &'a Path,
    pub parallel: usize,
}

/// Final-round figures of one run.
struct RunResult {
    loss: f64,
    accuracy: f64,
    consensus_error: Option<f64>,
}

/// Where a worker leaves the metrics file name and result of one job.
type Slot = Mutex<Option<Result<(String, RunResult), Failure>>>;

/// Looks up a dotted key; numeric segments index arrays.
fn slot<'v>(root: &'v mut Value, key: &str) -> Option<&'v mut Value> {
    key.split('.').try_fold(root, |v, part| match v {
        Value::Object(map) => map.get_mut(part),
        Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
        _ => None,
    })
}

/// `base` with `key` set to `raw`, parsed as JSON where possible.
pub fn with_value(
    base: &SimulationConfig,
    key: &str,
    raw: &str,
) -> Result<SimulationConfig, Failure> {
    let mut tree = serde_json::to_value(base).expect("config serializes");
    let target = slot(&mut tree, key)
        .ok_or_else(|| Failure::Config(format!("unknown sweep key `{key}`")))?;
    *target = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let config: SimulationConfig =
        serde_json::from_value(tree).map_err(|e| Failure::Config(format!("{key}={raw}: {e}")))?;
    check(&config).map_err(|f| match f {
        Failure::Config(m) => Failure::Config(format!("{key}={raw}: {m}")),
        other => other,
    })?;
    Ok(config)
}

fn file_safe(value: &str) -> String {
    value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn sweep(req: &SweepRequest) -> Result<(), Failure> {
    let base = load_config(req.config, None)?;
    let values: Vec<&str> = req
        .values
        .iter()
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Failure::Config("sweep needs at least one value".into()));
    }
    let seeds = if req.seeds.is_empty() {
        vec![base.seed]
    } else {
        req.seeds.to_vec()
    };
    // every value is checked before any simulation starts
    let configs = values
        .iter()
        .map(|v| with_value(&base, req.param, v))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(req.out)?;

    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Slot> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let j = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(i, seed)) = jobs.get(j) else { break };
        let mut config = configs[i].clone();
        config.seed = seed;
        let outcome = simulate(run_simulation, &config).and_then(|out| {
            let name = format!(
                "metrics_{}={}_seed{seed}.csv",
                file_safe(req.param),
                file_safe(values[i])
            );
            write(
                req.out,
                &name,
                &metrics_csv(&out.rows, &Provenance::of(&config)),
            )?;
            let last = out.final_row();
            Ok((
                name,
                RunResult {
                    loss: last.global_loss,
                    accuracy: last.global_accuracy,
                    consensus_error: out.final_consensus_error(),
                },
            ))
        });
        *results[j].lock().expect("result slot") = Some(outcome);
    };
    std::thread::scope(|s| {
        for _ in 0..req.parallel.max(1) {
            s.spawn(work);
        }
    });

    let mut artifacts = Vec::new();
    let mut per_value: Vec<Vec<RunResult>> = configs.iter().map(|_| Vec::new()).collect();
    for (cell, &(i, _)) in results.into_iter().zip(&jobs) {
        let (name, r) = cell
            .into_inner()
            .expect("result slot")
            .expect("every job ran")?;
        artifacts.push(name);
        per_value[i].push(r);
    }

    let provenance = Provenance::of(&base);
    let mut table = provenance.header();
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let _ = write!(
        table,
        "\n# sweep param={} seeds={}\nvalue,runs,final_loss_mean,final_loss_std,final_accuracy_mean,\
         final_accuracy_std,consensus_error_mean,consensus_error_std\n",
        req.param,
        seed_list.join(";")
    );
    for (value, runs) in values.iter().zip(&per_value) {
        let (lm, ls) = mean_std(&runs.iter().map(|r| r.loss).collect::<Vec<_>>());
        let (am, as_) = mean_std(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
        let errors: Option<Vec<f64>> = runs.iter().map(|r| r.consensus_error).collect();
        let (em, es) = match errors {
            Some(e) => {
                let (m, s) = mean_std(&e);
                (float(m), float(s))
            }
            None => ("none".to_string(), "none".to_string()),
        };
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{em},{es}",
            value.replace(',', ";"),
            runs.len(),
            float(lm),
            float(ls),
            float(am),
            float(as_)
        );
    }
    write(req.out, "aggregate.csv", &table)?;
    artifacts.push("aggregate.csv".into());
    write_manifest(req.out, &provenance, &seeds, &artifacts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_and_indexed_keys() {
        let base = SimulationConfig::three_layer(8, 4, 2);
        assert_eq!(
            with_value(&base, "consensus.rounds", "3")
                .unwrap()
                .consensus
                .rounds,
            3
        );
        assert_eq!(
            with_value(&base, "layers.0.cluster_size", "2")
                .unwrap()
                .layers[0]
                .cluster_size,
            2
        );
        assert!(matches!(
            with_value(&base, "consensus.round", "3"),
            Err(Failure::Config(_))
        ));
        assert!(matches!(
            with_value(&base, "consensus.rounds", "many"),
            Err(Failure::Config(_))
        ));
        assert!(matches!(
            with_value(&base, "sampling.fraction", "0"),
            Err(Failure::Config(_))
        ));
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
