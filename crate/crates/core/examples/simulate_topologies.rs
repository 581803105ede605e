//! Epochs to close the first block on the three network families.

use ciota::cli::ExperimentConfig;
use ciota::simnet::{run_trials, SimConfig, TopologySpec, TrialSummary};

fn main() -> ciota::Result<()> {
    let trials = 20;
    let specs = [
        (TopologySpec::Complete, 1000, 800),
        (
            TopologySpec::WattsStrogatz {
                neighbors: 5,
                p: 0.1,
                variant: Default::default(),
            },
            1000,
            800,
        ),
        (TopologySpec::BarabasiAlbert { attachment: 1 }, 1000, 800),
    ];
    for (spec, n, l) in specs {
        let cfg = SimConfig {
            n_agents: n,
            block_size: l,
            ..ExperimentConfig::paper().sim
        };
        let s = TrialSummary::of(&run_trials(&cfg, &spec, trials)?);
        let e = s.epochs.expect("every trial closed");
        println!(
            "{:<12} n={n} L={l}: epochs {:.1} +- {:.1}, mean degree {:.2}, deadlocks {}",
            spec.name(),
            e.mean,
            e.std,
            s.degree_mean.unwrap_or(f64::NAN),
            s.deadlocks
        );
    }
    Ok(())
}
