//! Full agents with trained models and signed chains on a small-world
//! network, some of them poisoned.

use ciota::simnet::{
    apply_scenario, build_agents, run_agents, ConcreteConfig, Fidelity, Scenario, SimConfig, TopologySpec,
};

fn main() -> ciota::Result<()> {
    let cfg = SimConfig {
        n_agents: 60,
        block_size: 30,
        fidelity: Fidelity::Concrete,
        seed: 5,
        scenario: Scenario::PoisonedAgents {
            fraction: 0.1,
            transitions: vec![[0, 900, 40]],
        },
        concrete: ConcreteConfig {
            train_steps: 1_000,
            ..Default::default()
        },
        ..SimConfig::default()
    };
    let topo = TopologySpec::WattsStrogatz {
        neighbors: 5,
        p: 0.1,
        variant: Default::default(),
    }
    .build(cfg.n_agents, cfg.seed)?;
    let agents = apply_scenario(&cfg, build_agents(&cfg)?)?;
    let (metrics, agents) = run_agents(&cfg, &topo, agents)?;

    println!(
        "closed after {:?} epochs; {} messages, {} replacements, {} direct messages, {} reports",
        metrics.epochs_to_close, metrics.messages_sent, metrics.replacements, metrics.direct_messages, metrics.reports
    );
    let holder = agents.iter().find(|a| !a.chain.blocks.is_empty()).expect("someone holds the block");
    let global = holder.chain.blocks[0].combined_model(cfg.p_a)?;
    println!(
        "global model: {} transitions, poisoned transition present: {}",
        global.len(),
        global.count(0, 900) > 0
    );
    let holders = agents.iter().filter(|a| !a.chain.blocks.is_empty()).count();
    println!("{holders}/{} agents hold the closed block when the run stops", agents.len());
    Ok(())
}
