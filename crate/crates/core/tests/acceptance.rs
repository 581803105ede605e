//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use ciota::agent::AgentState;
use ciota::chain::{receive_chain, AgentId, Chain, Decision, ReportReason};
use ciota::cli::ExperimentConfig;
use ciota::emm::{combine, FrequencyMatrix, State};
use ciota::eval::{compute_auc, compute_avprc, evaluate};
use ciota::simnet::{
    apply_scenario, build_agents, gen_complete, run_agents, run_simulation, run_trials, train_model, Fidelity,
    Scenario, SimConfig, TopologySpec, TrialSummary,
};
use ciota::traces::{
    gen_benign_trace, inject_attack, transition_labels, window_labels, AttackKind, AttackSpec, GeneratorConfig,
    GroundTruthModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Simulator settings used for the epoch statistics.
fn epoch_study(n: usize, block_size: usize) -> SimConfig {
    SimConfig {
        n_agents: n,
        block_size,
        ..ExperimentConfig::paper().sim
    }
}

fn ws() -> TopologySpec {
    TopologySpec::WattsStrogatz {
        neighbors: 5,
        p: 0.1,
        variant: Default::default(),
    }
}

fn complete_graph() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (n, l) in [(1000, 800), (100, 80)] {
        let r = run_trials(&epoch_study(n, l), &TopologySpec::Complete, 100).expect("simulation runs");
        let s = TrialSummary::of(&r);
        let e = s.epochs.expect("blocks closed");
        let all_one = r.iter().all(|t| t.epochs == Some(1));
        pass &= all_one && e.std == 0.0 && s.deadlocks == 0;
        notes.push(format!("n={n} L={l}: mean {} std {} over {} trials", e.mean, e.std, r.len()));
    }
    outcome(pass, notes.join("; "))
}

fn watts_strogatz() -> Outcome {
    let r = run_trials(&epoch_study(1000, 800), &ws(), 500).expect("simulation runs");
    let s = TrialSummary::of(&r);
    let e = s.epochs.expect("blocks closed");
    let deg = s.degree_mean.unwrap();
    let pass = (121.0..=165.0).contains(&e.mean) && (6.3..=6.9).contains(&deg) && s.deadlocks == 0;
    outcome(
        pass,
        format!(
            "500 trials: epochs mean {:.2} std {:.2}; degree min {:.2} max {:.2} median {:.2} mean {:.3} std {:.2}",
            e.mean,
            e.std,
            s.degree_min.unwrap(),
            s.degree_max.unwrap(),
            s.degree_median.unwrap(),
            deg,
            s.degree_std.unwrap()
        ),
    )
}

fn barabasi_albert() -> Outcome {
    let r = run_trials(&epoch_study(1000, 800), &TopologySpec::BarabasiAlbert { attachment: 1 }, 500)
        .expect("simulation runs");
    let s = TrialSummary::of(&r);
    let e = s.epochs.expect("blocks closed");
    let median_one = r.iter().all(|t| t.degree_stats.median == 1.0);
    let pass = (720.0..=880.0).contains(&e.mean) && median_one && s.deadlocks == 0;
    outcome(
        pass,
        format!(
            "500 trials: epochs mean {:.2} std {:.2}; degree median 1 in every network: {median_one}; mean degree {:.3}",
            e.mean,
            e.std,
            s.degree_mean.unwrap()
        ),
    )
}

fn random_spec(rng: &mut ChaCha8Rng, kind: u64) -> TopologySpec {
    match kind % 3 {
        0 => TopologySpec::Complete,
        1 => TopologySpec::WattsStrogatz {
            neighbors: [2, 3, 4, 5, 6][rng.gen_range(0..5)],
            p: rng.gen_range(0.0..0.5),
            variant: Default::default(),
        },
        _ => TopologySpec::BarabasiAlbert {
            attachment: rng.gen_range(1..=3),
        },
    }
}

fn deadlock_freedom() -> Outcome {
    let trials = 10_000u64;
    let failures: Vec<String> = (0..trials)
        .into_par_iter()
        .filter_map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xdead_0000 + i);
            let spec = random_spec(&mut rng, i);
            let n = rng.gen_range(10..=200);
            let l = rng.gen_range(1..=n);
            let cfg = SimConfig {
                n_agents: n,
                block_size: l,
                seed: i,
                jitter: rng.gen_range(0.0..0.5),
                ..SimConfig::default()
            };
            let topo = spec.build(n, i).expect("connected topology");
            let m = run_simulation(&cfg, &topo).expect("simulation runs");
            (m.deadlock_detected || !m.closed()).then(|| format!("trial {i}: {} n={n} L={l}", spec.name()))
        })
        .collect();
    outcome(
        failures.is_empty(),
        format!("{trials} trials, n in [10, 200], L <= n: {} deadlocks {:?}", failures.len(), failures.iter().take(3).collect::<Vec<_>>()),
    )
}

fn max_degree_plus_one() -> Outcome {
    let trials = 1_000u64;
    let failures: Vec<String> = (0..trials)
        .into_par_iter()
        .filter_map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x7e02_0000 + i);
            let spec = random_spec(&mut rng, i);
            let n = rng.gen_range(10..=200);
            let topo = spec.build(n, i).expect("connected topology");
            let l = topo.max_degree() + 1;
            let cfg = SimConfig {
                n_agents: n,
                block_size: l,
                seed: i,
                scenario: Scenario::NoDirectMessaging,
                ..SimConfig::default()
            };
            let m = run_simulation(&cfg, &topo).expect("simulation runs");
            (m.deadlock_detected || !m.closed() || m.direct_messages > 0)
                .then(|| format!("trial {i}: {} n={n} L={l}", spec.name()))
        })
        .collect();
    outcome(
        failures.is_empty(),
        format!("{trials} trials without direct messages, L = max degree + 1: {} failures {:?}", failures.len(), failures.iter().take(3).collect::<Vec<_>>()),
    )
}

/// Per-entry threshold rule with exact integer arithmetic: an entry survives
/// when `seen / n > q / 100`.
fn combine_oracle(models: &[FrequencyMatrix], q: u64) -> Vec<(State, State, u64)> {
    let n = models.len() as u64;
    let mut out = Vec::new();
    for a in 0..8 {
        for b in 0..8 {
            let seen = models.iter().filter(|m| m.count(a, b) > 0).count() as u64;
            let sum: u64 = models.iter().map(|m| m.count(a, b)).sum();
            if seen * 100 > q * n {
                out.push((a, b, sum));
            }
        }
    }
    out
}

fn combine_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=10);
        let density = rng.gen_range(0.05..0.9);
        let models: Vec<FrequencyMatrix> = (0..n)
            .map(|_| {
                let mut m = FrequencyMatrix::new();
                for a in 0..8 {
                    for b in 0..8 {
                        if rng.gen_bool(density) {
                            m.add_count(a, b, rng.gen_range(1..50));
                        }
                    }
                }
                m
            })
            .collect();
        let q = rng.gen_range(1..100);
        let got: Vec<_> = combine(&models, q as f64 / 100.0).unwrap().entries().collect();
        if got != combine_oracle(&models, q) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 random instances, {mismatches} mismatches"))
}

const POISON_SRC: State = 900;
const POISON_DST: State = 901;

/// Closes one block from `l` agents of which `count` are poisoned and
/// reports whether the poison transition survived combining.
fn poison_survives(l: usize, count: usize, p_a: f64, seed: u64) -> bool {
    let cfg = SimConfig {
        n_agents: l,
        block_size: l,
        p_a,
        seed,
        fidelity: Fidelity::Concrete,
        scenario: Scenario::PoisonedAgents {
            fraction: count as f64 / l as f64,
            transitions: vec![[0, POISON_SRC, 50], [POISON_SRC, POISON_DST, 50]],
        },
        ..SimConfig::default()
    };
    let agents = apply_scenario(&cfg, build_agents(&cfg).unwrap()).unwrap();
    let poisoned = agents.iter().filter(|a| a.local_model.count(POISON_SRC, POISON_DST) > 0).count();
    assert_eq!(poisoned, count);
    let mut chain = Chain::genesis("sim", "1");
    for a in &agents {
        chain
            .partial
            .append_signed(a.id, &a.address, a.local_model.clone(), &a.keys.secret, a.provider.as_ref())
            .unwrap();
    }
    let block = chain.close_if_full(l).expect("block is full").clone();
    block.validate(l, agents[0].verifier()).expect("honest block validates");
    block.combined_model(p_a).unwrap().count(POISON_SRC, POISON_DST) > 0
}

fn poisoning_filtration() -> Outcome {
    let mut wrong = Vec::new();
    for count in (1..=14).chain([16]) {
        if poison_survives(20, count, 0.75, count as u64) != (count == 16) {
            wrong.push(format!("p_a=0.75 count={count}"));
        }
    }
    for p_a in [0.25, 0.5, 0.75] {
        let edge = (p_a * 20.0) as usize;
        for (count, expect) in [(edge - 1, false), (edge, false), (edge + 1, true)] {
            if poison_survives(20, count, p_a, 100 + count as u64) != expect {
                wrong.push(format!("p_a={p_a} count={count}"));
            }
        }
    }
    outcome(
        wrong.is_empty(),
        format!("L=20: counts 1..14 filtered, 16 kept at p_a=0.75; boundary counts at p_a 0.25/0.5/0.75; wrong: {wrong:?}"),
    )
}

fn attestation() -> Outcome {
    let alpha = 0.05;
    let mut rejected = 0;
    let mut accepted = 0;
    let mut min_bad = f64::INFINITY;
    for seed in 0..100u64 {
        let base = SimConfig {
            n_agents: 21,
            block_size: 21,
            alpha,
            seed,
            fidelity: Fidelity::Concrete,
            ..SimConfig::default()
        };
        let regions: Vec<State> = GroundTruthModel::generate(&base.concrete.generator)
            .unwrap()
            .regions()
            .iter()
            .copied()
            .collect();
        let cfg = SimConfig {
            scenario: Scenario::PoisonedAgents {
                fraction: 10.0 / 21.0,
                transitions: regions.iter().map(|&r| [r, POISON_SRC, 1_000_000]).collect(),
            },
            ..base
        };
        let mut agents = apply_scenario(&cfg, build_agents(&cfg).unwrap()).unwrap();
        let bad: BTreeSet<u32> = cfg.scenario.poisoned(21, seed).into_iter().collect();
        let good: Vec<u32> = (0..21).filter(|i| !bad.contains(i)).collect();
        let viewer = good[0] as usize;
        let chain_of = |ids: &[u32], agents: &[AgentState]| {
            let mut c = Chain::genesis("sim", "1");
            for &i in ids {
                let a = &agents[i as usize];
                c.partial
                    .append_signed(a.id, &a.address, a.local_model.clone(), &a.keys.secret, a.provider.as_ref())
                    .unwrap();
            }
            Arc::new(c)
        };
        let bad_ids: Vec<u32> = bad.iter().copied().collect();
        let poisoned_chain = chain_of(&bad_ids, &agents);
        let clean_chain = chain_of(&good[1..], &agents);
        let sender = AgentId(bad_ids[0]);
        match receive_chain(&mut agents[viewer], &poisoned_chain, sender, 0.0).unwrap() {
            Decision::Report {
                sender: s,
                reason: ReportReason::Attestation { distance },
            } if s == sender && distance > alpha && agents[viewer].chain.partial.is_empty() => {
                rejected += 1;
                min_bad = min_bad.min(distance);
            }
            _ => {}
        }
        agents[viewer].receive.start_interval();
        if receive_chain(&mut agents[viewer], &clean_chain, AgentId(good[1]), 0.0).unwrap() == Decision::ReplaceChain {
            accepted += 1;
        }
    }
    outcome(
        rejected == 100 && accepted == 100,
        format!(
            "100 seeds: poisoned partial blocks rejected and reported {rejected}/100 (min distance {min_bad:.3}), clean accepted {accepted}/100"
        ),
    )
}

/// Scores `test` with a model trained on a benign trace, returning the
/// window score at every record after the first.
fn window_scores(gt: &GroundTruthModel, model: &FrequencyMatrix, test: &[u64], k: usize) -> Vec<(usize, f64)> {
    let cfg = SimConfig {
        n_agents: 2,
        block_size: 1,
        ..SimConfig::default()
    };
    let mut agent = build_agents(&SimConfig {
        concrete: ciota::simnet::ConcreteConfig {
            train_steps: 2,
            generator: GeneratorConfig {
                region_size: gt.region_size,
                ..GeneratorConfig::default()
            },
            ..Default::default()
        },
        ..cfg
    })
    .unwrap()
    .remove(0);
    agent.local_model = model.clone();
    agent.params.window_k = k;
    agent.window = ciota::emm::ScoreWindow::new(k);
    let mut out = Vec::new();
    agent.monitor_with(test, 1.0, |s| out.push((s.index, s.score)));
    out
}

fn detection() -> Outcome {
    let gt = GroundTruthModel::generate(&GeneratorConfig::default()).unwrap();
    let p_thr = ExperimentConfig::paper().model.p_thr;
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, kind) in [
        ("code_injection", AttackKind::CodeInjection { regions: vec![] }),
        ("code_reuse", AttackKind::CodeReuse),
    ] {
        let mut worst_auc: f64 = 1.0;
        let mut worst_fpr: f64 = 0.0;
        for seed in 0..10u64 {
            let model = train_model(&gt, 100_000, 1000 + seed).unwrap();
            let test = gen_benign_trace(&gt, 20_000, 2000 + seed).unwrap();
            let spec = AttackSpec {
                kind: kind.clone(),
                start_index: 8_000,
                length: 300,
                seed,
            };
            let (test, mask) = inject_attack(&gt, &test, &spec).unwrap();
            let addrs: Vec<u64> = test.iter().map(|r| r.address).collect();
            let labels = transition_labels(&mask);
            let steps = window_scores(&gt, &model, &addrs, 1);
            let scores: Vec<f64> = steps.iter().map(|s| s.1).collect();
            let l: Vec<bool> = steps.iter().map(|s| labels[s.0]).collect();
            let r = evaluate(&scores, &l, p_thr).unwrap();
            worst_auc = worst_auc.min(r.auc.unwrap());
            worst_fpr = worst_fpr.max(r.fpr.unwrap());
        }
        pass &= worst_auc == 1.0 && worst_fpr == 0.0;
        notes.push(format!("{name}: min AUC {worst_auc} max FPR {worst_fpr}"));
    }
    let mut monotone = 0;
    let mut example = Vec::new();
    for seed in 0..10u64 {
        let model = train_model(&gt, 100_000, 3000 + seed).unwrap();
        let test = gen_benign_trace(&gt, 40_000, 4000 + seed).unwrap();
        let spec = AttackSpec {
            kind: AttackKind::ReplayBlip { spacing: 40 },
            start_index: 12_000,
            length: 150,
            seed,
        };
        let (test, mask) = inject_attack(&gt, &test, &spec).unwrap();
        let addrs: Vec<u64> = test.iter().map(|r| r.address).collect();
        let aucs: Vec<f64> = [10, 100, 1000]
            .iter()
            .map(|&k| {
                let labels = window_labels(&mask, k);
                let steps = window_scores(&gt, &model, &addrs, k);
                let scores: Vec<f64> = steps.iter().map(|s| s.1).collect();
                let l: Vec<bool> = steps.iter().map(|s| labels[s.0]).collect();
                compute_auc(&scores, &l).unwrap()
            })
            .collect();
        if aucs.windows(2).all(|w| w[0] <= w[1]) {
            monotone += 1;
        }
        if seed == 0 {
            example = aucs;
        }
    }
    pass &= monotone == 10;
    notes.push(format!(
        "replay_blip: AUC non-decreasing over k = 10, 100, 1000 in {monotone}/10 seeds (seed 0: {:.3?})",
        example
    ));
    outcome(pass, notes.join("; "))
}

fn frozen_fpr(model: &FrequencyMatrix, states: &[State], p_thr: f64) -> f64 {
    let scores: Vec<f64> = states.windows(2).map(|w| model.transition_prob(w[0], w[1])).collect();
    let labels = vec![false; scores.len()];
    evaluate(&scores, &labels, p_thr).unwrap().fpr.unwrap()
}

fn collaborative_convergence() -> Outcome {
    let agents_n = 48;
    let slice = 200;
    let p_thr = ExperimentConfig::paper().model.p_thr;
    let mut ok = 0;
    let mut sum_single = 0.0;
    let mut sum_combined = 0.0;
    for seed in 0..20u64 {
        let generator = GeneratorConfig {
            seed,
            ..GeneratorConfig::default()
        };
        let gt = GroundTruthModel::generate(&generator).unwrap();
        let to_states = |t: &[ciota::traces::TraceRecord]| -> Vec<State> {
            t.iter().map(|r| r.address / gt.region_size).collect()
        };
        let corpus = to_states(&gen_benign_trace(&gt, agents_n * slice, 10 + seed).unwrap());
        let held_out = to_states(&gen_benign_trace(&gt, 20_000, 99 + seed).unwrap());
        let cfg = SimConfig {
            n_agents: agents_n,
            block_size: agents_n,
            seed,
            fidelity: Fidelity::Concrete,
            concrete: ciota::simnet::ConcreteConfig {
                generator,
                train_steps: 2,
                ..Default::default()
            },
            ..SimConfig::default()
        };
        let mut agents = build_agents(&cfg).unwrap();
        let slices: Vec<FrequencyMatrix> = corpus
            .chunks(slice)
            .map(|c| {
                let mut m = FrequencyMatrix::new();
                for w in c.windows(2) {
                    m.record_transition(w[0], w[1]);
                }
                m
            })
            .collect();
        for (a, m) in agents.iter_mut().zip(&slices) {
            a.local_model = m.clone();
        }
        let (metrics, agents) = run_agents(&cfg, &gen_complete(agents_n).unwrap(), agents).unwrap();
        let closer = agents.iter().find(|a| a.chain.len() == 1).expect("a block closed");
        assert!(metrics.closed());
        let combined = &closer.local_model;
        let combined_fpr = frozen_fpr(combined, &held_out, p_thr);
        let singles: Vec<f64> = slices.iter().map(|m| frozen_fpr(m, &held_out, p_thr)).collect();
        if singles.iter().all(|&s| combined_fpr <= s) {
            ok += 1;
        }
        sum_single += singles.iter().sum::<f64>() / singles.len() as f64;
        sum_combined += combined_fpr;
    }
    outcome(
        ok == 20,
        format!(
            "20 seeds, {agents_n} agents x {slice} steps: combined FPR <= every single agent's in {ok}/20; mean FPR single {:.4} combined {:.4}",
            sum_single / 20.0,
            sum_combined / 20.0
        ),
    )
}

fn metric_units() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let labels: Vec<bool> = (0..10_000).map(|_| rng.gen_bool(0.5)).collect();
    let coin = compute_auc(&scores, &labels).unwrap();
    let s = [0.9, 0.8, 0.2, 0.1];
    let l = [false, false, true, true];
    let hand = compute_auc(&s, &l).unwrap() == 1.0
        && compute_avprc(&s, &l).unwrap() == 1.0
        && compute_auc(&[0.1, 0.2, 0.3, 0.4], &[true, false, true, false]).unwrap() == 0.75
        && compute_auc(&s, &[true, true, false, false]).unwrap() == 0.0;
    outcome(
        (coin - 0.5).abs() <= 0.03 && hand,
        format!("fair coin AUC {coin:.4} at n=10000; hand cases exact: {hand}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("complete graph closes in one epoch", complete_graph),
        ("small-world epochs and degree", watts_strogatz),
        ("preferential-attachment epochs and degree", barabasi_albert),
        ("no deadlock with direct messaging", deadlock_freedom),
        ("no deadlock at L = max degree + 1", max_degree_plus_one),
        ("combine matches threshold oracle", combine_equivalence),
        ("poisoning filtration", poisoning_filtration),
        ("attestation rejects poisoned partial blocks", attestation),
        ("detection of synthetic attacks", detection),
        ("collaborative convergence", collaborative_convergence),
        ("metric unit checks", metric_units),
    ];
    let filter = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if filter.as_ref().is_some_and(|f| f.parse::<usize>().ok() != Some(id)) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {} [{name}] ({:.1}s): {}",
            if result.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            result.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
