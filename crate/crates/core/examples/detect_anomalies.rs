//! Train a detector on a benign trace, then score a trace containing a code
//! injection attack.

use std::sync::Arc;

use ciota::agent::AgentState;
use ciota::chain::crypto::{KeyedHashSigner, Keyring, SignatureProvider};
use ciota::chain::AgentId;
use ciota::emm::{ModelParams, ScoreWindow};
use ciota::eval::evaluate;
use ciota::simnet::train_model;
use ciota::traces::{gen_benign_trace, inject_attack, transition_labels, AttackKind, AttackSpec, GeneratorConfig, GroundTruthModel};

fn main() -> ciota::Result<()> {
    let gt = GroundTruthModel::generate(&GeneratorConfig::default())?;
    let model = train_model(&gt, 50_000, 1)?;
    println!("trained on 50000 steps: {} transitions over {} states", model.len(), model.states().len());

    let benign = gen_benign_trace(&gt, 5_000, 2)?;
    let spec = AttackSpec {
        kind: AttackKind::CodeInjection { regions: vec![] },
        start_index: 2_500,
        length: 40,
        seed: 3,
    };
    let (trace, mask) = inject_attack(&gt, &benign, &spec)?;
    let labels = transition_labels(&mask);

    let params = ModelParams {
        window_k: 1,
        t_grace_secs: 0.0,
        ..ModelParams::paper()
    };
    let provider: Arc<dyn SignatureProvider> = Arc::new(KeyedHashSigner);
    let keys = provider.keypair_from_seed(0);
    let keyring: Keyring = [(AgentId(0), keys.public.clone())].into();
    let mut agent = AgentState::builder(AgentId(0), keys, provider, Arc::new(keyring))
        .params(params.clone())
        .model(model)
        .build()?;
    agent.window = ScoreWindow::new(params.window_k);

    let addresses: Vec<u64> = trace.iter().map(|r| r.address).collect();
    let (mut scores, mut step_labels) = (Vec::new(), Vec::new());
    let alerts = agent.monitor_with(&addresses, 1.0, |s| {
        scores.push(s.score);
        step_labels.push(labels[s.index]);
    });
    let res = evaluate(&scores, &step_labels, params.p_thr)?;
    println!(
        "{} transitions, {} alerts, AUC {:.3}, TPR {:.3}, FPR {:.4}",
        scores.len(),
        alerts.len(),
        res.auc.unwrap_or(f64::NAN),
        res.tpr.unwrap_or(f64::NAN),
        res.fpr.unwrap_or(f64::NAN)
    );
    if let Some(a) = alerts.first() {
        println!("first alert: {}", a.to_csv_line());
    }
    Ok(())
}
