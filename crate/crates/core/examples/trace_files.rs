//! Write a trace and its labels to disk, read them back, and sweep the
//! detection threshold on a replay attack.

use ciota::emm::{state_of_address, FrequencyMatrix};
use ciota::eval::{compute_auc, compute_avprc};
use ciota::simnet::train_model;
use ciota::traces::{
    gen_benign_trace, inject_attack, read_labels, read_trace, window_labels, write_labels, write_trace, AttackKind,
    AttackSpec, GeneratorConfig, GroundTruthModel,
};

fn window_means(model: &FrequencyMatrix, states: &[u64], k: usize) -> Vec<f64> {
    let probs: Vec<f64> = states.windows(2).map(|w| model.transition_prob(w[0], w[1])).collect();
    let mut out = Vec::with_capacity(probs.len());
    let mut sum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        sum += p;
        if i >= k {
            sum -= probs[i - k];
        }
        out.push(sum / (i + 1).min(k) as f64);
    }
    out
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("ciota-trace-example");
    std::fs::create_dir_all(&dir)?;
    let gt = GroundTruthModel::generate(&GeneratorConfig::default())?;
    let model = train_model(&gt, 50_000, 1)?;

    let benign = gen_benign_trace(&gt, 40_000, 2)?;
    let spec = AttackSpec {
        kind: AttackKind::ReplayBlip { spacing: 40 },
        start_index: 12_000,
        length: 150,
        seed: 3,
    };
    let (trace, mask) = inject_attack(&gt, &benign, &spec)?;
    write_trace(dir.join("test.trace"), &trace)?;
    write_labels(dir.join("test.labels"), &trace, &mask)?;

    let trace = read_trace(dir.join("test.trace"))?;
    let mask = read_labels(dir.join("test.labels"))?;
    println!("read {} records, {} attack records, from {}", trace.len(), mask.iter().filter(|&&m| m).count(), dir.display());

    let states: Vec<u64> = trace.iter().map(|r| state_of_address(r.address, gt.region_size)).collect::<ciota::Result<_>>()?;
    for k in [1, 10, 100, 1000] {
        let scores = window_means(&model, &states, k);
        // Score j belongs to the transition into record j + 1.
        let labels = &window_labels(&mask, k)[1..];
        println!(
            "k={k:>4}: AUC {:.3}, average precision {:.3}",
            compute_auc(&scores, labels)?,
            compute_avprc(&scores, labels)?
        );
    }
    Ok(())
}
