//! Combine local models with the agreement filter, and attest a candidate
//! model against a local one.

use ciota::emm::{attest, combine, distance, simple_merge, FrequencyMatrix};
use ciota::simnet::train_model;
use ciota::traces::{GeneratorConfig, GroundTruthModel};

fn main() -> ciota::Result<()> {
    let gt = GroundTruthModel::generate(&GeneratorConfig::default())?;
    let mut models: Vec<FrequencyMatrix> = (0..20).map(|i| train_model(&gt, 500, 100 + i)).collect::<ciota::Result<_>>()?;

    // Three agents learned a transition the application never makes.
    for m in models.iter_mut().take(3) {
        m.add_count(0, 999, 500);
    }

    let merged = simple_merge(&models)?;
    let combined = combine(&models, 0.25)?;
    println!("plain merge keeps the rogue transition: {}", merged.count(0, 999) > 0);
    println!("combined at p_a=0.25 keeps it: {}", combined.count(0, 999) > 0);

    let local = train_model(&gt, 500, 7)?;
    let alpha = 0.05;
    println!(
        "distance local->combined {:.4}, attested: {}",
        distance(&local, &combined),
        attest(&local, &combined, alpha)
    );
    let mut rogue = combined.clone();
    for s in gt.regions().iter().copied() {
        rogue.add_count(s, 999, 1_000_000);
    }
    println!(
        "distance local->rogue {:.4}, attested: {}",
        distance(&local, &rogue),
        attest(&local, &rogue, alpha)
    );
    Ok(())
}
