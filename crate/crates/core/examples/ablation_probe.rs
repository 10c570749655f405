//! Evaluates a checkpoint under the ablation test conditions.
//! Usage: ablation_probe <ckpt> [trials]
use std::sync::Arc;

use driftsim::eval::{rollout_eval, AblationSpec};
use driftsim::io::{load_checkpoint, RunConfig};
use driftsim::path::gen_eight;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let cfg = RunConfig::default();
    let net = load_checkpoint(std::path::Path::new(&a[1]), None).unwrap();
    let spec = AblationSpec {
        n_trials: a.get(2).and_then(|s| s.parse().ok()).unwrap_or(100),
        ..Default::default()
    };
    let opts = spec.eval_options(&cfg.env.randomization, 7);
    let (r, _) = rollout_eval(
        &net,
        &cfg.env,
        &cfg.vehicle,
        "eight",
        Arc::new(gen_eight(1.0).unwrap()),
        &opts,
    );
    let mut terms = std::collections::BTreeMap::new();
    for t in &r.trials {
        *terms.entry(t.termination.as_str()).or_insert(0) += 1;
    }
    println!(
        "success {:.2} rmse {:.3} beta {:.3} {:?}",
        r.success_rate, r.rmse_pos.mean, r.mean_abs_beta.mean, terms
    );
}
