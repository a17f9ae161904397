//! Joint training on three synthetic tasks, then MAP reconstruction on the
//! held-out records. Pass an epoch count as the first argument (default 40).

use anticausal::evalsuite::{learned_edges, edge_scores, prepare, score_task, ExperimentPlan};
use anticausal::graph::GraphSpec;
use anticausal::sem::{build_model, ModelConfig};
use anticausal::training::{train, TrainConfig};
use anticausal::Result;

fn main() -> Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(40);
    let mut plan = ExperimentPlan::default();
    plan.records_per_task = vec![1000; 3];
    let data = prepare(&plan, 0)?;

    let spec = GraphSpec::standard(3, plan.generator.confounders, plan.generator.mechanisms)?;
    let model = build_model(&spec, &ModelConfig::with_seed(0))?;
    println!("{} parameters", model.parameter_count());
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let (model, report) = train(&model, &data.train, &cfg)?;
    for e in report.epochs.iter().step_by(10.max(1)) {
        println!("epoch {:>3}  train {:?}  monitored {:?}", e.epoch, rounded(&e.train_nll), rounded(&e.monitored_nll));
    }
    println!("best epoch {} of {} ({:.1}s)", report.best_epoch, report.epochs.len(), report.seconds);

    for k in 0..3 {
        let s = score_task(&model, k, &data.test[k], &plan.map)?;
        println!(
            "task {}: MAE map {:.4}  forward {:.4}  reports-as-events {:.4}",
            k + 1,
            s.map.0,
            s.forward.0,
            s.baseline.0
        );
    }
    let scores = edge_scores(&learned_edges(&model)?, &data.ground_truth.edges());
    println!("edges: precision {:.2} recall {:.2} F1 {:.2}", scores.precision, scores.recall, scores.f1);
    Ok(())
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e3).round() / 1e3).collect()
}
