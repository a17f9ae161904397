//! Transfer to a held-out task: zero-shot, head-only and full fine-tuning
//! against a single-task model, on one small seed.

use anticausal::evalsuite::{run_experiment, ExperimentKind, ExperimentPlan};
use anticausal::Result;

fn main() -> Result<()> {
    let mut plan = ExperimentPlan::new(ExperimentKind::Transfer);
    plan.seeds = vec![0];
    plan.records_per_task = vec![400, 1000, 1000];
    plan.train.epochs = 40;
    plan.target_task = 0;
    let report = run_experiment(&plan)?;
    print!("{}", report.summary_text());
    Ok(())
}
