//! Any experiment plan from a JSON file (first argument), or a quick
//! no-MAP ablation on two seeds.

use anticausal::evalsuite::{run_experiment, ExperimentKind, ExperimentPlan};
use anticausal::Result;

fn main() -> Result<()> {
    let plan = match std::env::args().nth(1) {
        Some(path) => {
            let text = std::fs::read_to_string(&path).expect("readable plan file");
            serde_json::from_str(&text)?
        }
        None => {
            let mut p = ExperimentPlan::new(ExperimentKind::AblationNoMap);
            p.seeds = vec![0, 1];
            p.records_per_task = vec![600; 3];
            p.train.epochs = 30;
            p
        }
    };
    let report = run_experiment(&plan)?;
    print!("{}", report.summary_text());
    print!("{}", report.to_csv());
    Ok(())
}
