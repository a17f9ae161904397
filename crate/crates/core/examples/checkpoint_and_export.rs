//! Save a briefly trained model, load it back, confirm identical densities,
//! and export its graph.

use anticausal::data_io::{export_graph, load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use anticausal::evalsuite::{prepare, ExperimentPlan};
use anticausal::graph::GraphSpec;
use anticausal::sem::{build_model, ModelConfig};
use anticausal::training::{train, TrainConfig};
use anticausal::Result;

fn main() -> Result<()> {
    let mut plan = ExperimentPlan::default();
    plan.records_per_task = vec![300; 3];
    let data = prepare(&plan, 1)?;
    let spec = GraphSpec::standard(3, 8, 5)?;
    let cfg = TrainConfig { epochs: 5, seed: 1, ..TrainConfig::default() };
    let (model, _) = train(&build_model(&spec, &ModelConfig::with_seed(1))?, &data.train, &cfg)?;

    let dir = std::env::temp_dir().join("anticausal_checkpoint_example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("model.json");
    let mut ck = Checkpoint::new(model);
    ck.provenance = Provenance { seed: 1, config_digest: anticausal::data_io::config_digest(&cfg)? };
    save_checkpoint(&ck, &path)?;
    let back = load_checkpoint(&path)?;

    let a = ck.model.forward_modes(data.test[0].z.row(0), 0, None)?;
    println!(
        "joint log density before {:.15}, after {:.15}",
        ck.model.joint_log_density(&a)?,
        back.model.joint_log_density(&a)?
    );
    let graph = dir.join("graph.csv");
    export_graph(&back.model, &graph)?;
    print!("{}", std::fs::read_to_string(&graph).expect("written above"));
    Ok(())
}
