//! Draw a linear-Gaussian ground truth, sample records, write one CSV per
//! task, read them back, split and normalize.

use anticausal::data_io::{fit_apply_normalizer, load_dataset, split_dataset, write_dataset, MultiTaskDataset, Split};
use anticausal::oracle::{make_ground_truth, sample_dataset, GeneratorConfig};
use anticausal::Result;

fn main() -> Result<()> {
    let cfg = GeneratorConfig::default();
    let gt = make_ground_truth(&cfg, 42)?;
    println!("true learnable edges:");
    for e in gt.edges() {
        print!(" {}<-{}", e.child, e.parent);
    }
    println!();

    let data = sample_dataset(&gt, &[300, 200, 100], 42)?;
    let dir = std::env::temp_dir().join("anticausal_synthetic_example");
    let files = write_dataset(&dir, &MultiTaskDataset::from_synthetic(&data)?)?;
    let loaded = load_dataset(&files)?;
    println!("wrote {} files to {}, counts {:?}", files.len(), dir.display(), loaded.counts());

    let split = split_dataset(&loaded, 0.8, 42)?;
    let (normalized, stats) = fit_apply_normalizer(&split)?;
    for (k, (t, n)) in normalized.tasks.iter().zip(&stats).enumerate() {
        let train = t.rows(Some(Split::Train)).len();
        println!(
            "task {}: {train} train / {} test, y mean {:.3} std {:.3}",
            k + 1,
            t.len() - train,
            n.y.mean[0],
            n.y.std[0]
        );
    }
    Ok(())
}
