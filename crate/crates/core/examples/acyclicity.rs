//! The trace-exponential penalty on a few small graphs, and the structure
//! the standard roster allows.

use anticausal::diffcore::Matrix;
use anticausal::graph::{acyclicity_penalty, topological_order, AdjacencyModel, GraphSpec, DEFAULT_THRESHOLD};
use anticausal::Result;

fn main() -> Result<()> {
    let chain = Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]])?;
    let two_cycle = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]])?;
    let triangle = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]])?;

    println!("chain      h = {}", acyclicity_penalty(&chain)?);
    println!("2-cycle    h = {:.12} (2cosh(1)-2 = {:.12})", acyclicity_penalty(&two_cycle)?, 2.0 * 1f64.cosh() - 2.0);
    println!("3-cycle    h = {:.12}", acyclicity_penalty(&triangle)?);
    println!("chain order {:?}", topological_order(&chain)?);
    if let Err(e) = topological_order(&triangle) {
        println!("3-cycle order: {e}");
    }

    let spec = GraphSpec::standard(2, 3, 2)?;
    let adj = AdjacencyModel::new(&spec, DEFAULT_THRESHOLD)?;
    let soft = adj.soft_adjacency();
    println!("\nroster {:?}", spec.variables().iter().map(|v| v.name.as_str()).collect::<Vec<_>>());
    println!("penalty of the untrained soft adjacency: {}", acyclicity_penalty(&soft)?);
    for c in 0..spec.len() {
        let parents: Vec<String> = (0..spec.len())
            .filter(|&p| adj.is_learnable(c, p) || adj.is_fixed(c, p))
            .map(|p| format!("{}{}", spec.name(p), if adj.is_fixed(c, p) { "!" } else { "?" }))
            .collect();
        if !parents.is_empty() {
            println!("  {:<3} <- {}", spec.name(c), parents.join(" "));
        }
    }
    println!("(! fixed, ? learnable)");
    Ok(())
}
