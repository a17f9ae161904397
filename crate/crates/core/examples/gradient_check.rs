//! Reverse-mode gradients of a Gaussian NLL through a small MLP, checked
//! against central differences.

use anticausal::diffcore::{finite_difference_check, value_and_gradients, Matrix, Mlp, Tape, Var};
use anticausal::Result;

fn main() -> Result<()> {
    let net = Mlp::init(&[3, 8, 2], 7)?;
    let x = Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.3, -0.7]])?;
    let target = Matrix::column_vector(&[0.2, -0.4]);
    let params: Vec<Matrix> = net.arrays().cloned().collect();

    let loss = |t: &mut Tape<'_>, p: &[Var]| -> Result<Var> {
        let bound = anticausal::diffcore::BoundMlp::from_vars(p);
        let xv = t.constant(x.clone());
        let out = bound.apply(t, xv)?;
        let mu = t.slice_cols(out, 0, 1)?;
        let pre = t.slice_cols(out, 1, 1)?;
        let sp = t.softplus(pre);
        let sigma = t.add_const(sp, 1e-4);
        let y = t.constant(target.clone());
        let lp = t.gaussian_log_pdf(y, mu, sigma)?;
        let m = t.mean(lp);
        Ok(t.scale(m, -1.0))
    };

    let (value, grads) = value_and_gradients(&params, loss)?;
    println!("loss {value:.6}");
    for (i, g) in grads.iter().enumerate() {
        println!("  array {i}: shape {:?}, |grad|max {:.3e}", g.shape(), g.max_abs());
    }
    let worst = finite_difference_check(loss, &params, 1e-6)?;
    println!("worst relative disagreement with central differences: {worst:.2e}");
    Ok(())
}
