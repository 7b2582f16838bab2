//! Analytic gradients against central differences at a random point.

use benign_attn::analysis::{relative_error, GRADIENT_ERROR_FLOOR};
use benign_attn::dataset::{make_signal_pair, sample_dataset, SignalMode};
use benign_attn::training::{empirical_risk, finite_diff_grads, gradients};
use benign_attn::ModelParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> benign_attn::Result<()> {
    let (n, d) = (12, 24);
    let signal = make_signal_pair(d, 2.0, SignalMode::RandomOrthogonal, 7)?;
    let ds = sample_dataset(&signal, n, 0.2, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut draw = || (0..d).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<f64>>();
    let params = ModelParams::new(draw(), draw())?;

    let g = gradients(&params, &ds)?;
    let (fv, fp) = finite_diff_grads(&params, &ds, 1e-5)?;
    println!("risk {:.6}", empirical_risk(&params, &ds)?);
    println!("rel err grad v {:.3e}", relative_error(&g.v, &fv, GRADIENT_ERROR_FLOOR));
    println!("rel err grad p {:.3e}", relative_error(&g.p, &fp, GRADIENT_ERROR_FLOOR));
    Ok(())
}
