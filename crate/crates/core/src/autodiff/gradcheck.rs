use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::kernels::Kernel;
use crate::error::Result;
use crate::tensor::Tensor;

const STEP: f64 = 1e-6;

/// Largest `|analytic - numeric| / max(1, |numeric|)` over every input entry.
///
/// The kernel output is contracted with a seeded Gaussian cotangent so the
/// check covers the full Jacobian rather than a single output slot.
pub fn grad_check(kernel: &Kernel, inputs: &[Tensor], seed: u64) -> Result<f64> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out = kernel.forward(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cot = Tensor::randn(out.shape(), &mut rng);
    let needs = vec![true; inputs.len()];
    let analytic = kernel.vjp(&refs, &out, &cot, &needs)?;

    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for j in 0..inputs[i].numel() {
            let probe = |delta: f64| -> Result<f64> {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[j] += delta;
                let r: Vec<&Tensor> = shifted.iter().collect();
                Ok(kernel.forward(&r)?.dot(&cot))
            };
            let numeric = (probe(STEP)? - probe(-STEP)?) / (2.0 * STEP);
            let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
