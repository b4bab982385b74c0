//! Finite-difference check of the whole network under the training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{batch_loss, LossConfig};
use crate::model::{MmccNet, ModelConfig};
use crate::tensor::{grad_check, BatchNormMode, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};

use super::{Result, AUX_LOSS_WEIGHT};

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, low: f64, high: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(low..high)).collect()).expect("shape and data agree")
}

/// Compare reverse-mode gradients of `loss` on a random batch of two images
/// against finite differences, for every parameter tensor and the input.
///
/// BN shifts and biases are drawn from `[-0.2, 0.2)` instead of their zero
/// initialization. At zero, a ReLU fed by a dead region sits exactly on its
/// kink and no difference quotient can be compared with the gradient.
pub fn network_grad_check(
    config: &ModelConfig,
    loss: &LossConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut model = MmccNet::<f64>::new(config)?;
    let [h, w] = config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = uniform(&[2, 3, h, w], &mut rng, 0.0, 1.0);
    let masks = uniform(&[2, 1, h, w], &mut rng, 0.0, 1.0).map(|v| if v > 0.6 { 1.0 } else { 0.0 });
    let mut inputs: Vec<Tensor<f64>> = model
        .params()
        .iter()
        .map(|p| match p.name.ends_with(".beta") || p.name.ends_with(".bias") {
            true => uniform(p.value.shape(), &mut rng, -0.2, 0.2),
            false => p.value.clone(),
        })
        .collect();
    inputs.push(images);
    let n_params = inputs.len() - 1;
    grad_check(
        |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
            let out = model.forward(tape, &vars[..n_params], vars[n_params], BatchNormMode::Train)?;
            let (value, grad) = batch_loss(loss, tape.value(out.prob), &masks)?;
            let mut root = tape.attach_scalar(out.prob, value, grad)?;
            for &aux in &out.aux {
                let (n, _, ah, aw) = tape.value(aux).dims4()?;
                let target = Tensor::full(vec![n, 1, ah, aw], 0.25);
                let (v, g) = batch_loss(loss, tape.value(aux), &target)?;
                let term = tape.attach_scalar(aux, v * AUX_LOSS_WEIGHT, g.map(|g| g * AUX_LOSS_WEIGHT))?;
                root = tape.add(root, term)?;
            }
            Ok(root)
        },
        &inputs,
        opts,
    )
}
