//! Finite-difference validation of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::LayerParams;
use super::tape::{GradientTape, LayerHandle, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Builds a network fragment on the tape from the input node and the
/// registered layers, returning the output node.
pub trait Fragment {
    fn forward(&self, tape: &mut GradientTape, input: NodeId, layers: &[LayerHandle]) -> Result<NodeId>;
}

impl<F> Fragment for F
where
    F: Fn(&mut GradientTape, NodeId, &[LayerHandle]) -> Result<NodeId>,
{
    fn forward(&self, tape: &mut GradientTape, input: NodeId, layers: &[LayerHandle]) -> Result<NodeId> {
        self(tape, input, layers)
    }
}

/// Relative error between two gradient tensors, `|a - b| / max(|a|, |b|)`
/// in the Euclidean norm. Two (near) zero tensors compare as 0.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Scalar objective `sum(output * projection)` with a seeded random projection.
fn objective(out: &Tensor, projection: &Tensor) -> f64 {
    out.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum()
}

fn evaluate<F: Fragment>(fragment: &F, params: &[LayerParams], input: &Tensor, projection: Option<&Tensor>) -> Result<(f64, Tensor)> {
    let mut tape = GradientTape::new();
    let x = tape.constant(input.clone());
    let handles: Vec<_> = params.iter().map(|p| tape.layer(p, true)).collect();
    let out = fragment.forward(&mut tape, x, &handles)?;
    let value = tape.value(out).clone();
    let loss = projection.map(|p| objective(&value, p)).unwrap_or(0.0);
    Ok((loss, value))
}

/// Compares reverse-mode gradients of every parameter with central finite
/// differences and returns the worst per-tensor relative error.
pub fn grad_check<F: Fragment>(fragment: &F, params: &[LayerParams], input: &Tensor, epsilon: f64) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    if !input.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check input".into(),
        });
    }

    let (_, out) = evaluate(fragment, params, input, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let projection = Tensor::from_fn(out.shape(), |_| rng.gen_range(-1.0..1.0));

    let mut tape = GradientTape::new();
    let x = tape.constant(input.clone());
    let handles: Vec<_> = params.iter().map(|p| tape.layer(p, true)).collect();
    let out_id = fragment.forward(&mut tape, x, &handles)?;
    let grads = tape.backward(&[(out_id, projection.clone())])?;

    let mut worst = 0.0f64;
    for (li, handle) in handles.iter().enumerate() {
        let analytic = grads.layer(*handle);
        for which in 0..2 {
            let target = if which == 0 { &analytic.kernels } else { &analytic.biases };
            let mut numeric = Tensor::zeros(target.shape());
            for i in 0..target.len() {
                let mut plus = params.to_vec();
                let mut minus = params.to_vec();
                let (p, m) = if which == 0 {
                    (&mut plus[li].kernels, &mut minus[li].kernels)
                } else {
                    (&mut plus[li].biases, &mut minus[li].biases)
                };
                p.data_mut()[i] += epsilon;
                m.data_mut()[i] -= epsilon;
                let (lp, _) = evaluate(fragment, &plus, input, Some(&projection))?;
                let (lm, _) = evaluate(fragment, &minus, input, Some(&projection))?;
                numeric.data_mut()[i] = (lp - lm) / (2.0 * epsilon);
            }
            worst = worst.max(relative_error(target, &numeric));
        }
    }
    Ok(worst)
}
