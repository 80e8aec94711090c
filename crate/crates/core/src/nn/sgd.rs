use super::ops::LayerParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One plain gradient-descent update: `params - lr * grads`.
pub fn sgd_step(params: &LayerParams, grads: &LayerParams, lr: f64) -> Result<LayerParams> {
    Ok(LayerParams {
        kernels: step(&params.kernels, &grads.kernels, lr)?,
        biases: step(&params.biases, &grads.biases, lr)?,
    })
}

fn step(p: &Tensor, g: &Tensor, lr: f64) -> Result<Tensor> {
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match parameter {:?}",
            g.shape(),
            p.shape()
        )));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite {
            context: "gradient".into(),
        });
    }
    let data = p.data().iter().zip(g.data()).map(|(a, b)| a - lr * b).collect();
    Tensor::new(p.shape().to_vec(), data)
}

/// SGD with classical momentum, keeping one velocity buffer per parameter
/// tensor. With `momentum == 0` every update equals [`sgd_step`].
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    pub momentum: f64,
    velocity: Vec<LayerParams>,
}

impl MomentumSgd {
    pub fn new(momentum: f64) -> Self {
        MomentumSgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Updates `layers` in place. `grads` must line up with `layers`.
    pub fn update(&mut self, layers: &mut [&mut LayerParams], grads: &[LayerParams], lr: f64) -> Result<()> {
        if layers.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} layers but {} gradients",
                layers.len(),
                grads.len()
            )));
        }
        if self.velocity.len() != layers.len() {
            self.velocity = layers
                .iter()
                .map(|l| LayerParams {
                    kernels: Tensor::zeros(l.kernels.shape()),
                    biases: Tensor::zeros(l.biases.shape()),
                })
                .collect();
        }
        // Validate everything before mutating anything.
        for (l, g) in layers.iter().zip(grads) {
            for (p, gt) in [(&l.kernels, &g.kernels), (&l.biases, &g.biases)] {
                if p.shape() != gt.shape() {
                    return Err(Error::Shape(format!(
                        "gradient {:?} does not match parameter {:?}",
                        gt.shape(),
                        p.shape()
                    )));
                }
                if !gt.is_finite() {
                    return Err(Error::NonFinite {
                        context: "gradient".into(),
                    });
                }
            }
        }
        for ((layer, g), v) in layers.iter_mut().zip(grads).zip(&mut self.velocity) {
            apply(&mut layer.kernels, &g.kernels, &mut v.kernels, lr, self.momentum);
            apply(&mut layer.biases, &g.biases, &mut v.biases, lr, self.momentum);
        }
        Ok(())
    }
}

fn apply(p: &mut Tensor, g: &Tensor, v: &mut Tensor, lr: f64, momentum: f64) {
    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        *vv = momentum * *vv - lr * gv;
        *pv += *vv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> LayerParams {
        LayerParams::new(Tensor::new(vec![1, 1], vec![v]).unwrap(), Tensor::zeros(&[1])).unwrap()
    }

    #[test]
    fn step_examples() {
        let p = single(1.0);
        let out = sgd_step(&p, &single(2.0), 1e-5).unwrap();
        assert!((out.kernels.data()[0] - 0.99998).abs() < 1e-15);
        assert_eq!(sgd_step(&p, &single(0.0), 1e-5).unwrap(), p);
        assert_eq!(sgd_step(&p, &single(3.0), 0.0).unwrap(), p);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let err = sgd_step(&single(1.0), &single(f64::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn zero_momentum_matches_plain_step() {
        let mut a = single(1.0);
        let g = single(2.0);
        let expected = sgd_step(&a, &g, 0.1).unwrap();
        let mut opt = MomentumSgd::new(0.0);
        opt.update(&mut [&mut a], &[g], 0.1).unwrap();
        assert_eq!(a, expected);
    }
}
