use ndarray::Array2;

use super::nn::{Bound, Mlp, Param};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Adaptive-moment optimizer state for one parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(3e-4)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Forget all moment estimates.
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn is_fresh(&self) -> bool {
        self.t == 0 && self.m.is_empty()
    }

    /// Apply one update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut [Param]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| Array2::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Array2::zeros(p.shape())).collect();
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// One network together with its tape binding and optimizer.
pub struct Trainee<'a> {
    pub net: &'a mut Mlp,
    pub bound: &'a Bound,
    pub opt: &'a mut Adam,
}

/// Differentiate `loss` and update every trainee. Nothing is modified if
/// the loss or any gradient is non-finite.
pub fn backprop_and_step(tape: &Tape, loss: Var, trainees: &mut [Trainee<'_>]) -> Result<f64> {
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss("backprop"));
    }
    for t in trainees.iter() {
        for (p, v) in t.net.params().iter().zip(t.bound.vars()) {
            if let Some(g) = grads.get(*v) {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
    }
    for t in trainees.iter_mut() {
        t.net.store_grads(&grads, t.bound)?;
        t.opt.step(t.net.params_mut());
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::nn::MlpSpec;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_moves_every_parameter_toward_zero() {
        let mut net = Mlp::new(MlpSpec::q(3, vec![4]), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(1e-3);
        let mut tape = Tape::new();
        let b = net.bind(&mut tape, true);
        let sq: Vec<Var> = b.vars().iter().map(|v| {
            let s = tape.square(*v);
            tape.sum(s)
        }).collect();
        let mut loss = sq[0];
        for s in &sq[1..] {
            loss = tape.add(loss, *s);
        }
        backprop_and_step(&tape, loss, &mut [Trainee { net: &mut net, bound: &b, opt: &mut opt }]).unwrap();
        for (a, o) in net.params().iter().zip(before.params()) {
            for (x, y) in a.value.iter().zip(o.value.iter()) {
                if *y != 0.0 {
                    assert!(x.abs() < y.abs());
                }
            }
        }
    }

    #[test]
    fn untouched_parameter_is_unchanged() {
        let mut net = Mlp::new(MlpSpec::q(2, vec![3]), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before = net.clone();
        let mut opt = Adam::default();
        let mut tape = Tape::new();
        let b = net.bind(&mut tape, true);
        // Loss depends on w0 only.
        let s = tape.square(b.vars()[0]);
        let loss = tape.sum(s);
        backprop_and_step(&tape, loss, &mut [Trainee { net: &mut net, bound: &b, opt: &mut opt }]).unwrap();
        assert_ne!(net.params()[0], before.params()[0]);
        for i in 1..net.params().len() {
            assert_eq!(net.params()[i].value, before.params()[i].value);
        }
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut net = Mlp::new(MlpSpec::q(1, vec![2]), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before = net.clone();
        let mut opt = Adam::default();
        let mut tape = Tape::new();
        let b = net.bind(&mut tape, true);
        let x = tape.constant(array![[f64::NAN]]);
        let y = net.forward(&mut tape, &b, x).unwrap();
        let loss = tape.sum(y);
        let err = backprop_and_step(&tape, loss, &mut [Trainee { net: &mut net, bound: &b, opt: &mut opt }]);
        assert!(err.is_err());
        assert_eq!(net, before);
        assert!(opt.is_fresh());
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut net = Mlp::new(MlpSpec::q(1, vec![2]), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut opt = Adam::default();
        let mut tape = Tape::new();
        let b = net.bind(&mut tape, true);
        let x = tape.constant(array![[1.0], [2.0]]);
        let y = net.forward(&mut tape, &b, x).unwrap();
        let err = backprop_and_step(&tape, y, &mut [Trainee { net: &mut net, bound: &b, opt: &mut opt }]);
        assert!(matches!(err, Err(Error::NonScalarLoss { rows: 2, cols: 1 })));
    }
}
