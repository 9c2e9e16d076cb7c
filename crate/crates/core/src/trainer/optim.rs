//! SGD and split Adam over complex parameters.

use std::collections::HashMap;

use super::config::{AdamConfig, OptimizerKind};
use crate::autodiff::{Parameter, Tape};
use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::module::Module;

/// Adam moments for one parameter, kept per plane.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m_re: Vec<f64>,
    pub m_im: Vec<f64>,
    pub v_re: Vec<f64>,
    pub v_im: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Completed steps.
    pub t: u64,
    pub state: HashMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, adam: AdamConfig) -> Self {
        Optimizer { kind, lr, adam, t: 0, state: HashMap::new() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, AdamConfig::default())
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr, AdamConfig::default())
    }

    /// One update of every parameter of `model` from the gradients on `tape`.
    pub fn step(&mut self, model: &mut dyn Module, tape: &Tape) -> Result<()> {
        self.t += 1;
        let mut err = None;
        model.visit_params(&mut |name, p| {
            if err.is_some() {
                return;
            }
            let r = match tape.param_grad(p) {
                Some(g) => self.update(name, p, &g),
                None => Err(Error::MissingGrad(name.to_string())),
            };
            if let Err(e) = r {
                err = Some(e);
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Applies one update to a single parameter. `self.t` must already
    /// count this step.
    pub fn update(&mut self, name: &str, p: &mut Parameter, g: &CTensor) -> Result<()> {
        if g.shape() != p.value.shape() {
            return Err(Error::shape(format!("gradient {:?} for parameter `{name}` {:?}", g.shape(), p.value.shape())));
        }
        let dtype = p.value.dtype();
        let (mut re, mut im) = (p.value.re().to_vec(), p.value.im().to_vec());
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, d) in re.iter_mut().zip(g.re()).chain(im.iter_mut().zip(g.im())) {
                    *w -= self.lr * d;
                }
            }
            OptimizerKind::Adam => {
                let AdamConfig { beta1, beta2, eps } = self.adam;
                let t = self.t.max(1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                let n = re.len();
                let st = self.state.entry(name.to_string()).or_insert_with(|| AdamState {
                    m_re: vec![0.0; n],
                    m_im: vec![0.0; n],
                    v_re: vec![0.0; n],
                    v_im: vec![0.0; n],
                });
                let lr = self.lr;
                let plane = |w: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
                    for i in 0..w.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                };
                plane(&mut re, &mut st.m_re, &mut st.v_re, g.re());
                plane(&mut im, &mut st.m_im, &mut st.v_im, g.im());
            }
        }
        p.value = CTensor::with_dtype(p.value.shape(), re, im, dtype)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Var;
    use crate::module::Ctx;

    struct Single(Parameter);

    impl Module for Single {
        fn forward(&mut self, ctx: &mut Ctx, _x: &Var) -> Result<Var> {
            Ok(ctx.param(&self.0))
        }
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
            f("z", &mut self.0);
        }
        fn output_shape(&self, _input: &[usize]) -> Result<Vec<usize>> {
            Ok(self.0.value.shape().to_vec())
        }
    }

    fn step_on(opt: &mut Optimizer, m: &mut Single, loss: impl Fn(&Var) -> Result<Var>) -> f64 {
        let tape = Tape::new();
        let mut ctx = Ctx::train(tape.clone(), rand::SeedableRng::seed_from_u64(0));
        let z = m.forward(&mut ctx, &Var::constant(CTensor::zeros(&[1]))).unwrap();
        let l = loss(&z).unwrap();
        l.backward().unwrap();
        opt.step(m, &tape).unwrap();
        l.value().item().unwrap().0
    }

    #[test]
    fn sgd_example() {
        let mut p = Parameter::new(CTensor::scalar(1.0, 1.0));
        let mut opt = Optimizer::sgd(0.5);
        opt.t = 1;
        opt.update("z", &mut p, &CTensor::scalar(1.0, 1.0)).unwrap();
        assert_eq!(p.value.item().unwrap(), (0.5, 0.5));
    }

    #[test]
    fn sgd_descends_squared_modulus() {
        for lr in [0.01, 0.3, 0.99] {
            let mut m = Single(Parameter::new(CTensor::scalar(2.0, -1.5)));
            let mut opt = Optimizer::sgd(lr);
            let before = step_on(&mut opt, &mut m, |z| z.abs2()?.sum_all());
            let (x, y) = m.0.value.item().unwrap();
            assert!(x * x + y * y < before, "lr {lr}");
        }
    }

    #[test]
    fn adam_first_step_is_lr_per_plane() {
        // closed form: m̂ = g and v̂ = g² after one step, so Δ = lr·g/(|g| + ε)
        for scale in [1e-3, 1.0, 1e4] {
            let mut p = Parameter::new(CTensor::scalar(0.0, 0.0));
            let mut opt = Optimizer::adam(0.01);
            opt.t = 1;
            opt.update("z", &mut p, &CTensor::scalar(3.0 * scale, -0.5 * scale)).unwrap();
            let (x, y) = p.value.item().unwrap();
            let want = |g: f64| -0.01 * g / (g.abs() + 1e-8);
            assert!((x - want(3.0 * scale)).abs() < 1e-15 && (y - want(-0.5 * scale)).abs() < 1e-15);
            assert!((x.abs() - 0.01).abs() < 1e-7 && (y.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_second_step_matches_recurrence() {
        let mut p = Parameter::new(CTensor::scalar(1.0, 0.0));
        let mut opt = Optimizer::adam(0.1);
        let g = [(2.0, 1.0), (-1.0, 4.0)];
        for (t, &(gx, gy)) in g.iter().enumerate() {
            opt.t = t as u64 + 1;
            opt.update("z", &mut p, &CTensor::scalar(gx, gy)).unwrap();
        }
        // oracle for the real plane
        let (b1, b2) = (0.9f64, 0.999f64);
        let m = b1 * (1.0 - b1) * 2.0 + -(1.0 - b1);
        let v = b2 * (1.0 - b2) * 4.0 + (1.0 - b2) * 1.0;
        let x1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        let x2 = x1 - 0.1 * (m / (1.0 - b1 * b1)) / ((v / (1.0 - b2 * b2)).sqrt() + 1e-8);
        assert!((p.value.re()[0] - x2).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut m = Single(Parameter::new(CTensor::scalar(1.0, 0.0)));
        let tape = Tape::new();
        assert!(matches!(Optimizer::sgd(0.1).step(&mut m, &tape), Err(Error::MissingGrad(n)) if n == "z"));
    }
}
