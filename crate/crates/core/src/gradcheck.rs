//! Central finite-difference gradient checking.
//!
//! A checked function may return any tensor; it is reduced to a scalar as
//! `sum(r ⊙ out)` with a fixed random weighting `r`, so every output entry
//! contributes. Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-4)`;
//! the floor keeps near-zero gradients from turning round-off into huge ratios.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Entries sampled per parameter tensor; `None` checks every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, max_entries: Some(12), seed: 5 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some(format!("{} analytic={analytic:e} numeric={numeric:e}", what()));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn weighting(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng)
}

fn reduce(g: &mut Graph, out: Var, r: &Tensor) -> Var {
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv);
    g.sum_all(prod)
}

fn output_shape(store: &ParamStore, f: &impl Fn(&mut Graph) -> Var) -> Vec<usize> {
    let mut g = Graph::new(store);
    let out = f(&mut g);
    g.shape(out)
}

fn scalar_of(store: &ParamStore, r: &Tensor, f: &impl Fn(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new(store);
    let out = f(&mut g);
    let l = reduce(&mut g, out, r);
    g.value(l).data()[0]
}

/// Checks gradients of `f` with respect to the listed parameters.
pub fn check_param_gradients(
    store: &ParamStore,
    ids: &[ParamId],
    cfg: &GradCheck,
    f: impl Fn(&mut Graph) -> Var,
) -> GradCheckReport {
    let r = weighting(&output_shape(store, &f), cfg.seed);
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        let l = reduce(&mut g, out, &r);
        g.backward(l).into_params()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.get(id).len();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for e in entries {
            let orig = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + cfg.step;
            let up = scalar_of(&work, &r, &f);
            work.get_mut(id).data_mut()[e] = orig - cfg.step;
            let down = scalar_of(&work, &r, &f);
            work.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[e]);
            report.record(|| format!("{}[{e}]", store.name(id)), a, numeric);
        }
    }
    report
}

/// Checks the gradient of `f` with respect to its (non-parameter) input.
pub fn check_input_gradient(x: &Tensor, seed: u64, f: impl Fn(&mut Graph, Var) -> Var) -> GradCheckReport {
    check_input_gradient_with(&ParamStore::new(), x, seed, f)
}

/// As [`check_input_gradient`], for functions that also read parameters from `store`.
pub fn check_input_gradient_with(
    store: &ParamStore,
    x: &Tensor,
    seed: u64,
    f: impl Fn(&mut Graph, Var) -> Var,
) -> GradCheckReport {
    let eval = |input: &Tensor, r: Option<&Tensor>| -> (f64, Option<Tensor>, Vec<usize>) {
        let mut g = Graph::new(store);
        let xv = g.input(input.clone());
        let out = f(&mut g, xv);
        let shape = g.shape(out);
        match r {
            None => (0.0, None, shape),
            Some(r) => {
                let l = reduce(&mut g, out, r);
                let val = g.value(l).data()[0];
                let grad = g.backward(l).wrt(xv).cloned();
                (val, grad, shape)
            }
        }
    };
    let (_, _, shape) = eval(x, None);
    let r = weighting(&shape, seed);
    let (_, grad, _) = eval(x, Some(&r));
    let grad = grad.unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let step = 1e-5;
    let mut report = GradCheckReport::default();
    let mut work = x.clone();
    for e in 0..x.len() {
        let orig = x.data()[e];
        work.data_mut()[e] = orig + step;
        let up = eval(&work, Some(&r)).0;
        work.data_mut()[e] = orig - step;
        let down = eval(&work, Some(&r)).0;
        work.data_mut()[e] = orig;
        report.record(|| format!("input[{e}]"), grad.data()[e], (up - down) / (2.0 * step));
    }
    report
}
