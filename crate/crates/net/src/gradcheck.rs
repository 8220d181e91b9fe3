//! Central finite-difference gradient checks.
//!
//! Derivatives use the fourth-order central stencil
//! `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, which keeps the
//! truncation error small at steps large enough to suppress round-off.
//!
//! The reported relative error for one tensor is
//! `||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, floor)`
//! over the checked coordinates, with `floor = SCALE_FLOOR * G` and `G` the
//! largest gradient norm of any checked tensor. Tensors whose gradients are
//! many orders below `G` would otherwise be judged on round-off in the
//! loss value. The overall figure is the maximum over tensors.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor relative to the largest checked gradient norm.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub tensors: usize,
    pub coordinates: usize,
    /// `(name, ||diff||, max(||analytic||, ||numeric||))` per tensor
    entries: Vec<(String, f64, f64)>,
}

impl std::fmt::Debug for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCheck")
            .field("max_rel_err", &self.max_rel_err)
            .field("worst", &self.worst)
            .field("tensors", &self.tensors)
            .field("coordinates", &self.coordinates)
            .finish()
    }
}

impl GradCheck {
    fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: String::new(),
            tensors: 0,
            coordinates: 0,
            entries: Vec::new(),
        }
    }

    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        self.entries.push((name.to_string(), diff, na.max(nn)));
        self.tensors += 1;
        self.coordinates += analytic.len();
        let floor = (SCALE_FLOOR * self.entries.iter().map(|e| e.2).fold(0.0, f64::max)).max(1e-12);
        self.max_rel_err = 0.0;
        self.worst.clear();
        for (name, diff, norm) in &self.entries {
            let rel = diff / norm.max(floor);
            if rel >= self.max_rel_err {
                self.max_rel_err = rel;
                self.worst.clone_from(name);
            }
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Fourth-order central difference of `f` around the unperturbed point.
fn central(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let (p1, m1, p2, m2) = (f(h), f(-h), f(2.0 * h), f(-2.0 * h));
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

fn eval(inputs: &[Tensor], f: &impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Checks `d f / d inputs` for a scalar-valued `f` built on a fresh graph.
pub fn check_gradients(inputs: &[Tensor], h: f64, f: impl Fn(&mut Graph, &[Var]) -> Var) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut report = GradCheck::empty();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|t| t.data.clone())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        let mut work = inputs.to_vec();
        for j in 0..inputs[k].len() {
            let orig = work[k].data[j];
            numeric[j] = central(h, |d| {
                work[k].data[j] = orig + d;
                eval(&work, &f)
            });
            work[k].data[j] = orig;
        }
        report.record(&format!("input{k}"), &analytic, &numeric);
    }
    report
}

/// Checks gradients with respect to the parameters in `store` and the given
/// inputs. At most `per_tensor` seeded coordinates of each parameter tensor
/// are probed (`None` probes all).
pub fn check_model(
    store: &ParamStore,
    inputs: &[Tensor],
    h: f64,
    per_tensor: Option<usize>,
    seed: u64,
    f: impl Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, store, &vars);
    let grads = g.backward(out);
    let mut acc = ParamStore::clone(store);
    acc.zero_grad();
    acc.accumulate(&grads, 1.0);

    let eval_with = |s: &ParamStore, xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let o = f(&mut g, s, &vs);
        g.value(o).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::empty();
    let mut work = store.clone();
    for p in 0..store.len() {
        let id = ParamId(p);
        let n = store.get(id).len();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let analytic: Vec<f64> = coords.iter().map(|&j| acc.grad(id).data[j]).collect();
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let orig = work.get(id).data[j];
            numeric.push(central(h, |d| {
                work.get_mut(id).data[j] = orig + d;
                eval_with(&work, inputs)
            }));
            work.get_mut(id).data[j] = orig;
        }
        report.record(&store.names()[p], &analytic, &numeric);
    }
    for (k, v) in vars.iter().enumerate() {
        let full = grads
            .get(*v)
            .map(|t| t.data.clone())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let n = inputs[k].len();
        let coords: Vec<usize> = match per_tensor {
            Some(c) if c < n => sample(&mut rng, n, c).into_vec(),
            _ => (0..n).collect(),
        };
        let mut xs = inputs.to_vec();
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let orig = xs[k].data[j];
            numeric.push(central(h, |d| {
                xs[k].data[j] = orig + d;
                eval_with(store, &xs)
            }));
            xs[k].data[j] = orig;
        }
        let analytic: Vec<f64> = coords.iter().map(|&j| full[j]).collect();
        report.record(&format!("input{k}"), &analytic, &numeric);
    }
    report
}
