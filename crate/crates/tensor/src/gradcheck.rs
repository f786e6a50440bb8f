//! Central-difference gradient checks in f64.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-4)` where
//! `a` is the analytic and `n` the numerical derivative.

use crate::error::{invalid, Result};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, coordinate, analytic, numerical) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

impl GradReport {
    fn record(&mut self, input: usize, coord: usize, a: f64, n: f64) {
        self.checked += 1;
        let e = rel_error(a, n);
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((input, coord, a, n));
        }
    }
}

fn scalar(loss: &Tensor<f64>) -> Result<f64> {
    if loss.numel() != 1 {
        return invalid("gradcheck", format!("loss must be a scalar, got {:?}", loss.shape()));
    }
    Ok(loss.item())
}

/// Check `f` with respect to every coordinate of every input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::leaf(t.shape(), t.to_vec()))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    scalar(&loss)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();
    let mut report = GradReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (i, inp) in inputs.iter().enumerate() {
        for c in 0..inp.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let probe: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut d = t.to_vec();
                        if j == i {
                            d[c] += delta;
                        }
                        Tensor::new(t.shape(), d)
                    })
                    .collect::<Result<_>>()?;
                scalar(&f(&probe)?)
            };
            let n = (eval(DEFAULT_STEP)? - eval(-DEFAULT_STEP)?) / (2.0 * DEFAULT_STEP);
            report.record(i, c, analytic[i][c], n);
        }
    }
    Ok(report)
}

/// Check a model loss with respect to trainable parameters, probing up to
/// `per_param` randomly chosen coordinates of each.
pub fn check_params<F>(store: &ParamStore<f64>, per_param: usize, rng: &mut Rng, f: F) -> Result<GradReport>
where
    F: Fn(&Session<f64>) -> Result<Tensor<f64>>,
{
    let s = store.session(true);
    let loss = f(&s)?;
    scalar(&loss)?;
    loss.backward()?;
    let grads = s.grads();
    let mut report = GradReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = store.clone();
    for (i, p) in store.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let n = p.data.len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.below(n)).collect()
        };
        let id = store.id_of(&p.name).expect("name from the store");
        for c in coords {
            let orig = p.data[c];
            let mut eval = |v: f64| -> Result<f64> {
                probe.get_mut(id).data[c] = v;
                let out = scalar(&f(&probe.session(false))?);
                probe.get_mut(id).data[c] = orig;
                out
            };
            let num = (eval(orig + DEFAULT_STEP)? - eval(orig - DEFAULT_STEP)?) / (2.0 * DEFAULT_STEP);
            let a = grads[i].as_ref().map_or(0.0, |g| g[c]);
            report.record(i, c, a, num);
        }
    }
    Ok(report)
}
