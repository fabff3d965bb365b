//! Central finite-difference checks of tape gradients.
//!
//! The error of one coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`,
//! so it is relative for large gradients and absolute for small ones.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_error: f64,
    pub coordinates: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        self.max_error = self.max_error.max(err);
        self.coordinates += 1;
    }
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Compares the gradient of `f` with respect to every entry of `inputs`
/// against central differences with step `h`.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheck::default();
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let g = grads.wrt(v)?;
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            report.record(g.data()[j], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Same as [`check_inputs`] for the parameters of `store`, probing at most
/// `per_param` evenly spaced entries of each parameter.
pub fn check_params<F>(store: &mut ParamStore, h: f64, per_param: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let grads = store.gradients(&bound, &tape.backward(out)?)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = s.bind_frozen(&mut tape);
        let out = f(&mut tape, &bound)?;
        scalar(&tape, out)
    };
    let mut report = GradCheck::default();
    for (p, g) in (0..store.len()).zip(&grads) {
        let n = g.len();
        let step = n.div_ceil(per_param.max(1)).max(1);
        for j in (0..n).step_by(step) {
            let x0 = param_value(store, p)[j];
            set_param(store, p, j, x0 + h);
            let up = eval(store)?;
            set_param(store, p, j, x0 - h);
            let down = eval(store)?;
            set_param(store, p, j, x0);
            report.record(g.data()[j], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

fn param_value(store: &ParamStore, p: usize) -> &[f64] {
    store.iter().nth(p).expect("index in range").value.data()
}

fn set_param(store: &mut ParamStore, p: usize, j: usize, v: f64) {
    store.iter_mut().nth(p).expect("index in range").value.data_mut()[j] = v;
}
