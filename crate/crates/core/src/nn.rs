//! Small layer helpers shared by both branches and the segmentation toys.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{uniform_init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Weight and bias of an affine layer `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Glorot-uniform weight `[fan_in, fan_out]`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::with_limit(store, name, fan_in, fan_out, limit, rng)
    }

    pub fn with_limit(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        limit: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, &[fan_in, fan_out], limit))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &crate::param::Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.get(self.weight))?;
        tape.add_row_bias(h, bound.get(self.bias))
    }
}

/// 2-D convolution kernel `[c_out, c_in, k, k]` and per-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    /// He-uniform kernel, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let limit = (6.0 / (c_in * k * k) as f64).sqrt();
        let kernel = store.add(format!("{name}.kernel"), uniform_init(rng, &[c_out, c_in, k, k], limit))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Conv { kernel, bias })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &crate::param::Bound,
        x: Var,
        spec: crate::tensor::Conv2dSpec,
    ) -> Result<Var> {
        let y = tape.conv2d(x, bound.get(self.kernel), spec)?;
        tape.add_channel_bias(y, bound.get(self.bias))
    }
}

/// Inverted dropout: keeps each entry with probability `1 - p`, scaled by `1 / (1 - p)`.
/// A no-op when `rng` is `None` (evaluation) or `p == 0`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut impl Rng>) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    tape.mul_const(x, Arc::new(Tensor::new(shape, mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dropout_eval_is_identity_and_train_rescales() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::full(&[1, 1000], 1.0));
        let same = dropout(&mut tape, x, 0.2, None::<&mut ChaCha8Rng>).unwrap();
        assert_eq!(same, x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = dropout(&mut tape, x, 0.2, Some(&mut rng)).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|&a| a == 0.0 || a == 1.25));
        let kept = v.iter().filter(|&&a| a > 0.0).count();
        assert!((700..900).contains(&kept));
    }
}
