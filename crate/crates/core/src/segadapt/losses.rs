use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-7;
pub const LOG_EPS: f64 = 1e-12;

/// `1 - 2<y, ŷ> / (Σy + Σŷ + ε)` over all entries.
pub fn dice_on_tape(tape: &mut Tape, y: Var, yhat: Var) -> Result<Var> {
    let inter = tape.mul(y, yhat)?;
    let inter = tape.sum(inter)?;
    let sy = tape.sum(y)?;
    let sp = tape.sum(yhat)?;
    let denom = tape.add(sy, sp)?;
    let denom = tape.add_scalar(denom, DICE_EPS)?;
    let ratio = tape.div(inter, denom)?;
    let ratio = tape.scale(ratio, -2.0)?;
    tape.add_scalar(ratio, 1.0)
}

/// `-mean(ŷ ln ŷ)`.
pub fn entropy_min_on_tape(tape: &mut Tape, yhat: Var) -> Result<Var> {
    let ln = tape.ln_clamped(yhat, LOG_EPS)?;
    let h = tape.mul(yhat, ln)?;
    let m = tape.mean(h)?;
    tape.scale(m, -1.0)
}

/// `-mean(ln D(ŷ_t))`.
pub fn adversarial_on_tape(tape: &mut Tape, d_target: Var) -> Result<Var> {
    let ln = tape.ln_clamped(d_target, LOG_EPS)?;
    let m = tape.mean(ln)?;
    tape.scale(m, -1.0)
}

/// Mean squared error.
pub fn reconstruction_on_tape(tape: &mut Tape, x: Var, recon: Var) -> Result<Var> {
    let d = tape.sub(x, recon)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Binary cross-entropy of a discriminator map against the domain flag `z`
/// (1 for source, 0 for target).
pub fn discriminator_on_tape(tape: &mut Tape, d: Var, z: u8) -> Result<Var> {
    let v = match z {
        1 => tape.ln_clamped(d, LOG_EPS)?,
        0 => {
            let flip = tape.scale(d, -1.0)?;
            let flip = tape.add_scalar(flip, 1.0)?;
            tape.ln_clamped(flip, LOG_EPS)?
        }
        _ => return Err(Error::invalid(format!("domain flag must be 0 or 1, got {z}"))),
    };
    let m = tape.mean(v)?;
    tape.scale(m, -1.0)
}

fn check_range(name: &'static str, t: &Tensor, lo: f64, hi: f64) -> Result<()> {
    if t.is_empty() {
        return Err(Error::shape(name, "empty tensor"));
    }
    match t.data().iter().find(|v| !(lo..=hi).contains(*v)) {
        Some(v) => Err(Error::invalid(format!("{name}: value {v} outside [{lo}, {hi}]"))),
        None => Ok(()),
    }
}

fn check_same(name: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn eval(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(tape.value(v).data()[0])
}

pub fn dice_loss(y: &Tensor, yhat: &Tensor) -> Result<f64> {
    check_same("dice_loss", y, yhat)?;
    check_range("dice_loss", y, 0.0, 1.0)?;
    check_range("dice_loss", yhat, 0.0, 1.0)?;
    eval(|t| {
        let (a, b) = (t.constant(y.clone()), t.constant(yhat.clone()));
        dice_on_tape(t, a, b)
    })
}

pub fn entropy_min_loss(yhat: &Tensor) -> Result<f64> {
    check_range("entropy_min_loss", yhat, 0.0, 1.0)?;
    eval(|t| {
        let p = t.constant(yhat.clone());
        entropy_min_on_tape(t, p)
    })
}

pub fn adversarial_loss(d_target: &Tensor) -> Result<f64> {
    check_range("adversarial_loss", d_target, 0.0, 1.0)?;
    eval(|t| {
        let d = t.constant(d_target.clone());
        adversarial_on_tape(t, d)
    })
}

pub fn reconstruction_loss(x: &Tensor, recon: &Tensor) -> Result<f64> {
    check_same("reconstruction_loss", x, recon)?;
    if x.is_empty() {
        return Err(Error::shape("reconstruction_loss", "empty tensor"));
    }
    eval(|t| {
        let (a, b) = (t.constant(x.clone()), t.constant(recon.clone()));
        reconstruction_on_tape(t, a, b)
    })
}

pub fn discriminator_loss(d: &Tensor, z: u8) -> Result<f64> {
    check_range("discriminator_loss", d, 0.0, 1.0)?;
    eval(|t| {
        let v = t.constant(d.clone());
        discriminator_on_tape(t, v, z)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaLossWeights {
    pub lambda_adv: f64,
    pub lambda_recons: f64,
}

impl Default for DaLossWeights {
    fn default() -> Self {
        DaLossWeights {
            lambda_adv: 0.001,
            lambda_recons: 0.01,
        }
    }
}

impl DaLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv >= 0.0 && self.lambda_recons >= 0.0) || !(self.lambda_adv + self.lambda_recons).is_finite() {
            return Err(Error::Validation("segadapt weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Values of the five loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DaComponents {
    pub dice: f64,
    pub entropy: f64,
    pub adv: f64,
    pub recons: f64,
    pub dis: f64,
}

/// `L_dice + L_em + λ_adv L_adv + λ_recons L_recons + L_dis`.
pub fn total_da_loss(c: &DaComponents, w: &DaLossWeights) -> f64 {
    c.dice + c.entropy + w.lambda_adv * c.adv + w.lambda_recons * c.recons + c.dis
}

/// Network outputs needed to evaluate every term on one batch.
#[derive(Clone, Copy, Debug)]
pub struct DaOutputs<'a> {
    pub y_source: &'a Tensor,
    pub pred_source: &'a Tensor,
    pub pred_target: &'a Tensor,
    pub x_target: &'a Tensor,
    pub recon_target: &'a Tensor,
    pub d_source: &'a Tensor,
    pub d_target: &'a Tensor,
}

/// The five terms for one batch. `L_dis` is the mean of its source and
/// target parts; `entropy_on_target` moves `L_em` to the target predictions.
pub fn da_components(o: &DaOutputs, entropy_on_target: bool) -> Result<DaComponents> {
    let em_input = if entropy_on_target { o.pred_target } else { o.pred_source };
    Ok(DaComponents {
        dice: dice_loss(o.y_source, o.pred_source)?,
        entropy: entropy_min_loss(em_input)?,
        adv: adversarial_loss(o.d_target)?,
        recons: reconstruction_loss(o.x_target, o.recon_target)?,
        dis: 0.5 * (discriminator_loss(o.d_source, 1)? + discriminator_loss(o.d_target, 0)?),
    })
}
