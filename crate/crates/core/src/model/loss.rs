//! Training objectives.

use crate::error::{Error, Result};
use crate::flowcomp::{flow_loss, FlowVars};
use crate::tensor::Var;

/// Weighted generator objective and its parts.
pub struct GeneratorLoss<'g> {
    pub total: Var<'g>,
    pub rec: f64,
    pub adv: f64,
    pub flow: f64,
}

/// Mean absolute error over all elements.
pub fn reconstruction_loss<'g>(output: Var<'g>, target: Var<'g>) -> Result<Var<'g>> {
    if output.shape() != target.shape() {
        return Err(Error::shape("reconstruction_loss", &output.shape(), &target.shape()));
    }
    output.sub(target)?.abs()?.mean()
}

/// `-mean(D(fake))`.
pub fn adversarial_loss<'g>(d_fake: Var<'g>) -> Result<Var<'g>> {
    d_fake.mean()?.neg()
}

/// Hinge loss `mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))`.
pub fn discriminator_loss<'g>(d_real: Var<'g>, d_fake: Var<'g>) -> Result<Var<'g>> {
    if d_real.shape() != d_fake.shape() {
        return Err(Error::shape("discriminator_loss", &d_real.shape(), &d_fake.shape()));
    }
    let real = d_real.neg()?.add_scalar(1.0)?.relu()?.mean()?;
    let fake = d_fake.add_scalar(1.0)?.relu()?.mean()?;
    real.add(fake)
}

/// `w_rec * L_rec + w_adv * L_adv + w_flow * L_flow`. The flow term is
/// skipped when either flow set is absent or `w_flow` is zero.
pub fn generator_loss<'g>(
    output: Var<'g>,
    target: Var<'g>,
    flows: Option<(FlowVars<'g>, FlowVars<'g>)>,
    d_fake: Option<Var<'g>>,
    weights: (f64, f64, f64),
) -> Result<GeneratorLoss<'g>> {
    let (w_rec, w_adv, w_flow) = weights;
    let rec = reconstruction_loss(output, target)?;
    let mut total = rec.mul_scalar(w_rec)?;
    let mut out = GeneratorLoss {
        total,
        rec: rec.value().item()?,
        adv: 0.0,
        flow: 0.0,
    };
    if let Some(d) = d_fake {
        let adv = adversarial_loss(d)?;
        out.adv = adv.value().item()?;
        total = total.add(adv.mul_scalar(w_adv)?)?;
    }
    if let Some((pred, gt)) = flows {
        let flow = flow_loss(pred, gt)?;
        out.flow = flow.value().item()?;
        if w_flow != 0.0 {
            total = total.add(flow.mul_scalar(w_flow)?)?;
        }
    }
    out.total = total;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn hinge(real: f64, fake: f64) -> f64 {
        let g = Graph::new();
        let r = g.constant(Tensor::full(&[2, 3, 3, 1], real));
        let f = g.constant(Tensor::full(&[2, 3, 3, 1], fake));
        discriminator_loss(r, f).unwrap().value().item().unwrap()
    }

    #[test]
    fn hinge_cases() {
        assert_eq!(hinge(1.0, -1.0), 0.0);
        assert_eq!(hinge(0.0, 0.0), 2.0);
        assert_eq!(hinge(-1.0, 1.0), 4.0);
    }

    #[test]
    fn perfect_output_and_adversarial_weight() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4, 4, 3], 0.5));
        let zero = g.constant(Tensor::zeros(&[1, 2, 2, 1]));
        let l = generator_loss(x, x, None, Some(zero), (1.0, 1e-2, 1.0)).unwrap();
        assert_eq!(l.total.value().item().unwrap(), 0.0);
        let one = g.constant(Tensor::ones(&[1, 2, 2, 1]));
        let l = generator_loss(x, x, None, Some(one), (1.0, 1e-2, 1.0)).unwrap();
        assert_eq!(l.adv, -1.0);
        assert!((l.total.value().item().unwrap() + 0.01).abs() < 1e-15);
    }
}
