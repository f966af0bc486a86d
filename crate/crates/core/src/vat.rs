//! Virtual adversarial training: the perturbation search and the KL
//! regularization loss.
//!
//! The clip-level posterior is a product of per-class Bernoullis, so the
//! divergence between two predictions is the per-class binary KL summed
//! over classes. The adversarial direction comes from power iteration on
//! the input gradient of that divergence, with the reference posterior
//! held constant (no gradient flows through it).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Clamp bound keeping probabilities away from 0 and 1 inside logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct VatConfig {
    pub epsilon: f64,
    pub xi: f64,
    pub power_iterations: usize,
    pub lambda: f64,
}

impl Default for VatConfig {
    fn default() -> Self {
        VatConfig {
            epsilon: 0.5,
            xi: 1e-6,
            power_iterations: 1,
            lambda: 1.0,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || self.xi <= 0.0 || self.power_iterations == 0 || self.lambda < 0.0
        {
            return Err(Error::Config(format!(
                "vat config out of range: epsilon {} xi {} power_iterations {} lambda {}",
                self.epsilon, self.xi, self.power_iterations, self.lambda
            )));
        }
        Ok(())
    }
}

/// Model forward pass as seen by VAT: records the graph from an input
/// handle to the clip-probability vector. Parameters are whatever the
/// closure binds (constants for the perturbation search, differentiable
/// inputs inside the training loss).
pub type ForwardGraph<'a, F> = dyn Fn(&mut Tape<F>, Var) -> Result<Var> + 'a;

/// Sum over classes of Bernoulli KL(p_c || q_c), probabilities clamped
/// to [PROB_EPS, 1 - PROB_EPS]. KL is nonnegative by Gibbs' inequality;
/// the final sum is floored at zero so rounding near p = q cannot leak
/// a negative value. The graph twin stays unfloored to keep gradients
/// smooth.
pub fn binary_kl<F: Scalar>(p: &[F], q: &[F]) -> F {
    let lo = F::from_f64(PROB_EPS);
    let hi = F::from_f64(1.0 - PROB_EPS);
    let mut acc = F::ZERO;
    for (&pc, &qc) in p.iter().zip(q) {
        let pc = pc.max_s(lo).min_s(hi);
        let qc = qc.max_s(lo).min_s(hi);
        acc = acc + pc * (pc.ln() - qc.ln())
            + (F::ONE - pc) * ((F::ONE - pc).ln() - (F::ONE - qc).ln());
    }
    acc.max_s(F::ZERO)
}

/// [`binary_kl`] recorded on a tape; gradients flow into both arguments
/// (pass a constant for the stopped side).
pub fn binary_kl_graph<F: Scalar>(tape: &mut Tape<F>, p: Var, q: Var) -> Result<Var> {
    let lo = F::from_f64(PROB_EPS);
    let hi = F::from_f64(1.0 - PROB_EPS);
    let pc = tape.clamp(p, lo, hi);
    let qc = tape.clamp(q, lo, hi);
    let ln_p = tape.ln(pc);
    let ln_q = tape.ln(qc);
    let dir = tape.sub(ln_p, ln_q)?;
    let pos = tape.mul(pc, dir)?;
    // mirrored term on the complement probabilities
    let np = tape.affine(pc, -F::ONE, F::ONE);
    let nq = tape.affine(qc, -F::ONE, F::ONE);
    let ln_np = tape.ln(np);
    let ln_nq = tape.ln(nq);
    let ndir = tape.sub(ln_np, ln_nq)?;
    let neg = tape.mul(np, ndir)?;
    let total = tape.add(pos, neg)?;
    Ok(tape.sum_all(total))
}

/// Perturbation search result: the ε-norm direction, the reference
/// posterior it was computed against, and whether the KL gradient
/// vanished (flat posterior), in which case the direction is the random
/// initialization.
pub struct Perturbation<F: Scalar> {
    pub r_vadv: Tensor<F>,
    pub p_ref: Tensor<F>,
    pub degenerate: bool,
}

fn random_unit<F: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    loop {
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            let t = Tensor::new(shape.to_vec(), data.iter().map(|v| F::from_f64(v / norm)).collect())
                .expect("shape consistent");
            return t;
        }
    }
}

fn normalized<F: Scalar>(t: &Tensor<F>) -> Option<Tensor<F>> {
    let norm = t
        .data()
        .iter()
        .map(|v| {
            let x = v.to_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm <= 1e-30 || !norm.is_finite() {
        return None;
    }
    Some(t.map(|x| x * F::from_f64(1.0 / norm)))
}

/// Power-iteration approximation of the KL-maximizing direction around
/// `x`, scaled to radius ε. The forward closure must bind parameters as
/// constants; only the input gradient is used.
pub fn vadv_perturbation<F: Scalar>(
    x: &Tensor<F>,
    forward: &ForwardGraph<'_, F>,
    config: &VatConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Perturbation<F>> {
    config.validate()?;
    let p_ref: Tensor<F> = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = forward(&mut tape, xv)?;
        tape.value(y).clone()
    };
    let mut d = random_unit::<F>(x.shape(), rng);
    let mut degenerate = false;
    let xi = F::from_f64(config.xi);
    for _ in 0..config.power_iterations {
        let mut tape = Tape::new();
        let perturbed_value = {
            let mut v = x.clone();
            for (dst, s) in v.data_mut().iter_mut().zip(d.data()) {
                *dst = *dst + xi * *s;
            }
            v
        };
        let xp = tape.input(perturbed_value);
        let y = forward(&mut tape, xp)?;
        let pv = tape.constant(p_ref.clone());
        let kl = binary_kl_graph(&mut tape, pv, y)?;
        let mut grads = tape.backward(kl)?;
        match grads.take(xp).and_then(|g| normalized(&g)) {
            Some(g) => d = g,
            None => {
                degenerate = true;
                break;
            }
        }
    }
    let eps = F::from_f64(config.epsilon);
    let r_vadv = d.map(|v| v * eps);
    Ok(Perturbation {
        r_vadv,
        p_ref,
        degenerate,
    })
}

/// KL between the posterior at `x` and at `x + r_vadv`, with the
/// perturbation found by [`vadv_perturbation`].
pub fn vat_loss<F: Scalar>(
    x: &Tensor<F>,
    forward: &ForwardGraph<'_, F>,
    config: &VatConfig,
    rng: &mut ChaCha8Rng,
) -> Result<F> {
    let pert = vadv_perturbation(x, forward, config, rng)?;
    let mut xp = x.clone();
    for (dst, s) in xp.data_mut().iter_mut().zip(pert.r_vadv.data()) {
        *dst = *dst + *s;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(xp);
    let y = forward(&mut tape, xv)?;
    Ok(binary_kl(pert.p_ref.data(), tape.value(y).data()))
}
