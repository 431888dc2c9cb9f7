//! Logistic latent directions and the closed-form counterfactual step: for a
//! direction (beta, c) fitted by logistic regression, the step length
//! `eta = (logit(p') - logit(p)) / ||beta||^2` moves a latent exactly onto
//! the target probability p'.

use crate::attribution::{fit_glm, AttributeSpec, Penalty};
use crate::tensor::{sigmoid_scalar, Graph, NodeId, Tensor};
use crate::{attack::LatentPipeline, Error, Result};

/// A fitted attribute direction in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDirection {
    pub attribute: String,
    pub beta: Vec<f64>,
    pub intercept: f64,
}

impl LinearDirection {
    /// `sigma(<z, beta> + c)`.
    pub fn predict(&self, z: &[f64]) -> f64 {
        let s: f64 = self.beta.iter().zip(z).map(|(b, zi)| b * zi).sum();
        sigmoid_scalar(s + self.intercept)
    }

    pub fn norm_sq(&self) -> f64 {
        self.beta.iter().map(|b| b * b).sum()
    }
}

/// Fits a direction by ridge-penalized logistic regression; this is the
/// same fit `attribution::fit_glm` produces, repackaged with its weight
/// vector exposed as the direction.
pub fn fit_direction(
    latents: &Tensor,
    labels: &[f64],
    ridge_lambda: f64,
    attribute: impl Into<String>,
) -> Result<LinearDirection> {
    let attribute = attribute.into();
    let fit = fit_glm(
        latents,
        labels,
        &AttributeSpec::binary(attribute.clone()),
        Penalty::Ridge(ridge_lambda),
    )?;
    Ok(LinearDirection {
        attribute,
        beta: fit.model.weights,
        intercept: fit.model.intercept,
    })
}

/// Inverse logistic function `ln(p / (1 - p))` on the open unit interval.
pub fn logit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::LogitDomain { value: p });
    }
    Ok(p.ln() - (-p).ln_1p())
}

/// Closed-form step length along `beta` that moves the prediction from `p`
/// to `p_target`: `(logit(p') - logit(p)) / ||beta||^2`.
pub fn eta_prime(p: f64, p_target: f64, beta: &[f64]) -> Result<f64> {
    let norm_sq: f64 = beta.iter().map(|b| b * b).sum();
    if norm_sq == 0.0 {
        return Err(Error::ZeroNormDirection);
    }
    Ok((logit(p_target)? - logit(p)?) / norm_sq)
}

/// Moves `z` along the direction so its prediction lands exactly on
/// `p_target`. Returns the edited latent and the step length used.
///
/// Predictions are clamped to `[1e-12, 1 - 1e-12]` before the logit;
/// predictions that saturate to exactly 0 or 1 are refused instead.
pub fn linear_counterfactual(
    z: &[f64],
    p_target: f64,
    dir: &LinearDirection,
) -> Result<(Vec<f64>, f64)> {
    if z.len() != dir.beta.len() {
        return Err(Error::ShapeMismatch {
            op: "linear_counterfactual",
            left: vec![z.len()],
            right: vec![dir.beta.len()],
        });
    }
    let p = dir.predict(z);
    if p == 0.0 || p == 1.0 {
        return Err(Error::SaturatedPrediction { value: p });
    }
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    let eta = eta_prime(p, p_target, &dir.beta)?;
    let z_prime: Vec<f64> = z
        .iter()
        .zip(&dir.beta)
        .map(|(zi, bi)| zi + eta * bi)
        .collect();
    Ok((z_prime, eta))
}

/// Identity-generator pipeline around a logistic model: latents are images.
/// Lets the iterative attack run on a problem whose shortest crossing is
/// known in closed form.
pub struct LinearPipeline {
    dir: LinearDirection,
}

impl LinearPipeline {
    pub fn new(dir: LinearDirection) -> Self {
        LinearPipeline { dir }
    }

    pub fn direction(&self) -> &LinearDirection {
        &self.dir
    }
}

impl LatentPipeline for LinearPipeline {
    fn latent_dim(&self) -> usize {
        self.dir.beta.len()
    }

    fn encode(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.numel() != self.dir.beta.len() {
            return Err(Error::ShapeMismatch {
                op: "linear_pipeline_encode",
                left: x.shape().to_vec(),
                right: vec![self.dir.beta.len()],
            });
        }
        Ok(x.values().to_vec())
    }

    fn decode(&self, z: &[f64]) -> Result<Tensor> {
        Ok(Tensor::row(z))
    }

    fn predict_node(&self, g: &mut Graph, z: NodeId, _class_index: usize) -> Result<NodeId> {
        let d = self.dir.beta.len();
        let beta_col = g.constant(&Tensor::new(vec![d, 1], self.dir.beta.clone())?);
        let score = g.matmul(z, beta_col)?;
        let shifted = g.affine_scalar(score, 1.0, self.dir.intercept)?;
        let prob = g.sigmoid(shifted)?;
        g.get(prob, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::AttributeModel;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN_3: f64 = 1.0986122886681098;

    fn labeled_latents(seed: u64, n: usize, d: usize) -> (Tensor, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vals = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as f64;
            vals.push(if label > 0.5 { 1.5 } else { -1.5 });
            for _ in 1..d {
                vals.push(crate::data::standard_normal(&mut rng));
            }
            labels.push(label);
        }
        (Tensor::matrix(n, d, vals).unwrap(), labels)
    }

    #[test]
    fn separable_direction_classifies_training_data() {
        let (latents, labels) = labeled_latents(1, 100, 3);
        let dir = fit_direction(&latents, &labels, 1e-3, "sep").unwrap();
        let d = 3;
        for i in 0..100 {
            let z = &latents.values()[i * d..(i + 1) * d];
            assert_eq!(dir.predict(z) > 0.5, labels[i] > 0.5);
        }
    }

    #[test]
    fn direction_reproduces_the_glm_predictions() {
        let (latents, labels) = labeled_latents(2, 80, 4);
        let dir = fit_direction(&latents, &labels, 1e-2, "delegate").unwrap();
        let fit = fit_glm(
            &latents,
            &labels,
            &AttributeSpec::binary("delegate"),
            Penalty::Ridge(1e-2),
        )
        .unwrap();
        let model: AttributeModel = fit.model;
        let d = 4;
        for i in 0..80 {
            let z = &latents.values()[i * d..(i + 1) * d];
            assert!((dir.predict(z) - model.predict_latent(z)).abs() < 1e-12);
        }
    }

    #[test]
    fn flipping_labels_negates_the_direction() {
        let (latents, labels) = labeled_latents(3, 120, 3);
        let flipped: Vec<f64> = labels.iter().map(|&y| 1.0 - y).collect();
        let dir = fit_direction(&latents, &labels, 1e-2, "orig").unwrap();
        let neg = fit_direction(&latents, &flipped, 1e-2, "flip").unwrap();
        for (a, b) in dir.beta.iter().zip(&neg.beta) {
            assert!((a + b).abs() < 1e-4, "{a} vs {b}");
        }
        assert!((dir.intercept + neg.intercept).abs() < 1e-4);
    }

    #[test]
    fn logit_known_values_and_domain() {
        assert_eq!(logit(0.5).unwrap(), 0.0);
        assert!((logit(0.75).unwrap() - LN_3).abs() < 1e-15);
        assert!(matches!(logit(0.0), Err(Error::LogitDomain { .. })));
        assert!(matches!(logit(1.0), Err(Error::LogitDomain { .. })));
        assert!(matches!(logit(-0.2), Err(Error::LogitDomain { .. })));
    }

    #[test]
    fn logit_inverts_sigmoid() {
        assert!((logit(sigmoid_scalar(2.5)).unwrap() - 2.5).abs() < 1e-12);
        // f64 keeps full precision up to moderate saturation
        for k in -80..=80 {
            let t = k as f64 * 0.1;
            let rt = logit(sigmoid_scalar(t)).unwrap();
            assert!((rt - t).abs() < 1e-12, "t={t}: {rt}");
        }
        // near saturation the surviving precision is limited by
        // min(p, 1-p); the bound below tracks that loss
        for k in [10.0, 15.0, 20.0, 25.0, 30.0, -20.0, -30.0] {
            let p = sigmoid_scalar(k);
            let rt = logit(p).unwrap();
            let tol = 1e-12 + 1e-15 / p.min(1.0 - p);
            assert!((rt - k).abs() < tol, "t={k}: {rt} (tol {tol})");
        }
    }

    #[test]
    fn eta_prime_known_values() {
        let beta = [1.0];
        assert_eq!(eta_prime(0.3, 0.3, &beta).unwrap(), 0.0);
        assert!((eta_prime(0.5, 0.75, &beta).unwrap() - LN_3).abs() < 1e-9);
        assert!(matches!(
            eta_prime(0.5, 0.75, &[0.0, 0.0]),
            Err(Error::ZeroNormDirection)
        ));
    }

    #[test]
    fn eta_prime_scales_inversely_with_norm_squared() {
        let beta = [0.3, -0.4];
        let doubled = [0.6, -0.8];
        let a = eta_prime(0.4, 0.9, &beta).unwrap();
        let b = eta_prime(0.4, 0.9, &doubled).unwrap();
        assert!((a - 4.0 * b).abs() < 1e-12);
    }

    #[test]
    fn eta_prime_is_antisymmetric_with_target_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let beta = [0.7, 0.1, -0.3];
        for _ in 0..50 {
            let p: f64 = rng.random_range(0.05..0.95);
            let q: f64 = rng.random_range(0.05..0.95);
            let fwd = eta_prime(p, q, &beta).unwrap();
            let bwd = eta_prime(q, p, &beta).unwrap();
            assert!((fwd + bwd).abs() < 1e-12);
            assert_eq!(fwd > 0.0, q > p, "sign follows target side");
        }
    }

    #[test]
    fn closed_form_edit_lands_exactly_on_target() {
        // unit-norm direction from 0.5 to 0.75 moves by ln 3
        let dir = LinearDirection {
            attribute: "unit".into(),
            beta: vec![1.0],
            intercept: 0.0,
        };
        let (z_prime, eta) = linear_counterfactual(&[0.0], 0.75, &dir).unwrap();
        assert!((eta - LN_3).abs() < 1e-12);
        assert!((dir.predict(&z_prime) - 0.75).abs() < 1e-9);

        // target equal to the current prediction leaves z untouched
        let p = dir.predict(&[0.4]);
        let (same, eta0) = linear_counterfactual(&[0.4], p, &dir).unwrap();
        assert_eq!(same, vec![0.4]);
        assert_eq!(eta0, 0.0);
    }

    #[test]
    fn closed_form_edit_is_exact_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..100 {
            let d = rng.random_range(1..24usize);
            let beta: Vec<f64> = (0..d).map(|_| rng.random_range(-0.8..0.8)).collect();
            if beta.iter().all(|b| b.abs() < 1e-3) {
                continue;
            }
            let dir = LinearDirection {
                attribute: format!("case{case}"),
                beta,
                intercept: rng.random_range(-0.5..0.5),
            };
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let p_target = rng.random_range(0.02..0.98);
            let (z_prime, eta) = linear_counterfactual(&z, p_target, &dir).unwrap();
            assert!(
                (dir.predict(&z_prime) - p_target).abs() < 1e-9,
                "case {case}: landed at {}",
                dir.predict(&z_prime)
            );
            // the edit never leaves the beta line
            for ((zp, zi), bi) in z_prime.iter().zip(&z).zip(&dir.beta) {
                let expected = eta * bi;
                let tol = 1e-12 * expected.abs().max(zi.abs()).max(1.0);
                assert!(((zp - zi) - expected).abs() <= tol);
            }
        }
    }

    #[test]
    fn edits_compose_along_the_direction() {
        let dir = LinearDirection {
            attribute: "compose".into(),
            beta: vec![0.6, -0.2, 0.9],
            intercept: 0.3,
        };
        let z = [0.2, 0.5, -0.7];
        let (via, _) = linear_counterfactual(&z, 0.3, &dir).unwrap();
        let (via_then_final, _) = linear_counterfactual(&via, 0.85, &dir).unwrap();
        let (direct, _) = linear_counterfactual(&z, 0.85, &dir).unwrap();
        for (a, b) in via_then_final.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_predictions_are_refused() {
        let dir = LinearDirection {
            attribute: "sat".into(),
            beta: vec![1.0],
            intercept: 800.0,
        };
        assert!(matches!(
            linear_counterfactual(&[0.0], 0.5, &dir),
            Err(Error::SaturatedPrediction { value }) if value == 1.0
        ));
    }
}
