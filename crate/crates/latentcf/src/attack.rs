//! Latent-space counterfactual attacks: gradient ascent or descent on the
//! latent code until the selected class probability crosses a target, with
//! the full trajectory captured. Models are never mutated; each attack owns
//! its optimizer state and computation graphs.

use crate::nets::{AdamState, Classifier, Vae};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Direction chosen for an attack relative to the starting prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepDirection {
    Ascent,
    Descent,
    /// The starting prediction already equals the target.
    AlreadySatisfied,
}

/// Direction actually recorded on a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackDirection {
    Ascent,
    Descent,
}

impl AttackDirection {
    pub fn name(&self) -> &'static str {
        match self {
            AttackDirection::Ascent => "ascent",
            AttackDirection::Descent => "descent",
        }
    }

    fn crossed(&self, pred: f64, target: f64) -> bool {
        match self {
            AttackDirection::Ascent => pred >= target,
            AttackDirection::Descent => pred <= target,
        }
    }
}

/// Ascent iff the target is above the starting prediction, descent iff
/// below, and neither when they already coincide.
pub fn attack_direction(p0: f64, target: f64) -> StepDirection {
    if target > p0 {
        StepDirection::Ascent
    } else if target < p0 {
        StepDirection::Descent
    } else {
        StepDirection::AlreadySatisfied
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument {
                op: "optimizer",
                msg: format!("unknown optimizer '{other}'"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttackConfig {
    /// Target probability in (0, 1).
    pub target: f64,
    /// Coordinate of the classifier output to attack.
    pub class_index: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub max_iters: usize,
    /// Record every k-th latent; endpoints are always kept.
    pub snapshot_stride: usize,
    /// Forced direction; derived from the starting prediction when absent.
    pub direction: Option<AttackDirection>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            target: 0.75,
            class_index: 0,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            max_iters: 2000,
            snapshot_stride: 10,
            direction: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target > 0.0 && self.target < 1.0) {
            return Err(Error::InvalidArgument {
                op: "attack_config",
                msg: format!("target must lie in (0, 1), got {}", self.target),
            });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument {
                op: "attack_config",
                msg: format!("learning rate must be positive, got {}", self.learning_rate),
            });
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidArgument {
                op: "attack_config",
                msg: "max_iters must be at least 1".into(),
            });
        }
        if self.snapshot_stride < 1 {
            return Err(Error::InvalidArgument {
                op: "attack_config",
                msg: "snapshot_stride must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// The latent path, prediction path, and endpoint of one attack.
#[derive(Debug, Clone)]
pub struct CounterfactualTrace {
    /// Recorded latents: every `snapshot_stride`-th plus first and last.
    pub z_path: Vec<Vec<f64>>,
    /// Iteration index of each recorded latent.
    pub snapshot_iters: Vec<usize>,
    /// Selected-class prediction at every iteration, starting at z0.
    pub pred_path: Vec<f64>,
    pub converged: bool,
    pub direction: AttackDirection,
    /// Generator output at the final latent.
    pub counterfactual_image: Tensor,
}

impl CounterfactualTrace {
    pub fn final_prediction(&self) -> f64 {
        *self
            .pred_path
            .last()
            .expect("trace holds at least one prediction")
    }

    pub fn final_latent(&self) -> &[f64] {
        self.z_path.last().expect("trace holds at least one latent")
    }

    pub fn iterations(&self) -> usize {
        self.pred_path.len() - 1
    }
}

/// The differentiable composite an attack walks through: encode once, then
/// decode-and-predict with gradients flowing back to the latent only.
pub trait LatentPipeline {
    fn latent_dim(&self) -> usize;

    /// Latent code of an input image; evaluated once per attack and never
    /// differentiated.
    fn encode(&self, x: &Tensor) -> Result<Vec<f64>>;

    /// Image for a latent code, used for snapshots and the endpoint.
    fn decode(&self, z: &[f64]) -> Result<Tensor>;

    /// Builds the scalar prediction node for the selected class on `g`,
    /// starting from a tracked latent leaf.
    fn predict_node(&self, g: &mut Graph, z: NodeId, class_index: usize) -> Result<NodeId>;

    /// Convenience: prediction value at a latent point.
    fn predict(&self, z: &[f64], class_index: usize) -> Result<f64> {
        let mut g = Graph::new();
        let zn = g.leaf(&Tensor::row(z));
        let p = self.predict_node(&mut g, zn, class_index)?;
        g.item(p)
    }
}

/// The production pipeline: VAE encoder/decoder around an MLP classifier.
pub struct VaePipeline<'a> {
    pub classifier: &'a Classifier,
    pub vae: &'a Vae,
}

impl LatentPipeline for VaePipeline<'_> {
    fn latent_dim(&self) -> usize {
        self.vae.latent_dim
    }

    fn encode(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.vae.encode_one(x)
    }

    fn decode(&self, z: &[f64]) -> Result<Tensor> {
        self.vae.decode_image(z)
    }

    fn predict_node(&self, g: &mut Graph, z: NodeId, class_index: usize) -> Result<NodeId> {
        if class_index >= self.classifier.classes() {
            return Err(Error::InvalidArgument {
                op: "attack",
                msg: format!(
                    "class index {class_index} out of range for {} classes",
                    self.classifier.classes()
                ),
            });
        }
        let image = self.vae.decode_node(g, z)?;
        let probs = self.classifier.probs_node(g, image)?;
        g.get(probs, class_index)
    }
}

/// Runs the iterative attack over any latent pipeline.
///
/// Starting from `z = encode(x)`, repeats `z <- z ± lr * grad` (sign per
/// direction; Adam optionally replaces the raw step) until the prediction
/// crosses the target or `max_iters` is reached. Non-convergence is reported
/// on the trace, not as an error.
pub fn run_attack(
    pipeline: &impl LatentPipeline,
    x: &Tensor,
    cfg: &AttackConfig,
) -> Result<CounterfactualTrace> {
    cfg.validate()?;
    let mut z = pipeline.encode(x)?;
    let d = z.len();
    let mut adam = match cfg.optimizer {
        OptimizerKind::Adam => Some(AdamState::new(&[d], cfg.learning_rate)),
        OptimizerKind::Sgd => None,
    };

    let mut pred_path = Vec::new();
    let mut z_path: Vec<Vec<f64>> = Vec::new();
    let mut snapshot_iters: Vec<usize> = Vec::new();
    let mut direction = cfg.direction;
    let converged;

    let mut t = 0usize;
    loop {
        let mut g = Graph::new();
        let zn = g.leaf(&Tensor::row(&z).tracked());
        let pred_node = pipeline.predict_node(&mut g, zn, cfg.class_index)?;
        let pred = g.item(pred_node)?;
        pred_path.push(pred);

        let dir = *direction.get_or_insert_with(|| match attack_direction(pred, cfg.target) {
            StepDirection::Ascent | StepDirection::AlreadySatisfied => AttackDirection::Ascent,
            StepDirection::Descent => AttackDirection::Descent,
        });

        if t.is_multiple_of(cfg.snapshot_stride) {
            z_path.push(z.clone());
            snapshot_iters.push(t);
        }

        if dir.crossed(pred, cfg.target) {
            converged = true;
            break;
        }
        if t == cfg.max_iters {
            converged = false;
            break;
        }

        g.backward(pred_node)?;
        let grad = g.grad(zn)?;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { iteration: t });
        }

        match (&mut adam, dir) {
            (None, AttackDirection::Ascent) => {
                for (zi, gi) in z.iter_mut().zip(grad) {
                    *zi += cfg.learning_rate * gi;
                }
            }
            (None, AttackDirection::Descent) => {
                for (zi, gi) in z.iter_mut().zip(grad) {
                    *zi -= cfg.learning_rate * gi;
                }
            }
            (Some(state), dir) => {
                // Adam minimizes, so feed it the negated gradient for ascent.
                let sign = match dir {
                    AttackDirection::Ascent => -1.0,
                    AttackDirection::Descent => 1.0,
                };
                let mut param = Tensor::row(&z);
                param.grad = Some(grad.iter().map(|&v| sign * v).collect());
                let mut params = [param];
                state.step(&mut params)?;
                z.copy_from_slice(params[0].values());
            }
        }
        t += 1;
    }

    if *snapshot_iters.last().expect("at least one snapshot") != t {
        z_path.push(z.clone());
        snapshot_iters.push(t);
    }
    let counterfactual_image = pipeline.decode(&z)?;

    Ok(CounterfactualTrace {
        z_path,
        snapshot_iters,
        pred_path,
        converged,
        direction: direction.expect("direction fixed on first iteration"),
        counterfactual_image,
    })
}

/// The full attack against a classifier through a VAE.
pub fn counterfactual_attack(
    x: &Tensor,
    classifier: &Classifier,
    vae: &Vae,
    cfg: &AttackConfig,
) -> Result<CounterfactualTrace> {
    run_attack(&VaePipeline { classifier, vae }, x, cfg)
}

/// Repairs a misclassified input: ascends the true class's probability to
/// 0.5. Errors if the input is already classified correctly.
pub fn repair_misclassification(
    x: &Tensor,
    true_label: usize,
    classifier: &Classifier,
    vae: &Vae,
    cfg: &AttackConfig,
) -> Result<CounterfactualTrace> {
    let probs = classifier.predict_one(x)?;
    let argmax = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    if argmax == true_label {
        return Err(Error::AlreadyCorrect { label: true_label });
    }
    let repair_cfg = AttackConfig {
        target: 0.5,
        class_index: true_label,
        direction: Some(AttackDirection::Ascent),
        ..*cfg
    };
    counterfactual_attack(x, classifier, vae, &repair_cfg)
}

/// Decodes `n_frames` latents evenly spaced along the recorded path,
/// always including the first and last snapshots. Asking for more frames
/// than snapshots yields every snapshot.
pub fn render_trajectory(
    trace: &CounterfactualTrace,
    pipeline: &impl LatentPipeline,
    n_frames: usize,
) -> Result<Vec<Tensor>> {
    if n_frames < 2 {
        return Err(Error::InvalidArgument {
            op: "render_trajectory",
            msg: format!("need at least 2 frames, got {n_frames}"),
        });
    }
    if trace.z_path.is_empty() {
        return Err(Error::EmptyInput {
            op: "render_trajectory",
        });
    }
    let stored = trace.z_path.len();
    let count = n_frames.min(stored);
    let mut frames = Vec::with_capacity(count);
    for k in 0..count {
        let idx = if count == 1 {
            0
        } else {
            ((k as f64) * (stored - 1) as f64 / (count - 1) as f64).round() as usize
        };
        frames.push(pipeline.decode(&trace.z_path[idx])?);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_digits;
    use crate::linear::{LinearDirection, LinearPipeline};
    use crate::nets::{
        classifier_train, vae_train, Activation, MlpSpec, TrainParams, VaeLossWeights,
    };

    fn logistic_pipeline(beta: Vec<f64>, intercept: f64) -> LinearPipeline {
        LinearPipeline::new(LinearDirection {
            attribute: "test".into(),
            beta,
            intercept,
        })
    }

    #[test]
    fn direction_follows_target_side() {
        assert_eq!(attack_direction(0.1, 0.75), StepDirection::Ascent);
        assert_eq!(attack_direction(0.9, 0.25), StepDirection::Descent);
        assert_eq!(attack_direction(0.5, 0.5), StepDirection::AlreadySatisfied);
    }

    #[test]
    fn already_satisfied_converges_at_iteration_zero() {
        // prediction at z=0 is sigmoid(logit(0.8)) = 0.8 >= target 0.75
        let pipe = logistic_pipeline(vec![1.0, 0.0], (0.8f64 / 0.2).ln());
        let cfg = AttackConfig {
            target: 0.75,
            direction: Some(AttackDirection::Ascent),
            optimizer: OptimizerKind::Sgd,
            ..AttackConfig::default()
        };
        let x = Tensor::row(&[0.0, 0.0]);
        let trace = run_attack(&pipe, &x, &cfg).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.pred_path.len(), 1);
        assert_eq!(trace.z_path.len(), 1);
        assert_eq!(trace.iterations(), 0);
        // endpoint image is the identity pipeline's reconstruction of z0
        assert_eq!(trace.counterfactual_image.values(), &[0.0, 0.0]);
    }

    #[test]
    fn forced_non_convergence_reports_two_predictions() {
        let pipe = logistic_pipeline(vec![0.5], 0.0);
        let cfg = AttackConfig {
            target: 0.999,
            learning_rate: 1e-9,
            max_iters: 1,
            optimizer: OptimizerKind::Sgd,
            ..AttackConfig::default()
        };
        let trace = run_attack(&pipe, &Tensor::row(&[0.0]), &cfg).unwrap();
        assert!(!trace.converged);
        assert_eq!(trace.pred_path.len(), 2);
    }

    #[test]
    fn non_finite_gradient_names_the_iteration() {
        let pipe = logistic_pipeline(vec![f64::NAN], 0.0);
        let cfg = AttackConfig {
            optimizer: OptimizerKind::Sgd,
            ..AttackConfig::default()
        };
        let err = run_attack(&pipe, &Tensor::row(&[0.1]), &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { iteration: 0 }));
    }

    #[test]
    fn sgd_attack_crosses_and_stays_parallel_to_beta() {
        let beta = vec![0.6, -0.8];
        let pipe = logistic_pipeline(beta.clone(), 0.2);
        let cfg = AttackConfig {
            target: 0.75,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            snapshot_stride: 1,
            ..AttackConfig::default()
        };
        let z0 = vec![0.3, 0.4];
        let trace = run_attack(&pipe, &Tensor::row(&z0), &cfg).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.direction, AttackDirection::Ascent);
        assert!(trace.final_prediction() >= 0.75);
        // logistic gradient is sigma' * beta, so the walk never leaves the
        // beta line
        let zf = trace.final_latent();
        let disp = [zf[0] - z0[0], zf[1] - z0[1]];
        let cross = disp[0] * beta[1] - disp[1] * beta[0];
        assert!(
            cross.abs() < 1e-12,
            "displacement off the beta line: {cross}"
        );
    }

    #[test]
    fn descent_reaches_low_target() {
        let pipe = logistic_pipeline(vec![1.2, 0.4], 1.0);
        let cfg = AttackConfig {
            target: 0.25,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Adam,
            ..AttackConfig::default()
        };
        let trace = run_attack(&pipe, &Tensor::row(&[0.5, 0.5]), &cfg).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.direction, AttackDirection::Descent);
        assert!(trace.final_prediction() <= 0.25);
    }

    #[test]
    fn attack_is_deterministic() {
        let pipe = logistic_pipeline(vec![0.7, -0.2, 0.5], -0.3);
        let cfg = AttackConfig {
            target: 0.9,
            learning_rate: 0.02,
            ..AttackConfig::default()
        };
        let x = Tensor::row(&[0.1, 0.2, -0.1]);
        let a = run_attack(&pipe, &x, &cfg).unwrap();
        let b = run_attack(&pipe, &x, &cfg).unwrap();
        assert_eq!(a.pred_path, b.pred_path);
        assert_eq!(a.z_path, b.z_path);
        assert_eq!(a.converged, b.converged);
    }

    #[test]
    fn predictions_stay_in_unit_interval_and_snapshots_contain_endpoints() {
        let pipe = logistic_pipeline(vec![0.9, 0.3], -1.0);
        let cfg = AttackConfig {
            target: 0.8,
            learning_rate: 0.1,
            optimizer: OptimizerKind::Sgd,
            snapshot_stride: 7,
            ..AttackConfig::default()
        };
        let trace = run_attack(&pipe, &Tensor::row(&[0.0, 0.0]), &cfg).unwrap();
        assert!(trace.pred_path.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(trace.snapshot_iters[0], 0);
        assert_eq!(
            *trace.snapshot_iters.last().unwrap(),
            trace.iterations(),
            "last snapshot is the final iterate"
        );
    }

    fn trained_models() -> (crate::data::ImageDataset, Classifier, Vae) {
        let train = synth_digits(100, 1500, 12);
        let spec = MlpSpec::classifier(vec![144, 48, 10], Activation::Relu).unwrap();
        let hp = TrainParams {
            epochs: 1,
            seed: 5,
            learning_rate: 3e-3,
            batch_size: 16,
        };
        let (clf, _) = classifier_train(&train, &spec, &hp).unwrap();
        let (vae, _) = vae_train(
            &train,
            10,
            96,
            &VaeLossWeights {
                kl_weight: 1.0,
                l1_weight: 0.0,
                sobel_weight: 0.0,
            },
            &TrainParams {
                epochs: 4,
                seed: 6,
                learning_rate: 2e-3,
                batch_size: 32,
            },
        )
        .unwrap();
        (train, clf, vae)
    }

    #[test]
    fn repair_rejects_correct_classifications_and_fixes_wrong_ones() {
        let (train, clf, vae) = trained_models();
        let cfg = AttackConfig {
            max_iters: 800,
            ..AttackConfig::default()
        };

        let mut repaired = 0;
        let mut rejected = 0;
        for i in 0..train.n() {
            let x = train.image(i);
            let probs = clf.predict_one(&x).unwrap();
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let outcome = repair_misclassification(&x, train.labels[i], &clf, &vae, &cfg);
            if argmax == train.labels[i] {
                assert!(matches!(outcome, Err(Error::AlreadyCorrect { .. })));
                rejected += 1;
            } else {
                let trace = outcome.unwrap();
                assert_eq!(trace.direction, AttackDirection::Ascent);
                if trace.converged {
                    // crossing exactness plus argmax agreement
                    assert!(trace.final_prediction() >= 0.5);
                    let final_probs = clf.predict_one(&trace.counterfactual_image).unwrap();
                    let final_argmax = final_probs
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    assert_eq!(final_argmax, train.labels[i]);
                    repaired += 1;
                }
            }
            if repaired >= 3 && rejected >= 3 {
                break;
            }
        }
        assert!(rejected >= 3, "expected some correct classifications");
        assert!(repaired >= 1, "expected at least one converged repair");
    }

    #[test]
    fn vae_attack_leaves_models_and_input_unchanged() {
        let (train, clf, vae) = trained_models();
        let x = train.image(0);
        let clf_before = clf.clone();
        let vae_before = vae.clone();
        let x_before = x.clone();
        let cfg = AttackConfig {
            target: 0.25,
            class_index: train.labels[0],
            max_iters: 50,
            ..AttackConfig::default()
        };
        let _ = counterfactual_attack(&x, &clf, &vae, &cfg).unwrap();
        assert_eq!(clf, clf_before);
        assert_eq!(vae, vae_before);
        assert_eq!(x, x_before);
    }

    #[test]
    fn trajectory_frames_interpolate_between_endpoints() {
        let pipe = logistic_pipeline(vec![1.0], -2.0);
        let cfg = AttackConfig {
            target: 0.8,
            learning_rate: 0.5,
            optimizer: OptimizerKind::Sgd,
            snapshot_stride: 1,
            ..AttackConfig::default()
        };
        let trace = run_attack(&pipe, &Tensor::row(&[0.0]), &cfg).unwrap();
        assert!(trace.z_path.len() > 3);

        let two = render_trajectory(&trace, &pipe, 2).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[0].values(), trace.z_path[0].as_slice());
        assert_eq!(two[1].values(), trace.z_path.last().unwrap().as_slice());

        let many = render_trajectory(&trace, &pipe, 10_000).unwrap();
        assert_eq!(many.len(), trace.z_path.len());

        assert!(render_trajectory(&trace, &pipe, 1).is_err());

        // first frame is identical to re-encoding and decoding the input
        let x = Tensor::row(&[0.0]);
        let z0 = pipe.encode(&x).unwrap();
        let recon = pipe.decode(&z0).unwrap();
        assert_eq!(two[0].values(), recon.values());
    }
}
