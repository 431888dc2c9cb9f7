//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantity. Tolerances are pinned in the assertions.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use latentcf::attack::{
    repair_misclassification, run_attack, AttackConfig, AttackDirection, OptimizerKind,
};
use latentcf::attribution::{
    fit_glm, global_scores_latent, local_scores_latent, Aggregation, AttributeFamily,
    AttributeModel, AttributeSpec, DiameterSpec, GlobalOptions, LatentPair, Link, Normalization,
    Penalty,
};
use latentcf::data::{load_idx, synth_digits, write_idx, ImageDataset};
use latentcf::linear::{eta_prime, LinearDirection, LinearPipeline};
use latentcf::nets::{
    accuracy, classifier_train, vae_train, Activation, Classifier, Mlp, MlpSpec, TrainParams,
    Vae, VaeLossWeights,
};
use latentcf::tensor::{Graph, Tensor};

const LN_3: f64 = 1.0986122886681098;

/// Box-Muller standard normal, independent of the library's samplers.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct Fixture {
    train: ImageDataset,
    test: ImageDataset,
    classifier: Classifier,
    vae: Vae,
    classifier_seconds: f64,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

/// Desk-scale stand-in for the MNIST subsample: 10k/2k synthetic digits at
/// 28x28, a 1-epoch MLP classifier, and a VAE generator.
fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let train = synth_digits(11, 10_000, 28);
        let test = synth_digits(12, 2_000, 28);

        let spec = MlpSpec::classifier(vec![784, 128, 10], Activation::Relu).unwrap();
        let hp = TrainParams {
            epochs: 1,
            seed: 5,
            learning_rate: 1e-3,
            batch_size: 64,
        };
        let started = Instant::now();
        let (classifier, _) = classifier_train(&train, &spec, &hp).unwrap();
        let classifier_seconds = started.elapsed().as_secs_f64();

        let (vae, _) = vae_train(
            &train,
            64,
            128,
            &VaeLossWeights::default(),
            &TrainParams {
                epochs: 3,
                seed: 6,
                learning_rate: 2e-3,
                batch_size: 64,
            },
        )
        .unwrap();

        Fixture {
            train,
            test,
            classifier,
            vae,
            classifier_seconds,
        }
    })
}

fn argmax(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

#[test]
fn criterion_01_gradient_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let activations = [
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::None,
    ];

    let mut checked = 0usize;
    for net in 0..50 {
        let layers = rng.random_range(1..=3usize);
        let mut widths = vec![rng.random_range(1..=32usize)];
        for _ in 0..layers {
            widths.push(rng.random_range(1..=32usize));
        }
        let mut acts: Vec<Activation> = (0..layers - 1)
            .map(|_| activations[rng.random_range(0..activations.len())])
            .collect();
        acts.push(Activation::None);
        let spec = MlpSpec::new(widths.clone(), acts).unwrap();
        let mlp = Mlp::init(spec.clone(), &mut rng).unwrap();

        let batch = rng.random_range(1..=4usize);
        let x_vals: Vec<f64> = (0..batch * widths[0])
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let x = Tensor::matrix(batch, widths[0], x_vals).unwrap();

        let loss_of = |params: &[Tensor]| -> f64 {
            let probe = Mlp::from_parts(spec.clone(), params.to_vec()).unwrap();
            let mut g = Graph::new();
            let xn = g.constant(&x);
            let ids = probe.push_params(&mut g, false);
            let out = probe.forward(&mut g, xn, &ids).unwrap();
            let s = g.sigmoid(out).unwrap();
            let loss = g.mean(s).unwrap();
            g.item(loss).unwrap()
        };

        // reverse-mode gradients
        let mut g = Graph::new();
        let xn = g.constant(&x);
        let ids = mlp.push_params(&mut g, true);
        let out = mlp.forward(&mut g, xn, &ids).unwrap();
        let s = g.sigmoid(out).unwrap();
        let loss = g.mean(s).unwrap();
        g.backward(loss).unwrap();

        for (slot, &id) in ids.iter().enumerate() {
            let auto = g.grad(id).unwrap().to_vec();
            let mut probe_params: Vec<Tensor> = mlp.params().to_vec();
            for k in 0..auto.len() {
                let v0 = probe_params[slot].values()[k];
                let h = 1e-6;
                probe_params[slot].values_mut()[k] = v0 + h;
                let hi = loss_of(&probe_params);
                probe_params[slot].values_mut()[k] = v0 - h;
                let lo = loss_of(&probe_params);
                probe_params[slot].values_mut()[k] = v0;
                let fd = (hi - lo) / (2.0 * h);
                let tol = 1e-8f64.max(1e-5 * auto[k].abs().max(fd.abs()));
                assert!(
                    (auto[k] - fd).abs() <= tol,
                    "net {net} param {slot}[{k}]: autodiff {} vs fd {fd}",
                    auto[k]
                );
                checked += 1;
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "gradient oracle took {elapsed:.1}s");
    println!(
        "acceptance 01 gradient oracle: PASS ({checked} parameter gradients across 50 networks, {elapsed:.1}s)"
    );
}

#[test]
fn criterion_02_classifier_accuracy() {
    let f = fixture();
    let test_acc = accuracy(&f.classifier, &f.test).unwrap();
    let train_acc = accuracy(&f.classifier, &f.train).unwrap();
    assert!(
        test_acc >= 0.90,
        "test accuracy {test_acc:.4} below the 0.90 floor"
    );
    assert!(
        f.classifier_seconds < 600.0,
        "training took {:.0}s",
        f.classifier_seconds
    );
    println!(
        "acceptance 02 classifier: PASS (train {train_acc:.4}, test {test_acc:.4}, trained in {:.1}s)",
        f.classifier_seconds
    );
}

#[test]
fn criterion_03_crossing_postcondition() {
    let f = fixture();
    let mut converged = 0usize;
    let mut ascents = 0usize;
    let mut descents = 0usize;
    for i in 0..100 {
        let x = f.test.image(i);
        let probs = f.classifier.predict_one(&x).unwrap();
        let top = argmax(&probs);

        // descent: push the predicted class down to 0.25
        let down = AttackConfig {
            target: 0.25,
            class_index: top,
            max_iters: 250,
            ..AttackConfig::default()
        };
        // ascent: push some other class up to 0.75
        let up = AttackConfig {
            target: 0.75,
            class_index: (top + 1) % 10,
            max_iters: 250,
            ..AttackConfig::default()
        };
        for cfg in [down, up] {
            let trace = latentcf::attack::counterfactual_attack(
                &x,
                &f.classifier,
                &f.vae,
                &cfg,
            )
            .unwrap();
            assert!(trace.pred_path.iter().all(|p| (0.0..=1.0).contains(p)));
            if trace.converged {
                converged += 1;
                match trace.direction {
                    AttackDirection::Ascent => {
                        ascents += 1;
                        assert!(
                            trace.final_prediction() >= cfg.target,
                            "ascent trace ended below target: {} < {}",
                            trace.final_prediction(),
                            cfg.target
                        );
                    }
                    AttackDirection::Descent => {
                        descents += 1;
                        assert!(
                            trace.final_prediction() <= cfg.target,
                            "descent trace ended above target: {} > {}",
                            trace.final_prediction(),
                            cfg.target
                        );
                    }
                }
            }
        }
    }
    assert!(ascents > 0 && descents > 0, "need both directions exercised");
    println!(
        "acceptance 03 crossing postcondition: PASS (200 attacks, {converged} converged, {ascents} ascents / {descents} descents, zero violations)"
    );
}

#[test]
fn criterion_04_repair_rate() {
    let f = fixture();
    // spec-pinned attack settings: target 0.5, Adam, lr 0.01, 2000 iterations
    let cfg = AttackConfig::default();
    assert_eq!(cfg.learning_rate, 0.01);
    assert_eq!(cfg.max_iters, 2000);
    assert_eq!(cfg.optimizer, OptimizerKind::Adam);

    let mut misclassified = 0usize;
    let mut converged = 0usize;
    for i in 0..f.test.n() {
        let x = f.test.image(i);
        let probs = f.classifier.predict_one(&x).unwrap();
        if argmax(&probs) == f.test.labels[i] {
            continue;
        }
        misclassified += 1;
        let trace =
            repair_misclassification(&x, f.test.labels[i], &f.classifier, &f.vae, &cfg).unwrap();
        if trace.converged {
            converged += 1;
            assert!(
                trace.final_prediction() >= 0.5,
                "converged repair ended below 0.5"
            );
        }
    }
    assert!(misclassified > 0, "fixture should leave some errors");
    let rate = converged as f64 / misclassified as f64;
    assert!(
        rate >= 0.70,
        "repair rate {rate:.3} below 0.70 ({converged}/{misclassified})"
    );
    println!(
        "acceptance 04 repair rate: PASS ({converged}/{misclassified} = {rate:.3} within 2000 iterations)"
    );
}

#[test]
fn criterion_05_eta_prime_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for case in 0..100 {
        let d = rng.random_range(1..=24usize);
        let mut beta: Vec<f64> = (0..d).map(|_| rng.random_range(-0.8..0.8)).collect();
        if beta.iter().map(|b| b * b).sum::<f64>() < 1e-4 {
            beta[0] = 0.5;
        }
        let dir = LinearDirection {
            attribute: format!("case{case}"),
            beta,
            intercept: rng.random_range(-0.5..0.5),
        };
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let p_target = rng.random_range(0.02..0.98);

        let p = dir.predict(&z);
        let eta = eta_prime(p, p_target, &dir.beta).unwrap();
        let z_prime: Vec<f64> = z
            .iter()
            .zip(&dir.beta)
            .map(|(zi, bi)| zi + eta * bi)
            .collect();
        let landed = dir.predict(&z_prime);
        assert!(
            (landed - p_target).abs() < 1e-9,
            "case {case}: landed {landed} for target {p_target}"
        );
    }

    let p: f64 = 0.37;
    assert_eq!(eta_prime(p, p, &[0.4, 0.3]).unwrap(), 0.0);
    let ln3 = eta_prime(0.5, 0.75, &[1.0]).unwrap();
    assert!((ln3 - LN_3).abs() < 1e-9);
    println!(
        "acceptance 05 closed-form step: PASS (100 random cases < 1e-9, eta(p,p)=0, eta(0.5,0.75)=ln 3)"
    );
}

#[test]
fn criterion_06_linear_pipeline_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for case in 0..20 {
        let d = rng.random_range(2..=16usize);
        let mut beta: Vec<f64> = (0..d).map(|_| rng.random_range(-0.8..0.8)).collect();
        if beta.iter().map(|b| b * b).sum::<f64>() < 1e-4 {
            beta[0] = 0.5;
        }
        let dir = LinearDirection {
            attribute: format!("case{case}"),
            beta: beta.clone(),
            intercept: rng.random_range(-0.4..0.4),
        };
        let z0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pipe = LinearPipeline::new(dir.clone());
        let p0 = dir.predict(&z0);
        let target = if p0 < 0.5 { 0.75 } else { 0.25 };

        let lr = 0.05;
        let cfg = AttackConfig {
            target,
            class_index: 0,
            learning_rate: lr,
            optimizer: OptimizerKind::Sgd,
            max_iters: 200_000,
            snapshot_stride: 10_000,
            direction: None,
        };
        let trace = run_attack(&pipe, &Tensor::row(&z0), &cfg).unwrap();
        assert!(trace.converged, "case {case} must converge");

        let norm = dir.norm_sq().sqrt();
        let zf = trace.final_latent();
        let displacement: f64 = zf
            .iter()
            .zip(&z0)
            .zip(&dir.beta)
            .map(|((a, b), w)| (a - b) * w)
            .sum::<f64>()
            / norm;
        let eta = eta_prime(p0, target, &dir.beta).unwrap();
        let closed_form = eta * norm;
        // one SGD step moves at most lr * max|sigma'| * |beta|
        let step_bound = lr * 0.25 * norm + 1e-9;
        assert!(
            (displacement - closed_form).abs() <= step_bound,
            "case {case}: displacement {displacement} vs closed form {closed_form} (bound {step_bound})"
        );
        assert!(
            displacement.abs() + 1e-9 >= closed_form.abs(),
            "case {case}: the iterative walk stopped short of the closed-form crossing"
        );
    }
    println!(
        "acceptance 06 linear pipeline: PASS (20 instances agree with the closed form within one step)"
    );
}

#[test]
fn criterion_07_attribution_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let models: Vec<AttributeModel> = (0..3)
        .map(|k| AttributeModel {
            spec: AttributeSpec::binary(format!("b{k}")),
            weights: (0..4).map(|_| rng.random_range(-1.5..1.5)).collect(),
            intercept: rng.random_range(-0.5..0.5),
            link: Link::Logistic,
            penalty: Penalty::None,
            resolved_diameter: Some(1.0),
        })
        .collect();

    for _ in 0..100 {
        let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let zp: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let same = local_scores_latent(&z, &z, &models).unwrap();
        assert!(same.iter().all(|&v| v == 0.0), "phi(x,x) must be exactly 0");
        let fwd = local_scores_latent(&z, &zp, &models).unwrap();
        let bwd = local_scores_latent(&zp, &z, &models).unwrap();
        for (f, b) in fwd.iter().zip(&bwd) {
            assert_eq!(*f, -*b, "phi must be exactly antisymmetric");
            assert!(f.abs() <= 1.0, "binary scores live in [-1, 1]");
        }
    }
    println!(
        "acceptance 07 attribution identities: PASS (100 pairs: phi(x,x)=0, antisymmetry, binary bound)"
    );
}

#[test]
fn criterion_08_aggregation_oracle() {
    // five hand-constructed pairs, one with f(x) exactly 0.5
    let models = [
        AttributeModel {
            spec: AttributeSpec::numeric("a", DiameterSpec::Known(2.0)),
            weights: vec![1.0],
            intercept: 0.0,
            link: Link::Identity,
            penalty: Penalty::None,
            resolved_diameter: Some(2.0),
        },
        AttributeModel {
            spec: AttributeSpec::numeric("b", DiameterSpec::Known(1.0)),
            weights: vec![-0.5],
            intercept: 0.25,
            link: Link::Identity,
            penalty: Penalty::None,
            resolved_diameter: Some(1.0),
        },
    ];
    let zs = [0.3, -0.7, 1.1, 0.0, 0.5];
    let zps = [0.9, -0.2, 0.4, 0.8, -0.5];
    let preds = [0.2, 0.9, 0.45, 0.5, 0.61];
    let pairs: Vec<LatentPair> = (0..5)
        .map(|i| LatentPair {
            z: vec![zs[i]],
            z_prime: vec![zps[i]],
            original_prediction: preds[i],
        })
        .collect();

    // brute-force evaluation straight from the definitions
    let predict = |m: &AttributeModel, z: f64| m.weights[0] * z + m.intercept;
    let mut phi = [[0.0f64; 2]; 5];
    for i in 0..5 {
        for (a, m) in models.iter().enumerate() {
            phi[i][a] =
                (predict(m, zps[i]) - predict(m, zs[i])) / m.resolved_diameter.unwrap();
        }
    }
    let mut brute_abs = [0.0f64; 2];
    let mut brute_signed = [0.0f64; 2];
    for i in 0..5 {
        let s = if preds[i] < 0.5 { 1.0 } else { -1.0 };
        for a in 0..2 {
            brute_abs[a] += phi[i][a].abs();
            brute_signed[a] += phi[i][a] * s;
        }
    }

    let absolute = global_scores_latent(
        &pairs,
        &models,
        &GlobalOptions {
            aggregation: Aggregation::Absolute,
            normalization: Normalization::Sum,
            per_image_renormalize: false,
        },
    )
    .unwrap();
    let signed = global_scores_latent(
        &pairs,
        &models,
        &GlobalOptions {
            aggregation: Aggregation::Signed,
            normalization: Normalization::Sum,
            per_image_renormalize: false,
        },
    )
    .unwrap();
    for a in 0..2 {
        assert!((absolute.psi[a] - brute_abs[a]).abs() < 1e-12);
        assert!((signed.psi[a] - brute_signed[a]).abs() < 1e-12);
    }
    assert_eq!(signed.signs[3], -1.0, "f(x)=0.5 must take the -1 branch");

    let mean = global_scores_latent(
        &pairs,
        &models,
        &GlobalOptions {
            aggregation: Aggregation::Signed,
            normalization: Normalization::Mean,
            per_image_renormalize: false,
        },
    )
    .unwrap();
    for a in 0..2 {
        assert!((mean.psi[a] - brute_signed[a] / 5.0).abs() < 1e-12);
    }
    println!("acceptance 08 aggregation oracle: PASS (absolute and signed sums match brute force to 1e-12)");
}

#[test]
fn criterion_09_glm_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (n, d) = (1000, 16);
    let latents: Vec<f64> = (0..n * d)
        .map(|_| gaussian(&mut rng))
        .collect();
    let latents = Tensor::matrix(n, d, latents).unwrap();
    let w_star: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let z = &latents.values()[i * d..(i + 1) * d];
            z.iter().zip(&w_star).map(|(a, b)| a * b).sum::<f64>()
                + 0.01 * gaussian(&mut rng)
        })
        .collect();
    let fit = fit_glm(
        &latents,
        &y,
        &AttributeSpec {
            name: "planted".into(),
            family: AttributeFamily::Numeric,
            diameter: DiameterSpec::FromBackground,
        },
        Penalty::Ridge(1e-9),
    )
    .unwrap();
    let err: f64 = fit
        .model
        .weights
        .iter()
        .zip(&w_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = w_star.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = err / norm;
    assert!(rel < 0.05, "relative recovery error {rel:.4}");
    println!("acceptance 09 GLM recovery: PASS (relative error {rel:.5} on n=1000, d=16, sigma=0.01)");
}

#[test]
fn criterion_10_format_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_digits(41, 120, 10);

    // IDX reload is bitwise
    let (i1, l1) = (dir.path().join("a-i.idx"), dir.path().join("a-l.idx"));
    let (i2, l2) = (dir.path().join("b-i.idx"), dir.path().join("b-l.idx"));
    write_idx(&data, &i1, &l1).unwrap();
    let loaded = load_idx(&i1, &l1).unwrap();
    write_idx(&loaded, &i2, &l2).unwrap();
    assert_eq!(fs::read(&i1).unwrap(), fs::read(&i2).unwrap());
    assert_eq!(fs::read(&l1).unwrap(), fs::read(&l2).unwrap());

    // checkpoints are bitwise across save -> load -> save
    let spec = MlpSpec::classifier(vec![100, 16, 10], Activation::Relu).unwrap();
    let (clf, _) = classifier_train(&data, &spec, &TrainParams::default()).unwrap();
    let (vae, _) = vae_train(
        &data,
        6,
        24,
        &VaeLossWeights::default(),
        &TrainParams::default(),
    )
    .unwrap();
    let c1 = dir.path().join("clf1.ckpt");
    let c2 = dir.path().join("clf2.ckpt");
    latentcf_cli::checkpoint::save_classifier(&c1, &clf).unwrap();
    let clf_loaded = latentcf_cli::checkpoint::load_classifier(&c1).unwrap();
    latentcf_cli::checkpoint::save_classifier(&c2, &clf_loaded).unwrap();
    assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());

    let v1 = dir.path().join("vae1.ckpt");
    let v2 = dir.path().join("vae2.ckpt");
    latentcf_cli::checkpoint::save_vae(&v1, &vae).unwrap();
    let vae_loaded = latentcf_cli::checkpoint::load_vae(&v1).unwrap();
    latentcf_cli::checkpoint::save_vae(&v2, &vae_loaded).unwrap();
    assert_eq!(fs::read(&v1).unwrap(), fs::read(&v2).unwrap());

    // PGM golden bytes for a fixed 3-image grid
    let a = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
    let b = Tensor::filled(vec![2, 2], 1.0);
    let c = Tensor::filled(vec![2, 2], 0.0);
    let bytes = latentcf_cli::pgm::grid_bytes(&[a, b, c], 2).unwrap();
    let mut golden: Vec<u8> = b"P5\n5 5\n255\n".to_vec();
    golden.extend_from_slice(&[
        0, 255, 128, 255, 255, 128, 64, 128, 255, 255, 128, 128, 128, 128, 128, 0, 0, 128, 0, 0,
        0, 0, 128, 0, 0,
    ]);
    assert_eq!(bytes, golden);

    println!("acceptance 10 format round-trips: PASS (IDX bitwise, checkpoints bitwise, PGM golden)");
}

fn run_pipeline(bin: &str, data_dir: &Path, out_dir: &Path) -> Vec<(String, Vec<u8>)> {
    fs::create_dir_all(out_dir).unwrap();
    let images = data_dir.join("train-images.idx");
    let labels = data_dir.join("train-labels.idx");
    let vae = out_dir.join("vae.ckpt");
    let clf = out_dir.join("classifier.ckpt");
    let attrs = out_dir.join("attrs.ckpt");
    let repair_dir = out_dir.join("repair");
    let scores = out_dir.join("global.csv");

    let steps: Vec<Vec<String>> = vec![
        vec![
            "train-vae".into(),
            "--images".into(), images.display().to_string(),
            "--labels".into(), labels.display().to_string(),
            "--out".into(), vae.display().to_string(),
            "--latent-dim".into(), "12".into(),
            "--hidden".into(), "96".into(),
            "--epochs".into(), "4".into(),
            "--learning-rate".into(), "0.002".into(),
            "--batch-size".into(), "32".into(),
            "--seed".into(), "7".into(),
        ],
        vec![
            "train-classifier".into(),
            "--images".into(), images.display().to_string(),
            "--labels".into(), labels.display().to_string(),
            "--out".into(), clf.display().to_string(),
            "--epochs".into(), "1".into(),
            "--learning-rate".into(), "0.003".into(),
            "--batch-size".into(), "16".into(),
            "--hidden".into(), "48".into(),
            "--seed".into(), "8".into(),
        ],
        vec![
            "fit-attributes".into(),
            "--images".into(), images.display().to_string(),
            "--labels".into(), labels.display().to_string(),
            "--vae".into(), vae.display().to_string(),
            "--out".into(), attrs.display().to_string(),
            "--table-out".into(), out_dir.join("table.csv").display().to_string(),
        ],
        vec![
            "repair".into(),
            "--classifier".into(), clf.display().to_string(),
            "--vae".into(), vae.display().to_string(),
            "--images".into(), images.display().to_string(),
            "--labels".into(), labels.display().to_string(),
            "--out-dir".into(), repair_dir.display().to_string(),
            "--limit".into(), "6".into(),
            "--max-iters".into(), "2000".into(),
            "--frames".into(), "4".into(),
        ],
        vec![
            "global-scores".into(),
            "--vae".into(), vae.display().to_string(),
            "--attrs".into(), attrs.display().to_string(),
            "--originals-images".into(), repair_dir.join("originals-images.idx").display().to_string(),
            "--originals-labels".into(), repair_dir.join("originals-labels.idx").display().to_string(),
            "--counterfactuals-images".into(), repair_dir.join("counterfactuals-images.idx").display().to_string(),
            "--counterfactuals-labels".into(), repair_dir.join("counterfactuals-labels.idx").display().to_string(),
            "--preds".into(), repair_dir.join("preds.csv").display().to_string(),
            "--mode".into(), "signed".into(),
            "--k".into(), "5".into(),
            "--out".into(), scores.display().to_string(),
        ],
    ];
    for step in steps {
        let out = Command::new(bin).args(&step).output().unwrap();
        assert!(
            out.status.success(),
            "step {:?} failed: {}",
            step[0],
            String::from_utf8_lossy(&out.stderr)
        );
    }

    // collect every produced file, sorted by relative path
    let mut files = Vec::new();
    collect_files(out_dir, out_dir, &mut files);
    files.sort();
    files
        .into_iter()
        .map(|rel| {
            let bytes = fs::read(out_dir.join(&rel)).unwrap();
            (rel, bytes)
        })
        .collect()
}

fn collect_files(root: &Path, dir: &Path, files: &mut Vec<String>) {
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, files);
        } else {
            files.push(path.strip_prefix(root).unwrap().display().to_string());
        }
    }
}

#[test]
fn criterion_11_pipeline_determinism() {
    let bin = env!("CARGO_BIN_EXE_latentcf");
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    fs::create_dir_all(&data_dir).unwrap();
    let gen = Command::new(bin)
        .args([
            "gen-data",
            "--n", "1200",
            "--seed", "21",
            "--side", "16",
            "--out-images", data_dir.join("train-images.idx").to_str().unwrap(),
            "--out-labels", data_dir.join("train-labels.idx").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(gen.status.success());

    let first = run_pipeline(bin, &data_dir, &dir.path().join("run1"));
    let second = run_pipeline(bin, &data_dir, &dir.path().join("run2"));

    let names1: Vec<&String> = first.iter().map(|(n, _)| n).collect();
    let names2: Vec<&String> = second.iter().map(|(n, _)| n).collect();
    assert_eq!(names1, names2, "the two runs produced different file sets");
    let mut compared = 0usize;
    for ((name, bytes1), (_, bytes2)) in first.iter().zip(&second) {
        assert_eq!(bytes1, bytes2, "file {name} differs between runs");
        compared += 1;
    }
    assert!(compared >= 8, "pipeline should emit a full set of artifacts");
    println!(
        "acceptance 11 determinism: PASS ({compared} files byte-identical across two pipeline runs)"
    );
}
