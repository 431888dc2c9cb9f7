//! GLM attribute models in latent space and counterfactual importance
//! scores: local scores compare attribute predictions between an image and
//! its counterfactual, normalized by the attribute's diameter; global scores
//! aggregate local scores over many counterfactuals, either absolutely or
//! signed by the direction of each counterfactual.

use crate::data::{AttributeTable, ImageDataset};
use crate::nets::Vae;
use crate::tensor::{sigmoid_scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeFamily {
    Binary,
    Numeric,
    Count,
}

impl AttributeFamily {
    pub fn name(&self) -> &'static str {
        match self {
            AttributeFamily::Binary => "binary",
            AttributeFamily::Numeric => "numeric",
            AttributeFamily::Count => "count",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(AttributeFamily::Binary),
            "numeric" => Ok(AttributeFamily::Numeric),
            "count" => Ok(AttributeFamily::Count),
            other => Err(Error::InvalidArgument {
                op: "attribute_family",
                msg: format!("unknown family '{other}'"),
            }),
        }
    }

    /// The matching link function: logistic for binary, identity for
    /// numeric, log for count.
    pub fn link(&self) -> Link {
        match self {
            AttributeFamily::Binary => Link::Logistic,
            AttributeFamily::Numeric => Link::Identity,
            AttributeFamily::Count => Link::Log,
        }
    }
}

/// How the attribute's value range is resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiameterSpec {
    /// The diameter itself is known.
    Known(f64),
    /// Known limits; the diameter is their difference.
    Limits { lo: f64, hi: f64 },
    /// Max minus min of predictions over a background dataset.
    FromBackground,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSpec {
    pub name: String,
    pub family: AttributeFamily,
    pub diameter: DiameterSpec,
}

impl AttributeSpec {
    pub fn binary(name: impl Into<String>) -> Self {
        AttributeSpec {
            name: name.into(),
            family: AttributeFamily::Binary,
            diameter: DiameterSpec::Known(1.0),
        }
    }

    pub fn numeric(name: impl Into<String>, diameter: DiameterSpec) -> Self {
        AttributeSpec {
            name: name.into(),
            family: AttributeFamily::Numeric,
            diameter,
        }
    }

    pub fn count(name: impl Into<String>, diameter: DiameterSpec) -> Self {
        AttributeSpec {
            name: name.into(),
            family: AttributeFamily::Count,
            diameter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Logistic,
    Identity,
    Log,
}

impl Link {
    pub fn name(&self) -> &'static str {
        match self {
            Link::Logistic => "logistic",
            Link::Identity => "identity",
            Link::Log => "log",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(Link::Logistic),
            "identity" => Ok(Link::Identity),
            "log" => Ok(Link::Log),
            other => Err(Error::InvalidArgument {
                op: "link",
                msg: format!("unknown link '{other}'"),
            }),
        }
    }

    /// Mean for a linear score under this link.
    pub fn inverse(&self, eta: f64) -> f64 {
        match self {
            Link::Logistic => sigmoid_scalar(eta),
            Link::Identity => eta,
            Link::Log => eta.exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    None,
    Ridge(f64),
    Lasso(f64),
}

impl Penalty {
    pub fn validate(&self) -> Result<()> {
        let lambda = match self {
            Penalty::None => return Ok(()),
            Penalty::Ridge(l) | Penalty::Lasso(l) => *l,
        };
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidArgument {
                op: "penalty",
                msg: format!("lambda must be a nonnegative float, got {lambda}"),
            });
        }
        Ok(())
    }
}

/// A fitted GLM over latent vectors realizing `g_a(x) = h_a(E(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeModel {
    pub spec: AttributeSpec,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub link: Link,
    pub penalty: Penalty,
    /// Set by `resolve_diameter`; scoring requires it.
    pub resolved_diameter: Option<f64>,
}

impl AttributeModel {
    pub fn linear_score(&self, z: &[f64]) -> f64 {
        self.weights.iter().zip(z).map(|(w, zi)| w * zi).sum::<f64>() + self.intercept
    }

    /// Attribute prediction for a latent vector.
    pub fn predict_latent(&self, z: &[f64]) -> f64 {
        self.link.inverse(self.linear_score(z))
    }
}

/// Attribute prediction for an image: encode, then apply the GLM.
pub fn attribute_predict(model: &AttributeModel, x: &Tensor, vae: &Vae) -> Result<f64> {
    let z = vae.encode_one(x)?;
    if z.len() != model.weights.len() {
        return Err(Error::ShapeMismatch {
            op: "attribute_predict",
            left: vec![z.len()],
            right: vec![model.weights.len()],
        });
    }
    Ok(model.predict_latent(&z))
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: AttributeModel,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the sample is smaller than recommended for the dimension.
    pub sample_warning: bool,
}

const GRAD_TOL: f64 = 1e-6;
const MAX_FIT_ITERS: usize = 500;

/// Negative log-likelihood pieces per link, up to constants.
fn nll_terms(link: Link, eta: f64, y: f64) -> (f64, f64) {
    // returns (nll contribution, mean mu)
    match link {
        Link::Logistic => {
            let sp = eta.max(0.0) + (-eta.abs()).exp().ln_1p();
            (sp - y * eta, sigmoid_scalar(eta))
        }
        Link::Identity => (0.5 * (y - eta) * (y - eta), eta),
        Link::Log => {
            let mu = eta.exp();
            (mu - y * eta, mu)
        }
    }
}

struct Design<'a> {
    latents: &'a [f64],
    n: usize,
    d: usize,
}

impl Design<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.latents[i * self.d..(i + 1) * self.d]
    }

    fn eta(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(beta.iter())
                    .map(|(x, b)| x * b)
                    .sum::<f64>()
                    + beta[self.d]
            })
            .collect()
    }

    /// Mean NLL and its gradient with the ridge term folded in.
    fn objective(
        &self,
        link: Link,
        targets: &[f64],
        beta: &[f64],
        ridge: f64,
    ) -> (f64, Vec<f64>) {
        let p = self.d + 1;
        let mut value = 0.0;
        let mut grad = vec![0.0; p];
        for i in 0..self.n {
            let row = self.row(i);
            let eta = row.iter().zip(beta.iter()).map(|(x, b)| x * b).sum::<f64>() + beta[self.d];
            let (nll, mu) = nll_terms(link, eta, targets[i]);
            value += nll;
            let resid = mu - targets[i];
            for (j, &x) in row.iter().enumerate() {
                grad[j] += resid * x;
            }
            grad[self.d] += resid;
        }
        value /= self.n as f64;
        for g in grad.iter_mut() {
            *g /= self.n as f64;
        }
        if ridge > 0.0 {
            for j in 0..self.d {
                value += ridge * beta[j] * beta[j];
                grad[j] += 2.0 * ridge * beta[j];
            }
        }
        (value, grad)
    }
}

/// Gaussian elimination with partial pivoting; `a` is row-major `p x p`.
fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let p = b.len();
    for col in 0..p {
        let pivot = (col..p)
            .max_by(|&x, &y| a[x * p + col].abs().partial_cmp(&a[y * p + col].abs()).unwrap())
            .unwrap();
        if a[pivot * p + col].abs() < 1e-300 {
            return Err(Error::InvalidArgument {
                op: "fit_glm",
                msg: "singular weighted design matrix".into(),
            });
        }
        if pivot != col {
            for k in 0..p {
                a.swap(col * p + k, pivot * p + k);
            }
            b.swap(col, pivot);
        }
        for r in col + 1..p {
            let f = a[r * p + col] / a[col * p + col];
            if f == 0.0 {
                continue;
            }
            for k in col..p {
                a[r * p + k] -= f * a[col * p + k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; p];
    for r in (0..p).rev() {
        let mut s = b[r];
        for k in r + 1..p {
            s -= a[r * p + k] * x[k];
        }
        x[r] = s / a[r * p + r];
    }
    Ok(x)
}

fn validate_targets(spec: &AttributeSpec, targets: &[f64]) -> Result<()> {
    match spec.family {
        AttributeFamily::Binary => {
            if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(Error::InvalidArgument {
                    op: "fit_glm",
                    msg: format!("binary targets for '{}' must be 0 or 1", spec.name),
                });
            }
            let pos = targets.iter().filter(|&&y| y == 1.0).count();
            if pos == 0 || pos == targets.len() {
                return Err(Error::DegenerateTargets {
                    msg: format!("'{}' has a single class", spec.name),
                });
            }
        }
        AttributeFamily::Count => {
            if targets.iter().any(|&y| y < 0.0 || y.fract() != 0.0) {
                return Err(Error::InvalidArgument {
                    op: "fit_glm",
                    msg: format!(
                        "count targets for '{}' must be nonnegative integers",
                        spec.name
                    ),
                });
            }
            if targets.iter().all(|&y| y == 0.0) {
                return Err(Error::DegenerateTargets {
                    msg: format!("'{}' counts are all zero", spec.name),
                });
            }
        }
        AttributeFamily::Numeric => {}
    }
    Ok(())
}

/// Fits a GLM by iteratively reweighted least squares (none/ridge) or
/// proximal gradient steps (lasso) until the objective gradient norm drops
/// below 1e-6 or 500 iterations pass. The intercept is never penalized.
pub fn fit_glm(
    latents: &Tensor,
    targets: &[f64],
    spec: &AttributeSpec,
    penalty: Penalty,
) -> Result<FitOutcome> {
    penalty.validate()?;
    if latents.shape().len() != 2 {
        return Err(Error::InvalidArgument {
            op: "fit_glm",
            msg: format!("latents must be 2-D, got shape {:?}", latents.shape()),
        });
    }
    let (n, d) = (latents.shape()[0], latents.shape()[1]);
    if n == 0 {
        return Err(Error::EmptyInput { op: "fit_glm" });
    }
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            op: "fit_glm",
            left: vec![n],
            right: vec![targets.len()],
        });
    }
    if latents.values().iter().any(|v| !v.is_finite())
        || targets.iter().any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite {
            op: "fit_glm",
            msg: "latents and targets must be finite".into(),
        });
    }
    validate_targets(spec, targets)?;

    let link = spec.family.link();
    let design = Design {
        latents: latents.values(),
        n,
        d,
    };

    // start from the intercept-only fit
    let mean_y = targets.iter().sum::<f64>() / n as f64;
    let mut beta = vec![0.0; d + 1];
    beta[d] = match link {
        Link::Logistic => {
            let p = mean_y.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        }
        Link::Identity => mean_y,
        Link::Log => mean_y.max(1e-12).ln(),
    };

    let (converged, iterations) = match penalty {
        Penalty::None => irls(&design, link, targets, &mut beta, 0.0)?,
        Penalty::Ridge(lambda) => irls(&design, link, targets, &mut beta, lambda)?,
        Penalty::Lasso(lambda) => ista(&design, link, targets, &mut beta, lambda),
    };

    let model = AttributeModel {
        spec: spec.clone(),
        weights: beta[..d].to_vec(),
        intercept: beta[d],
        link,
        penalty,
        resolved_diameter: match spec.family {
            AttributeFamily::Binary => Some(1.0),
            _ => None,
        },
    };
    Ok(FitOutcome {
        model,
        converged,
        iterations,
        sample_warning: (n as f64) < d as f64 / 10.0,
    })
}

fn irls(
    design: &Design,
    link: Link,
    targets: &[f64],
    beta: &mut Vec<f64>,
    ridge: f64,
) -> Result<(bool, usize)> {
    let (n, d) = (design.n, design.d);
    let p = d + 1;
    for iter in 0..MAX_FIT_ITERS {
        let (_, grad) = design.objective(link, targets, beta, ridge);
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < GRAD_TOL {
            return Ok((true, iter));
        }

        let eta = design.eta(beta);
        // weighted normal equations (X'WX)/n + 2*ridge*D
        let mut a = vec![0.0; p * p];
        let mut b = vec![0.0; p];
        for i in 0..n {
            let (w, mu) = match link {
                Link::Logistic => {
                    let mu = sigmoid_scalar(eta[i]);
                    ((mu * (1.0 - mu)).max(1e-10), mu)
                }
                Link::Identity => (1.0, eta[i]),
                Link::Log => {
                    let mu = eta[i].exp();
                    (mu.max(1e-10), mu)
                }
            };
            let zeta = eta[i] + (targets[i] - mu) / w;
            let row = design.row(i);
            let scaled = w / n as f64;
            for r in 0..d {
                let xr = row[r] * scaled;
                for c in r..d {
                    a[r * p + c] += xr * row[c];
                }
                a[r * p + d] += xr;
                b[r] += xr * zeta;
            }
            a[d * p + d] += scaled;
            b[d] += scaled * zeta;
        }
        for r in 0..p {
            for c in 0..r {
                a[r * p + c] = a[c * p + r];
            }
        }
        if ridge > 0.0 {
            for j in 0..d {
                a[j * p + j] += 2.0 * ridge;
            }
        }
        let next = solve_linear(a, b)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "fit_glm",
                msg: "IRLS produced non-finite coefficients".into(),
            });
        }
        *beta = next;
    }
    Ok((false, MAX_FIT_ITERS))
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Proximal gradient with backtracking; the L1 penalty applies to weights
/// only, so the intercept takes plain gradient steps.
fn ista(design: &Design, link: Link, targets: &[f64], beta: &mut Vec<f64>, lambda: f64) -> (bool, usize) {
    let d = design.d;
    let mut step = 1.0;
    for iter in 0..MAX_FIT_ITERS {
        let (value, grad) = design.objective(link, targets, beta, 0.0);
        let prox = |s: f64, from: &[f64]| -> Vec<f64> {
            let mut next = vec![0.0; d + 1];
            for j in 0..d {
                next[j] = soft_threshold(from[j] - s * grad[j], s * lambda);
            }
            next[d] = from[d] - s * grad[d];
            next
        };

        // backtracking line search on the smooth part
        let mut s = step;
        let mut candidate = prox(s, beta);
        for _ in 0..60 {
            let (cand_value, _) = design.objective(link, targets, &candidate, 0.0);
            let mut quad = value;
            let mut dist_sq = 0.0;
            for j in 0..=d {
                let delta = candidate[j] - beta[j];
                quad += grad[j] * delta;
                dist_sq += delta * delta;
            }
            quad += dist_sq / (2.0 * s);
            if cand_value <= quad + 1e-15 {
                break;
            }
            s *= 0.5;
            candidate = prox(s, beta);
        }
        step = (s * 1.5).min(1.0);

        // gradient-mapping norm as the stationarity measure
        let mapping: f64 = candidate
            .iter()
            .zip(beta.iter())
            .map(|(c, b)| ((b - c) / s) * ((b - c) / s))
            .sum::<f64>()
            .sqrt();
        *beta = candidate;
        if mapping < GRAD_TOL {
            return (true, iter + 1);
        }
    }
    (false, MAX_FIT_ITERS)
}

/// One-vs-rest binary GLMs for a multi-level attribute, named
/// `base=level`, one per distinct level.
pub fn fit_one_vs_rest(
    latents: &Tensor,
    labels: &[usize],
    base_name: &str,
    penalty: Penalty,
) -> Result<Vec<FitOutcome>> {
    let mut levels: Vec<usize> = labels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    if levels.len() < 2 {
        return Err(Error::DegenerateTargets {
            msg: format!("'{base_name}' has fewer than two levels"),
        });
    }
    levels
        .into_iter()
        .map(|level| {
            let targets: Vec<f64> = labels
                .iter()
                .map(|&l| if l == level { 1.0 } else { 0.0 })
                .collect();
            fit_glm(
                latents,
                &targets,
                &AttributeSpec::binary(format!("{base_name}={level}")),
                penalty,
            )
        })
        .collect()
}

/// Fits one GLM per column of a derived attribute table: binary columns get
/// logistic models, the rest identity-link models with background diameters.
pub fn fit_attribute_models(
    latents: &Tensor,
    table: &AttributeTable,
    penalty: Penalty,
) -> Result<Vec<FitOutcome>> {
    table
        .iter()
        .map(|(name, values)| {
            let spec = if values.iter().all(|&v| v == 0.0 || v == 1.0) {
                AttributeSpec::binary(name)
            } else {
                AttributeSpec::numeric(name, DiameterSpec::FromBackground)
            };
            fit_glm(latents, values, &spec, penalty)
        })
        .collect()
}

// ── diameters ───────────────────────────────────────────────────────────

/// Diameter from a spec plus background predictions; binary attributes are
/// always 1.
pub fn resolve_diameter_from_predictions(spec: &AttributeSpec, preds: &[f64]) -> Result<f64> {
    if spec.family == AttributeFamily::Binary {
        return Ok(1.0);
    }
    let diameter = match spec.diameter {
        DiameterSpec::Known(d) => d,
        DiameterSpec::Limits { lo, hi } => hi - lo,
        DiameterSpec::FromBackground => {
            if preds.is_empty() {
                return Err(Error::EmptyInput {
                    op: "resolve_diameter",
                });
            }
            let max = preds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = preds.iter().cloned().fold(f64::INFINITY, f64::min);
            max - min
        }
    };
    if !(diameter.is_finite() && diameter > 0.0) {
        return Err(Error::ZeroDiameter {
            attribute: spec.name.clone(),
        });
    }
    Ok(diameter)
}

/// Resolves one model's diameter against a background dataset.
pub fn resolve_diameter(
    model: &AttributeModel,
    background: &ImageDataset,
    vae: &Vae,
) -> Result<f64> {
    let preds = match model.spec.diameter {
        DiameterSpec::FromBackground if model.spec.family != AttributeFamily::Binary => {
            if background.is_empty() {
                return Err(Error::EmptyInput {
                    op: "resolve_diameter",
                });
            }
            let z = vae.encode(&background.images_matrix())?;
            let d = vae.latent_dim;
            (0..background.n())
                .map(|i| model.predict_latent(&z.values()[i * d..(i + 1) * d]))
                .collect()
        }
        _ => Vec::new(),
    };
    resolve_diameter_from_predictions(&model.spec, &preds)
}

/// Resolves and stores diameters for every model.
pub fn resolve_diameters(
    models: &mut [AttributeModel],
    background: &ImageDataset,
    vae: &Vae,
) -> Result<()> {
    for model in models.iter_mut() {
        model.resolved_diameter = Some(resolve_diameter(model, background, vae)?);
    }
    Ok(())
}

// ── local and global scores ─────────────────────────────────────────────

fn diameters(models: &[AttributeModel]) -> Result<Vec<f64>> {
    models
        .iter()
        .map(|m| {
            m.resolved_diameter.ok_or_else(|| Error::UnresolvedDiameter {
                attribute: m.spec.name.clone(),
            })
        })
        .collect()
}

/// Local scores from latent vectors: `(g_a(z') - g_a(z)) / diam_a`.
pub fn local_scores_latent(
    z: &[f64],
    z_prime: &[f64],
    models: &[AttributeModel],
) -> Result<Vec<f64>> {
    let diams = diameters(models)?;
    Ok(models
        .iter()
        .zip(diams)
        .map(|(m, diam)| (m.predict_latent(z_prime) - m.predict_latent(z)) / diam)
        .collect())
}

/// Local importance scores for one (image, counterfactual) pair.
pub fn local_scores(
    x: &Tensor,
    x_prime: &Tensor,
    models: &[AttributeModel],
    vae: &Vae,
) -> Result<Vec<f64>> {
    let z = vae.encode_one(x)?;
    let z_prime = vae.encode_one(x_prime)?;
    local_scores_latent(&z, &z_prime, models)
}

/// One original/counterfactual pair plus the model's original prediction,
/// which supplies the sign in the signed aggregation.
#[derive(Debug, Clone)]
pub struct CounterfactualPair {
    pub original: Tensor,
    pub counterfactual: Tensor,
    pub original_prediction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Absolute,
    Signed,
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::Absolute => "absolute",
            Aggregation::Signed => "signed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(Aggregation::Absolute),
            "signed" => Ok(Aggregation::Signed),
            other => Err(Error::InvalidArgument {
                op: "aggregation",
                msg: format!("unknown aggregation '{other}'"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Sum,
    Mean,
}

impl Normalization {
    pub fn name(&self) -> &'static str {
        match self {
            Normalization::Sum => "sum",
            Normalization::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Normalization::Sum),
            "mean" => Ok(Normalization::Mean),
            other => Err(Error::InvalidArgument {
                op: "normalization",
                msg: format!("unknown normalization '{other}'"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GlobalOptions {
    pub aggregation: Aggregation,
    pub normalization: Normalization,
    /// Divide each image's scores by their absolute sum before aggregating.
    pub per_image_renormalize: bool,
}

impl Default for GlobalOptions {
    fn default() -> Self {
        GlobalOptions {
            aggregation: Aggregation::Signed,
            normalization: Normalization::Mean,
            per_image_renormalize: false,
        }
    }
}

/// Local score matrix plus per-attribute aggregates.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub attributes: Vec<String>,
    /// `n x attributes` local scores.
    pub local: Vec<Vec<f64>>,
    /// Direction sign per image: +1 when the original prediction was below
    /// 0.5, otherwise -1.
    pub signs: Vec<f64>,
    /// Aggregated global score per attribute.
    pub psi: Vec<f64>,
    pub n: usize,
}

/// A pair already embedded in latent space.
#[derive(Debug, Clone)]
pub struct LatentPair {
    pub z: Vec<f64>,
    pub z_prime: Vec<f64>,
    pub original_prediction: f64,
}

/// Aggregation core over latent pairs; `global_scores` is its image-level
/// wrapper. Signed aggregation requires original predictions in [0, 1].
pub fn global_scores_latent(
    pairs: &[LatentPair],
    models: &[AttributeModel],
    opts: &GlobalOptions,
) -> Result<ScoreTable> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput { op: "global_scores" });
    }
    let mut names = Vec::with_capacity(models.len());
    for m in models {
        if names.contains(&m.spec.name) {
            return Err(Error::DuplicateAttribute {
                attribute: m.spec.name.clone(),
            });
        }
        names.push(m.spec.name.clone());
    }

    let mut local = Vec::with_capacity(pairs.len());
    let mut signs = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if opts.aggregation == Aggregation::Signed
            && !(0.0..=1.0).contains(&pair.original_prediction)
        {
            return Err(Error::InvalidArgument {
                op: "global_scores",
                msg: format!(
                    "signed aggregation needs predictions in [0, 1], got {}",
                    pair.original_prediction
                ),
            });
        }
        let mut phi = local_scores_latent(&pair.z, &pair.z_prime, models)?;
        if opts.per_image_renormalize {
            let denom: f64 = phi.iter().map(|v| v.abs()).sum();
            if denom > 0.0 {
                for v in phi.iter_mut() {
                    *v /= denom;
                }
            }
        }
        signs.push(if pair.original_prediction < 0.5 { 1.0 } else { -1.0 });
        local.push(phi);
    }

    let n = pairs.len();
    let mut psi = vec![0.0; models.len()];
    for (phi, &s) in local.iter().zip(&signs) {
        for (a, &value) in phi.iter().enumerate() {
            psi[a] += match opts.aggregation {
                Aggregation::Absolute => value.abs(),
                Aggregation::Signed => value * s,
            };
        }
    }
    if opts.normalization == Normalization::Mean {
        for v in psi.iter_mut() {
            *v /= n as f64;
        }
    }

    Ok(ScoreTable {
        attributes: names,
        local,
        signs,
        psi,
        n,
    })
}

/// Computes local scores for every pair and aggregates them into global
/// scores.
pub fn global_scores(
    pairs: &[CounterfactualPair],
    models: &[AttributeModel],
    vae: &Vae,
    opts: &GlobalOptions,
) -> Result<ScoreTable> {
    let latent_pairs: Vec<LatentPair> = pairs
        .iter()
        .map(|p| {
            Ok(LatentPair {
                z: vae.encode_one(&p.original)?,
                z_prime: vae.encode_one(&p.counterfactual)?,
                original_prediction: p.original_prediction,
            })
        })
        .collect::<Result<_>>()?;
    global_scores_latent(&latent_pairs, models, opts)
}

// ── ranking ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreDirection {
    Added,
    Removed,
}

impl ScoreDirection {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreDirection::Added => "added",
            ScoreDirection::Removed => "removed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedScore {
    /// 1-based rank by score magnitude.
    pub rank: usize,
    pub attribute: String,
    pub psi: f64,
    pub direction: ScoreDirection,
}

#[derive(Debug, Clone)]
pub struct TopKReport {
    pub entries: Vec<RankedScore>,
    /// True when k exceeded the attribute count and the list was clamped.
    pub clamped: bool,
}

/// The k attributes of largest |psi|, ties broken by name; negative scores
/// are reported as removed features.
pub fn top_k_report(attributes: &[String], psi: &[f64], k: usize) -> Result<TopKReport> {
    if k == 0 {
        return Err(Error::InvalidArgument {
            op: "top_k_report",
            msg: "k must be at least 1".into(),
        });
    }
    if attributes.len() != psi.len() {
        return Err(Error::ShapeMismatch {
            op: "top_k_report",
            left: vec![attributes.len()],
            right: vec![psi.len()],
        });
    }
    let mut order: Vec<usize> = (0..psi.len()).collect();
    order.sort_by(|&a, &b| {
        psi[b]
            .abs()
            .partial_cmp(&psi[a].abs())
            .unwrap()
            .then_with(|| attributes[a].cmp(&attributes[b]))
    });
    let clamped = k > psi.len();
    let take = k.min(psi.len());
    let entries = order[..take]
        .iter()
        .enumerate()
        .map(|(rank, &idx)| RankedScore {
            rank: rank + 1,
            attribute: attributes[idx].clone(),
            psi: psi[idx],
            direction: if psi[idx] < 0.0 {
                ScoreDirection::Removed
            } else {
                ScoreDirection::Added
            },
        })
        .collect();
    Ok(TopKReport { entries, clamped })
}
