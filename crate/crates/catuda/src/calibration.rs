//! Confidence statistics, expected calibration error, and the post-hoc
//! calibrators applied to teacher logits: temperature scaling, vector and
//! matrix scaling, and importance-weighted temperature scaling driven by a
//! logistic domain discriminator.

use rand_chacha::ChaCha8Rng;

use crate::error::{CatError, Result};
use crate::graph::Graph;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::tensor::{matmul, Tensor};

/// Default number of reliability bins.
pub const DEFAULT_ECE_BINS: usize = 10;

/// Search interval for the scalar temperature, in log space.
pub const TEMP_SEARCH_RANGE: (f64, f64) = (0.05, 20.0);
const TEMP_SEARCH_TOL: f64 = 1e-4;

/// Discriminator outputs are clipped to `[eps, 1 - eps]` before forming
/// density ratios.
pub const CPCS_CLIP_EPS: f64 = 1e-3;

/// Logits together with the derived probabilities, confidences, and
/// predictions; labels are attached when known.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    /// Calibrated logits, (N, K).
    pub logits: Tensor,
    /// Row-wise softmax of `logits`.
    pub probs: Tensor,
    /// Per-sample max probability.
    pub confidences: Vec<f64>,
    /// Per-sample argmax class.
    pub predicted: Vec<usize>,
    pub labels: Option<Vec<usize>>,
}

impl PredictionSet {
    pub fn from_logits(logits: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let shape = logits.shape();
        if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
            return Err(CatError::Shape {
                op: "PredictionSet::from_logits",
                detail: format!("expected non-empty (N, K) logits, got {:?}", shape),
            });
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(y) = &labels {
            if y.len() != n {
                return Err(CatError::Shape {
                    op: "PredictionSet::from_logits",
                    detail: format!("{} rows but {} labels", n, y.len()),
                });
            }
            if let Some(&bad) = y.iter().find(|&&c| c >= k) {
                return Err(CatError::Data(format!("label {} out of range for K={}", bad, k)));
            }
        }
        let probs = softmax_rows(&logits);
        let mut confidences = Vec::with_capacity(n);
        let mut predicted = Vec::with_capacity(n);
        for i in 0..n {
            let row = &probs.data()[i * k..(i + 1) * k];
            let (mut best, mut best_p) = (0, row[0]);
            for (j, &p) in row.iter().enumerate().skip(1) {
                if p > best_p {
                    best = j;
                    best_p = p;
                }
            }
            confidences.push(best_p);
            predicted.push(best);
        }
        Ok(PredictionSet {
            logits,
            probs,
            confidences,
            predicted,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Fraction of predictions equal to the label.
    pub fn accuracy(&self) -> Result<f64> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| CatError::Data("accuracy requires labels".into()))?;
        let hits = self
            .predicted
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Numerically stable row-wise softmax on a (N, K) tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for j in 0..k {
            let e = (row[j] - mx).exp();
            out[i * k + j] = e;
            s += e;
        }
        for j in 0..k {
            out[i * k + j] /= s;
        }
    }
    Tensor::new(vec![n, k], out).expect("shape consistent by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibratorKind {
    Identity,
    Temperature,
    Vector,
    Matrix,
    Cpcs,
}

impl CalibratorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CalibratorKind::Identity => "identity",
            CalibratorKind::Temperature => "temperature",
            CalibratorKind::Vector => "vector",
            CalibratorKind::Matrix => "matrix",
            CalibratorKind::Cpcs => "cpcs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CalibratorKind::Identity),
            "temperature" => Ok(CalibratorKind::Temperature),
            "vector" => Ok(CalibratorKind::Vector),
            "matrix" => Ok(CalibratorKind::Matrix),
            "cpcs" => Ok(CalibratorKind::Cpcs),
            other => Err(CatError::Config(format!("unknown calibrator `{}`", other))),
        }
    }
}

/// Fitted transform of the logits. Temperature kinds use `t`; affine kinds
/// use `w` (K, K) and `b` (K). `fallback` marks a fit that did not improve on
/// the identity and was replaced by it.
#[derive(Debug, Clone)]
pub struct CalibratorParams {
    pub kind: CalibratorKind,
    pub t: f64,
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
    pub fallback: bool,
}

impl CalibratorParams {
    pub fn identity() -> Self {
        CalibratorParams {
            kind: CalibratorKind::Identity,
            t: 1.0,
            w: None,
            b: None,
            fallback: false,
        }
    }
}

/// Calibrated logits: `z / T` for temperature kinds, `z Wᵀ + b` for affine
/// kinds, `z` unchanged for the identity.
fn transform_logits(z: &Tensor, params: &CalibratorParams) -> Result<Tensor> {
    let (n, k) = (z.shape()[0], z.shape()[1]);
    match params.kind {
        CalibratorKind::Identity => Ok(z.clone()),
        CalibratorKind::Temperature | CalibratorKind::Cpcs => {
            if params.t <= 0.0 {
                return Err(CatError::Param(format!(
                    "temperature must be positive, got {}",
                    params.t
                )));
            }
            let data = z.data().iter().map(|v| v / params.t).collect();
            Tensor::new(vec![n, k], data)
        }
        CalibratorKind::Vector | CalibratorKind::Matrix => {
            let w = params
                .w
                .as_ref()
                .ok_or_else(|| CatError::Param("affine calibrator missing W".into()))?;
            let b = params
                .b
                .as_ref()
                .ok_or_else(|| CatError::Param("affine calibrator missing b".into()))?;
            if w.shape() != [k, k] || b.numel() != k {
                return Err(CatError::Shape {
                    op: "apply_calibrator",
                    detail: format!("W {:?} / b {:?} vs K={}", w.shape(), b.shape(), k),
                });
            }
            let mut out = vec![0.0; n * k];
            matmul(z.data(), n, k, false, w.data(), k, k, true, &mut out);
            for i in 0..n {
                for j in 0..k {
                    out[i * k + j] += b.data()[j];
                }
            }
            Tensor::new(vec![n, k], out)
        }
    }
}

pub fn apply_calibrator(z: &Tensor, params: &CalibratorParams) -> Result<PredictionSet> {
    PredictionSet::from_logits(transform_logits(z, params)?, None)
}

pub fn apply_calibrator_with_labels(
    z: &Tensor,
    labels: &[usize],
    params: &CalibratorParams,
) -> Result<PredictionSet> {
    PredictionSet::from_logits(transform_logits(z, params)?, Some(labels.to_vec()))
}

/// Reliability binning over `n_bins` equal confidence intervals.
#[derive(Debug, Clone)]
pub struct EceReport {
    pub n_bins: usize,
    pub counts: Vec<usize>,
    pub avg_conf: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub ece: f64,
}

/// Bin index for a confidence under half-open intervals ((m-1)/M, m/M];
/// a confidence of exactly 0 lands in the first bin.
fn bin_index(conf: f64, m: usize) -> usize {
    if conf <= 0.0 {
        return 0;
    }
    let idx = (conf * m as f64).ceil() as usize;
    idx.clamp(1, m) - 1
}

/// Expected calibration error: `sum_m |B_m|/N * |acc(B_m) - conf(B_m)|` with
/// samples binned by confidence.
pub fn compute_ece(preds: &PredictionSet, n_bins: usize) -> Result<EceReport> {
    let labels = preds
        .labels
        .as_ref()
        .ok_or_else(|| CatError::Data("calibration error requires labels".into()))?;
    if preds.is_empty() {
        return Err(CatError::Data("calibration error over an empty set".into()));
    }
    if n_bins == 0 {
        return Err(CatError::Param("need at least one reliability bin".into()));
    }
    let n = preds.len();
    let mut counts = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hit_sum = vec![0.0; n_bins];
    for i in 0..n {
        let b = bin_index(preds.confidences[i], n_bins);
        counts[b] += 1;
        conf_sum[b] += preds.confidences[i];
        if preds.predicted[i] == labels[i] {
            hit_sum[b] += 1.0;
        }
    }
    let mut avg_conf = vec![0.0; n_bins];
    let mut accuracy = vec![0.0; n_bins];
    let mut ece = 0.0;
    for b in 0..n_bins {
        if counts[b] > 0 {
            avg_conf[b] = conf_sum[b] / counts[b] as f64;
            accuracy[b] = hit_sum[b] / counts[b] as f64;
            ece += counts[b] as f64 / n as f64 * (accuracy[b] - avg_conf[b]).abs();
        }
    }
    Ok(EceReport {
        n_bins,
        counts,
        avg_conf,
        accuracy,
        ece,
    })
}

/// Per-bin rows `(bin_low, bin_high, count, avg_conf, accuracy)`.
pub fn reliability_rows(preds: &PredictionSet, n_bins: usize) -> Result<Vec<(f64, f64, usize, f64, f64)>> {
    let report = compute_ece(preds, n_bins)?;
    Ok((0..n_bins)
        .map(|b| {
            (
                b as f64 / n_bins as f64,
                (b + 1) as f64 / n_bins as f64,
                report.counts[b],
                report.avg_conf[b],
                report.accuracy[b],
            )
        })
        .collect())
}

/// CSV text with header `bin_low,bin_high,count,avg_conf,accuracy`.
pub fn reliability_csv(preds: &PredictionSet, n_bins: usize) -> Result<String> {
    let mut out = String::from("bin_low,bin_high,count,avg_conf,accuracy\n");
    for (lo, hi, count, conf, acc) in reliability_rows(preds, n_bins)? {
        out.push_str(&format!("{},{},{},{},{}\n", lo, hi, count, conf, acc));
    }
    Ok(out)
}

/// Mean negative log-likelihood of the labels under temperature-scaled
/// softmax of the logits.
pub fn nll_at_temperature(logits: &Tensor, labels: &[usize], t: f64) -> f64 {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mx = row.iter().map(|v| v / t).fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v / t - mx).exp()).sum::<f64>().ln() + mx;
        total -= row[labels[i]] / t - lse;
    }
    total / n as f64
}

/// Golden-section minimization of a smooth scalar function on [lo, hi].
fn golden_section_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn bounded_temperature_search(objective: impl Fn(f64) -> f64) -> f64 {
    let (lo, hi) = TEMP_SEARCH_RANGE;
    let x = golden_section_min(|x| objective(x.exp()), lo.ln(), hi.ln(), TEMP_SEARCH_TOL);
    x.exp()
}

fn check_fit_inputs(logits: &Tensor, labels: &[usize], op: &'static str) -> Result<()> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(CatError::Shape {
            op,
            detail: format!("expected non-empty (N, K) logits, got {:?}", shape),
        });
    }
    if labels.len() != shape[0] {
        return Err(CatError::Shape {
            op,
            detail: format!("{} rows but {} labels", shape[0], labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= shape[1]) {
        return Err(CatError::Data(format!(
            "label {} out of range for K={}",
            bad, shape[1]
        )));
    }
    Ok(())
}

/// Scalar temperature minimizing the hold-out negative log-likelihood. Falls
/// back to T=1 if the search fails to improve on the identity.
pub fn fit_temperature(logits: &Tensor, labels: &[usize]) -> Result<CalibratorParams> {
    check_fit_inputs(logits, labels, "fit_temperature")?;
    let t = bounded_temperature_search(|t| nll_at_temperature(logits, labels, t));
    let (t, fallback) = if !t.is_finite() || nll_at_temperature(logits, labels, t) > nll_at_temperature(logits, labels, 1.0) + 1e-9 {
        (1.0, true)
    } else {
        (t, false)
    };
    Ok(CalibratorParams {
        kind: CalibratorKind::Temperature,
        t,
        w: None,
        b: None,
        fallback,
    })
}

/// Affine calibrator fit shared by vector and matrix scaling. The weight
/// matrix is masked to its diagonal for the vector kind so gradients never
/// leave the diagonal.
fn fit_affine(logits: &Tensor, labels: &[usize], kind: CalibratorKind) -> Result<CalibratorParams> {
    let op = match kind {
        CalibratorKind::Vector => "fit_vector_scaling",
        _ => "fit_matrix_scaling",
    };
    check_fit_inputs(logits, labels, op)?;
    let k = logits.shape()[1];

    let mut eye = vec![0.0; k * k];
    for j in 0..k {
        eye[j * k + j] = 1.0;
    }
    let mut params = ParamSet::new();
    let w_id = params.add("cal.w", Tensor::new(vec![k, k], eye.clone())?);
    let b_id = params.add("cal.b", Tensor::zeros(&[k]));
    let ids = [w_id, b_id];

    let mut opt = Adam::new(AdamConfig {
        lr: 0.01,
        weight_decay: 0.0,
        ..AdamConfig::default()
    });

    let eval_nll = |params: &ParamSet| -> Result<f64> {
        let p = CalibratorParams {
            kind,
            t: 1.0,
            w: Some(params.value(w_id).clone()),
            b: Some(params.value(b_id).clone()),
            fallback: false,
        };
        let z = transform_logits(logits, &p)?;
        Ok(nll_at_temperature(&z, labels, 1.0))
    };

    let mut best_nll = eval_nll(&params)?;
    let identity_nll = best_nll;
    let mut best_w = params.value(w_id).clone();
    let mut best_b = params.value(b_id).clone();
    let mut prev_nll = best_nll;
    let mut converged = false;

    for _ in 0..2000 {
        params.zero_grads();
        let mut g = Graph::new();
        let z = g.input(logits.clone());
        let w_var = g.param(&params, w_id);
        let w_eff = if kind == CalibratorKind::Vector {
            g.mul_const(w_var, eye.clone())?
        } else {
            w_var
        };
        let b_var = g.param(&params, b_id);
        let zw = g.matmul(z, w_eff, false, true)?;
        let zcal = g.add_rows(zw, b_var)?;
        let logp = g.log_softmax(zcal)?;
        let picked = g.pick_per_row(logp, labels)?;
        let m = g.mean(picked)?;
        let loss = g.scale(m, -1.0)?;
        g.backward(loss, &mut params)?;
        opt.step(&mut params, &ids)?;

        let nll = eval_nll(&params)?;
        if nll < best_nll {
            best_nll = nll;
            best_w = params.value(w_id).clone();
            best_b = params.value(b_id).clone();
        }
        if (nll - prev_nll).abs() < 1e-7 {
            converged = true;
            break;
        }
        prev_nll = nll;
    }

    Ok(CalibratorParams {
        kind,
        t: 1.0,
        w: Some(best_w),
        b: Some(best_b),
        fallback: !converged && best_nll > identity_nll,
    })
}

/// Diagonal affine calibrator `z -> diag(w) z + b` minimizing hold-out NLL.
pub fn fit_vector_scaling(logits: &Tensor, labels: &[usize]) -> Result<CalibratorParams> {
    fit_affine(logits, labels, CalibratorKind::Vector)
}

/// Full affine calibrator `z -> W z + b` minimizing hold-out NLL.
pub fn fit_matrix_scaling(logits: &Tensor, labels: &[usize]) -> Result<CalibratorParams> {
    fit_affine(logits, labels, CalibratorKind::Matrix)
}

/// Density ratios `d / (1 - d)` from clipped discriminator outputs,
/// normalized to mean 1.
pub fn importance_weights(d: &[f64], clip_eps: f64) -> Vec<f64> {
    let mut w: Vec<f64> = d
        .iter()
        .map(|&di| {
            let c = di.clamp(clip_eps, 1.0 - clip_eps);
            c / (1.0 - c)
        })
        .collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    if mean > 0.0 {
        w.iter_mut().for_each(|v| *v /= mean);
    }
    w
}

/// Importance-weighted Brier score of temperature-scaled probabilities.
pub fn weighted_brier(logits: &Tensor, labels: &[usize], weights: &[f64], t: f64) -> f64 {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let scaled = Tensor::new(
        vec![n, k],
        logits.data().iter().map(|v| v / t).collect::<Vec<f64>>(),
    )
    .expect("shape consistent");
    let probs = softmax_rows(&scaled);
    let mut total = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..k {
            let target = if labels[i] == j { 1.0 } else { 0.0 };
            let diff = target - probs.data()[i * k + j];
            s += diff * diff;
        }
        total += weights[i] * s;
    }
    total / n as f64
}

/// Logistic domain discriminator trained on encoder features with source
/// labeled 0 and target labeled 1; returns its outputs on `query`.
fn discriminator_outputs(
    source: &Tensor,
    target: &Tensor,
    query: &Tensor,
) -> Result<Option<Vec<f64>>> {
    let d = source.shape()[1];
    if target.shape()[1] != d || query.shape()[1] != d {
        return Err(CatError::Shape {
            op: "fit_cpcs",
            detail: "feature dimensions disagree across domains".into(),
        });
    }
    let (ns, nt) = (source.shape()[0], target.shape()[0]);
    if ns == 0 || nt == 0 {
        return Err(CatError::Data("domain discriminator needs both domains".into()));
    }

    // A degenerate (constant) feature set carries no domain signal; the
    // caller falls back to uniform weights.
    let mut max_var = 0.0f64;
    for j in 0..d {
        let col =
            |t: &Tensor, i: usize| t.data()[i * d + j];
        let n = (ns + nt) as f64;
        let mean = ((0..ns).map(|i| col(source, i)).sum::<f64>()
            + (0..nt).map(|i| col(target, i)).sum::<f64>())
            / n;
        let var = ((0..ns).map(|i| (col(source, i) - mean).powi(2)).sum::<f64>()
            + (0..nt).map(|i| (col(target, i) - mean).powi(2)).sum::<f64>())
            / n;
        max_var = max_var.max(var);
    }
    if max_var < 1e-12 {
        return Ok(None);
    }

    let mut params = ParamSet::new();
    let w_id = params.add("disc.w", Tensor::zeros(&[d, 1]));
    let b_id = params.add("disc.b", Tensor::zeros(&[1]));
    let ids = [w_id, b_id];
    let mut opt = Adam::new(AdamConfig {
        lr: 0.01,
        weight_decay: 0.0,
        ..AdamConfig::default()
    });

    for _ in 0..1000 {
        params.zero_grads();
        let mut g = Graph::new();
        let w = g.param(&params, w_id);
        let b = g.param(&params, b_id);
        let fs = g.input(source.clone());
        let ft = g.input(target.clone());
        let zs = g.matmul(fs, w, false, false)?;
        let zs = g.add_rows(zs, b)?;
        let zt = g.matmul(ft, w, false, false)?;
        let zt = g.add_rows(zt, b)?;
        let ds = g.sigmoid(zs)?;
        let dt = g.sigmoid(zt)?;
        // Binary cross-entropy with target as the positive class.
        let loss = crate::losses::domain_bce(&mut g, dt, ds)?;
        g.backward(loss, &mut params)?;
        opt.step(&mut params, &ids)?;
    }

    let nq = query.shape()[0];
    let mut out = vec![0.0; nq];
    matmul(
        query.data(),
        nq,
        d,
        false,
        params.value(w_id).data(),
        d,
        1,
        false,
        &mut out,
    );
    let bias = params.value(b_id).data()[0];
    Ok(Some(
        out.iter().map(|z| 1.0 / (1.0 + (-(z + bias)).exp())).collect(),
    ))
}

/// Importance-weighted temperature fit: a logistic discriminator on encoder
/// features estimates per-sample density ratios for the source test set, and
/// the temperature minimizes the weighted Brier score.
pub fn fit_cpcs(
    test_logits: &Tensor,
    test_labels: &[usize],
    test_features: &Tensor,
    source_train_features: &Tensor,
    target_train_features: &Tensor,
) -> Result<CalibratorParams> {
    check_fit_inputs(test_logits, test_labels, "fit_cpcs")?;
    let n = test_logits.shape()[0];
    if test_features.shape()[0] != n {
        return Err(CatError::Shape {
            op: "fit_cpcs",
            detail: format!(
                "{} logit rows but {} feature rows",
                n,
                test_features.shape()[0]
            ),
        });
    }
    let (weights, fallback) = match discriminator_outputs(
        source_train_features,
        target_train_features,
        test_features,
    )? {
        Some(d) => (importance_weights(&d, CPCS_CLIP_EPS), false),
        None => (vec![1.0; n], true),
    };
    let t = bounded_temperature_search(|t| weighted_brier(test_logits, test_labels, &weights, t));
    Ok(CalibratorParams {
        kind: CalibratorKind::Cpcs,
        t,
        w: None,
        b: None,
        fallback,
    })
}

/// Temperature minimizing the unweighted Brier score; used by tests and as
/// the degenerate-discriminator limit of the importance-weighted fit.
pub fn fit_brier_temperature(logits: &Tensor, labels: &[usize]) -> Result<CalibratorParams> {
    check_fit_inputs(logits, labels, "fit_brier_temperature")?;
    let weights = vec![1.0; logits.shape()[0]];
    let t = bounded_temperature_search(|t| weighted_brier(logits, labels, &weights, t));
    Ok(CalibratorParams {
        kind: CalibratorKind::Cpcs,
        t,
        w: None,
        b: None,
        fallback: false,
    })
}

/// Mean NLL of a fitted calibrator on a labeled logit set.
pub fn calibrated_nll(logits: &Tensor, labels: &[usize], params: &CalibratorParams) -> Result<f64> {
    let z = transform_logits(logits, params)?;
    Ok(nll_at_temperature(&z, labels, 1.0))
}

/// Seeded random labeled logit set for tests and oracles.
pub fn random_prediction_set(
    n: usize,
    k: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<usize>) {
    use rand::Rng;
    let data: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-scale..scale)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    (Tensor::new(vec![n, k], data).expect("shape consistent"), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn logits_from_rows(rows: Vec<Vec<f64>>) -> Tensor {
        let k = rows[0].len();
        let n = rows.len();
        Tensor::new(vec![n, k], rows.into_iter().flatten().collect()).unwrap()
    }

    /// Logits of an overconfident labeler: 5 x one-hot of a prediction that
    /// matches the label with probability `acc`.
    fn overconfident_fixture(n: usize, k: usize, acc: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let y = rng.gen_range(0..k);
            let pred = if rng.gen_bool(acc) {
                y
            } else {
                (y + rng.gen_range(1..k)) % k
            };
            let mut row = vec![0.0; k];
            row[pred] = 5.0;
            rows.push(row);
            labels.push(y);
        }
        (logits_from_rows(rows), labels)
    }

    #[test]
    fn ece_single_perfect_bin_is_zero() {
        // 4 samples at confidence 0.75 with 3 correct: acc = conf in the bin.
        // p_max = e^z / (e^z + 3) = 0.75 over 4 classes gives z = ln 9.
        let z = (3.0 * 0.75f64 / 0.25).ln();
        let rows = vec![vec![z, 0.0, 0.0, 0.0]; 4];
        let logits = logits_from_rows(rows);
        let preds = PredictionSet::from_logits(logits, Some(vec![0, 0, 0, 1])).unwrap();
        assert!(preds.confidences.iter().all(|c| (c - 0.75).abs() < 1e-12));
        let report = compute_ece(&preds, 10).unwrap();
        assert!(report.ece.abs() < 1e-12);
        assert_eq!(report.counts.iter().sum::<usize>(), 4);
    }

    #[test]
    fn ece_confident_and_wrong_is_one() {
        let rows = vec![vec![500.0, 0.0]; 6];
        let preds =
            PredictionSet::from_logits(logits_from_rows(rows), Some(vec![1; 6])).unwrap();
        let report = compute_ece(&preds, 10).unwrap();
        assert!((report.ece - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ece_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (logits, labels) = random_prediction_set(1000, 7, 4.0, &mut rng);
        let preds = PredictionSet::from_logits(logits, Some(labels.clone())).unwrap();
        let m = 10;
        // Independent loop: for each bin scan every sample.
        let mut oracle = 0.0;
        for b in 0..m {
            let (lo, hi) = (b as f64 / m as f64, (b + 1) as f64 / m as f64);
            let members: Vec<usize> = (0..preds.len())
                .filter(|&i| {
                    let c = preds.confidences[i];
                    (c > lo && c <= hi) || (b == 0 && c == 0.0)
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let acc = members
                .iter()
                .filter(|&&i| preds.predicted[i] == labels[i])
                .count() as f64
                / members.len() as f64;
            let conf = members.iter().map(|&i| preds.confidences[i]).sum::<f64>()
                / members.len() as f64;
            oracle += members.len() as f64 / preds.len() as f64 * (acc - conf).abs();
        }
        let report = compute_ece(&preds, m).unwrap();
        assert_eq!(report.ece, oracle);
        assert!(report.ece >= 0.0 && report.ece <= 1.0);
    }

    #[test]
    fn bin_index_edges() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.1 + 1e-12, 10), 1);
        assert_eq!(bin_index(1.0, 10), 9);
    }

    #[test]
    fn apply_identity_and_unit_temperature_match_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (logits, _) = random_prediction_set(5, 4, 3.0, &mut rng);
        let plain = softmax_rows(&logits);
        let ident = apply_calibrator(&logits, &CalibratorParams::identity()).unwrap();
        assert_eq!(ident.probs.data(), plain.data());
        let t1 = CalibratorParams {
            kind: CalibratorKind::Temperature,
            t: 1.0,
            w: None,
            b: None,
            fallback: false,
        };
        let scaled = apply_calibrator(&logits, &t1).unwrap();
        assert_eq!(scaled.probs.data(), plain.data());
    }

    #[test]
    fn apply_temperature_closed_form() {
        let logits = logits_from_rows(vec![vec![2.0, 0.0]]);
        let p = CalibratorParams {
            kind: CalibratorKind::Temperature,
            t: 2.0,
            w: None,
            b: None,
            fallback: false,
        };
        let preds = apply_calibrator(&logits, &p).unwrap();
        assert!((preds.probs.data()[0] - 0.73106).abs() < 1e-5);
        assert!((preds.probs.data()[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn apply_rejects_nonpositive_temperature() {
        let logits = logits_from_rows(vec![vec![1.0, 0.0]]);
        let p = CalibratorParams {
            kind: CalibratorKind::Temperature,
            t: 0.0,
            w: None,
            b: None,
            fallback: false,
        };
        assert!(apply_calibrator(&logits, &p).is_err());
    }

    #[test]
    fn fit_temperature_matches_grid_oracle() {
        let (logits, labels) = overconfident_fixture(400, 5, 0.8, 47);
        let fit = fit_temperature(&logits, &labels).unwrap();
        assert!(!fit.fallback);

        let (lo, hi) = TEMP_SEARCH_RANGE;
        let mut best = (f64::INFINITY, 1.0);
        for i in 0..1000 {
            let t = (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / 999.0).exp();
            let nll = nll_at_temperature(&logits, &labels, t);
            if nll < best.0 {
                best = (nll, t);
            }
        }
        assert!(
            (fit.t - best.1).abs() <= 1e-2,
            "search {} vs grid {}",
            fit.t,
            best.1
        );
        assert!(fit.t > 1.0, "overconfident set should soften, T={}", fit.t);
        assert!(
            nll_at_temperature(&logits, &labels, fit.t)
                <= nll_at_temperature(&logits, &labels, 1.0) + 1e-9
        );
    }

    #[test]
    fn fit_temperature_is_idempotent_after_rescaling() {
        let (logits, labels) = overconfident_fixture(300, 4, 0.7, 53);
        let first = fit_temperature(&logits, &labels).unwrap();
        let rescaled = Tensor::new(
            logits.shape().to_vec(),
            logits.data().iter().map(|v| v / first.t).collect::<Vec<f64>>(),
        )
        .unwrap();
        let second = fit_temperature(&rescaled, &labels).unwrap();
        assert!(
            (second.t - 1.0).abs() < 1e-2,
            "refit after rescale gave T={}",
            second.t
        );
    }

    #[test]
    fn temperature_preserves_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let (logits, labels) = random_prediction_set(200, 6, 3.0, &mut rng);
        let before = PredictionSet::from_logits(logits.clone(), Some(labels.clone())).unwrap();
        let fit = fit_temperature(&logits, &labels).unwrap();
        let after = apply_calibrator_with_labels(&logits, &labels, &fit).unwrap();
        assert_eq!(before.predicted, after.predicted);
        assert_eq!(before.accuracy().unwrap(), after.accuracy().unwrap());
    }

    #[test]
    fn affine_fits_nest_below_temperature() {
        let (logits, labels) = overconfident_fixture(250, 4, 0.75, 61);
        let ident_nll = nll_at_temperature(&logits, &labels, 1.0);
        let ts = fit_temperature(&logits, &labels).unwrap();
        let ts_nll = calibrated_nll(&logits, &labels, &ts).unwrap();
        let vs = fit_vector_scaling(&logits, &labels).unwrap();
        let vs_nll = calibrated_nll(&logits, &labels, &vs).unwrap();
        let ms = fit_matrix_scaling(&logits, &labels).unwrap();
        let ms_nll = calibrated_nll(&logits, &labels, &ms).unwrap();

        assert!(ts_nll <= ident_nll + 1e-9);
        assert!(vs_nll <= ts_nll + 1e-6, "vector {} vs temp {}", vs_nll, ts_nll);
        assert!(ms_nll <= vs_nll + 1e-6, "matrix {} vs vector {}", ms_nll, vs_nll);

        // Vector scaling must keep W diagonal.
        let w = vs.w.as_ref().unwrap();
        let k = 4;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    assert_eq!(w.data()[i * k + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn affine_identity_init_equals_uncalibrated_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let (logits, labels) = random_prediction_set(50, 3, 2.0, &mut rng);
        let mut eye = vec![0.0; 9];
        for j in 0..3 {
            eye[j * 3 + j] = 1.0;
        }
        let p = CalibratorParams {
            kind: CalibratorKind::Matrix,
            t: 1.0,
            w: Some(Tensor::new(vec![3, 3], eye).unwrap()),
            b: Some(Tensor::zeros(&[3])),
            fallback: false,
        };
        let init = calibrated_nll(&logits, &labels, &p).unwrap();
        let plain = nll_at_temperature(&logits, &labels, 1.0);
        assert!((init - plain).abs() < 1e-12);
    }

    #[test]
    fn importance_weight_arithmetic() {
        // A single d=0.9 output yields w=9 before normalization.
        let d = 0.9f64.clamp(CPCS_CLIP_EPS, 1.0 - CPCS_CLIP_EPS);
        assert!((d / (1.0 - d) - 9.0).abs() < 1e-12);
        // Normalization enforces mean 1 and clipping bounds extreme outputs.
        let w = importance_weights(&[0.0, 0.5, 1.0], CPCS_CLIP_EPS);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&v| v.is_finite() && v > 0.0));
    }

    #[test]
    fn cpcs_with_indistinguishable_domains_recovers_temperature() {
        let (logits, labels) = overconfident_fixture(300, 4, 0.8, 71);
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let d = 8;
        let feats = |rng: &mut ChaCha8Rng, n: usize| {
            Tensor::new(
                vec![n, d],
                (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            )
            .unwrap()
        };
        // All three feature sets drawn from one distribution.
        let fs = feats(&mut rng, 120);
        let ft = feats(&mut rng, 120);
        let fq = feats(&mut rng, 300);
        let cpcs = fit_cpcs(&logits, &labels, &fq, &fs, &ft).unwrap();
        let brier_t = fit_brier_temperature(&logits, &labels).unwrap();
        assert!(
            (cpcs.t - brier_t.t).abs() < 0.05,
            "cpcs {} vs unweighted {}",
            cpcs.t,
            brier_t.t
        );
    }

    #[test]
    fn cpcs_uniform_weights_match_brier_grid() {
        let (logits, labels) = overconfident_fixture(200, 3, 0.85, 79);
        // Constant features force the uniform-weight fallback.
        let fs = Tensor::full(&[40, 4], 0.25);
        let ft = Tensor::full(&[40, 4], 0.25);
        let fq = Tensor::full(&[200, 4], 0.25);
        let cpcs = fit_cpcs(&logits, &labels, &fq, &fs, &ft).unwrap();
        assert!(cpcs.fallback);

        let weights = vec![1.0; 200];
        let (lo, hi) = TEMP_SEARCH_RANGE;
        let mut best = (f64::INFINITY, 1.0);
        for i in 0..1000 {
            let t = (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / 999.0).exp();
            let s = weighted_brier(&logits, &labels, &weights, t);
            if s < best.0 {
                best = (s, t);
            }
        }
        assert!(
            (cpcs.t - best.1).abs() <= 1e-2,
            "cpcs {} vs grid {}",
            cpcs.t,
            best.1
        );
    }

    #[test]
    fn reliability_rows_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let (logits, labels) = random_prediction_set(500, 5, 3.0, &mut rng);
        let preds = PredictionSet::from_logits(logits, Some(labels)).unwrap();
        let report = compute_ece(&preds, 10).unwrap();
        let rows = reliability_rows(&preds, 10).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows.iter().map(|r| r.2).sum::<usize>(), 500);
        // Bounds are contiguous over (0, 1].
        for (i, row) in rows.iter().enumerate() {
            assert!((row.0 - i as f64 / 10.0).abs() < 1e-15);
            assert!((row.1 - (i + 1) as f64 / 10.0).abs() < 1e-15);
        }
        // ECE recomputed from emitted rows is exact.
        let n: usize = rows.iter().map(|r| r.2).sum();
        let recomputed: f64 = rows
            .iter()
            .map(|r| r.2 as f64 / n as f64 * (r.4 - r.3).abs())
            .sum();
        assert_eq!(recomputed, report.ece);

        let csv = reliability_csv(&preds, 10).unwrap();
        assert!(csv.starts_with("bin_low,bin_high,count,avg_conf,accuracy\n"));
        assert_eq!(csv.lines().count(), 11);
    }

    #[test]
    fn confidence_lower_bound_is_one_over_k() {
        let logits = logits_from_rows(vec![vec![0.0; 5]; 3]);
        let preds = PredictionSet::from_logits(logits, None).unwrap();
        for &c in &preds.confidences {
            assert!((c - 0.2).abs() < 1e-12);
        }
    }
}
