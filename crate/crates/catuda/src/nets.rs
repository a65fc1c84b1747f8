//! The CAT network family: 1D-CNN encoder with 256-d bottleneck, linear
//! classification head, domain classifier behind a gradient reversal layer,
//! and the EMA teacher.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CatError, Result};
use crate::graph::{Graph, Var};
use crate::params::{kaiming_uniform, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 256;
const BN_MOMENTUM: f64 = 0.1;
const DROPOUT_P: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub input_length: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBlockIds {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    w: ParamId,
    b: ParamId,
}

/// Conv1D(1->16, k15), Conv1D(16->32, k3), MaxPool/2, Conv1D(32->64, k3),
/// Conv1D(64->128, k3), AdaptiveMaxPool to 128x4, FC 512->256, Dropout,
/// bottleneck FC 256->256, Dropout. Every conv carries BatchNorm + ReLU.
#[derive(Debug, Clone)]
pub struct EncoderIds {
    convs: [ConvBlockIds; 4],
    fc: LinearIds,
    bottleneck: LinearIds,
}

#[derive(Debug, Clone)]
pub struct DomainClassifierIds {
    fc1: LinearIds,
    fc2: LinearIds,
    fc3: LinearIds,
}

fn add_linear(
    params: &mut ParamSet,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) -> LinearIds {
    let w = params.add(
        format!("{prefix}.weight"),
        kaiming_uniform(&[out_dim, in_dim], in_dim, rng),
    );
    let bound = 1.0 / (in_dim as f64).sqrt();
    let bias: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
    let b = params.add(format!("{prefix}.bias"), Tensor::from_vec(bias));
    LinearIds { w, b }
}

fn add_conv_block(
    params: &mut ParamSet,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> ConvBlockIds {
    let fan_in = cin * k;
    let w = params.add(
        format!("{prefix}.weight"),
        kaiming_uniform(&[cout, cin, k], fan_in, rng),
    );
    let bound = 1.0 / (fan_in as f64).sqrt();
    let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-bound..bound)).collect();
    let b = params.add(format!("{prefix}.bias"), Tensor::from_vec(bias));
    let gamma = params.add(format!("{prefix}.bn.gamma"), Tensor::full(&[cout], 1.0));
    let beta = params.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[cout]));
    let running_mean = params.add_buffer(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[cout]));
    let running_var = params.add_buffer(format!("{prefix}.bn.running_var"), Tensor::full(&[cout], 1.0));
    ConvBlockIds {
        w,
        b,
        gamma,
        beta,
        running_mean,
        running_var,
    }
}

pub fn build_encoder(params: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng) -> EncoderIds {
    let convs = [
        add_conv_block(params, &format!("{prefix}.conv1"), 1, 16, 15, rng),
        add_conv_block(params, &format!("{prefix}.conv2"), 16, 32, 3, rng),
        add_conv_block(params, &format!("{prefix}.conv3"), 32, 64, 3, rng),
        add_conv_block(params, &format!("{prefix}.conv4"), 64, 128, 3, rng),
    ];
    let fc = add_linear(params, &format!("{prefix}.fc"), 128 * 4, 256, rng);
    let bottleneck = add_linear(params, &format!("{prefix}.bottleneck"), 256, 256, rng);
    EncoderIds {
        convs,
        fc,
        bottleneck,
    }
}

pub fn build_classifier(
    params: &mut ParamSet,
    prefix: &str,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> LinearIds {
    add_linear(params, prefix, FEATURE_DIM, classes, rng)
}

pub fn build_domain_classifier(
    params: &mut ParamSet,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> DomainClassifierIds {
    DomainClassifierIds {
        fc1: add_linear(params, &format!("{prefix}.fc1"), 256, 1024, rng),
        fc2: add_linear(params, &format!("{prefix}.fc2"), 1024, 1024, rng),
        fc3: add_linear(params, &format!("{prefix}.fc3"), 1024, 1, rng),
    }
}

pub fn linear(g: &mut Graph, params: &ParamSet, ids: &LinearIds, x: Var) -> Result<Var> {
    let w = g.param(params, ids.w);
    let b = g.param(params, ids.b);
    let y = g.matmul(x, w, false, true)?;
    g.add_rows(y, b)
}

fn dropout(g: &mut Graph, x: Var, mode: Mode, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    match (mode, rng.as_deref_mut()) {
        (Mode::Train, Some(rng)) => {
            let n = g.value(x).numel();
            let scale = 1.0 / (1.0 - DROPOUT_P);
            let mask: Vec<f64> = (0..n)
                .map(|_| if rng.gen::<f64>() < DROPOUT_P { 0.0 } else { scale })
                .collect();
            g.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

fn conv_block_train(
    g: &mut Graph,
    params: &mut ParamSet,
    ids: &ConvBlockIds,
    x: Var,
) -> Result<Var> {
    let w = g.param(params, ids.w);
    let b = g.param(params, ids.b);
    let y = g.conv1d(x, w, b)?;
    let gamma = g.param(params, ids.gamma);
    let beta = g.param(params, ids.beta);
    let (y, batch_mean, batch_var) = g.batchnorm_train(y, gamma, beta)?;
    // Running statistics follow the batch outside the graph; the running
    // variance uses the unbiased estimate.
    let shape = g.value(y).shape();
    let n = (shape[0] * shape[2]) as f64;
    let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    for (rm, &m) in params
        .get_mut(ids.running_mean)
        .value
        .data_mut()
        .iter_mut()
        .zip(&batch_mean)
    {
        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
    }
    for (rv, &v) in params
        .get_mut(ids.running_var)
        .value
        .data_mut()
        .iter_mut()
        .zip(&batch_var)
    {
        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v * unbias;
    }
    g.relu(y)
}

fn conv_block_eval(
    g: &mut Graph,
    params: &ParamSet,
    ids: &ConvBlockIds,
    x: Var,
) -> Result<Var> {
    let w = g.param(params, ids.w);
    let b = g.param(params, ids.b);
    let y = g.conv1d(x, w, b)?;
    let gamma = g.param(params, ids.gamma);
    let beta = g.param(params, ids.beta);
    let mean = params.value(ids.running_mean).data().to_vec();
    let var = params.value(ids.running_var).data().to_vec();
    let y = g.batchnorm_eval(y, gamma, beta, &mean, &var)?;
    g.relu(y)
}

/// Evaluation-mode encoder forward against a read-only parameter store.
pub fn encoder_forward_eval(
    g: &mut Graph,
    params: &ParamSet,
    enc: &EncoderIds,
    x: Var,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[1] != 1 {
        return Err(CatError::Shape {
            op: "encoder_forward",
            detail: format!("expected (B, 1, L), got {:?}", shape),
        });
    }
    let mut h = conv_block_eval(g, params, &enc.convs[0], x)?;
    h = conv_block_eval(g, params, &enc.convs[1], h)?;
    h = g.max_pool1d(h)?;
    h = conv_block_eval(g, params, &enc.convs[2], h)?;
    h = conv_block_eval(g, params, &enc.convs[3], h)?;
    h = g.adaptive_max_pool1d(h, 4)?;
    h = g.reshape(h, vec![shape[0], 128 * 4])?;
    h = linear(g, params, &enc.fc, h)?;
    h = g.relu(h)?;
    h = linear(g, params, &enc.bottleneck, h)?;
    g.relu(h)
}

/// Encoder forward: (B, 1, L) -> (B, 256) features.
pub fn encoder_forward(
    g: &mut Graph,
    params: &mut ParamSet,
    enc: &EncoderIds,
    x: Var,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if mode == Mode::Eval {
        return encoder_forward_eval(g, params, enc, x);
    }
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[1] != 1 {
        return Err(CatError::Shape {
            op: "encoder_forward",
            detail: format!("expected (B, 1, L), got {:?}", shape),
        });
    }
    let mut h = conv_block_train(g, params, &enc.convs[0], x)?;
    h = conv_block_train(g, params, &enc.convs[1], h)?;
    h = g.max_pool1d(h)?;
    h = conv_block_train(g, params, &enc.convs[2], h)?;
    h = conv_block_train(g, params, &enc.convs[3], h)?;
    h = g.adaptive_max_pool1d(h, 4)?;
    let b = shape[0];
    h = g.reshape(h, vec![b, 128 * 4])?;
    h = linear(g, params, &enc.fc, h)?;
    h = g.relu(h)?;
    h = dropout(g, h, mode, &mut rng)?;
    h = linear(g, params, &enc.bottleneck, h)?;
    h = g.relu(h)?;
    dropout(g, h, mode, &mut rng)
}

/// Domain classifier forward on (B, 256) features through the gradient
/// reversal layer; returns per-sample source probability (B, 1).
pub fn discriminate(
    g: &mut Graph,
    params: &ParamSet,
    dc: &DomainClassifierIds,
    features: Var,
    lambda: f64,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let h = g.grad_reverse(features, lambda)?;
    let h = linear(g, params, &dc.fc1, h)?;
    let h = g.relu(h)?;
    let h = dropout(g, h, mode, &mut rng)?;
    let h = linear(g, params, &dc.fc2, h)?;
    let h = g.relu(h)?;
    let h = dropout(g, h, mode, &mut rng)?;
    let h = linear(g, params, &dc.fc3, h)?;
    g.sigmoid(h)
}

/// The student: shared encoder, classification head, domain classifier.
#[derive(Debug, Clone)]
pub struct CatModel {
    pub cfg: NetConfig,
    pub params: ParamSet,
    pub encoder: EncoderIds,
    pub classifier: LinearIds,
    pub discriminator: DomainClassifierIds,
}

impl CatModel {
    pub fn new(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let encoder = build_encoder(&mut params, "encoder", rng);
        let classifier = build_classifier(&mut params, "classifier", cfg.classes, rng);
        let discriminator = build_domain_classifier(&mut params, "domain_classifier", rng);
        CatModel {
            cfg,
            params,
            encoder,
            classifier,
            discriminator,
        }
    }

    /// (B, 1, L) -> (features (B, 256), logits (B, K)).
    pub fn student_forward(
        &mut self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let shape = g.value(x).shape();
        if shape.len() != 3 || shape[2] != self.cfg.input_length {
            return Err(CatError::Shape {
                op: "student_forward",
                detail: format!(
                    "expected (B, 1, {}), got {:?}",
                    self.cfg.input_length, shape
                ),
            });
        }
        let features = encoder_forward(g, &mut self.params, &self.encoder, x, mode, rng)?;
        let logits = linear(g, &self.params, &self.classifier, features)?;
        Ok((features, logits))
    }

    pub fn discriminate(
        &mut self,
        g: &mut Graph,
        features: Var,
        lambda: f64,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        discriminate(
            g,
            &self.params,
            &self.discriminator,
            features,
            lambda,
            mode,
            rng,
        )
    }

    /// Trainable encoder + classifier parameters (the theta of the objective).
    pub fn student_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| {
                let p = self.params.get(id);
                p.trainable && !p.name.starts_with("domain_classifier")
            })
            .collect()
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.get(id).name.starts_with("domain_classifier"))
            .collect()
    }
}

/// Batched evaluation-mode forward pass; returns (features, logits) tensors.
pub fn eval_forward(
    params: &ParamSet,
    enc: &EncoderIds,
    head: &LinearIds,
    batch: Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.input(batch);
    let features = encoder_forward_eval(&mut g, params, enc, x)?;
    let logits = linear(&mut g, params, head, features)?;
    Ok((g.value(features).clone(), g.value(logits).clone()))
}

/// EMA copy of encoder + classifier, including batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub params: ParamSet,
    pub encoder: EncoderIds,
    pub classifier: LinearIds,
    pub ema_alpha: f64,
    /// (teacher id, student id) pairs in construction order.
    pairs: Vec<(ParamId, ParamId)>,
}

impl TeacherState {
    /// Initialize the teacher as an exact copy of the student's encoder and
    /// classification head.
    pub fn init_from_student(model: &CatModel, ema_alpha: f64) -> Self {
        let mut params = ParamSet::new();
        let mut pairs = Vec::new();
        for id in model.params.ids() {
            let p = model.params.get(id);
            if p.name.starts_with("domain_classifier") {
                continue;
            }
            let tid = if p.trainable {
                params.add(format!("teacher_{}", p.name), p.value.clone())
            } else {
                params.add_buffer(format!("teacher_{}", p.name), p.value.clone())
            };
            pairs.push((tid, id));
        }
        // Rebuild the id maps against the teacher store: construction order is
        // identical, so re-running the builders on a scratch store would yield
        // the same layout; instead remap by name.
        let encoder = remap_encoder(&params, &model.encoder, &model.params);
        let classifier = LinearIds {
            w: params.find("teacher_classifier.weight").expect("teacher head"),
            b: params.find("teacher_classifier.bias").expect("teacher head"),
        };
        TeacherState {
            params,
            encoder,
            classifier,
            ema_alpha,
            pairs,
        }
    }

    /// theta_teacher <- alpha * theta_teacher + (1 - alpha) * theta_student,
    /// applied to every weight and every running statistic.
    pub fn ema_update(&mut self, student: &ParamSet) -> Result<()> {
        let alpha = self.ema_alpha;
        for &(tid, sid) in &self.pairs {
            let sv = student.value(sid);
            let tp = self.params.get_mut(tid);
            if !tp.value.same_shape(sv) {
                return Err(CatError::Shape {
                    op: "ema_update",
                    detail: format!(
                        "teacher `{}` {:?} vs student {:?}",
                        tp.name,
                        tp.value.shape(),
                        sv.shape()
                    ),
                });
            }
            for (t, s) in tp.value.data_mut().iter_mut().zip(sv.data()) {
                *t = alpha * *t + (1.0 - alpha) * s;
            }
        }
        Ok(())
    }

    /// Evaluation-mode logits on a (B, 1, L) batch.
    pub fn predict(&self, batch: Tensor) -> Result<Tensor> {
        let (_, logits) = eval_forward(&self.params, &self.encoder, &self.classifier, batch)?;
        Ok(logits)
    }
}

fn remap_encoder(teacher: &ParamSet, enc: &EncoderIds, student: &ParamSet) -> EncoderIds {
    let find = |sid: ParamId| -> ParamId {
        let name = format!("teacher_{}", student.get(sid).name);
        teacher.find(&name).expect("teacher mirrors student layout")
    };
    EncoderIds {
        convs: [0, 1, 2, 3].map(|i| {
            let c = &enc.convs[i];
            ConvBlockIds {
                w: find(c.w),
                b: find(c.b),
                gamma: find(c.gamma),
                beta: find(c.beta),
                running_mean: find(c.running_mean),
                running_var: find(c.running_var),
            }
        }),
        fc: LinearIds {
            w: find(enc.fc.w),
            b: find(enc.fc.b),
        },
        bottleneck: LinearIds {
            w: find(enc.bottleneck.w),
            b: find(enc.bottleneck.b),
        },
    }
}
