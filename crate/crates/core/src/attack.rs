//! Frame-level membership classifier.
//!
//! Every parameter type in the active [`FeatureConfig`] goes through its own
//! one-hidden-layer encoder to a 64-dim code; the codes are concatenated in
//! config order and fed to a three-hidden-layer classifier with a sigmoid
//! output. Encoders and classifier are trained jointly with class-weighted
//! binary cross-entropy.

use crate::error::{Error, Result};
use crate::nnet::{
    bce_from_logit, chain, parse_row, read_section, write_row, Activation, ActivationTrace,
    DenseNet, LayerGradients, LineReader,
};
use crate::target::WhiteBoxTrace;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const ENCODING_DIM: usize = 64;
pub const ATTACK_MAGIC: &str = "MIAAUDIT-ATTACK v1";

/// Samples per parallel gradient chunk. Fixed so the reduction order, and
/// therefore the trained weights, do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    FinalOutput,
    PenultimateOutput,
    /// Weight gradient of the last combiner layer.
    GradLast,
    GradLast1,
    GradLast2,
    GradBranchEyes,
    GradBranchFace,
    GradBranchGrid,
    Loss,
    Label,
}

impl ParamType {
    pub fn name(self) -> &'static str {
        match self {
            ParamType::FinalOutput => "final_output",
            ParamType::PenultimateOutput => "penultimate_output",
            ParamType::GradLast => "grad_last",
            ParamType::GradLast1 => "grad_last_1",
            ParamType::GradLast2 => "grad_last_2",
            ParamType::GradBranchEyes => "grad_branch_eyes",
            ParamType::GradBranchFace => "grad_branch_face",
            ParamType::GradBranchGrid => "grad_branch_face_grid",
            ParamType::Loss => "loss",
            ParamType::Label => "label",
        }
    }

    pub fn is_gradient(self) -> bool {
        matches!(
            self,
            ParamType::GradLast
                | ParamType::GradLast1
                | ParamType::GradLast2
                | ParamType::GradBranchEyes
                | ParamType::GradBranchFace
                | ParamType::GradBranchGrid
        )
    }

    fn extract(self, t: &WhiteBoxTrace) -> Vec<f64> {
        match self {
            ParamType::FinalOutput => t.final_output.clone(),
            ParamType::PenultimateOutput => t.penultimate_output.clone(),
            ParamType::GradLast => t.grads_last3[0].clone(),
            ParamType::GradLast1 => t.grads_last3[1].clone(),
            ParamType::GradLast2 => t.grads_last3[2].clone(),
            ParamType::GradBranchEyes => t.grads_branch_last[0].clone(),
            ParamType::GradBranchFace => t.grads_branch_last[1].clone(),
            ParamType::GradBranchGrid => t.grads_branch_last[2].clone(),
            ParamType::Loss => vec![t.loss],
            ParamType::Label => t.label.to_vec(),
        }
    }
}

/// The five input configurations compared for the frame classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeatureConfig {
    TwoOutputs,
    Plus2Grad,
    Plus5Grad,
    Plus2GradLossLabel,
    Plus3GradLossLabel,
}

impl FeatureConfig {
    pub const ALL: [FeatureConfig; 5] = [
        FeatureConfig::TwoOutputs,
        FeatureConfig::Plus2Grad,
        FeatureConfig::Plus5Grad,
        FeatureConfig::Plus2GradLossLabel,
        FeatureConfig::Plus3GradLossLabel,
    ];

    pub fn param_types(self) -> &'static [ParamType] {
        use ParamType::*;
        match self {
            FeatureConfig::TwoOutputs => &[FinalOutput, PenultimateOutput],
            // "the two gradients before the last gradient": grad_L itself is excluded.
            FeatureConfig::Plus2Grad => &[FinalOutput, PenultimateOutput, GradLast1, GradLast2],
            FeatureConfig::Plus5Grad => &[
                FinalOutput,
                PenultimateOutput,
                GradLast1,
                GradLast2,
                GradBranchGrid,
                GradBranchFace,
                GradBranchEyes,
            ],
            FeatureConfig::Plus2GradLossLabel => &[
                FinalOutput,
                PenultimateOutput,
                GradLast1,
                GradLast2,
                Loss,
                Label,
            ],
            FeatureConfig::Plus3GradLossLabel => &[
                FinalOutput,
                PenultimateOutput,
                GradLast,
                GradLast1,
                GradLast2,
                Loss,
                Label,
            ],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureConfig::TwoOutputs => "TWO_OUTPUTS",
            FeatureConfig::Plus2Grad => "PLUS_2GRAD",
            FeatureConfig::Plus5Grad => "PLUS_5GRAD",
            FeatureConfig::Plus2GradLossLabel => "PLUS_2GRAD_LOSS_LABEL",
            FeatureConfig::Plus3GradLossLabel => "PLUS_3GRAD_LOSS_LABEL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGroup {
    pub kind: ParamType,
    pub values: Vec<f64>,
}

pub fn assemble_features(
    trace: &WhiteBoxTrace,
    config: FeatureConfig,
) -> Result<Vec<FeatureGroup>> {
    config
        .param_types()
        .iter()
        .map(|&kind| {
            let values = kind.extract(trace);
            if values.is_empty() {
                return Err(Error::invalid(format!(
                    "trace has no `{}` values",
                    kind.name()
                )));
            }
            Ok(FeatureGroup { kind, values })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackHyper {
    pub encoder_hidden: usize,
    pub classifier_hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for AttackHyper {
    fn default() -> Self {
        Self {
            encoder_hidden: 128,
            classifier_hidden: vec![256, 128, 64],
            epochs: 20,
            learning_rate: 0.01,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackModel {
    pub config: FeatureConfig,
    pub encoders: Vec<DenseNet>,
    pub classifier: DenseNet,
    /// Per-group, per-coordinate divisors; all ones for non-gradient groups.
    pub scales: Vec<Vec<f64>>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_bce: f64,
    pub valid_bce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Entry 0 is the untrained network.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn untrained(&self) -> &EpochRecord {
        &self.epochs[0]
    }
}

/// Labelled training example: assembled groups plus membership label.
pub struct LabelledFrame<'a> {
    pub groups: &'a [FeatureGroup],
    pub label: u8,
}

struct AttackForward {
    encoder_traces: Vec<ActivationTrace>,
    codes: Vec<f64>,
    classifier: ActivationTrace,
}

pub struct AttackGradients {
    pub encoders: Vec<LayerGradients>,
    pub classifier: LayerGradients,
    pub loss: f64,
}

impl AttackGradients {
    fn zeros_like(model: &AttackModel) -> Self {
        Self {
            encoders: model
                .encoders
                .iter()
                .map(LayerGradients::zeros_like)
                .collect(),
            classifier: LayerGradients::zeros_like(&model.classifier),
            loss: 0.0,
        }
    }

    fn accumulate(&mut self, other: &AttackGradients, scale: f64) {
        for (a, b) in self.encoders.iter_mut().zip(&other.encoders) {
            a.accumulate(b, scale);
        }
        self.classifier.accumulate(&other.classifier, scale);
        self.loss += scale * other.loss;
    }

    /// Encoders in config order, then the classifier (matches [`AttackModel::params`]).
    pub fn flatten(&self) -> Vec<f64> {
        self.encoders
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|g| g.flatten())
            .collect()
    }
}

impl AttackModel {
    /// Untrained model with unit scales. `input_dims` gives the raw length of
    /// each group in config order.
    pub fn init(
        config: FeatureConfig,
        input_dims: &[usize],
        hyper: &AttackHyper,
        seed: u64,
    ) -> Result<Self> {
        let kinds = config.param_types();
        if input_dims.len() != kinds.len() {
            return Err(Error::dim("feature groups", kinds.len(), input_dims.len()));
        }
        if hyper.classifier_hidden.len() != 3 {
            return Err(Error::invalid(
                "classifier must have exactly three hidden layers",
            ));
        }
        let encoders = input_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                DenseNet::init(
                    &chain(
                        &[d, hyper.encoder_hidden, ENCODING_DIM],
                        Activation::Relu,
                        Activation::Relu,
                    ),
                    seed.wrapping_add(i as u64 + 1),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut widths = vec![ENCODING_DIM * kinds.len()];
        widths.extend(&hyper.classifier_hidden);
        widths.push(1);
        let classifier =
            DenseNet::init(&chain(&widths, Activation::Relu, Activation::Sigmoid), seed)?;
        Ok(Self {
            config,
            encoders,
            classifier,
            scales: input_dims.iter().map(|&d| vec![1.0; d]).collect(),
            seed,
        })
    }

    fn normalize(&self, groups: &[FeatureGroup]) -> Result<Vec<Vec<f64>>> {
        let kinds = self.config.param_types();
        if groups.len() != kinds.len() {
            return Err(Error::dim("feature groups", kinds.len(), groups.len()));
        }
        groups
            .iter()
            .zip(kinds)
            .zip(&self.scales)
            .map(|((g, &k), s)| {
                if g.kind != k {
                    return Err(Error::invalid(format!(
                        "expected group `{}`, found `{}`",
                        k.name(),
                        g.kind.name()
                    )));
                }
                if g.values.len() != s.len() {
                    return Err(Error::dim(k.name(), s.len(), g.values.len()));
                }
                Ok(g.values.iter().zip(s).map(|(v, s)| v / s).collect())
            })
            .collect()
    }

    fn forward_normalized(&self, inputs: &[Vec<f64>]) -> Result<AttackForward> {
        let mut encoder_traces = Vec::with_capacity(inputs.len());
        let mut codes = Vec::with_capacity(ENCODING_DIM * inputs.len());
        for (enc, x) in self.encoders.iter().zip(inputs) {
            let tr = enc.forward(x)?;
            codes.extend_from_slice(tr.output());
            encoder_traces.push(tr);
        }
        let classifier = self.classifier.forward(&codes)?;
        Ok(AttackForward {
            encoder_traces,
            codes,
            classifier,
        })
    }

    fn gradients_normalized(
        &self,
        inputs: &[Vec<f64>],
        label: u8,
        weight: f64,
    ) -> Result<AttackGradients> {
        let mut acc = AttackGradients::zeros_like(self);
        self.accumulate_normalized(inputs, label, weight, &mut acc, 1.0)?;
        Ok(acc)
    }

    /// Adds `scale ×` this example's loss and gradients into `acc`.
    fn accumulate_normalized(
        &self,
        inputs: &[Vec<f64>],
        label: u8,
        weight: f64,
        acc: &mut AttackGradients,
        scale: f64,
    ) -> Result<()> {
        let fw = self.forward_normalized(inputs)?;
        let z = fw.classifier.pre_activations[fw.classifier.pre_activations.len() - 1][0];
        let p = fw.classifier.output()[0];
        let y = label as f64;
        acc.loss += scale * weight * bce_from_logit(z, y);
        let d_codes = self.classifier.backprop_accumulate(
            &fw.codes,
            &fw.classifier,
            vec![weight * (p - y)],
            &mut acc.classifier,
            scale,
        )?;
        for ((((enc, x), tr), d), g) in self
            .encoders
            .iter()
            .zip(inputs)
            .zip(&fw.encoder_traces)
            .zip(d_codes.chunks_exact(ENCODING_DIM))
            .zip(acc.encoders.iter_mut())
        {
            enc.backprop_output_grad_accumulate(x, tr, d, g, scale)?;
        }
        Ok(())
    }

    /// Weighted BCE and its exact gradient with respect to every encoder and
    /// classifier parameter, for one example.
    pub fn loss_and_gradients(
        &self,
        groups: &[FeatureGroup],
        label: u8,
        weight: f64,
    ) -> Result<AttackGradients> {
        let inputs = self.normalize(groups)?;
        self.gradients_normalized(&inputs, label, weight)
    }

    pub fn params(&self) -> Vec<f64> {
        self.encoders
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|n| n.params())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self
            .encoders
            .iter()
            .chain(std::iter::once(&self.classifier))
            .map(|n| n.param_count())
            .sum();
        if flat.len() != total {
            return Err(Error::dim("attack parameters", total, flat.len()));
        }
        let mut offset = 0;
        for net in self
            .encoders
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
        {
            let n = net.param_count();
            net.set_params(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    fn apply(&mut self, g: &AttackGradients, lr: f64) -> Result<()> {
        for (enc, ge) in self.encoders.iter_mut().zip(&g.encoders) {
            enc.apply_gradients(ge, lr)?;
        }
        self.classifier.apply_gradients(&g.classifier, lr)
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{ATTACK_MAGIC}");
        let _ = writeln!(out, "config {}", self.config.name());
        let _ = writeln!(out, "seed {}", self.seed);
        for (kind, scale) in self.config.param_types().iter().zip(&self.scales) {
            let _ = write!(out, "scale {} {} ", kind.name(), scale.len());
            write_row(&mut out, scale);
        }
        for net in self
            .encoders
            .iter()
            .chain(std::iter::once(&self.classifier))
        {
            out.push_str(&net.to_checkpoint());
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut reader = LineReader::new(text);
        if reader.next_line()? != ATTACK_MAGIC {
            return Err(Error::parse(1, "missing attack manifest header"));
        }
        let config = reader
            .next_line()?
            .strip_prefix("config ")
            .and_then(FeatureConfig::parse)
            .ok_or_else(|| Error::parse(2, "bad config line"))?;
        let seed = reader
            .next_line()?
            .strip_prefix("seed ")
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::parse(3, "bad seed line"))?;
        let mut scales = Vec::new();
        for kind in config.param_types() {
            let line = reader.next_line()?;
            let n = reader.line_no();
            let rest = line
                .strip_prefix("scale ")
                .and_then(|l| l.strip_prefix(kind.name()))
                .and_then(|l| l.strip_prefix(' '))
                .ok_or_else(|| {
                    Error::parse(n, format!("expected scale line for `{}`", kind.name()))
                })?;
            let (len, values) = rest
                .split_once(' ')
                .ok_or_else(|| Error::parse(n, "scale line has no values"))?;
            let len: usize = len
                .parse()
                .map_err(|_| Error::parse(n, "bad scale length"))?;
            let row = parse_row(values, n, len)?;
            if row.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::parse(n, "scales must be positive"));
            }
            scales.push(row);
        }
        let mut encoders = Vec::new();
        for (kind, scale) in config.param_types().iter().zip(&scales) {
            let enc = read_section(&mut reader)?;
            if enc.in_dim() != scale.len() || enc.out_dim() != ENCODING_DIM {
                return Err(Error::invalid(format!(
                    "encoder for `{}` has wrong shape",
                    kind.name()
                )));
            }
            encoders.push(enc);
        }
        let classifier = read_section(&mut reader)?;
        if classifier.in_dim() != ENCODING_DIM * encoders.len()
            || classifier.out_dim() != 1
            || classifier.layers()[classifier.depth() - 1].activation() != Activation::Sigmoid
        {
            return Err(Error::invalid("classifier has wrong shape"));
        }
        if !reader.is_exhausted() {
            return Err(Error::parse(
                reader.line_no() + 1,
                "trailing content after attack model",
            ));
        }
        Ok(Self {
            config,
            encoders,
            classifier,
            scales,
            seed,
        })
    }
}

pub fn attack_forward(model: &AttackModel, groups: &[FeatureGroup]) -> Result<f64> {
    let inputs = model.normalize(groups)?;
    Ok(model.forward_normalized(&inputs)?.classifier.output()[0])
}

/// Per-coordinate population standard deviation of each gradient group over
/// the training frames; 1 for other groups and for constant coordinates.
pub fn fit_scales(config: FeatureConfig, frames: &[&[FeatureGroup]]) -> Result<Vec<Vec<f64>>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("no training frames"))?;
    config
        .param_types()
        .iter()
        .enumerate()
        .map(|(gi, kind)| {
            let d = first[gi].values.len();
            if !kind.is_gradient() {
                return Ok(vec![1.0; d]);
            }
            let n = frames.len() as f64;
            let mut mean = vec![0.0; d];
            for f in frames {
                if f[gi].values.len() != d {
                    return Err(Error::dim(kind.name(), d, f[gi].values.len()));
                }
                for (m, v) in mean.iter_mut().zip(&f[gi].values) {
                    *m += v / n;
                }
            }
            let mut var = vec![0.0; d];
            for f in frames {
                for ((s, v), m) in var.iter_mut().zip(&f[gi].values).zip(&mean) {
                    *s += (v - m) * (v - m) / n;
                }
            }
            Ok(var
                .into_iter()
                .map(|v| {
                    let s = v.sqrt();
                    if s > 1e-12 && s.is_finite() {
                        s
                    } else {
                        1.0
                    }
                })
                .collect())
        })
        .collect()
}

fn mean_bce(model: &AttackModel, inputs: &[Vec<Vec<f64>>], labels: &[u8]) -> Result<f64> {
    let total: f64 = inputs
        .par_iter()
        .zip(labels)
        .map(|(x, &y)| {
            let fw = model.forward_normalized(x)?;
            let z = fw.classifier.pre_activations[fw.classifier.pre_activations.len() - 1][0];
            Ok(bce_from_logit(z, y as f64))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total / inputs.len() as f64)
}

/// Trains the encoders and classifier jointly by mini-batch SGD on
/// inverse-frequency-weighted BCE and returns the checkpoint with the lowest
/// validation BCE (ties keep the earliest epoch).
pub fn train_attack(
    train: &[LabelledFrame<'_>],
    valid: &[LabelledFrame<'_>],
    config: FeatureConfig,
    hyper: &AttackHyper,
    seed: u64,
) -> Result<(AttackModel, TrainingHistory)> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid(
            "attack training and validation sets must be nonempty",
        ));
    }
    let n_pos = train.iter().filter(|f| f.label == 1).count();
    let n_neg = train.iter().filter(|f| f.label == 0).count();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    if n_pos + n_neg != train.len() || valid.iter().any(|f| f.label > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if !(hyper.learning_rate > 0.0) || hyper.batch_size == 0 {
        return Err(Error::invalid(
            "learning rate and batch size must be positive",
        ));
    }
    let n = train.len() as f64;
    let class_weight = [n / (2.0 * n_neg as f64), n / (2.0 * n_pos as f64)];

    let groups: Vec<&[FeatureGroup]> = train.iter().map(|f| f.groups).collect();
    let dims: Vec<usize> = groups[0].iter().map(|g| g.values.len()).collect();
    let mut model = AttackModel::init(config, &dims, hyper, seed)?;
    model.scales = fit_scales(config, &groups)?;

    let train_x = train
        .iter()
        .map(|f| model.normalize(f.groups))
        .collect::<Result<Vec<_>>>()?;
    let train_y: Vec<u8> = train.iter().map(|f| f.label).collect();
    let valid_x = valid
        .iter()
        .map(|f| model.normalize(f.groups))
        .collect::<Result<Vec<_>>>()?;
    let valid_y: Vec<u8> = valid.iter().map(|f| f.label).collect();

    let mut history = vec![EpochRecord {
        epoch: 0,
        train_bce: mean_bce(&model, &train_x, &train_y)?,
        valid_bce: mean_bce(&model, &valid_x, &valid_y)?,
    }];
    let mut best = (0usize, model.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let partials = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut acc = AttackGradients::zeros_like(&model);
                    for &i in chunk {
                        model.accumulate_normalized(
                            &train_x[i],
                            train_y[i],
                            class_weight[train_y[i] as usize],
                            &mut acc,
                            1.0,
                        )?;
                    }
                    Ok(acc)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e: Error| match e {
                    Error::Numerical { layer, context } => Error::Divergence {
                        epoch,
                        context: format!("layer {layer}: {context}"),
                    },
                    other => other,
                })?;
            let mut total = AttackGradients::zeros_like(&model);
            for p in &partials {
                total.accumulate(p, 1.0 / batch.len() as f64);
            }
            model.apply(&total, hyper.learning_rate)?;
        }
        let record = EpochRecord {
            epoch,
            train_bce: mean_bce(&model, &train_x, &train_y)?,
            valid_bce: mean_bce(&model, &valid_x, &valid_y)?,
        };
        if !record.train_bce.is_finite() || !record.valid_bce.is_finite() {
            return Err(Error::Divergence {
                epoch,
                context: "attack BCE is not finite".into(),
            });
        }
        if record.valid_bce < history[best.0].valid_bce {
            best = (epoch, model.clone());
        }
        history.push(record);
    }
    Ok((
        best.1,
        TrainingHistory {
            epochs: history,
            best_epoch: best.0,
        },
    ))
}

/// One probability per frame, in frame order.
pub fn predict_frames(model: &AttackModel, frames: &[Vec<FeatureGroup>]) -> Result<Vec<f64>> {
    frames
        .par_iter()
        .map(|g| attack_forward(model, g))
        .collect()
}
