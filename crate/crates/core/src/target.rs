//! The audited model: three dense branches (both eyes, face, face grid) feeding
//! a dense combiner that regresses 2-D gaze, and the white-box probe that
//! extracts per-frame attack inputs.

use crate::cohort::{FeatureDims, Frame};
use crate::error::{Error, Result};
use crate::nnet::{
    chain, mse, read_section, Activation, ActivationTrace, DenseNet, LayerGradients, LineReader,
    LossKind,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const TARGET_MAGIC: &str = "MIAAUDIT-TARGET v1 sections=eyes,face,face_grid,combiner";

/// Layer widths of every sub-network, inputs first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub feature_dims: FeatureDims,
    pub eyes_widths: Vec<usize>,
    pub face_widths: Vec<usize>,
    pub grid_widths: Vec<usize>,
    pub combiner_widths: Vec<usize>,
}

impl TargetConfig {
    /// Default layout: branches `in → 64 → 16` (grid `in → 32 → 8`) and a
    /// four-layer combiner `40 → 32 → 16 → 8 → 2`.
    pub fn for_dims(feature_dims: FeatureDims) -> Self {
        Self {
            feature_dims,
            eyes_widths: vec![2 * feature_dims.eye, 64, 16],
            face_widths: vec![feature_dims.face, 64, 16],
            grid_widths: vec![feature_dims.face_grid, 32, 8],
            combiner_widths: vec![40, 32, 16, 8, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dims;
        let branches = [
            ("eyes", &self.eyes_widths, 2 * d.eye),
            ("face", &self.face_widths, d.face),
            ("face_grid", &self.grid_widths, d.face_grid),
        ];
        let mut branch_out = 0;
        for (name, widths, input) in branches {
            if widths.len() < 2 {
                return Err(Error::invalid(format!(
                    "{name} branch needs at least one layer"
                )));
            }
            if widths[0] != input {
                return Err(Error::dim(format!("{name} branch input"), input, widths[0]));
            }
            branch_out += widths[widths.len() - 1];
        }
        let c = &self.combiner_widths;
        if c.len() < 4 {
            return Err(Error::invalid(format!(
                "combiner depth {} < 3; three last-layer gradients are required",
                c.len().saturating_sub(1)
            )));
        }
        if c[0] != branch_out {
            return Err(Error::dim(
                "combiner input (sum of branch outputs)",
                branch_out,
                c[0],
            ));
        }
        if c[c.len() - 1] != 2 {
            return Err(Error::dim("combiner output", 2, c[c.len() - 1]));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: usize,
    /// Mean per-frame loss on the training frames after each epoch.
    pub train_mse: Vec<f64>,
    pub heldout_mse: Option<f64>,
}

impl TrainingLog {
    pub fn final_train_mse(&self) -> Option<f64> {
        self.train_mse.last().copied()
    }

    /// `heldout − train`, the memorization signal the attack feeds on.
    pub fn generalization_gap(&self) -> Option<f64> {
        Some(self.heldout_mse? - self.final_train_mse()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub eyes: DenseNet,
    pub face: DenseNet,
    pub face_grid: DenseNet,
    pub combiner: DenseNet,
    pub log: TrainingLog,
}

/// Per-frame attack inputs collected from the target.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteBoxTrace {
    pub final_output: Vec<f64>,
    pub penultimate_output: Vec<f64>,
    /// Weight gradients of the last three combiner layers, last layer first,
    /// each flattened row-major.
    pub grads_last3: [Vec<f64>; 3],
    /// Last-layer weight gradient of the eyes, face and face-grid branches.
    pub grads_branch_last: [Vec<f64>; 3],
    pub loss: f64,
    pub label: [f64; 2],
}

struct Forward {
    eyes_in: Vec<f64>,
    eyes: ActivationTrace,
    face: ActivationTrace,
    grid: ActivationTrace,
    comb_in: Vec<f64>,
    comb: ActivationTrace,
}

pub struct TargetGradients {
    pub eyes: LayerGradients,
    pub face: LayerGradients,
    pub face_grid: LayerGradients,
    pub combiner: LayerGradients,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

pub fn build_target(config: &TargetConfig, seed: u64) -> Result<TargetModel> {
    config.validate()?;
    let net = |w: &[usize], last, offset: u64| {
        DenseNet::init(&chain(w, Activation::Relu, last), seed.wrapping_add(offset))
    };
    Ok(TargetModel {
        eyes: net(&config.eyes_widths, Activation::Relu, 0)?,
        face: net(&config.face_widths, Activation::Relu, 1)?,
        face_grid: net(&config.grid_widths, Activation::Relu, 2)?,
        combiner: net(&config.combiner_widths, Activation::Identity, 3)?,
        log: TrainingLog::default(),
    })
}

impl TargetModel {
    fn check_frame(&self, frame: &Frame) -> Result<()> {
        let checks = [
            ("left_eye", self.eyes.in_dim() / 2, frame.left_eye.len()),
            ("right_eye", self.eyes.in_dim() / 2, frame.right_eye.len()),
            ("face", self.face.in_dim(), frame.face.len()),
            ("face_grid", self.face_grid.in_dim(), frame.face_grid.len()),
        ];
        for (name, want, got) in checks {
            if want != got {
                return Err(Error::dim(name, want, got));
            }
        }
        Ok(())
    }

    fn forward(&self, frame: &Frame) -> Result<Forward> {
        self.check_frame(frame)?;
        let eyes_in: Vec<f64> = frame
            .left_eye
            .iter()
            .chain(&frame.right_eye)
            .copied()
            .collect();
        let eyes = self.eyes.forward(&eyes_in)?;
        let face = self.face.forward(&frame.face)?;
        let grid = self.face_grid.forward(&frame.face_grid)?;
        let comb_in: Vec<f64> = eyes
            .output()
            .iter()
            .chain(face.output())
            .chain(grid.output())
            .copied()
            .collect();
        let comb = self.combiner.forward(&comb_in)?;
        Ok(Forward {
            eyes_in,
            eyes,
            face,
            grid,
            comb_in,
            comb,
        })
    }

    pub fn predict(&self, frame: &Frame) -> Result<[f64; 2]> {
        let out = self.forward(frame)?.comb;
        let y = out.output();
        Ok([y[0], y[1]])
    }

    /// Squared-error loss of one frame.
    pub fn frame_loss(&self, frame: &Frame) -> Result<f64> {
        Ok(mse(&self.predict(frame)?, &frame.gaze))
    }

    pub fn mean_loss<'a>(&self, frames: impl IntoIterator<Item = &'a Frame>) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for f in frames {
            sum += self.frame_loss(f)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::invalid("no frames"));
        }
        Ok(sum / n as f64)
    }

    /// Exact gradients of the squared-error gaze loss for one frame.
    pub fn gradients(&self, frame: &Frame) -> Result<(TargetGradients, Vec<f64>)> {
        let mut acc = self.zero_grads();
        let penultimate = self.accumulate_gradients(frame, &mut acc, 1.0)?;
        Ok((acc, penultimate))
    }

    /// Adds `scale ×` one frame's loss and gradients into `acc`; returns the
    /// penultimate combiner output.
    fn accumulate_gradients(
        &self,
        frame: &Frame,
        acc: &mut TargetGradients,
        scale: f64,
    ) -> Result<Vec<f64>> {
        let fw = self.forward(frame)?;
        let (loss, delta) = self
            .combiner
            .output_delta(&fw.comb, &frame.gaze, LossKind::Mse)?;
        acc.loss += scale * loss;
        let d_in = self.combiner.backprop_accumulate(
            &fw.comb_in,
            &fw.comb,
            delta,
            &mut acc.combiner,
            scale,
        )?;
        let ne = self.eyes.out_dim();
        let nf = self.face.out_dim();
        self.eyes.backprop_output_grad_accumulate(
            &fw.eyes_in,
            &fw.eyes,
            &d_in[..ne],
            &mut acc.eyes,
            scale,
        )?;
        self.face.backprop_output_grad_accumulate(
            &frame.face,
            &fw.face,
            &d_in[ne..ne + nf],
            &mut acc.face,
            scale,
        )?;
        self.face_grid.backprop_output_grad_accumulate(
            &frame.face_grid,
            &fw.grid,
            &d_in[ne + nf..],
            &mut acc.face_grid,
            scale,
        )?;
        Ok(fw.comb.outputs[fw.comb.outputs.len() - 2].clone())
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from(TARGET_MAGIC);
        out.push('\n');
        for net in [&self.eyes, &self.face, &self.face_grid, &self.combiner] {
            out.push_str(&net.to_checkpoint());
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut reader = LineReader::new(text);
        if reader.next_line()? != TARGET_MAGIC {
            return Err(Error::parse(1, "missing target manifest header"));
        }
        let eyes = read_section(&mut reader)?;
        let face = read_section(&mut reader)?;
        let face_grid = read_section(&mut reader)?;
        let combiner = read_section(&mut reader)?;
        if !reader.is_exhausted() {
            return Err(Error::parse(
                reader.line_no() + 1,
                "trailing content after target",
            ));
        }
        let widths = |n: &DenseNet| {
            std::iter::once(n.in_dim())
                .chain(n.layers().iter().map(|l| l.out_dim()))
                .collect::<Vec<_>>()
        };
        if eyes.in_dim() % 2 != 0 {
            return Err(Error::invalid(
                "eyes branch input must hold two equal eye streams",
            ));
        }
        let config = TargetConfig {
            feature_dims: FeatureDims {
                eye: eyes.in_dim() / 2,
                face: face.in_dim(),
                face_grid: face_grid.in_dim(),
            },
            eyes_widths: widths(&eyes),
            face_widths: widths(&face),
            grid_widths: widths(&face_grid),
            combiner_widths: widths(&combiner),
        };
        config.validate()?;
        Ok(Self {
            eyes,
            face,
            face_grid,
            combiner,
            log: TrainingLog::default(),
        })
    }

    fn apply(&mut self, g: &TargetGradients, lr: f64) -> Result<()> {
        self.eyes.apply_gradients(&g.eyes, lr)?;
        self.face.apply_gradients(&g.face, lr)?;
        self.face_grid.apply_gradients(&g.face_grid, lr)?;
        self.combiner.apply_gradients(&g.combiner, lr)
    }

    fn zero_grads(&self) -> TargetGradients {
        TargetGradients {
            eyes: LayerGradients::zeros_like(&self.eyes),
            face: LayerGradients::zeros_like(&self.face),
            face_grid: LayerGradients::zeros_like(&self.face_grid),
            combiner: LayerGradients::zeros_like(&self.combiner),
            loss: 0.0,
        }
    }
}

/// Mini-batch SGD on the squared-error gaze loss. Returns the trained model;
/// `epochs = 0` returns an unchanged copy.
pub fn train_target(
    model: &TargetModel,
    train: &[&Frame],
    heldout: &[&Frame],
    params: &TargetTraining,
) -> Result<TargetModel> {
    if train.is_empty() {
        return Err(Error::invalid("target training set is empty"));
    }
    if !(params.learning_rate > 0.0) || params.batch_size == 0 {
        return Err(Error::invalid(
            "learning rate and batch size must be positive",
        ));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog {
        epochs: params.epochs,
        ..TrainingLog::default()
    };
    let diverged = |epoch: usize, e: Error| match e {
        Error::Numerical { layer, context } => Error::Divergence {
            epoch,
            context: format!("layer {layer}: {context}"),
        },
        other => other,
    };
    for epoch in 1..=params.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(params.batch_size) {
            let mut acc = model.zero_grads();
            let s = 1.0 / batch.len() as f64;
            for &i in batch {
                model
                    .accumulate_gradients(train[i], &mut acc, s)
                    .map_err(|e| diverged(epoch, e))?;
            }
            model.apply(&acc, params.learning_rate)?;
        }
        let loss = model.mean_loss(train.iter().copied())?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                context: "training loss is not finite".into(),
            });
        }
        log.train_mse.push(loss);
    }
    if !heldout.is_empty() {
        log.heldout_mse = Some(model.mean_loss(heldout.iter().copied())?);
    }
    model.log = log;
    Ok(model)
}

pub fn probe(model: &TargetModel, frame: &Frame) -> Result<WhiteBoxTrace> {
    let (g, penultimate) = model.gradients(frame)?;
    let c = &g.combiner.layers;
    let n = c.len();
    let last = |net: &LayerGradients| net.layers[net.layers.len() - 1].weights.clone();
    let final_output = model.predict(frame)?.to_vec();
    Ok(WhiteBoxTrace {
        final_output,
        penultimate_output: penultimate,
        grads_last3: [
            c[n - 1].weights.clone(),
            c[n - 2].weights.clone(),
            c[n - 3].weights.clone(),
        ],
        grads_branch_last: [last(&g.eyes), last(&g.face), last(&g.face_grid)],
        loss: g.loss,
        label: frame.gaze,
    })
}

/// Probes frames in parallel; the result keeps the input order.
pub fn probe_all(model: &TargetModel, frames: &[Frame]) -> Result<Vec<WhiteBoxTrace>> {
    frames.par_iter().map(|f| probe(model, f)).collect()
}
