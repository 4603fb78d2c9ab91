//! Two-stage difficulty-aware training.
//!
//! Stage 1 trains a multi-task network (emotion + reconstruction or emotion +
//! uncertainty) and keeps the epoch with the best development CCC. The
//! auxiliary outputs of that model become per-frame difficulty indicators,
//! which are appended to the inputs of a freshly initialised single-task
//! network trained in stage 2 under the same selection rule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    compensate_delay, compute_gold_standard, fit_standardization, Dataset, Dimension, Partition,
    StandardizationStats,
};
use crate::difficulty::{augment, indicator_from_outputs, DifficultyIndicator, DifficultyMode, SumConvention};
use crate::error::{check_len, DdatError, Result};
use crate::matrix::Matrix;
use crate::metrics::ccc_concat;
use crate::network::{
    adam_step, init_network, AdamState, AuxHead, GruNetwork, NetworkConfig, OutputGradients, Params,
    PredictionBundle,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    /// Sum of squares of the shared recurrent parameters.
    L2,
}

/// Task weights of the joint objective `w1·L_emt + w2·L_aux + λ·R(θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtlWeights {
    pub emotion: f64,
    pub aux: f64,
    pub lambda: f64,
    #[serde(default)]
    pub regularizer: Regularizer,
}

impl Default for MtlWeights {
    fn default() -> Self {
        MtlWeights {
            emotion: 0.5,
            aux: 0.5,
            lambda: 0.0,
            regularizer: Regularizer::None,
        }
    }
}

impl MtlWeights {
    pub fn single_task() -> Self {
        MtlWeights {
            emotion: 1.0,
            aux: 0.0,
            lambda: 0.0,
            regularizer: Regularizer::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.emotion < 0.0 || self.aux < 0.0 || self.lambda < 0.0 {
            return Err(DdatError::invalid("loss weights must be non-negative"));
        }
        if !(self.emotion + self.aux > 0.0) {
            return Err(DdatError::invalid("w1 + w2 must be positive"));
        }
        Ok(())
    }

    /// `w1·emotion + w2·aux + λ·reg`.
    pub fn combine(&self, emotion: f64, aux: f64, reg: f64) -> f64 {
        self.emotion * emotion + self.aux * aux + self.lambda * reg
    }
}

/// The auxiliary target learned next to emotion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxTask {
    None,
    Reconstruction,
    Uncertainty,
}

impl AuxTask {
    pub fn head(self, input_dim: usize) -> AuxHead {
        match self {
            AuxTask::None => AuxHead::None,
            AuxTask::Reconstruction => AuxHead::Reconstruction { width: input_dim },
            AuxTask::Uncertainty => AuxHead::Uncertainty,
        }
    }
}

/// Per-frame penalty for the uncertainty head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PuLoss {
    /// `|û − u|`.
    #[default]
    Absolute,
    /// `(û − u)²`.
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    /// Frames per truncated-BPTT chunk.
    pub chunk_len: usize,
    /// Sequences processed side by side per optimizer step.
    pub batch_size: usize,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub clip_norm: f64,
    pub pu_loss: PuLoss,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            stage1_epochs: 50,
            stage2_epochs: 50,
            learning_rate: AdamState::DEFAULT_LEARNING_RATE,
            chunk_len: 300,
            batch_size: 4,
            clip_norm: 5.0,
            pu_loss: PuLoss::Absolute,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.batch_size == 0 {
            return Err(DdatError::invalid("chunk length and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DdatError::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// One recording ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub id: String,
    pub partition: Partition,
    pub times: Vec<f64>,
    /// Standardized inputs, T × r.
    pub inputs: Matrix,
    /// Delay-compensated gold standard.
    pub gold: Vec<f64>,
    /// Delay-compensated perception uncertainty.
    pub uncertainty: Option<Vec<f64>>,
}

impl SequenceExample {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub dimension: Dimension,
    pub frame_period: f64,
    pub train: Vec<SequenceExample>,
    pub dev: Vec<SequenceExample>,
    pub test: Vec<SequenceExample>,
}

impl TrainingSet {
    pub fn partition(&self, p: Partition) -> &[SequenceExample] {
        match p {
            Partition::Train => &self.train,
            Partition::Dev => &self.dev,
            Partition::Test => &self.test,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.train.first().map_or(0, |s| s.inputs.cols())
    }

    fn validate(&self, need_uncertainty: bool) -> Result<()> {
        if self.train.is_empty() || self.dev.is_empty() {
            return Err(DdatError::invalid("training and development partitions must be non-empty"));
        }
        let r = self.input_dim();
        for s in self.train.iter().chain(&self.dev).chain(&self.test) {
            check_len("sequence input width", r, s.inputs.cols())?;
            check_len("gold standard length", s.len(), s.gold.len())?;
            if need_uncertainty {
                match &s.uncertainty {
                    Some(u) => check_len("uncertainty length", s.len(), u.len())?,
                    None => {
                        return Err(DdatError::invalid(format!(
                            "sequence {} has no perception-uncertainty labels",
                            s.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Standardizes features with training statistics and derives the
/// delay-compensated gold standard and uncertainty for one dimension.
pub fn prepare_training_set(
    dataset: &Dataset,
    dimension: Dimension,
    delay: f64,
) -> Result<(TrainingSet, StandardizationStats)> {
    let train_features: Vec<_> = dataset
        .partition(Partition::Train)
        .map(|s| s.features.clone())
        .collect();
    let stats = fit_standardization(&train_features)?;
    let mut set = TrainingSet {
        dimension,
        frame_period: dataset.frame_period,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for s in &dataset.subjects {
        let gold = compute_gold_standard(s.annotations(dimension))?;
        let gold = compensate_delay(&gold, delay)?;
        check_len("annotation frames", s.features.len(), gold.len())?;
        let example = SequenceExample {
            id: s.id().to_owned(),
            partition: s.partition(),
            times: s.features.times.clone(),
            inputs: stats.apply(&s.features.values)?,
            gold: gold.mean_trace,
            uncertainty: Some(gold.uncertainty_trace),
        };
        match s.partition() {
            Partition::Train => set.train.push(example),
            Partition::Dev => set.dev.push(example),
            Partition::Test => set.test.push(example),
        }
    }
    Ok((set, stats))
}

/// What the joint objective optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub weights: MtlWeights,
    pub aux: AuxTask,
    pub pu_loss: PuLoss,
}

/// Targets for one sequence (or chunk).
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub inputs: &'a Matrix,
    pub gold: &'a [f64],
    pub uncertainty: Option<&'a [f64]>,
}

/// Data terms of the joint loss and their derivatives w.r.t. the head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    /// `Σ_t (ŷ_t − y_t)² / N`.
    pub emotion: f64,
    /// `Σ_t ‖x̂_t − x_t‖² / N` or `Σ_t |û_t − u_t| / N`.
    pub aux: f64,
    /// `w1·emotion + w2·aux` (no regularizer).
    pub weighted: f64,
    pub gradients: OutputGradients,
}

/// Evaluates the weighted data loss, normalized by `frames`.
pub fn joint_loss(
    bundle: &PredictionBundle,
    targets: Targets<'_>,
    spec: &LossSpec,
    frames: usize,
) -> Result<LossTerms> {
    let t_len = bundle.len();
    check_len("gold standard length", t_len, targets.gold.len())?;
    let norm = 1.0 / frames.max(1) as f64;
    let w = &spec.weights;

    let mut emotion = 0.0;
    let mut g_emotion = Vec::with_capacity(t_len);
    for (p, y) in bundle.emotion.iter().zip(targets.gold) {
        let d = p - y;
        emotion += d * d;
        g_emotion.push(w.emotion * 2.0 * d * norm);
    }

    let (aux, g_aux) = match (spec.aux, &bundle.aux) {
        (AuxTask::None, None) => (0.0, None),
        (AuxTask::Reconstruction, Some(x_hat)) => {
            check_len("reconstruction length", t_len, targets.inputs.rows())?;
            check_len("reconstruction width", targets.inputs.cols(), x_hat.cols())?;
            let mut total = 0.0;
            let mut g = Matrix::zeros(t_len, x_hat.cols());
            for t in 0..t_len {
                for ((gi, xh), x) in g.row_mut(t).iter_mut().zip(x_hat.row(t)).zip(targets.inputs.row(t)) {
                    let d = xh - x;
                    total += d * d;
                    *gi = w.aux * 2.0 * d * norm;
                }
            }
            (total, Some(g))
        }
        (AuxTask::Uncertainty, Some(u_hat)) => {
            let u = targets
                .uncertainty
                .ok_or_else(|| DdatError::invalid("uncertainty task without uncertainty labels"))?;
            check_len("uncertainty length", t_len, u.len())?;
            check_len("uncertainty head width", 1, u_hat.cols())?;
            let mut total = 0.0;
            let mut g = Matrix::zeros(t_len, 1);
            for t in 0..t_len {
                let d = u_hat.get(t, 0) - u[t];
                let (value, slope) = match spec.pu_loss {
                    PuLoss::Absolute => (d.abs(), if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 }),
                    PuLoss::Squared => (d * d, 2.0 * d),
                };
                total += value;
                g.set(t, 0, w.aux * slope * norm);
            }
            (total, Some(g))
        }
        (task, _) => {
            return Err(DdatError::invalid(format!(
                "auxiliary task {task:?} does not match the network's auxiliary head"
            )))
        }
    };
    let emotion = emotion * norm;
    let aux = aux * norm;
    Ok(LossTerms {
        emotion,
        aux,
        weighted: w.combine(emotion, aux, 0.0),
        gradients: OutputGradients {
            emotion: g_emotion,
            aux: g_aux,
        },
    })
}

/// `R(θ)` over the shared recurrent trunk and its gradient scaled by λ.
pub fn regularization(params: &Params, weights: &MtlWeights) -> (f64, Option<Params>) {
    if weights.regularizer == Regularizer::None || weights.lambda == 0.0 {
        return (0.0, None);
    }
    let value: f64 = params
        .shared_tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|w| w * w)
        .sum();
    let mut grad = params.clone();
    grad.scale(2.0 * weights.lambda);
    grad.emotion.weight.as_mut_slice().fill(0.0);
    grad.emotion.bias.fill(0.0);
    if let Some(a) = &mut grad.aux {
        a.weight.as_mut_slice().fill(0.0);
        a.bias.fill(0.0);
    }
    (value, Some(grad))
}

/// Full objective value and parameter gradient for one sequence from a zero state.
pub fn objective_and_gradient(
    net: &GruNetwork,
    targets: Targets<'_>,
    spec: &LossSpec,
) -> Result<(f64, Params)> {
    let bundle = net.forward(targets.inputs)?;
    let terms = joint_loss(&bundle, targets, spec, bundle.len())?;
    let mut grad = net.backward(&bundle, &terms.gradients)?;
    let (reg, reg_grad) = regularization(&net.params, &spec.weights);
    if let Some(g) = reg_grad {
        grad.add_assign(&g);
    }
    Ok((terms.weighted + spec.weights.lambda * reg, grad))
}

/// Outcome of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub stage: u8,
    /// Network from the epoch with the highest development CCC
    /// (the initial network if no epoch ran).
    pub best_network: GruNetwork,
    /// 1-based epoch of `best_network`, `None` for the initial network.
    pub best_epoch: Option<usize>,
    pub dev_ccc_history: Vec<f64>,
    /// Training objective after each epoch, evaluated over whole sequences.
    pub train_loss_history: Vec<f64>,
    /// Training objective of the initial network.
    pub initial_train_loss: f64,
}

impl TrainRun {
    pub fn best_dev_ccc(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.dev_ccc_history[e - 1])
    }
}

/// Keeps the model whenever development CCC strictly improves.
#[derive(Debug, Clone)]
pub struct ModelSelector {
    best: Option<(usize, f64)>,
}

impl Default for ModelSelector {
    fn default() -> Self {
        Self::new()
    }
}

impl ModelSelector {
    pub fn new() -> Self {
        ModelSelector { best: None }
    }

    /// Returns true when `score` beats every earlier epoch.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        let improved = self.best.is_none_or(|(_, b)| score > b);
        if improved {
            self.best = Some((epoch, score));
        }
        improved
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Runs the network over whole sequences.
pub fn predict_all(net: &GruNetwork, examples: &[SequenceExample]) -> Result<Vec<PredictionBundle>> {
    examples.par_iter().map(|s| net.predict(&s.inputs)).collect()
}

/// Development CCC of the emotion output over concatenated sequences.
pub fn evaluate_ccc(net: &GruNetwork, examples: &[SequenceExample]) -> Result<f64> {
    let preds: Vec<Vec<f64>> = predict_all(net, examples)?
        .into_iter()
        .map(|b| b.emotion)
        .collect();
    let golds: Vec<Vec<f64>> = examples.iter().map(|s| s.gold.clone()).collect();
    ccc_concat(&preds, &golds)
}

fn targets(s: &SequenceExample) -> Targets<'_> {
    Targets {
        inputs: &s.inputs,
        gold: &s.gold,
        uncertainty: s.uncertainty.as_deref(),
    }
}

/// Frame-normalized objective over whole sequences.
pub fn evaluate_loss(net: &GruNetwork, examples: &[SequenceExample], spec: &LossSpec) -> Result<f64> {
    let frames: usize = examples.iter().map(SequenceExample::len).sum();
    let parts = examples
        .par_iter()
        .map(|s| {
            let b = net.predict(&s.inputs)?;
            Ok(joint_loss(&b, targets(s), spec, frames)?.weighted)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (reg, _) = regularization(&net.params, &spec.weights);
    Ok(parts.iter().sum::<f64>() + spec.weights.lambda * reg)
}

fn clip_global_norm(grad: &mut Params, max_norm: f64) {
    if max_norm > 0.0 {
        let n = grad.norm();
        if n > max_norm {
            grad.scale(max_norm / n);
        }
    }
}

fn slice_targets(s: &SequenceExample, start: usize, end: usize) -> SequenceExample {
    SequenceExample {
        id: s.id.clone(),
        partition: s.partition,
        times: s.times[start..end].to_vec(),
        inputs: s.inputs.slice_rows(start, end),
        gold: s.gold[start..end].to_vec(),
        uncertainty: s.uncertainty.as_ref().map(|u| u[start..end].to_vec()),
    }
}

/// One pass over the training partition. Sequences are shuffled and grouped
/// `batch_size` at a time; each group advances chunk by chunk with hidden
/// state carried across chunks, one optimizer step per chunk.
fn train_epoch(
    net: &mut GruNetwork,
    adam: &mut AdamState,
    train: &[SequenceExample],
    spec: &LossSpec,
    tcfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    for group in order.chunks(tcfg.batch_size) {
        let lanes: Vec<&SequenceExample> = group.iter().map(|&i| &train[i]).collect();
        let mut states: Vec<Option<Vec<Vec<f64>>>> = vec![None; lanes.len()];
        let longest = lanes.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut start = 0;
        while start < longest {
            let active: Vec<usize> = (0..lanes.len()).filter(|&l| lanes[l].len() > start).collect();
            let frames: usize = active
                .iter()
                .map(|&l| (lanes[l].len().min(start + tcfg.chunk_len)) - start)
                .sum();
            let results = active
                .par_iter()
                .map(|&l| {
                    let s = lanes[l];
                    let end = s.len().min(start + tcfg.chunk_len);
                    let chunk = slice_targets(s, start, end);
                    let bundle = net.forward_from(&chunk.inputs, states[l].as_deref(), true)?;
                    let terms = joint_loss(&bundle, targets(&chunk), spec, frames)?;
                    let grad = net.backward(&bundle, &terms.gradients)?;
                    Ok((l, grad, bundle.final_state))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = net.params.zeros_like();
            for (l, grad, state) in results {
                total.add_assign(&grad);
                states[l] = Some(state);
            }
            if let (_, Some(g)) = regularization(&net.params, &spec.weights) {
                total.add_assign(&g);
            }
            clip_global_norm(&mut total, tcfg.clip_norm);
            adam_step(net, &total, adam)?;
            start += tcfg.chunk_len;
        }
    }
    Ok(())
}

/// Trains one network for `epochs` epochs with development-set model selection.
pub fn train_network(
    data: &TrainingSet,
    net_config: &NetworkConfig,
    spec: &LossSpec,
    tcfg: &TrainingConfig,
    epochs: usize,
    stage: u8,
) -> Result<TrainRun> {
    tcfg.validate()?;
    spec.weights.validate()?;
    data.validate(spec.aux == AuxTask::Uncertainty)?;
    check_len("network input width", data.input_dim(), net_config.input_dim)?;
    if net_config.aux_head != spec.aux.head(net_config.input_dim) {
        return Err(DdatError::invalid(format!(
            "network head {:?} does not match auxiliary task {:?}",
            net_config.aux_head, spec.aux
        )));
    }

    let mut net = init_network(net_config)?;
    let mut adam = AdamState::for_network(&net, tcfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let initial_train_loss = evaluate_loss(&net, &data.train, spec)?;

    let mut best_network = net.clone();
    let mut selector = ModelSelector::new();
    let mut dev_ccc_history = Vec::with_capacity(epochs);
    let mut train_loss_history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        train_epoch(&mut net, &mut adam, &data.train, spec, tcfg, &mut rng)?;
        train_loss_history.push(evaluate_loss(&net, &data.train, spec)?);
        let dev = evaluate_ccc(&net, &data.dev)?;
        dev_ccc_history.push(dev);
        if selector.observe(epoch, dev) {
            best_network = net.clone();
        }
    }
    Ok(TrainRun {
        stage,
        best_network,
        best_epoch: selector.best().map(|(e, _)| e),
        dev_ccc_history,
        train_loss_history,
        initial_train_loss,
    })
}

/// Stage 1: joint emotion + auxiliary training. The auxiliary head in
/// `net_config` is replaced by the one `aux` requires.
pub fn train_stage1(
    data: &TrainingSet,
    net_config: &NetworkConfig,
    weights: &MtlWeights,
    tcfg: &TrainingConfig,
    aux: AuxTask,
) -> Result<TrainRun> {
    let cfg = net_config.with_aux(aux.head(net_config.input_dim));
    let spec = LossSpec {
        weights: *weights,
        aux,
        pu_loss: tcfg.pu_loss,
    };
    train_network(data, &cfg, &spec, tcfg, tcfg.stage1_epochs, 1)
}

/// Difficulty indicators for every sequence of each partition.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorSet {
    pub mode: DifficultyMode,
    pub train: Vec<DifficultyIndicator>,
    pub dev: Vec<DifficultyIndicator>,
    pub test: Vec<DifficultyIndicator>,
}

impl IndicatorSet {
    pub fn partition(&self, p: Partition) -> &[DifficultyIndicator] {
        match p {
            Partition::Train => &self.train,
            Partition::Dev => &self.dev,
            Partition::Test => &self.test,
        }
    }

    pub fn width(&self) -> usize {
        self.train.first().map_or(0, DifficultyIndicator::width)
    }
}

/// Runs the selected stage-1 model over all partitions and derives indicators.
pub fn extract_difficulty(
    run: &TrainRun,
    data: &TrainingSet,
    mode: DifficultyMode,
    convention: SumConvention,
) -> Result<IndicatorSet> {
    let net = &run.best_network;
    let ok = matches!(
        (mode, net.config.aux_head),
        (DifficultyMode::ReVector | DifficultyMode::ReSum, AuxHead::Reconstruction { .. })
            | (DifficultyMode::Pu, AuxHead::Uncertainty)
    );
    if !ok {
        return Err(DdatError::invalid(format!(
            "difficulty mode {mode:?} needs a matching auxiliary head, found {:?}",
            net.config.aux_head
        )));
    }
    let source = format!("stage{}-epoch{}", run.stage, run.best_epoch.unwrap_or(0));
    let extract = |examples: &[SequenceExample]| -> Result<Vec<DifficultyIndicator>> {
        predict_all(net, examples)?
            .into_iter()
            .zip(examples)
            .map(|(b, s)| {
                let aux = b.aux.as_ref().expect("aux head checked above");
                indicator_from_outputs(mode, &s.inputs, aux, convention, source.clone())
            })
            .collect()
    };
    Ok(IndicatorSet {
        mode,
        train: extract(&data.train)?,
        dev: extract(&data.dev)?,
        test: extract(&data.test)?,
    })
}

/// Standardizes indicators with training statistics and appends them to the inputs.
pub fn augment_training_set(data: &TrainingSet, indicators: &IndicatorSet) -> Result<TrainingSet> {
    let train_traces: Vec<&Matrix> = indicators.train.iter().map(|d| &d.trace).collect();
    if train_traces.is_empty() {
        return Err(DdatError::invalid("no training indicators"));
    }
    let stats = StandardizationStats::of_matrix(&Matrix::vconcat(&train_traces));
    let build = |examples: &[SequenceExample], inds: &[DifficultyIndicator]| -> Result<Vec<SequenceExample>> {
        check_len("indicator sequence count", examples.len(), inds.len())?;
        examples
            .iter()
            .zip(inds)
            .map(|(s, d)| {
                let scaled = DifficultyIndicator {
                    trace: stats.apply(&d.trace)?,
                    ..d.clone()
                };
                let seq = crate::data::FeatureSequence {
                    subject_id: s.id.clone(),
                    partition: s.partition,
                    frame_period: data.frame_period,
                    times: s.times.clone(),
                    values: s.inputs.clone(),
                };
                let augmented = augment(&seq, &scaled)?;
                Ok(SequenceExample {
                    inputs: augmented.values,
                    ..s.clone()
                })
            })
            .collect()
    };
    Ok(TrainingSet {
        dimension: data.dimension,
        frame_period: data.frame_period,
        train: build(&data.train, &indicators.train)?,
        dev: build(&data.dev, &indicators.dev)?,
        test: build(&data.test, &indicators.test)?,
    })
}

/// Stage 2: single-task emotion training on `[x, d]` with a fresh network.
/// `net_config.input_dim` is set to r + w_d.
pub fn train_stage2(
    data: &TrainingSet,
    indicators: &IndicatorSet,
    net_config: &NetworkConfig,
    tcfg: &TrainingConfig,
) -> Result<(TrainRun, TrainingSet)> {
    let augmented = augment_training_set(data, indicators)?;
    let cfg = NetworkConfig {
        input_dim: augmented.input_dim(),
        aux_head: AuxHead::None,
        ..*net_config
    };
    let spec = LossSpec {
        weights: MtlWeights::single_task(),
        aux: AuxTask::None,
        pu_loss: tcfg.pu_loss,
    };
    let run = train_network(&augmented, &cfg, &spec, tcfg, tcfg.stage2_epochs, 2)?;
    Ok((run, augmented))
}

/// Trains every structure (in parallel) and keeps the best development CCC;
/// ties go to the smaller network, then to the earlier grid entry.
pub fn grid_search_structure<F>(grid: &[NetworkConfig], trainer: F) -> Result<(NetworkConfig, TrainRun)>
where
    F: Fn(&NetworkConfig) -> Result<TrainRun> + Sync,
{
    if grid.is_empty() {
        return Err(DdatError::invalid("structure grid is empty"));
    }
    let runs = grid
        .par_iter()
        .map(|cfg| trainer(cfg).map(|run| (*cfg, run)))
        .collect::<Result<Vec<_>>>()?;
    let score = |run: &TrainRun| run.best_dev_ccc().unwrap_or(f64::NEG_INFINITY);
    let mut best = 0;
    for i in 1..runs.len() {
        let (s_new, s_best) = (score(&runs[i].1), score(&runs[best].1));
        let smaller = runs[i].0.parameter_count() < runs[best].0.parameter_count();
        if s_new > s_best || (s_new == s_best && smaller) {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("index in range"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::network::{numeric_gradient, relative_error};

    fn bundle(emotion: Vec<f64>, aux: Option<Matrix>) -> PredictionBundle {
        // build a bundle through a zero network then overwrite the outputs
        let width = aux.as_ref().map_or(0, Matrix::cols);
        let head = if width == 0 {
            AuxHead::None
        } else if width == 1 {
            AuxHead::Uncertainty
        } else {
            AuxHead::Reconstruction { width }
        };
        let cfg = NetworkConfig::new(1, 1, 1).with_aux(head);
        let net = GruNetwork {
            config: cfg,
            params: Params::zeros(&cfg),
        };
        let mut b = net.predict(&Matrix::zeros(emotion.len(), 1)).unwrap();
        b.emotion = emotion;
        b.aux = aux;
        b
    }

    #[test]
    fn weight_combination() {
        let w = MtlWeights::default();
        assert_eq!(w.combine(2.0, 4.0, 0.0), 3.0);
        assert!(MtlWeights { emotion: 0.0, aux: 0.0, ..w }.validate().is_err());
    }

    #[test]
    fn single_frame_pu_loss() {
        let b = bundle(vec![0.3], Some(Matrix::column(&[0.5])));
        let inputs = Matrix::zeros(1, 1);
        let spec = LossSpec {
            weights: MtlWeights { emotion: 1.0, aux: 1.0, ..MtlWeights::default() },
            aux: AuxTask::Uncertainty,
            pu_loss: PuLoss::Absolute,
        };
        let t = Targets { inputs: &inputs, gold: &[0.1], uncertainty: Some(&[0.2]) };
        let l = joint_loss(&b, t, &spec, 1).unwrap();
        assert!((l.emotion - 0.04).abs() < 1e-15);
        assert!((l.aux - 0.3).abs() < 1e-15);
        assert!((l.weighted - 0.34).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]);
        let b = bundle(vec![0.5, -0.5], Some(x.clone()));
        let spec = LossSpec {
            weights: MtlWeights::default(),
            aux: AuxTask::Reconstruction,
            pu_loss: PuLoss::Absolute,
        };
        let t = Targets { inputs: &x, gold: &[0.5, -0.5], uncertainty: None };
        assert_eq!(joint_loss(&b, t, &spec, 2).unwrap().weighted, 0.0);
    }

    #[test]
    fn mismatched_head_or_missing_labels_fail() {
        let b = bundle(vec![0.0], None);
        let x = Matrix::zeros(1, 1);
        let t = Targets { inputs: &x, gold: &[0.0], uncertainty: None };
        let spec = LossSpec {
            weights: MtlWeights::default(),
            aux: AuxTask::Reconstruction,
            pu_loss: PuLoss::Absolute,
        };
        assert!(joint_loss(&b, t, &spec, 1).is_err());
        let b = bundle(vec![0.0], Some(Matrix::column(&[0.1])));
        let spec = LossSpec { aux: AuxTask::Uncertainty, ..spec };
        assert!(joint_loss(&b, t, &spec, 1).is_err());
        let short = Targets { gold: &[], ..t };
        assert!(joint_loss(&b, short, &spec, 1).is_err());
    }

    fn tiny_example(seed: u64, t: usize, r: usize) -> SequenceExample {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = Matrix::from_vec(t, r, (0..t * r).map(|_| rng.random_range(-1.0..1.0)).collect());
        SequenceExample {
            id: format!("s{seed}"),
            partition: Partition::Train,
            times: (0..t).map(|i| i as f64 * 0.04).collect(),
            inputs,
            gold: (0..t).map(|_| rng.random_range(-0.5..0.5)).collect(),
            uncertainty: Some((0..t).map(|_| rng.random_range(0.0..0.3)).collect()),
        }
    }

    #[test]
    fn l2_regularizer_gradient_matches_finite_differences() {
        let ex = tiny_example(3, 4, 2);
        let cfg = NetworkConfig::new(1, 3, 2).with_seed(5).with_aux(AuxHead::Uncertainty);
        let net = init_network(&cfg).unwrap();
        let spec = LossSpec {
            weights: MtlWeights { lambda: 0.1, regularizer: Regularizer::L2, ..MtlWeights::default() },
            aux: AuxTask::Uncertainty,
            pu_loss: PuLoss::Squared,
        };
        let (_, grad) = objective_and_gradient(&net, targets(&ex), &spec).unwrap();
        let theta = net.params.flatten();
        let numeric = numeric_gradient(
            |p| {
                let mut n = net.clone();
                n.params.assign_flat(p).unwrap();
                objective_and_gradient(&n, targets(&ex), &spec).unwrap().0
            },
            &theta,
            1e-5,
        );
        for (a, n) in grad.flatten().iter().zip(&numeric) {
            if a.abs().max(n.abs()) > 1e-6 {
                assert!(relative_error(*a, *n) < 1e-4, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn selector_keeps_strict_improvements() {
        let mut s = ModelSelector::new();
        assert!(s.observe(1, 0.1));
        assert!(s.observe(2, 0.3));
        assert!(!s.observe(3, 0.3));
        assert!(!s.observe(4, 0.2));
        assert_eq!(s.best(), Some((2, 0.3)));
        let mut m = ModelSelector::new();
        for (e, v) in [0.1, 0.2, 0.4, 0.5].iter().enumerate() {
            m.observe(e + 1, *v);
        }
        assert_eq!(m.best().unwrap().0, 4);
    }

    fn small_set() -> TrainingSet {
        let cfg = SyntheticConfig {
            subjects_per_partition: [3, 2, 2],
            frames: 120,
            feature_dim: 5,
            raters: 4,
            smoothing_frames: 10,
            rater_lag: 0.0,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg, 17).unwrap();
        prepare_training_set(&ds, Dimension::Arousal, 0.0).unwrap().0
    }

    fn quick_cfg(epochs: usize) -> TrainingConfig {
        TrainingConfig {
            stage1_epochs: epochs,
            stage2_epochs: epochs,
            chunk_len: 40,
            learning_rate: 0.01,
            seed: 3,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let data = small_set();
        let cfg = NetworkConfig::new(1, 4, 5).with_seed(2);
        let run = train_stage1(&data, &cfg, &MtlWeights::default(), &quick_cfg(0), AuxTask::Reconstruction)
            .unwrap();
        assert!(run.dev_ccc_history.is_empty() && run.train_loss_history.is_empty());
        assert_eq!(run.best_epoch, None);
        assert_eq!(run.best_network, init_network(&cfg.with_aux(AuxHead::Reconstruction { width: 5 })).unwrap());
    }

    #[test]
    fn selected_epoch_is_history_maximum() {
        let data = small_set();
        let cfg = NetworkConfig::new(1, 6, 5).with_seed(2);
        let run = train_stage1(&data, &cfg, &MtlWeights::default(), &quick_cfg(6), AuxTask::Uncertainty)
            .unwrap();
        assert_eq!(run.dev_ccc_history.len(), 6);
        let max = run.dev_ccc_history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(run.best_dev_ccc(), Some(max));
        let recomputed = evaluate_ccc(&run.best_network, &data.dev).unwrap();
        assert_eq!(recomputed, max);
    }

    #[test]
    fn zero_aux_weight_matches_single_task_training() {
        let data = small_set();
        let cfg = NetworkConfig::new(1, 5, 5).with_seed(9);
        let tcfg = quick_cfg(4);
        let mtl = train_stage1(
            &data,
            &cfg,
            &MtlWeights { emotion: 1.0, aux: 0.0, ..MtlWeights::default() },
            &tcfg,
            AuxTask::Reconstruction,
        )
        .unwrap();
        let single = train_stage1(&data, &cfg, &MtlWeights::single_task(), &tcfg, AuxTask::None).unwrap();
        assert_eq!(mtl.train_loss_history, single.train_loss_history);
        assert_eq!(mtl.dev_ccc_history, single.dev_ccc_history);
        assert_eq!(mtl.best_epoch, single.best_epoch);
    }

    #[test]
    fn uncertainty_task_requires_labels() {
        let mut data = small_set();
        data.train[0].uncertainty = None;
        let cfg = NetworkConfig::new(1, 4, 5);
        assert!(train_stage1(&data, &cfg, &MtlWeights::default(), &quick_cfg(1), AuxTask::Uncertainty).is_err());
        assert!(train_stage1(&data, &cfg, &MtlWeights::default(), &quick_cfg(1), AuxTask::Reconstruction).is_ok());
        data.dev.clear();
        assert!(train_stage1(&data, &cfg, &MtlWeights::default(), &quick_cfg(1), AuxTask::None).is_err());
    }

    #[test]
    fn indicator_modes_and_stage2_widths() {
        let data = small_set();
        let cfg = NetworkConfig::new(1, 4, 5).with_seed(1);
        let tcfg = quick_cfg(1);
        let re = train_stage1(&data, &cfg, &MtlWeights::default(), &tcfg, AuxTask::Reconstruction).unwrap();
        let pu = train_stage1(&data, &cfg, &MtlWeights::default(), &tcfg, AuxTask::Uncertainty).unwrap();

        let vec_ind = extract_difficulty(&re, &data, DifficultyMode::ReVector, SumConvention::Signed).unwrap();
        assert_eq!(vec_ind.width(), 5);
        let sum_ind = extract_difficulty(&re, &data, DifficultyMode::ReSum, SumConvention::Signed).unwrap();
        assert_eq!(sum_ind.width(), 1);
        let pu_ind = extract_difficulty(&pu, &data, DifficultyMode::Pu, SumConvention::Signed).unwrap();
        let direct = pu.best_network.predict(&data.dev[0].inputs).unwrap();
        assert_eq!(pu_ind.dev[0].trace, direct.aux.unwrap());
        assert!(extract_difficulty(&re, &data, DifficultyMode::Pu, SumConvention::Signed).is_err());
        assert!(extract_difficulty(&pu, &data, DifficultyMode::ReSum, SumConvention::Signed).is_err());

        for (ind, width) in [(&vec_ind, 10), (&sum_ind, 6), (&pu_ind, 6)] {
            let before = re.best_network.clone();
            let (run, aug) = train_stage2(&data, ind, &cfg, &tcfg).unwrap();
            assert_eq!(run.best_network.config.input_dim, width);
            assert_eq!(aug.input_dim(), width);
            assert_eq!(run.stage, 2);
            assert_eq!(re.best_network, before);
            for (a, s) in aug.dev.iter().zip(&data.dev) {
                for t in 0..s.len() {
                    assert_eq!(&a.inputs.row(t)[..5], s.inputs.row(t));
                }
            }
        }
    }

    #[test]
    fn indicator_length_mismatch_fails() {
        let data = small_set();
        let mut ind = IndicatorSet {
            mode: DifficultyMode::ReSum,
            train: data.train.iter().map(|s| zero_indicator(s.len())).collect(),
            dev: data.dev.iter().map(|s| zero_indicator(s.len())).collect(),
            test: data.test.iter().map(|s| zero_indicator(s.len())).collect(),
        };
        ind.dev[0] = zero_indicator(3);
        assert!(augment_training_set(&data, &ind).is_err());
    }

    fn zero_indicator(t: usize) -> DifficultyIndicator {
        DifficultyIndicator {
            mode: DifficultyMode::ReSum,
            trace: Matrix::zeros(t, 1),
            source_model: "zero".into(),
        }
    }

    #[test]
    fn zero_indicator_column_is_inert_at_matched_weights() {
        let data = small_set();
        let plain_cfg = NetworkConfig::new(1, 4, 5).with_seed(6);
        let plain = init_network(&plain_cfg).unwrap();
        let mut wide = init_network(&NetworkConfig { input_dim: 6, ..plain_cfg }).unwrap();
        // copy the plain weights and zero the extra input column
        let layer = &mut wide.params.layers[0];
        let src = &plain.params.layers[0];
        for (w, p) in [(&mut layer.w_z, &src.w_z), (&mut layer.w_r, &src.w_r), (&mut layer.w_h, &src.w_h)] {
            for r in 0..p.rows() {
                w.row_mut(r)[..5].copy_from_slice(p.row(r));
                w.row_mut(r)[5] = 0.0;
            }
        }
        wide.params.layers[0].u_z = plain.params.layers[0].u_z.clone();
        wide.params.layers[0].u_r = plain.params.layers[0].u_r.clone();
        wide.params.layers[0].u_h = plain.params.layers[0].u_h.clone();
        wide.params.layers[0].b_z = plain.params.layers[0].b_z.clone();
        wide.params.layers[0].b_r = plain.params.layers[0].b_r.clone();
        wide.params.layers[0].b_h = plain.params.layers[0].b_h.clone();
        wide.params.emotion = plain.params.emotion.clone();
        let ind = IndicatorSet {
            mode: DifficultyMode::ReSum,
            train: data.train.iter().map(|s| zero_indicator(s.len())).collect(),
            dev: data.dev.iter().map(|s| zero_indicator(s.len())).collect(),
            test: data.test.iter().map(|s| zero_indicator(s.len())).collect(),
        };
        let aug = augment_training_set(&data, &ind).unwrap();
        let a = wide.predict(&aug.dev[0].inputs).unwrap();
        let b = plain.predict(&data.dev[0].inputs).unwrap();
        assert_eq!(a.emotion, b.emotion);
    }

    fn fake_run(ccc: f64, cfg: &NetworkConfig) -> TrainRun {
        TrainRun {
            stage: 1,
            best_network: init_network(cfg).unwrap(),
            best_epoch: Some(1),
            dev_ccc_history: vec![ccc],
            train_loss_history: vec![1.0],
            initial_train_loss: 2.0,
        }
    }

    #[test]
    fn grid_search_selection_rules() {
        let grid = crate::network::default_structure_grid(3, AuxHead::None, 0);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let (best, _) = grid_search_structure(&grid, |c| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(fake_run(c.num_layers as f64 / 10.0 + c.units_per_layer as f64 / 1000.0, c))
        })
        .unwrap();
        assert_eq!(calls.into_inner(), 15);
        assert_eq!((best.num_layers, best.units_per_layer), (9, 120));

        let one = [NetworkConfig::new(3, 80, 3)];
        assert_eq!(grid_search_structure(&one, |c| Ok(fake_run(0.1, c))).unwrap().0, one[0]);

        let tie = [NetworkConfig::new(3, 80, 3), NetworkConfig::new(1, 40, 3)];
        let (best, _) = grid_search_structure(&tie, |c| Ok(fake_run(0.5, c))).unwrap();
        assert_eq!(best, tie[1]);

        assert!(grid_search_structure(&[], |c| Ok(fake_run(0.5, c))).is_err());
    }
}
