//! End-to-end runs: configuration, the single-system pipeline, fusion
//! scenarios, report tables and plots.

mod fusion_run;
mod plot;
mod predictions;
mod prepare;
mod report;

pub use fusion_run::{run_fusion, FusionEntry, FusionMode, FusionReport, FusionScenario, StreamSpec};
pub use plot::{contribution_svg, emit_plots, trace_svg, PlotRun};
pub use predictions::{read_predictions, write_predictions, SubjectPrediction};
pub use prepare::{prepare_data, PreparedSummary};
pub use report::{emit_report, Report, ReportCell, ReportColumn, ReportRow};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, Dimension, Manifest, Partition};
use crate::difficulty::{write_indicator_csv, DifficultyMode, SumConvention};
use crate::error::{DdatError, Result, StageContext};
use crate::metrics::ccc_concat;
use crate::network::{AuxHead, Checkpoint, NetworkConfig, LAYER_GRID, UNIT_GRID};
use crate::postprocess::{apply_chain, optimize_chain, ChainSearch};
use crate::training::{
    augment_training_set, extract_difficulty, grid_search_structure, predict_all, prepare_training_set,
    train_network, train_stage1, AuxTask, LossSpec, MtlWeights, TrainRun, TrainingConfig, TrainingSet,
};

/// The systems that can be run end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Baseline,
    MtlRe,
    MtlPu,
    DdatReVector,
    DdatReSum,
    DdatPu,
}

impl System {
    pub const ALL: [System; 6] = [
        System::Baseline,
        System::MtlRe,
        System::MtlPu,
        System::DdatReVector,
        System::DdatReSum,
        System::DdatPu,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            System::Baseline => "baseline",
            System::MtlRe => "mtl_re",
            System::MtlPu => "mtl_pu",
            System::DdatReVector => "ddat_re_vector",
            System::DdatReSum => "ddat_re_sum",
            System::DdatPu => "ddat_pu",
        }
    }

    pub fn aux_task(self) -> AuxTask {
        match self {
            System::Baseline => AuxTask::None,
            System::MtlRe | System::DdatReVector | System::DdatReSum => AuxTask::Reconstruction,
            System::MtlPu | System::DdatPu => AuxTask::Uncertainty,
        }
    }

    /// Indicator fed to stage 2, `None` for single-stage systems.
    pub fn difficulty_mode(self) -> Option<DifficultyMode> {
        match self {
            System::DdatReVector => Some(DifficultyMode::ReVector),
            System::DdatReSum => Some(DifficultyMode::ReSum),
            System::DdatPu => Some(DifficultyMode::Pu),
            _ => None,
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for System {
    type Err = DdatError;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| DdatError::invalid(format!("unknown system `{s}`")))
    }
}

/// Network structures to try; a single layer count and unit count fixes the structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub layers: Vec<usize>,
    pub units: Vec<usize>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            layers: LAYER_GRID.to_vec(),
            units: UNIT_GRID.to_vec(),
        }
    }
}

impl NetworkSpec {
    pub fn fixed(layers: usize, units: usize) -> Self {
        NetworkSpec {
            layers: vec![layers],
            units: vec![units],
        }
    }

    pub fn configs(&self, input_dim: usize, seed: u64) -> Result<Vec<NetworkConfig>> {
        if self.layers.is_empty() || self.units.is_empty() {
            return Err(DdatError::invalid("network grid is empty"));
        }
        let mut out = Vec::with_capacity(self.layers.len() * self.units.len());
        for &l in &self.layers {
            for &u in &self.units {
                let cfg = NetworkConfig::new(l, u, input_dim).with_seed(seed);
                cfg.validate()?;
                out.push(cfg);
            }
        }
        Ok(out)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    pub system: System,
    pub dimension: Dimension,
    /// Output directory; relative paths resolve against the config file.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub training: TrainingConfig,
    /// Stage-1 task weights (ignored by the baseline).
    #[serde(default)]
    pub weights: MtlWeights,
    #[serde(default = "default_true")]
    pub postprocess: bool,
    #[serde(default)]
    pub sum_convention: SumConvention,
    /// Overrides the manifest's annotation delay, seconds.
    #[serde(default)]
    pub delay: Option<f64>,
}

impl ExperimentConfig {
    pub fn new(manifest: impl Into<PathBuf>, system: System, dimension: Dimension, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            manifest: manifest.into(),
            system,
            dimension,
            out_dir: out_dir.into(),
            seed: 0,
            network: NetworkSpec::default(),
            training: TrainingConfig::default(),
            weights: MtlWeights::default(),
            postprocess: true,
            sum_convention: SumConvention::default(),
            delay: None,
        }
    }

    /// Reads a TOML config and resolves relative paths against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DdatError::io(path, e))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| DdatError::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short content hash of every setting except the output directory and
    /// the manifest location.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.manifest = PathBuf::new();
        content_hash(&serde_json::to_vec(&canonical).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if let Some(d) = self.delay {
            if !(d >= 0.0) {
                return Err(DdatError::invalid(format!("delay must be >= 0, got {d}")));
            }
        }
        Ok(())
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub layers: usize,
    pub units: usize,
    pub input_dim: usize,
    pub aux_head: AuxHead,
    pub structures_tried: usize,
    pub best_epoch: Option<usize>,
    pub best_dev_ccc: Option<f64>,
    pub initial_train_loss: f64,
    pub train_loss_history: Vec<f64>,
    pub dev_ccc_history: Vec<f64>,
    /// Relative to the output directory.
    pub checkpoint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionScore {
    pub raw_ccc: f64,
    pub postprocessed_ccc: Option<f64>,
    pub frames: usize,
    pub subjects: usize,
}

impl PartitionScore {
    /// Post-processed CCC if available, otherwise raw.
    pub fn best(&self) -> f64 {
        self.postprocessed_ccc.unwrap_or(self.raw_ccc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_hash: String,
    pub seed: u64,
    pub system: System,
    pub dimension: Dimension,
    pub feature_dim: usize,
    pub difficulty_mode: Option<DifficultyMode>,
    /// Input width of the network that produced the predictions.
    pub final_input_dim: usize,
    pub stages: Vec<StageRecord>,
    pub dev: PartitionScore,
    pub test: Option<PartitionScore>,
    pub postprocess: Option<ChainSearch>,
    /// Output files relative to the output directory, by role.
    pub files: BTreeMap<String, String>,
}

impl ExperimentRecord {
    pub fn score(&self, partition: Partition) -> Option<&PartitionScore> {
        match partition {
            Partition::Dev => Some(&self.dev),
            Partition::Test => self.test.as_ref(),
            Partition::Train => None,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read(path).map_err(|e| DdatError::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| DdatError::format(path, e.to_string()))
    }
}

pub const RECORD_FILE: &str = "record.json";

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DdatError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| DdatError::io(path, e))
}

pub(crate) fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

fn train_structures(
    data: &TrainingSet,
    spec: &NetworkSpec,
    seed: u64,
    trainer: impl Fn(&NetworkConfig) -> Result<TrainRun> + Sync,
) -> Result<(NetworkConfig, TrainRun, usize)> {
    let grid = spec.configs(data.input_dim(), seed)?;
    let n = grid.len();
    let (cfg, run) = grid_search_structure(&grid, trainer)?;
    Ok((cfg, run, n))
}

fn stage_record(run: &TrainRun, tried: usize, checkpoint: &str) -> StageRecord {
    let c = &run.best_network.config;
    StageRecord {
        stage: run.stage,
        layers: c.num_layers,
        units: c.units_per_layer,
        input_dim: c.input_dim,
        aux_head: c.aux_head,
        structures_tried: tried,
        best_epoch: run.best_epoch,
        best_dev_ccc: run.best_dev_ccc(),
        initial_train_loss: run.initial_train_loss,
        train_loss_history: run.train_loss_history.clone(),
        dev_ccc_history: run.dev_ccc_history.clone(),
        checkpoint: checkpoint.to_owned(),
    }
}

fn save_checkpoint(out: &Path, rel: &str, run: &TrainRun, provenance: &[(&str, String)]) -> Result<()> {
    let mut ckpt = Checkpoint::from_network(&run.best_network, None);
    for (k, v) in provenance {
        ckpt.metadata.insert((*k).to_owned(), v.clone());
    }
    ckpt.metadata.insert("stage".into(), run.stage.to_string());
    ckpt.metadata
        .insert("epoch".into(), run.best_epoch.unwrap_or(0).to_string());
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DdatError::io(parent, e))?;
    }
    ckpt.save(path)
}

/// Runs one system end to end and writes its outputs under `config.out_dir`:
/// `record.json`, `predictions/{dev,test}[_pp].csv`, `checkpoints/` and, for
/// two-stage systems, `indicators/<partition>/<subject>.csv`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRecord> {
    config.validate().stage("config")?;
    let hash = config.hash();
    let seed = config.seed;
    let provenance = vec![("config_hash", hash.clone()), ("seed", seed.to_string())];
    let header = format!(
        "config_hash={hash} seed={seed} system={} dimension={}",
        config.system, config.dimension
    );
    let out = config.out_dir.as_path();

    let manifest = Manifest::read(&config.manifest).stage("data")?;
    let dataset = load_dataset(&manifest).stage("data")?;
    let delay = config.delay.unwrap_or(manifest.delay);
    let (data, _) = prepare_training_set(&dataset, config.dimension, delay).stage("data")?;
    let feature_dim = data.input_dim();

    let tcfg = TrainingConfig {
        seed,
        ..config.training
    };
    let system = config.system;
    let weights = match system {
        System::Baseline => MtlWeights::single_task(),
        _ => config.weights,
    };

    let (_, stage1, tried1) = train_structures(&data, &config.network, seed, |cfg| {
        train_stage1(&data, cfg, &weights, &tcfg, system.aux_task())
    })
    .stage("stage 1 training")?;
    let mut files = BTreeMap::new();
    let ckpt1 = "checkpoints/stage1.ckpt";
    save_checkpoint(out, ckpt1, &stage1, &provenance).stage("stage 1 training")?;
    files.insert("checkpoint_stage1".to_owned(), ckpt1.to_owned());
    let mut stages = vec![stage_record(&stage1, tried1, ckpt1)];

    let (final_run, final_data) = match system.difficulty_mode() {
        None => (stage1, data),
        Some(mode) => {
            let indicators =
                extract_difficulty(&stage1, &data, mode, config.sum_convention).stage("difficulty extraction")?;
            for p in Partition::ALL {
                for (ind, s) in indicators.partition(p).iter().zip(data.partition(p)) {
                    let rel = format!("indicators/{}/{}.csv", p, s.id);
                    let comments = [header.clone(), format!("mode={mode:?} source={}", ind.source_model)];
                    write_indicator_csv(out.join(&rel), ind, &s.times, &comments).stage("difficulty extraction")?;
                }
            }
            files.insert("indicators".to_owned(), "indicators".to_owned());
            let augmented = augment_training_set(&data, &indicators).stage("augmentation")?;
            let stage2_seed = seed.wrapping_add(1);
            let spec = LossSpec {
                weights: MtlWeights::single_task(),
                aux: AuxTask::None,
                pu_loss: tcfg.pu_loss,
            };
            let (_, stage2, tried2) = train_structures(&augmented, &config.network, stage2_seed, |cfg| {
                train_network(&augmented, cfg, &spec, &tcfg, tcfg.stage2_epochs, 2)
            })
            .stage("stage 2 training")?;
            let ckpt2 = "checkpoints/stage2.ckpt";
            save_checkpoint(out, ckpt2, &stage2, &provenance).stage("stage 2 training")?;
            files.insert("checkpoint_stage2".to_owned(), ckpt2.to_owned());
            stages.push(stage_record(&stage2, tried2, ckpt2));
            (stage2, augmented)
        }
    };

    let net = &final_run.best_network;
    let fp = final_data.frame_period;
    let predict = |p: Partition| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let examples = final_data.partition(p);
        let preds = predict_all(net, examples)?.into_iter().map(|b| b.emotion).collect();
        let golds = examples.iter().map(|s| s.gold.clone()).collect();
        Ok((preds, golds))
    };
    let (dev_pred, dev_gold) = predict(Partition::Dev).stage("evaluation")?;
    let (test_pred, test_gold) = predict(Partition::Test).stage("evaluation")?;

    let search = if config.postprocess {
        Some(optimize_chain(&dev_pred, &dev_gold, fp).stage("post-processing")?)
    } else {
        None
    };

    let mut score_and_write = |p: Partition, preds: &[Vec<f64>], golds: &[Vec<f64>]| -> Result<Option<PartitionScore>> {
        let examples = final_data.partition(p);
        if examples.is_empty() {
            return Ok(None);
        }
        let rel = format!("predictions/{p}.csv");
        write_predictions(&out.join(&rel), &[header.clone(), format!("partition={p} stage=raw")], examples, preds)?;
        files.insert(format!("predictions_{p}"), rel);
        let raw_ccc = ccc_concat(preds, golds)?;
        let postprocessed_ccc = match &search {
            Some(s) => {
                let pp = apply_chain(preds, &s.params, fp)?;
                let rel = format!("predictions/{p}_pp.csv");
                write_predictions(
                    &out.join(&rel),
                    &[header.clone(), format!("partition={p} stage=postprocessed")],
                    examples,
                    &pp,
                )?;
                files.insert(format!("predictions_{p}_pp"), rel);
                Some(ccc_concat(&pp, golds)?)
            }
            None => None,
        };
        Ok(Some(PartitionScore {
            raw_ccc,
            postprocessed_ccc,
            frames: preds.iter().map(Vec::len).sum(),
            subjects: preds.len(),
        }))
    };
    let dev = score_and_write(Partition::Dev, &dev_pred, &dev_gold)
        .stage("evaluation")?
        .expect("dev partition checked during training");
    let test = score_and_write(Partition::Test, &test_pred, &test_gold).stage("evaluation")?;

    files.insert("record".to_owned(), RECORD_FILE.to_owned());
    let record = ExperimentRecord {
        config_hash: hash,
        seed,
        system,
        dimension: config.dimension,
        feature_dim,
        difficulty_mode: system.difficulty_mode(),
        final_input_dim: net.config.input_dim,
        stages,
        dev,
        test,
        postprocess: search,
        files,
    };
    write_bytes(&out.join(RECORD_FILE), &to_json_bytes(&record)).stage("report")?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, write_dataset, SyntheticConfig};

    fn tiny_manifest(dir: &Path) -> PathBuf {
        let cfg = SyntheticConfig {
            subjects_per_partition: [3, 2, 2],
            frames: 150,
            feature_dim: 4,
            raters: 3,
            smoothing_frames: 10,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg, 5).unwrap();
        write_dataset(dir.join("data"), &ds, 0.4).unwrap()
    }

    fn quick(manifest: &Path, system: System, out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(manifest, system, Dimension::Valence, out);
        cfg.network = NetworkSpec::fixed(1, 4);
        cfg.training.stage1_epochs = 2;
        cfg.training.stage2_epochs = 2;
        cfg.training.chunk_len = 50;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn system_names_round_trip() {
        for s in System::ALL {
            assert_eq!(s.as_str().parse::<System>().unwrap(), s);
        }
        assert!("ddat".parse::<System>().is_err());
        assert_eq!(System::Baseline.aux_task(), AuxTask::None);
        assert_eq!(System::DdatPu.difficulty_mode(), Some(DifficultyMode::Pu));
    }

    #[test]
    fn config_toml_round_trip_and_hash() {
        let cfg = ExperimentConfig::new("m.toml", System::DdatReSum, Dimension::Arousal, "out");
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.training.learning_rate, 0.001);
        assert_eq!(cfg.training.batch_size, 4);
        assert_eq!(cfg.network.configs(3, 0).unwrap().len(), 15);
        let moved = ExperimentConfig { out_dir: "elsewhere".into(), ..cfg.clone() };
        assert_eq!(moved.hash(), cfg.hash());
        let reseeded = ExperimentConfig { seed: 1, ..cfg.clone() };
        assert_ne!(reseeded.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);

        let minimal: ExperimentConfig = toml::from_str(
            "manifest = \"m.toml\"\nsystem = \"baseline\"\ndimension = \"valence\"\nout_dir = \"o\"\n[network]\nlayers = [1]\nunits = [40]\n",
        )
        .unwrap();
        assert_eq!(minimal.network, NetworkSpec::fixed(1, 40));
        assert!(minimal.postprocess);
    }

    #[test]
    fn baseline_and_ddat_runs() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(dir.path());

        let base = run_experiment(&quick(&manifest, System::Baseline, &dir.path().join("base"))).unwrap();
        assert_eq!(base.stages.len(), 1);
        assert_eq!(base.stages[0].aux_head, AuxHead::None);
        assert_eq!(base.final_input_dim, 4);
        assert!(dir.path().join("base/predictions/test_pp.csv").exists());

        for (system, width) in [(System::DdatReSum, 5), (System::DdatReVector, 8), (System::DdatPu, 5)] {
            let out = dir.path().join(system.as_str());
            let rec = run_experiment(&quick(&manifest, system, &out)).unwrap();
            assert_eq!(rec.stages.len(), 2);
            assert_eq!(rec.stages[1].input_dim, width);
            assert_eq!(rec.final_input_dim, width);
            assert!(out.join("indicators/dev/dev_01.csv").exists());
            assert!(out.join("checkpoints/stage2.ckpt").exists());
            let on_disk = ExperimentRecord::read(out.join(RECORD_FILE)).unwrap();
            assert_eq!(on_disk, rec);
        }
    }

    #[test]
    fn reruns_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(dir.path());
        let out = dir.path().join("run");
        let cfg = quick(&manifest, System::DdatReSum, &out);
        run_experiment(&cfg).unwrap();
        let first: Vec<Vec<u8>> = ["record.json", "predictions/dev.csv", "predictions/test_pp.csv"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).unwrap())
            .collect();
        run_experiment(&cfg).unwrap();
        for (f, before) in ["record.json", "predictions/dev.csv", "predictions/test_pp.csv"].iter().zip(first) {
            assert_eq!(std::fs::read(out.join(f)).unwrap(), before, "{f}");
        }
        let text = std::fs::read_to_string(out.join("predictions/dev.csv")).unwrap();
        assert!(text.starts_with(&format!("# config_hash={} seed=3", cfg.hash())));
    }

    #[test]
    fn missing_manifest_is_a_data_stage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(&dir.path().join("nope.toml"), System::Baseline, dir.path());
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.to_string().starts_with("data"), "{err}");
    }
}
