//! Reproducible experiments: one JSON config drives data generation,
//! training, pruning, evaluation, benchmarking and the ablation grid.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic_mkg, load_dataset, save_dataset, GenConfig, MkgDataset, Split};
use crate::error::{invalid, ElmmError, Result};
use crate::eval::{bench_latency, evaluate, BenchConfig, EvalReport, LatencyReport, ModelScorer};
use crate::kgc::{train, EpochLog, TrainConfig};
use crate::model::checkpoint;
use crate::model::{HeadKind, Model, ModelConfig, VisualMode};
use crate::numerics::{Matrix, SeededRng};
use crate::pruning::{
    fit_all_compensations, input_sequences, profile_attention_similarity, sample_queries, select_prune_layers,
    flop_ratio, CompensationMode, CompensationPlan, SimilarityProfile, DEFAULT_SAMPLES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// All paths are relative to the output directory.
    pub data_dir: String,
    pub checkpoint: String,
    pub pruned_checkpoint: String,
    pub reports_dir: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoint: "model.elm".into(),
            pruned_checkpoint: "model_pruned.elm".into(),
            reports_dir: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSettings {
    /// Attention sublayers to remove.
    pub k_p: usize,
    /// Profiling and fitting sample count.
    pub samples: usize,
    pub mode: CompensationMode,
    /// Keep fitted `W_c` fixed during fine-tuning.
    pub freeze_wc: bool,
    /// Training epochs run after pruning.
    pub finetune_epochs: usize,
}

impl Default for PruneSettings {
    fn default() -> Self {
        Self {
            k_p: 4,
            samples: DEFAULT_SAMPLES,
            mode: CompensationMode::Mean,
            freeze_wc: false,
            finetune_epochs: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_image_view: bool,
    pub no_text_view: bool,
    pub no_mvtc: bool,
    pub no_pruning: bool,
    pub no_linear_comp: bool,
    pub zero_init_wc: bool,
    pub plain_head: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model initialization and profiling seed.
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    pub gen: GenConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prune: PruneSettings,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for ExperimentConfig {
    /// The desk-scale setup: 200 entities, 8 relations, 10 images of 8
    /// regions each, an 8-layer width-32 model.
    fn default() -> Self {
        let gen = GenConfig {
            name_len: 1,
            ..GenConfig::default()
        };
        let model = ModelConfig {
            d_model: 32,
            heads: 4,
            layers: 8,
            vocab_size: gen.vocab_size(),
            n_images: gen.n_images,
            n_regions: gen.n_regions,
            visual_dim: gen.visual_dim,
            max_seq: 96,
            num_entities: gen.num_entities,
            mlp_hidden: 64,
            layer_norm: true,
            visual_mode: VisualMode::Full,
            head: HeadKind::Completion,
        };
        Self {
            seed: 7,
            paths: Paths::default(),
            gen,
            model,
            train: TrainConfig {
                lr: 1e-3,
                epochs: 5,
                batch_size: 8,
                negatives: 64,
                ..TrainConfig::default()
            },
            prune: PruneSettings::default(),
            bench: BenchConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they can
    /// and fall back to plain strings.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in sets {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| invalid(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
            let mut node = &mut doc;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| invalid(format!("unknown config key {key}")))?;
            }
            *node = value;
        }
        serde_json::from_value(doc).map_err(|e| invalid(format!("config after overrides: {e}")))
    }

    /// Sets the model, generator and training seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.gen.seed = seed;
        self.train.seed = seed;
        self.bench.seed = seed;
        self
    }

    /// Model config with ablation flags applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        let a = &self.ablation;
        m.visual_mode = if a.no_mvtc {
            VisualMode::Uncompressed
        } else if a.no_image_view {
            VisualMode::NoImageView
        } else if a.no_text_view {
            VisualMode::NoTextView
        } else {
            m.visual_mode
        };
        if a.plain_head {
            m.head = HeadKind::Plain;
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        let m = self.effective_model();
        m.validate()?;
        let g = &self.gen;
        for (key, mv, gv) in [
            ("model.num_entities", m.num_entities, g.num_entities),
            ("model.n_images", m.n_images, g.n_images),
            ("model.n_regions", m.n_regions, g.n_regions),
            ("model.visual_dim", m.visual_dim, g.visual_dim),
            ("model.vocab_size", m.vocab_size, g.vocab_size()),
        ] {
            if mv != gv {
                return Err(invalid(format!("{key} ({mv}) disagrees with the generator ({gv})")));
            }
        }
        let text = g.name_len + 1;
        let need = m.visual_tokens() + text;
        if m.max_seq < need {
            return Err(invalid(format!(
                "model.max_seq ({}) must be at least {need} for this visual mode",
                m.max_seq
            )));
        }
        // The uncompressed ablation must fit whatever the configured mode.
        let raw = m.visual_rows() + text;
        if m.max_seq < raw {
            return Err(invalid(format!(
                "model.max_seq ({}) must be at least N(M+1)+K = {raw} so the uncompressed ablation fits",
                m.max_seq
            )));
        }
        if self.prune.k_p > m.layers {
            return Err(invalid(format!(
                "prune.k_p ({}) exceeds model.layers ({})",
                self.prune.k_p, m.layers
            )));
        }
        if self.prune.samples == 0 {
            return Err(invalid("prune.samples must be at least 1"));
        }
        if self.train.negatives >= g.num_entities {
            return Err(invalid(format!(
                "train.negatives ({}) must be below gen.num_entities ({})",
                self.train.negatives, g.num_entities
            )));
        }
        if self.bench.reps < 10 {
            return Err(invalid("bench.reps must be at least 10"));
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// A report tagged with the hash of the config that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tagged<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

/// Resolved output locations for one experiment.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
    pub paths: Paths,
}

impl Workspace {
    pub fn new(root: &Path, paths: &Paths) -> Self {
        Self {
            root: root.to_path_buf(),
            paths: paths.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join(&self.paths.data_dir)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join(&self.paths.checkpoint)
    }

    pub fn pruned_checkpoint(&self) -> PathBuf {
        self.root.join(&self.paths.pruned_checkpoint)
    }

    pub fn report(&self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(&self.paths.reports_dir);
        fs::create_dir_all(&dir)?;
        Ok(dir.join(name))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn check_dataset(cfg: &ExperimentConfig, d: &MkgDataset) -> Result<()> {
    let m = cfg.effective_model();
    if d.num_entities() != m.num_entities || d.vocab_size != m.vocab_size || d.visual_dim != m.visual_dim {
        return Err(invalid("dataset on disk does not match the model config; regenerate it"));
    }
    Ok(())
}

pub fn generate(cfg: &ExperimentConfig) -> Result<MkgDataset> {
    Ok(generate_synthetic_mkg(&cfg.gen)?.dataset)
}

/// A freshly initialized model trained on `dataset`.
pub fn train_model(cfg: &ExperimentConfig, dataset: &MkgDataset, log: Option<&mut dyn std::io::Write>) -> Result<(Model, Vec<EpochLog>)> {
    check_dataset(cfg, dataset)?;
    let mut model = Model::new(cfg.effective_model(), cfg.seed)?;
    let out = train(&mut model, dataset, &cfg.train, log)?;
    Ok((model, out.log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub profile: SimilarityProfile,
    pub plan: CompensationPlan,
    #[serde(default)]
    pub finetune_log: Vec<EpochLog>,
}

/// Profiles, prunes, compensates according to the ablation flags and
/// fine-tunes. With `no_pruning` (or `k_p = 0`) the model is returned as is,
/// apart from fine-tuning.
pub fn prune_model(cfg: &ExperimentConfig, model: &Model, dataset: &MkgDataset, k_p: usize) -> Result<(Model, PruneOutcome)> {
    let a = &cfg.ablation;
    let p = &cfg.prune;
    let root = SeededRng::new(cfg.seed).fork(7);
    let profile = profile_attention_similarity(model, dataset, p.samples, &mut root.fork(0))?;
    let layers = if a.no_pruning { Vec::new() } else { select_prune_layers(&profile, k_p)? };
    let (mut pruned, mut plan) = if a.no_linear_comp || a.zero_init_wc {
        let mut m = model.clone();
        let d = m.config.d_model;
        for &l in &layers {
            m.prune_layer(l, a.zero_init_wc.then(|| Matrix::zeros(d, d)))?;
        }
        let plan = CompensationPlan {
            layers: layers.clone(),
            mode: p.mode,
            entries: Vec::new(),
            attention_flop_ratio: flop_ratio(m.config.layers, layers.len()),
            profile: None,
            matrices: Vec::new(),
        };
        (m, plan)
    } else {
        let queries = sample_queries(dataset, p.samples, &mut root.fork(1))?;
        let inputs = input_sequences(model, dataset, &queries)?;
        fit_all_compensations(model, &inputs, &layers, p.mode)?
    };
    plan.profile = Some(profile.clone());
    pruned.freeze_compensation = p.freeze_wc;
    let mut finetune_log = Vec::new();
    if p.finetune_epochs > 0 {
        let tc = TrainConfig {
            epochs: p.finetune_epochs,
            seed: cfg.train.seed.wrapping_add(1),
            ..cfg.train.clone()
        };
        finetune_log = train(&mut pruned, dataset, &tc, None)?.log;
    }
    Ok((
        pruned,
        PruneOutcome {
            profile,
            plan,
            finetune_log,
        },
    ))
}

pub fn evaluate_model(cfg: &ExperimentConfig, model: &Model, dataset: &MkgDataset, split: Split) -> Result<EvalReport> {
    let mut r = evaluate(&mut ModelScorer::new(model), dataset, split, true)?;
    r.config_hash = Some(cfg.hash());
    r.model_config = Some(model.config.clone());
    Ok(r)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: Ablation,
    pub pruned_layers: Vec<usize>,
    pub mr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

/// The ablation grid: the full model and one row per removed component.
pub fn ablation_grid() -> Vec<(&'static str, Ablation)> {
    let base = Ablation::default();
    vec![
        ("ELMM", base),
        ("w/o Image", Ablation { no_image_view: true, ..base }),
        ("w/o Text", Ablation { no_text_view: true, ..base }),
        ("w/o MVTC", Ablation { no_mvtc: true, ..base }),
        ("w/o Pruning", Ablation { no_pruning: true, ..base }),
        ("w/o Linear", Ablation { no_linear_comp: true, ..base }),
        ("w/o Init", Ablation { zero_init_wc: true, ..base }),
        ("Head Layer", Ablation { plain_head: true, ..base }),
    ]
}

/// Train, prune (per flags) and evaluate one variant on the test split.
pub fn run_variant(cfg: &ExperimentConfig, dataset: &MkgDataset, name: &str, flags: Ablation) -> Result<(AblationRow, Model)> {
    let vcfg = ExperimentConfig { ablation: flags, ..cfg.clone() };
    vcfg.validate()?;
    let (trained, _) = train_model(&vcfg, dataset, None)?;
    let (model, _) = prune_model(&vcfg, &trained, dataset, vcfg.prune.k_p)?;
    let r = evaluate_model(&vcfg, &model, dataset, Split::Test)?;
    Ok((
        AblationRow {
            name: name.into(),
            flags,
            pruned_layers: model.pruned_layers(),
            mr: r.mr,
            hits1: r.hits1,
            hits3: r.hits3,
            hits10: r.hits10,
        },
        model,
    ))
}

/// Serialized form of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,mr,hits1,hits3,hits10\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.name, r.mr, r.hits1, r.hits3, r.hits10));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_p: usize,
    pub pruned_layers: Vec<usize>,
    pub mr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

/// Prunes the same trained model at every depth `0..=L` and evaluates each.
pub fn sweep(cfg: &ExperimentConfig, trained: &Model, dataset: &MkgDataset) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for k_p in 0..=trained.config.layers {
        let (m, _) = prune_model(cfg, trained, dataset, k_p)?;
        let r = evaluate_model(cfg, &m, dataset, Split::Test)?;
        rows.push(SweepRow {
            k_p,
            pruned_layers: m.pruned_layers(),
            mr: r.mr,
            hits1: r.hits1,
            hits3: r.hits3,
            hits10: r.hits10,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("k_p,mr,hits1,hits3,hits10\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.k_p, r.mr, r.hits1, r.hits3, r.hits10));
    }
    s
}

/// File-level subcommands. Each reads its inputs from the workspace and
/// writes its artifacts there.
pub mod commands {
    use super::*;

    fn load_data(cfg: &ExperimentConfig, ws: &Workspace) -> Result<MkgDataset> {
        let (d, _) = load_dataset(&ws.data_dir())?;
        check_dataset(cfg, &d)?;
        Ok(d)
    }

    fn load_model(path: &Path) -> Result<Model> {
        checkpoint::load(path).map_err(|e| match e {
            ElmmError::Io(io) => ElmmError::Format(format!("{}: {io}", path.display())),
            other => other,
        })
    }

    pub fn gen_data(cfg: &ExperimentConfig, ws: &Workspace) -> Result<PathBuf> {
        let d = generate(cfg)?;
        save_dataset(&d, Some(&cfg.gen), &ws.data_dir())?;
        Ok(ws.data_dir())
    }

    pub fn train(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<EpochLog>> {
        let d = load_data(cfg, ws)?;
        let mut log = Vec::new();
        let (model, epochs) = train_model(cfg, &d, Some(&mut log))?;
        fs::write(ws.report("train_log.jsonl")?, log)?;
        if let Some(parent) = ws.checkpoint().parent() {
            fs::create_dir_all(parent)?;
        }
        checkpoint::save(&model, &ws.checkpoint())?;
        Ok(epochs)
    }

    pub fn profile(cfg: &ExperimentConfig, ws: &Workspace, ckpt: Option<&Path>) -> Result<SimilarityProfile> {
        let d = load_data(cfg, ws)?;
        let model = load_model(ckpt.unwrap_or(&ws.checkpoint()))?;
        let mut rng = SeededRng::new(cfg.seed).fork(7).fork(0);
        let p = profile_attention_similarity(&model, &d, cfg.prune.samples, &mut rng)?;
        write_json(&ws.report("profile.json")?, &Tagged { config_hash: cfg.hash(), body: p.clone() })?;
        fs::write(ws.report("profile.csv")?, p.to_csv())?;
        Ok(p)
    }

    pub fn prune(cfg: &ExperimentConfig, ws: &Workspace) -> Result<PruneOutcome> {
        let d = load_data(cfg, ws)?;
        let model = load_model(&ws.checkpoint())?;
        let (pruned, out) = prune_model(cfg, &model, &d, cfg.prune.k_p)?;
        checkpoint::save(&pruned, &ws.pruned_checkpoint())?;
        write_json(&ws.report("plan.json")?, &Tagged { config_hash: cfg.hash(), body: out.plan.clone() })?;
        Ok(out)
    }

    /// Evaluates `ckpt`, else the pruned checkpoint when present, else the
    /// trained one.
    pub fn eval(cfg: &ExperimentConfig, ws: &Workspace, ckpt: Option<&Path>, raw: bool) -> Result<EvalReport> {
        let d = load_data(cfg, ws)?;
        let path = match ckpt {
            Some(p) => p.to_path_buf(),
            None if ws.pruned_checkpoint().exists() => ws.pruned_checkpoint(),
            None => ws.checkpoint(),
        };
        let model = load_model(&path)?;
        let mut r = evaluate(&mut ModelScorer::new(&model), &d, Split::Test, !raw)?;
        r.config_hash = Some(cfg.hash());
        r.model_config = Some(model.config.clone());
        write_json(&ws.report("eval.json")?, &r)?;
        fs::write(ws.report("ranks.csv")?, r.ranks_csv())?;
        Ok(r)
    }

    pub fn bench(cfg: &ExperimentConfig, ws: &Workspace) -> Result<LatencyReport> {
        let full = load_model(&ws.checkpoint())?;
        let pruned = load_model(&ws.pruned_checkpoint())?;
        let r = bench_latency(&full, &pruned, &cfg.bench)?;
        write_json(&ws.report("latency.json")?, &Tagged { config_hash: cfg.hash(), body: r.clone() })?;
        Ok(r)
    }

    pub fn ablate(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<AblationRow>> {
        let d = load_data(cfg, ws)?;
        let mut rows = Vec::new();
        for (name, flags) in ablation_grid() {
            rows.push(run_variant(cfg, &d, name, flags)?.0);
        }
        write_json(&ws.report("ablation.json")?, &Tagged { config_hash: cfg.hash(), body: AblationTable { rows: rows.clone() } })?;
        fs::write(ws.report("ablation.csv")?, ablation_csv(&rows))?;
        Ok(rows)
    }

    pub fn sweep(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<SweepRow>> {
        let d = load_data(cfg, ws)?;
        let model = load_model(&ws.checkpoint())?;
        let rows = super::sweep(cfg, &model, &d)?;
        fs::write(ws.report("sweep.csv")?, sweep_csv(&rows))?;
        Ok(rows)
    }
}
