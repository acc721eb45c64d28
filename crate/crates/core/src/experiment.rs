//! Experiment configuration, provenance and the per-seed pipeline shared by
//! the command-line tool and the ablation suite.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::encoder::{Arch, EncoderConfig, ModelParams, TrainConfig};
use crate::episode::{episode_stream, Episode, KeyKind, RetrievalContext, SupportMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate, metric_rows, pair_accuracy, retrieval_report, test_episodes, MetricRow, MetricsReport, PredictionRecord, RetrievalReport};
use crate::meta::{meta_train, train_scratch_baseline, write_log_csv, MetaConfig, MetaTrainOutput};
use crate::retriever::{build_db, ConceptDb};
use crate::world::{
    choose_novel_pairs, generate_world, scan_novel_leaks, split_novel, CompositionalPair, ConceptVocabulary,
    DatasetSplits, Instance, WorldConfig,
};

pub const TOOL_VERSION: &str = concat!("compmeta ", env!("CARGO_PKG_VERSION"));

/// `[world]`: generator parameters plus the world seed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorldSection {
    pub seed: u64,
    pub config: WorldConfig,
}

impl Serialize for WorldSection {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut v = serde_json::to_value(&self.config).map_err(serde::ser::Error::custom)?;
        v.as_object_mut().expect("struct").insert("seed".into(), self.seed.into());
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for WorldSection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let mut table = toml::Table::deserialize(d)?;
        let seed = match table.remove("seed") {
            None => 0,
            Some(toml::Value::Integer(i)) if i >= 0 => i as u64,
            Some(other) => return Err(D::Error::custom(format!("world.seed: expected a non-negative integer, found {other}"))),
        };
        let config = WorldConfig::deserialize(toml::Value::Table(table)).map_err(D::Error::custom)?;
        Ok(Self { seed, config })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub arch: Arch,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { d: 64, layers: 2, heads: 4, max_len: 16, arch: Arch::OneStream, epochs: t.epochs, lr: t.lr, batch_size: t.batch_size }
    }
}

/// Which train instances a meta-training query may not retrieve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainExclusion {
    /// Only the query instance itself.
    #[default]
    Own,
    /// Every train instance of the query's composition, so the training
    /// episodes look like novel-pair test episodes.
    Pair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    /// Signed so that a negative value reaches validation and is reported by name.
    pub k: i64,
    pub mode: SupportMode,
    pub key: KeyKind,
    pub train_exclusion: TrainExclusion,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self { k: 4, mode: SupportMode::DivK, key: KeyKind::Pair, train_exclusion: TrainExclusion::Own }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2, 3, 4], out_dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldSection,
    pub encoder: EncoderSection,
    pub retrieval: RetrievalSection,
    pub meta: MetaConfig,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: 0, reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.config.validate()?;
        if self.retrieval.k < 1 {
            return Err(Error::config("retrieval.k", format!("must be >= 1, got {}", self.retrieval.k)));
        }
        self.train_config().validate()?;
        self.meta_config().validate()?;
        if self.eval.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "at least one seed is required"));
        }
        let distinct: BTreeSet<_> = self.eval.seeds.iter().collect();
        if distinct.len() != self.eval.seeds.len() {
            return Err(Error::config("eval.seeds", "seeds must be distinct"));
        }
        self.encoder_config(&ConceptVocabulary::new(
            self.world.config.attributes,
            self.world.config.verbs,
            self.world.config.objects,
            self.world.config.context_tokens,
        ))
        .validate()?;
        if self.world.config.max_context + 3 > self.encoder.max_len {
            return Err(Error::config(
                "encoder.max_len",
                format!("captions reach {} tokens, max_len is {}", self.world.config.max_context + 3, self.encoder.max_len),
            ));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.retrieval.k.max(1) as usize
    }

    pub fn encoder_config(&self, vocab: &ConceptVocabulary) -> EncoderConfig {
        EncoderConfig {
            d: self.encoder.d,
            layers: self.encoder.layers,
            heads: self.encoder.heads,
            vocab_size: vocab.size(),
            region_dim: self.world.config.region_dim(),
            max_len: self.encoder.max_len,
            arch: self.encoder.arch,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { epochs: self.encoder.epochs, lr: self.encoder.lr, batch_size: self.encoder.batch_size }
    }

    /// Meta settings with the retrieval section's mode and K filled in.
    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig { support_mode: self.retrieval.mode, k: self.k(), ..self.meta.clone() }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("config: {e}")))
    }

    /// Hash of the named sections only, so an artifact goes stale exactly
    /// when a section it depends on changes.
    pub fn section_hash(&self, sections: &[&str]) -> String {
        let full = serde_json::to_value(self).expect("config serializes");
        let mut picked = serde_json::Map::new();
        for s in sections {
            picked.insert((*s).to_string(), full.get(*s).cloned().unwrap_or(serde_json::Value::Null));
        }
        sha256_hex(serde_json::Value::Object(picked).to_string().as_bytes())
    }

    pub fn config_hash(&self) -> String {
        self.section_hash(&["world", "encoder", "retrieval", "meta", "eval"])
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// What produced an artifact: tool, relevant config sections, input hashes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub config_hash: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(config_hash: String) -> Self {
        Self { tool: TOOL_VERSION.to_string(), config_hash, seed: None, inputs: BTreeMap::new() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(mut self, name: &str, hash: String) -> Self {
        self.inputs.insert(name.to_string(), hash);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("provenance serializes")
    }

    pub fn parse(artifact: &str, text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("{artifact}: unreadable provenance: {e}")))
    }

    /// Fails with a fingerprint error if `self` was not produced under
    /// `config_hash`.
    pub fn expect_config(&self, artifact: &str, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::Fingerprint {
                artifact: artifact.to_string(),
                expected: config_hash.to_string(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn expect_input(&self, artifact: &str, name: &str, hash: &str) -> Result<()> {
        match self.inputs.get(name) {
            Some(h) if h == hash => Ok(()),
            other => Err(Error::Fingerprint {
                artifact: format!("{artifact} (input {name})"),
                expected: hash.to_string(),
                found: other.cloned().unwrap_or_else(|| "none".into()),
            }),
        }
    }
}

/// Derived sub-seed for one pipeline stage; keeps stages independent.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}/{stage}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Generated (or imported) data for every run of an experiment.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: ConceptVocabulary,
    pub splits: DatasetSplits,
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let world = generate_world(&cfg.world.config, cfg.world.seed)?;
    let novel = choose_novel_pairs(&world, cfg.world.config.novel_pairs, cfg.world.seed)?;
    let splits = split_novel(&world.instances, &novel, cfg.world.config.val_fraction)?;
    Ok(Dataset { vocab: world.vocab, splits })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HygieneReport {
    pub train_instances: usize,
    pub train_leaks: usize,
    pub db_entries: usize,
    pub db_source_leaks: usize,
}

impl HygieneReport {
    pub fn clean(&self) -> bool {
        self.train_leaks == 0 && self.db_source_leaks == 0
    }
}

/// Exhaustive scan of the train split and, when given, the DB's source instances.
pub fn hygiene(splits: &DatasetSplits, db: Option<&ConceptDb>) -> HygieneReport {
    let train = &splits.train;
    let mut r = HygieneReport {
        train_instances: train.len(),
        train_leaks: scan_novel_leaks(train, &splits.novel_pairs).len(),
        ..Default::default()
    };
    if let Some(db) = db {
        r.db_entries = db.len();
        let sources: Vec<Instance> = db
            .source_instances()
            .into_iter()
            .map(|i| train.get(i).cloned())
            .collect::<Option<Vec<_>>>()
            .unwrap_or_default();
        r.db_source_leaks = if sources.len() == db.source_instances().len() {
            scan_novel_leaks(&sources, &splits.novel_pairs).len()
        } else {
            // Entries pointing outside the train split count as leaks.
            db.len()
        };
    }
    r
}

fn require_clean(r: &HygieneReport) -> Result<()> {
    if r.clean() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "split hygiene failed: {} train leaks, {} leaking DB sources",
            r.train_leaks, r.db_source_leaks
        )))
    }
}

/// Sorted train indices sharing each train instance's composition.
pub fn exclusion_lists(train: &[Instance], rule: TrainExclusion) -> Vec<Vec<usize>> {
    match rule {
        TrainExclusion::Own => (0..train.len()).map(|i| vec![i]).collect(),
        TrainExclusion::Pair => {
            let mut by_pair: BTreeMap<CompositionalPair, Vec<usize>> = BTreeMap::new();
            for (i, inst) in train.iter().enumerate() {
                by_pair.entry(inst.gold).or_default().push(i);
            }
            train.iter().map(|inst| by_pair[&inst.gold].clone()).collect()
        }
    }
}

/// Method names used in tables and CSVs.
pub fn method_names(k: usize) -> [String; 5] {
    ["scratch".into(), "maml_no_ret".into(), format!("top{k}"), format!("div{k}"), format!("oracle{k}")]
}

/// Test episodes of one mode for both evaluation splits.
#[derive(Clone, Debug)]
pub struct TestEpisodes {
    pub seen: Vec<Episode>,
    pub novel: Vec<Episode>,
}

impl TestEpisodes {
    pub fn build(ctx: &RetrievalContext<'_>, splits: &DatasetSplits, mode: SupportMode, k: usize) -> Result<Self> {
        Ok(Self { seen: test_episodes(ctx, &splits.test_seen, mode, k)?, novel: test_episodes(ctx, &splits.test_novel, mode, k)? })
    }
}

/// Everything one seed of the ablation produces.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    /// `(method, report)` in table order.
    pub reports: Vec<(String, MetricsReport)>,
    pub predictions: Vec<(String, Vec<PredictionRecord>)>,
    /// The Div-K checkpoint evaluated with zero test-time steps.
    pub zero_step: MetricsReport,
    pub retrieval: Vec<(String, RetrievalReport)>,
    pub hygiene: HygieneReport,
    /// Verbalized predictions outside their candidate sets.
    pub violations: usize,
    pub verbalized: usize,
    pub selections: Vec<(String, usize, f64)>,
}

impl SeedRun {
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        self.reports.iter().flat_map(|(m, r)| metric_rows(m, self.seed, r)).collect()
    }

    pub fn report(&self, method: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|(m, _)| m == method).map(|(_, r)| r)
    }
}

/// Hash of (world seed, model seed, mode, K) attached to each report.
pub fn report_fingerprint(world_seed: u64, seed: u64, mode: &str, k: usize) -> String {
    sha256_hex(format!("{world_seed}/{seed}/{mode}/{k}").as_bytes())[..16].to_string()
}

/// Retrieval encoder, database and the meta-training stream of one seed.
pub struct SeedSetup {
    pub encoder: ModelParams,
    pub encoder_losses: Vec<f64>,
    pub db: ConceptDb,
    pub hygiene: HygieneReport,
}

/// Train the retrieval encoder (also the scratch baseline) and index the train split.
pub fn setup_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<SeedSetup> {
    let pre = hygiene(&data.splits, None);
    require_clean(&pre)?;
    let ec = cfg.encoder_config(&data.vocab);
    let report = train_scratch_baseline(
        &ec,
        &data.splits.train,
        &data.splits.novel_pairs,
        data.vocab.mask,
        data.vocab.cls,
        &cfg.train_config(),
        stage_seed(seed, "encoder"),
    )?;
    let db = build_db(&report.params, &data.splits.train)?;
    let h = hygiene(&data.splits, Some(&db));
    require_clean(&h)?;
    Ok(SeedSetup { encoder: report.params, encoder_losses: report.losses, db, hygiene: h })
}

pub fn context<'a>(cfg: &ExperimentConfig, setup: &'a SeedSetup, data: &'a Dataset) -> RetrievalContext<'a> {
    RetrievalContext { db: &setup.db, encoder: &setup.encoder, train: &data.splits.train, key_kind: cfg.retrieval.key }
}

/// Meta-training episodes over the train split for `mode`.
pub fn training_episodes(cfg: &ExperimentConfig, ctx: &RetrievalContext<'_>, mode: SupportMode, seed: u64) -> Result<Vec<Episode>> {
    let lists = exclusion_lists(ctx.train, cfg.retrieval.train_exclusion);
    episode_stream(ctx, ctx.train, mode, cfg.k(), stage_seed(seed, "episodes"), &|i| lists[i].clone())
}

/// Meta-train from `theta0` on `mode` episodes. Selectors are scored on the
/// validation split: one per entry of `val`, each an episode set run through
/// the test path.
pub fn meta_train_mode(
    cfg: &ExperimentConfig,
    theta0: &ModelParams,
    episodes: &[Episode],
    seed: u64,
    val: &[(&str, &[Episode])],
) -> Result<MetaTrainOutput> {
    let mc = cfg.meta_config();
    let names: Vec<&str> = val.iter().map(|(n, _)| *n).collect();
    let mut validate = |theta: &ModelParams| -> Result<Vec<f64>> {
        val.iter().map(|(_, eps)| pair_accuracy(theta, eps, &mc)).collect()
    };
    meta_train(theta0, episodes, &mc, stage_seed(seed, "meta"), &names, &mut validate)
}

/// One full seed of the five-method comparison. Per-seed artifacts go to
/// `out` when given.
pub fn run_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64, out: Option<&Path>) -> Result<SeedRun> {
    let k = cfg.k();
    let mc = cfg.meta_config();
    let setup = setup_seed(cfg, data, seed)?;
    let ctx = context(cfg, &setup, data);
    let splits = &data.splits;

    let val_div = test_episodes(&ctx, &splits.val, SupportMode::DivK, k)?;
    let val_top = test_episodes(&ctx, &splits.val, SupportMode::TopK, k)?;
    let val_none = test_episodes(&ctx, &splits.val, SupportMode::NoRetrieval, k)?;

    let div_eps = training_episodes(cfg, &ctx, SupportMode::DivK, seed)?;
    let div_run = meta_train_mode(cfg, &setup.encoder, &div_eps, seed, &[("div", &val_div), ("maml_no_ret", &val_none)])?;
    drop(div_eps);
    let top_eps = training_episodes(cfg, &ctx, SupportMode::TopK, seed)?;
    let top_run = meta_train_mode(cfg, &setup.encoder, &top_eps, seed, &[("top", &val_top)])?;
    drop(top_eps);

    let pick = |run: &MetaTrainOutput, name: &str| run.selection(name).map(|s| s.params.clone()).expect("selector exists");
    let theta_div = pick(&div_run, "div");
    let theta_no_ret = pick(&div_run, "maml_no_ret");
    let theta_top = pick(&top_run, "top");

    let names = method_names(k);
    let plan: [(&str, &ModelParams, SupportMode); 5] = [
        (&names[0], &setup.encoder, SupportMode::NoRetrieval),
        (&names[1], &theta_no_ret, SupportMode::NoRetrieval),
        (&names[2], &theta_top, SupportMode::TopK),
        (&names[3], &theta_div, SupportMode::DivK),
        (&names[4], &theta_div, SupportMode::Oracle),
    ];

    let mut run = SeedRun {
        seed,
        reports: Vec::new(),
        predictions: Vec::new(),
        zero_step: MetricsReport::default(),
        retrieval: Vec::new(),
        hygiene: setup.hygiene.clone(),
        violations: 0,
        verbalized: 0,
        selections: Vec::new(),
    };
    for r in [&div_run, &top_run] {
        run.selections.extend(r.selections.iter().map(|s| (s.name.clone(), s.step, s.score)));
    }
    let mut none_eps: Option<TestEpisodes> = None;
    for (name, theta, mode) in plan {
        let eps = match (mode, &none_eps) {
            (SupportMode::NoRetrieval, Some(e)) => e.clone(),
            _ => TestEpisodes::build(&ctx, splits, mode, k)?,
        };
        let fp = report_fingerprint(cfg.world.seed, seed, mode.as_str(), k);
        let (report, records) = evaluate(theta, &eps.seen, &eps.novel, &mc, &fp)?;
        for r in &records {
            if let Some(ok) = r.in_candidates {
                run.verbalized += 1;
                run.violations += usize::from(!ok);
            }
        }
        if mode.retrieves() {
            run.retrieval.push((name.to_string(), retrieval_report(&eps.seen, &eps.novel)?));
        }
        if mode == SupportMode::DivK {
            let zero = MetaConfig { inner_steps_test: 0, ..mc.clone() };
            let fp0 = report_fingerprint(cfg.world.seed, seed, "div_k_0_steps", k);
            run.zero_step = evaluate(theta, &eps.seen, &eps.novel, &zero, &fp0)?.0;
        }
        if mode == SupportMode::NoRetrieval {
            none_eps = Some(eps);
        }
        run.reports.push((name.to_string(), report));
        run.predictions.push((name.to_string(), records));
    }

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_log_csv(&div_run, None, &dir.join("meta_log_div.csv"))?;
        write_log_csv(&top_run, None, &dir.join("meta_log_top.csv"))?;
        for (name, records) in &run.predictions {
            crate::eval::write_predictions(records, None, &dir.join(format!("predictions_{name}.csv")))?;
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_k_is_rejected_by_name() {
        let err = ExperimentConfig::from_toml_str("[retrieval]\nk = -4\n").unwrap_err();
        assert!(err.to_string().contains("retrieval.k"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(ExperimentConfig::from_toml_str("[meta]\ninner_lr = 0.1\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[world]\nseed = 3\nnot_a_field = 1\n").is_err());
    }

    #[test]
    fn world_seed_round_trips() {
        let cfg = ExperimentConfig::from_toml_str("[world]\nseed = 11\npairs = 60\n").unwrap();
        assert_eq!(cfg.world.seed, 11);
        assert_eq!(cfg.world.config.pairs, 60);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn section_hash_ignores_unrelated_sections() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.meta.outer_lr = 0.5;
        assert_eq!(a.section_hash(&["world"]), b.section_hash(&["world"]));
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn pair_exclusion_covers_same_composition() {
        let data = generate_dataset(&ExperimentConfig::default()).unwrap();
        let lists = exclusion_lists(&data.splits.train, TrainExclusion::Pair);
        for (i, l) in lists.iter().enumerate().take(50) {
            assert!(l.contains(&i));
            assert!(l.windows(2).all(|w| w[0] < w[1]));
            assert!(l.iter().all(|&j| data.splits.train[j].gold == data.splits.train[i].gold));
        }
    }
}
