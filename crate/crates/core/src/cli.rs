//! Subcommands of the `compmeta` tool. Each reads and writes artifacts in
//! one directory and checks the provenance of everything it consumes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::encoder::{load_checkpoint, save_checkpoint, ModelParams};
use crate::episode::SupportMode;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, metric_rows, run_ablation_suite, write_metric_rows, write_predictions, AblationOutput, MetricsReport,
};
use crate::experiment::{
    context, file_hash, generate_dataset, hygiene, meta_train_mode, report_fingerprint, stage_seed, training_episodes,
    Dataset, ExperimentConfig, Provenance, SeedSetup, TestEpisodes,
};
use crate::meta::{train_scratch_baseline, write_log_csv};
use crate::retriever::{build_db, load_db, save_db};
use crate::world::{export_jsonl, import_jsonl, read_vocab, write_vocab};

pub const DATASET: &str = "dataset.jsonl";
pub const VOCAB: &str = "vocab.json";
pub const ENCODER: &str = "encoder.ckpt";
pub const DB: &str = "db.bin";
pub const MODEL: &str = "model.ckpt";

const WORLD_SECTIONS: &[&str] = &["world"];
const ENCODER_SECTIONS: &[&str] = &["world", "encoder"];
const META_SECTIONS: &[&str] = &["world", "encoder", "retrieval", "meta"];

/// Resolved arguments shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Context {
    /// `seed_override` replaces the seed list with a single seed.
    pub fn new(mut config: ExperimentConfig, out: Option<PathBuf>, seed_override: Option<u64>) -> Result<Self> {
        if let Some(s) = seed_override {
            config.eval.seeds = vec![s];
        }
        config.validate()?;
        let out = out.unwrap_or_else(|| config.eval.out_dir.clone());
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let seed = config.eval.seeds[0];
        Ok(Self { config, out, seed })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn provenance(&self, sections: &[&str]) -> Provenance {
        Provenance::new(self.config.section_hash(sections))
    }
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generate the world, split it and write `dataset.jsonl` plus `vocab.json`.
pub fn cmd_gen_world(ctx: &Context) -> Result<Dataset> {
    let data = generate_dataset(&ctx.config)?;
    let h = hygiene(&data.splits, None);
    if !h.clean() {
        return Err(Error::Invalid(format!("generated train split leaks {} novel instances", h.train_leaks)));
    }
    export_jsonl(&data.splits, &ctx.path(DATASET))?;
    let prov = ctx.provenance(WORLD_SECTIONS).input("dataset", file_hash(&ctx.path(DATASET))?);
    let prov = serde_json::to_value(&prov).map_err(|e| Error::Invalid(e.to_string()))?;
    write_vocab(&data.vocab, &data.splits.novel_pairs, Some(prov), &ctx.path(VOCAB))?;
    Ok(data)
}

/// Load the dataset written by [`cmd_gen_world`], checking that it belongs
/// to this config and has not been edited since.
pub fn load_dataset(ctx: &Context) -> Result<(Dataset, String)> {
    let vocab_file = read_vocab(&ctx.path(VOCAB))?;
    let hash = file_hash(&ctx.path(DATASET))?;
    let prov = vocab_file
        .provenance
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("{}: no provenance record", ctx.path(VOCAB).display())))?;
    let prov: Provenance = serde_json::from_value(prov.clone()).map_err(|e| Error::Invalid(e.to_string()))?;
    prov.expect_config(VOCAB, &ctx.config.section_hash(WORLD_SECTIONS))?;
    prov.expect_input(DATASET, "dataset", &hash)?;
    let splits = import_jsonl(&ctx.path(DATASET))?;
    if splits.novel_pairs != vocab_file.novel_pairs {
        return Err(Error::Invalid("dataset and vocabulary disagree on the novel pairs".into()));
    }
    Ok((Dataset { vocab: vocab_file.vocab, splits }, hash))
}

/// Train the retrieval encoder, which doubles as the scratch baseline.
pub fn cmd_train_retriever(ctx: &Context) -> Result<ModelParams> {
    let (data, data_hash) = load_dataset(ctx)?;
    let report = train_scratch_baseline(
        &ctx.config.encoder_config(&data.vocab),
        &data.splits.train,
        &data.splits.novel_pairs,
        data.vocab.mask,
        data.vocab.cls,
        &ctx.config.train_config(),
        stage_seed(ctx.seed, "encoder"),
    )?;
    let prov = ctx.provenance(ENCODER_SECTIONS).with_seed(ctx.seed).input("dataset", data_hash);
    save_checkpoint(&report.params, &prov.to_json(), &ctx.path(ENCODER))?;
    let path = ctx.path("encoder_loss.csv");
    let mut text = format!("# provenance: {}\nstep,loss\n", prov.to_json());
    for (i, l) in report.losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(report.params)
}

fn load_encoder(ctx: &Context, data_hash: &str) -> Result<(ModelParams, String)> {
    let path = ctx.path(ENCODER);
    let (params, meta) = load_checkpoint(&path)?;
    let prov = Provenance::parse(ENCODER, &meta)?;
    prov.expect_config(ENCODER, &ctx.config.section_hash(ENCODER_SECTIONS))?;
    prov.expect_input(ENCODER, "dataset", data_hash)?;
    if prov.seed != Some(ctx.seed) {
        return Err(Error::Fingerprint {
            artifact: format!("{ENCODER} (seed)"),
            expected: ctx.seed.to_string(),
            found: prov.seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
        });
    }
    Ok((params, file_hash(&path)?))
}

/// Index the train split with the trained encoder.
pub fn cmd_build_db(ctx: &Context) -> Result<()> {
    let (data, data_hash) = load_dataset(ctx)?;
    let (encoder, enc_hash) = load_encoder(ctx, &data_hash)?;
    let db = build_db(&encoder, &data.splits.train)?;
    let h = hygiene(&data.splits, Some(&db));
    if !h.clean() {
        return Err(Error::Invalid(format!("database sources leak {} novel instances", h.db_source_leaks)));
    }
    let prov = ctx.provenance(ENCODER_SECTIONS).with_seed(ctx.seed).input("dataset", data_hash).input("encoder", enc_hash);
    save_db(&db, &prov.to_json(), &ctx.path(DB))
}

fn load_setup(ctx: &Context) -> Result<(Dataset, SeedSetup, Provenance)> {
    let (data, data_hash) = load_dataset(ctx)?;
    let (encoder, enc_hash) = load_encoder(ctx, &data_hash)?;
    let db_path = ctx.path(DB);
    let (db, meta) = load_db(&db_path)?;
    let prov = Provenance::parse(DB, &meta)?;
    prov.expect_input(DB, "encoder", &enc_hash)?;
    prov.expect_input(DB, "dataset", &data_hash)?;
    let h = hygiene(&data.splits, Some(&db));
    let inputs = Provenance::default()
        .input("dataset", data_hash)
        .input("encoder", enc_hash)
        .input("db", file_hash(&db_path)?);
    Ok((data, SeedSetup { encoder, encoder_losses: Vec::new(), db, hygiene: h }, inputs))
}

/// Meta-train with the configured retrieval mode; keeps the best validation
/// checkpoint.
pub fn cmd_meta_train(ctx: &Context) -> Result<ModelParams> {
    let (data, setup, inputs) = load_setup(ctx)?;
    let mode = ctx.config.retrieval.mode;
    let rctx = context(&ctx.config, &setup, &data);
    let val = crate::eval::test_episodes(&rctx, &data.splits.val, mode, ctx.config.k())?;
    let episodes = training_episodes(&ctx.config, &rctx, mode, ctx.seed)?;
    let out = meta_train_mode(&ctx.config, &setup.encoder, &episodes, ctx.seed, &[(mode.as_str(), &val)])?;
    let mut prov = ctx.provenance(META_SECTIONS).with_seed(ctx.seed);
    prov.inputs = inputs.inputs;
    write_log_csv(&out, Some(&prov.to_json()), &ctx.path("meta_log.csv"))?;
    let best = out.selections[0].params.clone();
    save_checkpoint(&best, &prov.to_json(), &ctx.path(MODEL))?;
    Ok(best)
}

/// Evaluate the meta-trained checkpoint (or, in no-retrieval mode, whatever
/// `model.ckpt` holds) on both test splits.
pub fn cmd_evaluate(ctx: &Context) -> Result<MetricsReport> {
    let (data, setup, inputs) = load_setup(ctx)?;
    let model_path = ctx.path(MODEL);
    let (theta, meta) = load_checkpoint(&model_path)?;
    let mprov = Provenance::parse(MODEL, &meta)?;
    mprov.expect_config(MODEL, &ctx.config.section_hash(META_SECTIONS))?;
    for (name, hash) in &inputs.inputs {
        mprov.expect_input(MODEL, name, hash)?;
    }
    let mode = ctx.config.retrieval.mode;
    let k = ctx.config.k();
    let rctx = context(&ctx.config, &setup, &data);
    let eps = TestEpisodes::build(&rctx, &data.splits, mode, k)?;
    let fp = report_fingerprint(ctx.config.world.seed, ctx.seed, mode.as_str(), k);
    let (report, records) = evaluate(&theta, &eps.seen, &eps.novel, &ctx.config.meta_config(), &fp)?;

    let mut prov = ctx.provenance(&["world", "encoder", "retrieval", "meta", "eval"]).with_seed(ctx.seed);
    prov.inputs = inputs.inputs;
    prov.inputs.insert("model".into(), file_hash(&model_path)?);
    let p = prov.to_json();
    write_predictions(&records, Some(&p), &ctx.path("predictions.csv"))?;
    write_metric_rows(&metric_rows(mode.as_str(), ctx.seed, &report), Some(&p), &ctx.path("metrics.csv"))?;
    #[derive(Serialize)]
    struct ReportFile<'a> {
        provenance: &'a Provenance,
        mode: SupportMode,
        k: usize,
        report: &'a MetricsReport,
    }
    write_json(&ReportFile { provenance: &prov, mode, k, report: &report }, &ctx.path("report.json"))?;
    Ok(report)
}

/// The five-method comparison over every configured seed.
pub fn cmd_ablate(ctx: &Context) -> Result<AblationOutput> {
    let data = generate_dataset(&ctx.config)?;
    run_ablation_suite(&ctx.config, &data, &ctx.config.eval.seeds, &ctx.out)
}
