//! Accuracy and retrieval metrics, prediction dumps, and summary tables.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episode::{build_episode, Episode, RetrievalContext, SupportMode};
use crate::error::{Error, Result};
use crate::meta::{test_time_predict, MetaConfig};
use crate::encoder::ModelParams;
use crate::verbalizer::support_vocab;
use crate::experiment::{file_hash, method_names, run_seed, Dataset, ExperimentConfig, HygieneReport, Provenance};
use crate::world::{export_jsonl, Instance, SplitName};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub total: usize,
    pub attr_correct: usize,
    pub obj_correct: usize,
    pub pair_correct: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl SplitMetrics {
    pub fn add(&mut self, attr_ok: bool, obj_ok: bool) {
        self.total += 1;
        self.attr_correct += usize::from(attr_ok);
        self.obj_correct += usize::from(obj_ok);
        self.pair_correct += usize::from(attr_ok && obj_ok);
    }

    pub fn pair(&self) -> f64 {
        ratio(self.pair_correct, self.total)
    }

    pub fn attr(&self) -> f64 {
        ratio(self.attr_correct, self.total)
    }

    pub fn obj(&self) -> f64 {
        ratio(self.obj_correct, self.total)
    }

    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Pair => self.pair(),
            Metric::Attr => self.attr(),
            Metric::Obj => self.obj(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pair,
    Attr,
    Obj,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Pair, Metric::Attr, Metric::Obj];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Pair => "pair",
            Metric::Attr => "attr",
            Metric::Obj => "obj",
        }
    }
}

/// Evaluated split: seen or novel compositions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Seen,
    Novel,
}

impl EvalSplit {
    pub const ALL: [EvalSplit; 2] = [EvalSplit::Seen, EvalSplit::Novel];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Seen => "seen",
            EvalSplit::Novel => "novel",
        }
    }

    pub fn source(self) -> SplitName {
        match self {
            EvalSplit::Seen => SplitName::TestSeen,
            EvalSplit::Novel => SplitName::TestNovel,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seen: SplitMetrics,
    pub novel: SplitMetrics,
    pub fingerprint: String,
}

impl MetricsReport {
    pub fn split(&self, s: EvalSplit) -> &SplitMetrics {
        match s {
            EvalSplit::Seen => &self.seen,
            EvalSplit::Novel => &self.novel,
        }
    }

    fn split_mut(&mut self, s: EvalSplit) -> &mut SplitMetrics {
        match s {
            EvalSplit::Seen => &mut self.seen,
            EvalSplit::Novel => &mut self.novel,
        }
    }
}

/// One evaluated query, enough to regenerate the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub split: EvalSplit,
    pub index: usize,
    pub gold_attr: u32,
    pub gold_obj: u32,
    pub pred_attr: u32,
    pub pred_obj: u32,
    pub steps: usize,
    /// Whether both predictions lie in the support candidates (verbalized
    /// methods only).
    pub in_candidates: Option<bool>,
}

pub fn report_from_records(records: &[PredictionRecord], fingerprint: &str) -> MetricsReport {
    let mut r = MetricsReport { fingerprint: fingerprint.to_string(), ..Default::default() };
    for p in records {
        r.split_mut(p.split).add(p.pred_attr == p.gold_attr, p.pred_obj == p.gold_obj);
    }
    r
}

/// Build test episodes for `split` in instance order.
pub fn test_episodes(ctx: &RetrievalContext<'_>, split: &[Instance], mode: SupportMode, k: usize) -> Result<Vec<Episode>> {
    split.iter().map(|q| build_episode(ctx, q, mode, k, &[])).collect()
}

/// Predict every episode of both splits with `theta`.
///
/// Episodes whose retrieval failed to produce support are an error for
/// retrieval modes. `theta` is never modified.
pub fn evaluate(
    theta: &ModelParams,
    seen: &[Episode],
    novel: &[Episode],
    config: &MetaConfig,
    fingerprint: &str,
) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    if seen.is_empty() && novel.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let mut records = Vec::with_capacity(seen.len() + novel.len());
    for (split, episodes) in [(EvalSplit::Seen, seen), (EvalSplit::Novel, novel)] {
        for (index, ep) in episodes.iter().enumerate() {
            if ep.query.caption.iter().any(|&t| t as usize >= theta.config.vocab_size) {
                return Err(Error::Invalid("split uses tokens outside the model vocabulary".into()));
            }
            let p = test_time_predict(theta, ep, config)?;
            let in_candidates = p.candidates.as_ref().map(|c| c.attr.contains(&p.attr) && c.obj.contains(&p.obj));
            records.push(PredictionRecord {
                split,
                index,
                gold_attr: ep.query.gold.attr,
                gold_obj: ep.query.gold.obj,
                pred_attr: p.attr,
                pred_obj: p.obj,
                steps: p.steps,
                in_candidates,
            });
        }
    }
    Ok((report_from_records(&records, fingerprint), records))
}

/// Mean pair accuracy over episodes; used for model selection.
pub fn pair_accuracy(theta: &ModelParams, episodes: &[Episode], config: &MetaConfig) -> Result<f64> {
    let mut m = SplitMetrics::default();
    for ep in episodes {
        let p = test_time_predict(theta, ep, config)?;
        m.add(p.attr == ep.query.gold.attr, p.obj == ep.query.gold.obj);
    }
    Ok(m.pair())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HitCounts {
    pub total: usize,
    pub attr_hit: usize,
    pub obj_hit: usize,
    pub pair_hit: usize,
}

impl HitCounts {
    pub fn attr(&self) -> f64 {
        ratio(self.attr_hit, self.total)
    }

    pub fn obj(&self) -> f64 {
        ratio(self.obj_hit, self.total)
    }

    pub fn pair(&self) -> f64 {
        ratio(self.pair_hit, self.total)
    }
}

/// Gold-in-candidates rates per split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub seen: HitCounts,
    pub novel: HitCounts,
}

fn hit_counts(episodes: &[Episode]) -> Result<HitCounts> {
    let mut h = HitCounts::default();
    for ep in episodes {
        let v = support_vocab(ep)?;
        let a = v.attr.contains(&ep.query.gold.attr);
        let o = v.obj.contains(&ep.query.gold.obj);
        h.total += 1;
        h.attr_hit += usize::from(a);
        h.obj_hit += usize::from(o);
        h.pair_hit += usize::from(a && o);
    }
    Ok(h)
}

/// Whether each split's gold concepts appear among the retrieved support labels.
pub fn retrieval_accuracy(
    ctx: &RetrievalContext<'_>,
    seen: &[Instance],
    novel: &[Instance],
    k: usize,
    mode: SupportMode,
) -> Result<RetrievalReport> {
    if seen.is_empty() && novel.is_empty() {
        return Err(Error::Invalid("retrieval accuracy over empty splits".into()));
    }
    Ok(RetrievalReport {
        seen: hit_counts(&test_episodes(ctx, seen, mode, k)?)?,
        novel: hit_counts(&test_episodes(ctx, novel, mode, k)?)?,
    })
}

/// Same as [`retrieval_accuracy`] on already-built episodes.
pub fn retrieval_report(seen: &[Episode], novel: &[Episode]) -> Result<RetrievalReport> {
    Ok(RetrievalReport { seen: hit_counts(seen)?, novel: hit_counts(novel)? })
}

/// CSV writer whose first line is a `# provenance: ...` comment when given.
pub fn csv_writer(path: &Path, provenance: Option<&str>) -> Result<csv::Writer<File>> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(p) = provenance {
        writeln!(file, "# provenance: {p}").map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Invalid(format!("{}: {e}", path.display()))
}

fn write_rows<T: Serialize>(rows: &[T], provenance: Option<&str>, path: &Path) -> Result<()> {
    let mut w = csv_writer(path, provenance)?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err(path))?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                Error::Parse { path: path.to_path_buf(), line, reason: e.to_string() }
            })
        })
        .collect()
}

pub fn write_predictions(records: &[PredictionRecord], provenance: Option<&str>, path: &Path) -> Result<()> {
    write_rows(records, provenance, path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    read_rows(path)
}

/// One cell of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub split: String,
    pub metric: String,
    pub seed: u64,
    pub value: f64,
}

pub fn metric_rows(method: &str, seed: u64, report: &MetricsReport) -> Vec<MetricRow> {
    let mut out = Vec::with_capacity(6);
    for s in EvalSplit::ALL {
        for m in Metric::ALL {
            out.push(MetricRow {
                method: method.to_string(),
                split: s.as_str().to_string(),
                metric: m.as_str().to_string(),
                seed,
                value: report.split(s).metric(m),
            });
        }
    }
    out
}

pub fn write_metric_rows(rows: &[MetricRow], provenance: Option<&str>, path: &Path) -> Result<()> {
    write_rows(rows, provenance, path)
}

pub fn read_metric_rows(path: &Path) -> Result<Vec<MetricRow>> {
    read_rows(path)
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

pub fn mean_sd(values: &[f64]) -> CellStats {
    let n = values.len();
    if n == 0 {
        return CellStats { mean: f64::NAN, sd: f64::NAN, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    CellStats { mean, sd, n }
}

/// `method -> split -> metric -> stats`, in sorted key order.
pub type Summary = BTreeMap<String, BTreeMap<String, BTreeMap<String, CellStats>>>;

pub fn summarize(rows: &[MetricRow]) -> Summary {
    let mut grouped: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        grouped.entry((r.method.clone(), r.split.clone(), r.metric.clone())).or_default().push(r.value);
    }
    let mut out = Summary::new();
    for ((m, s, k), v) in grouped {
        out.entry(m).or_default().entry(s).or_default().insert(k, mean_sd(&v));
    }
    out
}

/// Text table with one row per method and mean ± sd (in percent) per cell.
pub fn render_table(summary: &Summary, methods: &[&str]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<14}", "method"));
    for s in EvalSplit::ALL {
        for m in Metric::ALL {
            out.push_str(&format!(" | {:>15}", format!("{} {}", s.as_str(), m.as_str())));
        }
    }
    out.push('\n');
    out.push_str(&"-".repeat(14 + 6 * 18));
    out.push('\n');
    for method in methods {
        out.push_str(&format!("{method:<14}"));
        for s in EvalSplit::ALL {
            for m in Metric::ALL {
                let cell = summary
                    .get(*method)
                    .and_then(|x| x.get(s.as_str()))
                    .and_then(|x| x.get(m.as_str()))
                    .map(|c| format!("{:.2} ± {:.2}", 100.0 * c.mean, 100.0 * c.sd))
                    .unwrap_or_else(|| "-".into());
                out.push_str(&format!(" | {cell:>15}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Per-seed extras that are not part of the comparison table.
#[derive(Clone, Debug, Serialize)]
pub struct SeedDiagnostics {
    pub seed: u64,
    pub zero_step: MetricsReport,
    pub retrieval: BTreeMap<String, RetrievalReport>,
    pub hygiene: HygieneReport,
    pub verbalized: usize,
    pub violations: usize,
    /// `(selector, step, validation score)` of every selected checkpoint.
    pub selections: Vec<(String, usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct AblationOutput {
    pub methods: Vec<String>,
    pub rows: Vec<MetricRow>,
    pub summary: Summary,
    pub table: String,
    pub diagnostics: Vec<SeedDiagnostics>,
}

impl AblationOutput {
    pub fn cell(&self, method: &str, split: EvalSplit, metric: Metric) -> Option<CellStats> {
        self.summary.get(method)?.get(split.as_str())?.get(metric.as_str()).copied()
    }

    /// Values of one cell in seed order.
    pub fn values(&self, method: &str, split: EvalSplit, metric: Metric) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.split == split.as_str() && r.metric == metric.as_str())
            .map(|r| r.value)
            .collect()
    }
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    provenance: &'a Provenance,
    seeds: &'a [u64],
    methods: &'a [String],
    cells: &'a Summary,
}

/// Run every seed of the five-method comparison and write `metrics.csv`,
/// `summary.json`, `table.txt` and `diagnostics.json` under `out`.
///
/// A failing seed aborts the suite after writing what finished so far to
/// `partial_metrics.csv` and the error to `error.txt`.
pub fn run_ablation_suite(cfg: &ExperimentConfig, data: &Dataset, seeds: &[u64], out: &Path) -> Result<AblationOutput> {
    if seeds.len() < 3 {
        return Err(Error::config("eval.seeds", format!("the ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset_path = out.join("dataset.jsonl");
    export_jsonl(&data.splits, &dataset_path)?;
    let prov = Provenance::new(cfg.config_hash()).input("dataset", file_hash(&dataset_path)?);
    let p = prov.to_json();

    let methods: Vec<String> = method_names(cfg.k()).to_vec();
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    for &seed in seeds {
        let run = match run_seed(cfg, data, seed, Some(&out.join(format!("seed_{seed}")))) {
            Ok(r) => r,
            Err(e) => {
                write_metric_rows(&rows, Some(&p), &out.join("partial_metrics.csv"))?;
                let path = out.join("error.txt");
                fs::write(&path, format!("seed {seed}: {e}\n")).map_err(|io| Error::io(&path, io))?;
                return Err(e);
            }
        };
        rows.extend(run.metric_rows());
        diagnostics.push(SeedDiagnostics {
            seed,
            zero_step: run.zero_step.clone(),
            retrieval: run.retrieval.iter().cloned().collect(),
            hygiene: run.hygiene.clone(),
            verbalized: run.verbalized,
            violations: run.violations,
            selections: run.selections.clone(),
        });
    }
    let summary = summarize(&rows);
    let names: Vec<&str> = methods.iter().map(String::as_str).collect();
    let table = render_table(&summary, &names);

    write_metric_rows(&rows, Some(&p), &out.join("metrics.csv"))?;
    let json = serde_json::to_string_pretty(&SummaryFile { provenance: &prov, seeds, methods: &methods, cells: &summary })
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let path = out.join("summary.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    let path = out.join("table.txt");
    fs::write(&path, format!("# provenance: {p}\n{table}")).map_err(|e| Error::io(&path, e))?;
    #[derive(Serialize)]
    struct DiagFile<'a> {
        provenance: &'a Provenance,
        seeds: &'a [SeedDiagnostics],
    }
    let json = serde_json::to_string_pretty(&DiagFile { provenance: &prov, seeds: &diagnostics })
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let path = out.join("diagnostics.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(AblationOutput { methods, rows, summary, table, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(split: EvalSplit, a: bool, o: bool) -> PredictionRecord {
        PredictionRecord {
            split,
            index: 0,
            gold_attr: 1,
            gold_obj: 2,
            pred_attr: if a { 1 } else { 9 },
            pred_obj: if o { 2 } else { 9 },
            steps: 0,
            in_candidates: None,
        }
    }

    #[test]
    fn hand_counted_fixture() {
        let recs = vec![
            rec(EvalSplit::Novel, true, true),
            rec(EvalSplit::Novel, true, true),
            rec(EvalSplit::Novel, true, true),
            rec(EvalSplit::Novel, true, false),
            rec(EvalSplit::Novel, false, false),
        ];
        let r = report_from_records(&recs, "");
        assert!((r.novel.pair() - 0.6).abs() < 1e-12);
        assert!((r.novel.attr() - 0.8).abs() < 1e-12);
        assert!((r.novel.obj() - 0.6).abs() < 1e-12);
        assert!(r.novel.pair() <= r.novel.attr().min(r.novel.obj()));
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let recs: Vec<_> = (0..4).map(|i| rec(if i % 2 == 0 { EvalSplit::Seen } else { EvalSplit::Novel }, true, true)).collect();
        let r = report_from_records(&recs, "");
        for s in EvalSplit::ALL {
            for m in Metric::ALL {
                assert_eq!(r.split(s).metric(m), 1.0);
            }
        }
    }

    #[test]
    fn prediction_dump_regenerates_report() {
        let recs = vec![rec(EvalSplit::Seen, true, false), rec(EvalSplit::Novel, true, true)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.csv");
        write_predictions(&recs, Some("{}"), &p).unwrap();
        let back = read_predictions(&p).unwrap();
        assert_eq!(back, recs);
        assert_eq!(report_from_records(&back, "x"), report_from_records(&recs, "x"));
    }

    #[test]
    fn sample_sd_and_table_shape() {
        let s = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.sd - 1.0).abs() < 1e-12);
        let mut rows = Vec::new();
        for (i, m) in ["a", "b"].iter().enumerate() {
            let r = report_from_records(&[rec(EvalSplit::Seen, i == 0, true)], "");
            rows.extend(metric_rows(m, 0, &r));
        }
        assert_eq!(rows.len(), 12);
        let summary = summarize(&rows);
        let table = render_table(&summary, &["a", "b"]);
        assert_eq!(table.lines().count(), 4);
    }
}
