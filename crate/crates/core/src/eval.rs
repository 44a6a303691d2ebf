//! Manifest loading and the two-subset accuracy protocol.
//!
//! Accuracy is computed separately over perturbed (GT=0) and original (GT=1)
//! items; the overall figure is the plain mean of the two. Values are kept at
//! full precision and rounded half-up to two decimals only for display.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::ChatBackend;
use crate::dispatch::QueryType;
use crate::model::{GtLabel, IllusionQuery, ImageRef, ModelError, ParseStatus};
use crate::pipeline::{Pipeline, PipelineError, PipelineResult};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("failed to read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}{}: {message}", item_id.as_ref().map(|i| format!(" (item {i})")).unwrap_or_default())]
    Schema {
        line: usize,
        item_id: Option<String>,
        message: String,
    },
    #[error("manifest line {line} (item {item_id}): image {} not found", path.display())]
    MissingImage {
        line: usize,
        item_id: String,
        path: PathBuf,
    },
    #[error("manifest line {line} (item {item_id})")]
    Image {
        line: usize,
        item_id: String,
        #[source]
        source: ModelError,
    },
    #[error("no items with gt={} to score", subset.as_int())]
    EmptySubset { subset: GtLabel },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("failed to write CSV")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub name: String,
    pub version: String,
}

/// Validated dataset; every item has a ground-truth label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub meta: ManifestMeta,
    pub items: Vec<IllusionQuery>,
}

impl Manifest {
    /// Builds a manifest in memory, enforcing unique ids and mandatory labels.
    pub fn new(meta: ManifestMeta, items: Vec<IllusionQuery>) -> Result<Self, EvalError> {
        let mut seen = HashSet::new();
        for (i, item) in items.iter().enumerate() {
            let schema = |message: &str| EvalError::Schema {
                line: i + 1,
                item_id: Some(item.item_id().to_string()),
                message: message.to_string(),
            };
            if item.gt_label().is_none() {
                return Err(schema("missing gt label"));
            }
            if !seen.insert(item.item_id()) {
                return Err(schema("duplicate id"));
            }
        }
        Ok(Self { meta, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Loads a JSON-lines manifest.
///
/// Each non-blank line is `{"id", "image", "question", "gt"}` with `image`
/// relative to the manifest's directory. An optional first line
/// `{"_meta": {"name", "version"}}` names the dataset; otherwise the file stem
/// is used.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut meta = ManifestMeta {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        version: "0".to_string(),
    };
    let mut items = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let schema = |item_id: Option<&str>, message: String| EvalError::Schema {
            line,
            item_id: item_id.map(str::to_string),
            message,
        };
        let value: Value =
            serde_json::from_str(raw).map_err(|e| schema(None, format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| schema(None, "expected a JSON object".into()))?;
        if let Some(m) = obj.get("_meta") {
            if !items.is_empty() {
                return Err(schema(None, "_meta must be the first line".into()));
            }
            meta = serde_json::from_value(m.clone())
                .map_err(|e| schema(None, format!("invalid _meta: {e}")))?;
            continue;
        }
        let id = match obj.get("id") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(Value::String(_)) => return Err(schema(None, "empty id".into())),
            Some(_) => return Err(schema(None, "id must be a string".into())),
            None => return Err(schema(None, "missing field `id`".into())),
        };
        let field = |name: &str| -> Result<&str, EvalError> {
            match obj.get(name) {
                Some(Value::String(s)) => Ok(s),
                Some(_) => Err(schema(Some(&id), format!("{name} must be a string"))),
                None => Err(schema(Some(&id), format!("missing field `{name}`"))),
            }
        };
        let image_rel = field("image")?;
        let question = field("question")?;
        if question.trim().is_empty() {
            return Err(schema(Some(&id), "empty question".into()));
        }
        let gt = match obj.get("gt") {
            Some(Value::Number(n)) => n
                .as_i64()
                .and_then(|v| GtLabel::from_int(v).ok())
                .ok_or_else(|| schema(Some(&id), format!("gt must be 0 or 1, got {n}")))?,
            Some(other) => {
                return Err(schema(Some(&id), format!("gt must be 0 or 1, got {other}")))
            }
            None => return Err(schema(Some(&id), "missing field `gt`".into())),
        };
        if !seen.insert(id.clone()) {
            return Err(schema(Some(&id), "duplicate id".into()));
        }
        let image_path = base.join(image_rel);
        if !image_path.is_file() {
            return Err(EvalError::MissingImage {
                line,
                item_id: id,
                path: image_path,
            });
        }
        let image = ImageRef::from_path(&image_path).map_err(|source| EvalError::Image {
            line,
            item_id: id.clone(),
            source,
        })?;
        let query =
            IllusionQuery::new(id.clone(), image, question, Some(gt)).map_err(|source| {
                EvalError::Image {
                    line,
                    item_id: id.clone(),
                    source,
                }
            })?;
        items.push(query);
    }
    Ok(Manifest { meta, items })
}

/// Predicted label of one item, or the marker for an unreadable answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    Label(u8),
    Unparseable,
}

impl Prediction {
    pub fn as_field(self) -> String {
        match self {
            Prediction::Label(l) => l.to_string(),
            Prediction::Unparseable => "unparseable".to_string(),
        }
    }

    pub fn from_field(s: &str) -> Option<Self> {
        match s {
            "0" => Some(Prediction::Label(0)),
            "1" => Some(Prediction::Label(1)),
            "unparseable" => Some(Prediction::Unparseable),
            _ => None,
        }
    }
}

impl Serialize for Prediction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Prediction::Label(l) => s.serialize_u8(*l),
            Prediction::Unparseable => s.serialize_str("unparseable"),
        }
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::Number(n) if n.as_u64() == Some(0) => Ok(Prediction::Label(0)),
            Value::Number(n) if n.as_u64() == Some(1) => Ok(Prediction::Label(1)),
            Value::String(s) if s == "unparseable" => Ok(Prediction::Unparseable),
            other => Err(serde::de::Error::custom(format!("bad prediction {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item_id: String,
    pub query_type: QueryType,
    pub gt_label: GtLabel,
    pub predicted_label: Prediction,
    pub parse_status: ParseStatus,
    pub correct: bool,
}

impl ItemOutcome {
    pub fn from_result(r: &PipelineResult, gt: GtLabel) -> Self {
        let predicted_label = match r.verdict.numeric_label() {
            Some(l) => Prediction::Label(l),
            None => Prediction::Unparseable,
        };
        Self {
            item_id: r.item_id.clone(),
            query_type: r.query_type,
            gt_label: gt,
            predicted_label,
            parse_status: r.verdict.parse_status(),
            correct: r.verdict.is_correct(gt),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_pert: usize,
    pub n_orig: usize,
    pub n_unparseable: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayAccuracies {
    pub overall: String,
    pub acc_pert: String,
    pub acc_orig: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub manifest: String,
    pub manifest_version: String,
    pub mode: String,
    pub backend: String,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMeta,
    pub acc_pert: f64,
    pub acc_orig: f64,
    pub overall: f64,
    pub display: DisplayAccuracies,
    pub counts: Counts,
    pub per_item: Vec<ItemOutcome>,
}

/// Percentage of correct items among those labelled `subset`.
pub fn subset_accuracy(items: &[ItemOutcome], subset: GtLabel) -> Result<f64, EvalError> {
    let (total, correct) = items
        .iter()
        .filter(|i| i.gt_label == subset)
        .fold((0usize, 0usize), |(t, c), i| {
            (t + 1, c + usize::from(i.correct))
        });
    if total == 0 {
        return Err(EvalError::EmptySubset { subset });
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Mean of the two subset accuracies, unrounded.
pub fn overall_accuracy(acc_pert: f64, acc_orig: f64) -> f64 {
    (acc_pert + acc_orig) / 2.0
}

// Absorbs binary representation error so that decimal halves such as 71.665
// round up.
const HALF_UP_SLACK: f64 = 1e-9;

/// Rounds half-up to two decimals and formats, e.g. `71.665 -> "71.67"`.
pub fn display_percent(x: f64) -> String {
    let hundredths = (x * 100.0 + 0.5 + HALF_UP_SLACK).floor() as i64;
    let sign = if hundredths < 0 { "-" } else { "" };
    let abs = hundredths.unsigned_abs();
    format!("{sign}{}.{:02}", abs / 100, abs % 100)
}

/// [`display_percent`] as a number.
pub fn round_half_up_2(x: f64) -> f64 {
    display_percent(x)
        .parse()
        .expect("formatted percent parses")
}

/// Scores pipeline results against the manifest labels.
pub fn score(
    manifest: &Manifest,
    results: &[PipelineResult],
    mode: &str,
    backend: &str,
) -> Result<EvalReport, EvalError> {
    let mut per_item: Vec<ItemOutcome> = manifest
        .items
        .iter()
        .zip(results)
        .map(|(q, r)| {
            debug_assert_eq!(q.item_id(), r.item_id);
            ItemOutcome::from_result(r, q.gt_label().expect("manifest items are labelled"))
        })
        .collect();
    per_item.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    report_from_outcomes(
        ReportMeta {
            manifest: manifest.meta.name.clone(),
            manifest_version: manifest.meta.version.clone(),
            mode: mode.to_string(),
            backend: backend.to_string(),
            n_items: manifest.items.len(),
        },
        per_item,
    )
}

pub fn report_from_outcomes(
    metadata: ReportMeta,
    per_item: Vec<ItemOutcome>,
) -> Result<EvalReport, EvalError> {
    let acc_pert = subset_accuracy(&per_item, GtLabel::Perturbed)?;
    let acc_orig = subset_accuracy(&per_item, GtLabel::Original)?;
    let overall = overall_accuracy(acc_pert, acc_orig);
    let counts = Counts {
        n_pert: per_item
            .iter()
            .filter(|i| i.gt_label == GtLabel::Perturbed)
            .count(),
        n_orig: per_item
            .iter()
            .filter(|i| i.gt_label == GtLabel::Original)
            .count(),
        n_unparseable: per_item
            .iter()
            .filter(|i| i.predicted_label == Prediction::Unparseable)
            .count(),
    };
    Ok(EvalReport {
        metadata,
        acc_pert,
        acc_orig,
        overall,
        display: DisplayAccuracies {
            overall: display_percent(overall),
            acc_pert: display_percent(acc_pert),
            acc_orig: display_percent(acc_orig),
        },
        counts,
        per_item,
    })
}

fn check_scorable(manifest: &Manifest) -> Result<(), EvalError> {
    for subset in [GtLabel::Perturbed, GtLabel::Original] {
        if !manifest.items.iter().any(|q| q.gt_label() == Some(subset)) {
            return Err(EvalError::EmptySubset { subset });
        }
    }
    Ok(())
}

/// Runs the pipeline over every item and scores the results. Returns the
/// report together with the per-item pipeline results (ordered by item id).
pub fn run_eval(
    manifest: &Manifest,
    pipeline: &Pipeline,
    backend: &dyn ChatBackend,
    concurrency: usize,
) -> Result<(EvalReport, Vec<PipelineResult>), EvalError> {
    check_scorable(manifest)?;
    let mut ordered = manifest.clone();
    ordered.items.sort_by(|a, b| a.item_id().cmp(b.item_id()));
    let results = pipeline
        .run_batch(&ordered.items, backend, concurrency)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let report = score(
        &ordered,
        &results,
        pipeline.config().mode.as_str(),
        &backend.backend_id(),
    )?;
    Ok((report, results))
}

impl EvalReport {
    /// `overall=<pct> pert=<pct> orig=<pct>`
    pub fn summary_line(&self) -> String {
        format!(
            "overall={} pert={} orig={}",
            self.display.overall, self.display.acc_pert, self.display.acc_orig
        )
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "item_id",
            "query_type",
            "gt_label",
            "predicted_label",
            "parse_status",
            "correct",
        ])?;
        for i in &self.per_item {
            w.write_record([
                i.item_id.clone(),
                i.query_type.as_str().to_string(),
                i.gt_label.as_int().to_string(),
                i.predicted_label.as_field(),
                serde_json::to_value(i.parse_status)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                i.correct.to_string(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `report.json`, `report.csv` and `summary.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |path: PathBuf| move |source| EvalError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let files = [
            ("report.json", self.to_json()),
            ("report.csv", self.to_csv()?),
            ("summary.txt", format!("{}\n", self.summary_line())),
        ];
        for (name, content) in files {
            let path = dir.join(name);
            fs::write(&path, content).map_err(io(path.clone()))?;
        }
        Ok(())
    }
}

/// Reads per-item rows back from [`EvalReport::to_csv`] output.
pub fn outcomes_from_csv(text: &str) -> Result<Vec<ItemOutcome>, String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| e.to_string())?;
        let field = |i: usize| row.get(i).ok_or_else(|| format!("missing column {i}"));
        out.push(ItemOutcome {
            item_id: field(0)?.to_string(),
            query_type: QueryType::parse(field(1)?).ok_or("bad query type")?,
            gt_label: GtLabel::from_int(field(2)?.parse().map_err(|_| "bad gt")?)
                .map_err(|e| e.to_string())?,
            predicted_label: Prediction::from_field(field(3)?).ok_or("bad prediction")?,
            parse_status: serde_json::from_value(Value::String(field(4)?.to_string()))
                .map_err(|e| e.to_string())?,
            correct: field(5)?.parse().map_err(|_| "bad correct flag")?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(id: &str, gt: GtLabel, correct: bool) -> ItemOutcome {
        let predicted = if correct {
            gt.as_int()
        } else {
            1 - gt.as_int()
        };
        ItemOutcome {
            item_id: id.into(),
            query_type: QueryType::Other,
            gt_label: gt,
            predicted_label: Prediction::Label(predicted),
            parse_status: ParseStatus::Clean,
            correct,
        }
    }

    #[test]
    fn subset_arithmetic() {
        let items = vec![
            outcome("a", GtLabel::Perturbed, true),
            outcome("b", GtLabel::Perturbed, true),
            outcome("c", GtLabel::Perturbed, false),
            outcome("d", GtLabel::Original, true),
        ];
        let pert = subset_accuracy(&items, GtLabel::Perturbed).unwrap();
        assert!((pert - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(subset_accuracy(&items, GtLabel::Original).unwrap(), 100.0);
        assert!(matches!(
            subset_accuracy(&items[..3], GtLabel::Original),
            Err(EvalError::EmptySubset {
                subset: GtLabel::Original
            })
        ));
    }

    #[test]
    fn half_up_display() {
        assert_eq!(display_percent(71.665), "71.67");
        assert_eq!(display_percent(overall_accuracy(61.90, 81.43)), "71.67");
        assert_eq!(display_percent(overall_accuracy(67.62, 70.48)), "69.05");
        assert_eq!(display_percent(overall_accuracy(51.43, 81.43)), "66.43");
        assert_eq!(display_percent(200.0 / 3.0), "66.67");
        assert_eq!(display_percent(100.0), "100.00");
        assert_eq!(display_percent(0.0), "0.00");
        assert_eq!(display_percent(0.004), "0.00");
        assert_eq!(display_percent(0.005), "0.01");
        assert_eq!(round_half_up_2(83.333333), 83.33);
    }

    #[test]
    fn prediction_field_forms() {
        assert_eq!(serde_json::to_string(&Prediction::Label(1)).unwrap(), "1");
        assert_eq!(
            serde_json::to_string(&Prediction::Unparseable).unwrap(),
            "\"unparseable\""
        );
        assert_eq!(
            Prediction::from_field("unparseable"),
            Some(Prediction::Unparseable)
        );
        assert_eq!(Prediction::from_field("2"), None);
    }
}
