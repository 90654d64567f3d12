//! Ablation sweeps over the gate threshold, the augmentation probability and
//! the CutMix setting, trained on the toy dataset.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::captioner::{caption_record, CaptionBackend};
use crate::config::RunConfig;
use crate::cutmix::{curate_in_memory, CutMixPattern};
use crate::data::build_dataset;
use crate::error::{Error, Result};
use crate::manifest::{pattern_counts, DatasetManifest, ImageSource};
use crate::par;
use crate::raster::Raster;
use crate::rng::{lane, split, split_path};
use crate::schedule::{build_plain_batch, Dataset, GateParams, InMemoryDataset, NoiseSchedule};
use crate::toy::toy_dataset;
use crate::trainer::{batch_loss, train, LossReport};

/// Tolerance on the observed augmented fraction of a row.
pub const MIX_TOLERANCE: f64 = 0.02;
/// Slots in the fixed holdout batch.
pub const HOLDOUT_SLOTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Tau,
    AugProb,
    Pattern,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Tau => "tau",
            AblationAxis::AugProb => "aug_prob",
            AblationAxis::Pattern => "pattern",
        }
    }

    /// The sweep values used for each axis in the reference ablation tables.
    pub fn reference_grid(self) -> Vec<GridValue> {
        match self {
            AblationAxis::Tau => [300, 400, 500, 600].map(GridValue::Tau).to_vec(),
            AblationAxis::AugProb => [0.0, 0.25, 0.5, 0.75, 1.0].map(GridValue::AugProb).to_vec(),
            AblationAxis::Pattern => CutMixPattern::ALL_SETTINGS.map(GridValue::Pattern).to_vec(),
        }
    }

    /// Comma-separated grid values; an empty string is an argument error.
    pub fn parse_grid(self, text: &str) -> Result<Vec<GridValue>> {
        let values: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Argument("ablation grid is empty".into()));
        }
        values
            .into_iter()
            .map(|v| {
                let bad = |e: &dyn fmt::Display| Error::Argument(format!("bad {} value `{v}`: {e}", self.name()));
                Ok(match self {
                    AblationAxis::Tau => GridValue::Tau(v.parse().map_err(|e| bad(&e))?),
                    AblationAxis::AugProb => GridValue::AugProb(v.parse().map_err(|e| bad(&e))?),
                    AblationAxis::Pattern => GridValue::Pattern(v.parse().map_err(|e: Error| bad(&e))?),
                })
            })
            .collect()
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(AblationAxis::Tau),
            "aug_prob" | "prob" | "probability" => Ok(AblationAxis::AugProb),
            "pattern" | "setting" => Ok(AblationAxis::Pattern),
            _ => Err(Error::Argument(format!("unknown ablation axis `{s}` (tau | aug_prob | pattern)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GridValue {
    Tau(u32),
    AugProb(f64),
    Pattern(CutMixPattern),
}

impl fmt::Display for GridValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridValue::Tau(t) => write!(f, "{t}"),
            GridValue::AugProb(p) => write!(f, "{p}"),
            GridValue::Pattern(p) => write!(f, "{}", p.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub tau: u32,
    pub aug_prob: f64,
    pub setting: CutMixPattern,
    /// Mean training loss over the last tenth of the steps.
    pub final_loss: f64,
    pub holdout_loss: f64,
    pub n_aug: usize,
    pub n_total: usize,
    pub observed_fraction: f64,
    pub expected_fraction: f64,
    pub mix_ok: bool,
    pub pattern_counts: BTreeMap<CutMixPattern, usize>,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

impl AblationRow {
    pub fn failed(&self) -> bool {
        self.status != "ok"
    }
}

pub const CSV_HEADER: &str = "axis,value,tau,aug_prob,setting,final_loss,holdout_loss,n_aug,n_total,observed_fraction,expected_fraction,mix_ok,pattern_counts,status";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn failed_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.failed()).count()
    }

    /// Header row always present; `pattern_counts` as `tag:count` pairs
    /// joined by `;`; the status field is quoted.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            let counts = r
                .pattern_counts
                .iter()
                .map(|(p, n)| format!("{}:{n}", p.tag()))
                .collect::<Vec<_>>()
                .join(";");
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},\"{}\"",
                r.axis.name(),
                r.value,
                r.tau,
                r.aug_prob,
                r.setting.tag(),
                r.final_loss,
                r.holdout_loss,
                r.n_aug,
                r.n_total,
                r.observed_fraction,
                r.expected_fraction,
                r.mix_ok,
                counts,
                r.status.replace('"', "'"),
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io_at(path, e))
    }
}

/// Toy originals plus a CutMix set curated from them with stub captions.
pub struct ToyTrainingData {
    pub original: InMemoryDataset,
    pub cutmix: InMemoryDataset,
    pub pattern_counts: BTreeMap<CutMixPattern, usize>,
}

pub fn toy_training_data(base: &RunConfig, setting: CutMixPattern) -> Result<ToyTrainingData> {
    let (manifest, mut images) = toy_dataset(base.n_per_class, base.seed)?;
    let items = curate_in_memory(&manifest, &images, setting, base.count, split(base.seed, lane::CURATE))?;
    let mut extended: DatasetManifest = manifest.clone();
    let backend = CaptionBackend::Stub { seed: base.seed };
    for item in items {
        extended
            .captions
            .push(caption_record(&backend, &item.record, Path::new("."))?);
        images.insert(item.record.id.clone(), item.image);
        extended.records.push(item.record);
    }
    extended.canonicalize();
    let shape = base.shape();
    let root = Path::new(".");
    let original = build_dataset(&extended, Some(&images), root, ImageSource::Original, base.captions, shape)?;
    let cutmix = build_dataset(&extended, Some(&images), root, ImageSource::Cutmix, base.captions, shape)?;
    Ok(ToyTrainingData {
        original,
        cutmix,
        pattern_counts: pattern_counts(&extended),
    })
}

/// Holdout originals from an independent toy draw, AIO-captioned.
fn holdout_set(base: &RunConfig) -> Result<InMemoryDataset> {
    let seed = split(base.seed, lane::HOLDOUT);
    let (m, images): (DatasetManifest, HashMap<String, Raster>) = toy_dataset(base.n_per_class.max(2), seed)?;
    build_dataset(&m, Some(&images), Path::new("."), ImageSource::Original, base.captions, base.shape())
}

fn last_decile_mean(reports: &[LossReport]) -> f64 {
    let n = (reports.len() / 10).max(1).min(reports.len());
    let tail = &reports[reports.len() - n..];
    tail.iter().map(|r| r.loss).sum::<f64>() / n as f64
}

/// Trains one model per grid point. Point `i` trains with seed
/// `split(ABLATE seed, i)`; all points share the same toy data. A failing
/// point yields a row with status `failed: ...` instead of aborting the sweep.
pub fn run_ablation(axis: AblationAxis, grid: &[GridValue], base: &RunConfig) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(Error::Argument("ablation grid is empty".into()));
    }
    base.validate()?;
    let schedule = NoiseSchedule::new(base.horizon)?;
    let holdout = holdout_set(base)?;
    let holdout_batch = build_plain_batch(&holdout, &schedule, HOLDOUT_SLOTS, split(base.seed, lane::HOLDOUT))?;

    let mut settings: Vec<CutMixPattern> = grid
        .iter()
        .map(|v| match v {
            GridValue::Pattern(p) => *p,
            _ => base.setting,
        })
        .collect();
    settings.sort();
    settings.dedup();
    let data: BTreeMap<CutMixPattern, Result<ToyTrainingData>> = settings
        .iter()
        .map(|&s| (s, toy_training_data(base, s)))
        .collect();

    let rows = par::map_range(grid.len(), |i| {
        let value = grid[i];
        let (mut tau, mut aug_prob, mut setting) = (base.tau, base.aug_prob, base.setting);
        match value {
            GridValue::Tau(t) => tau = t,
            GridValue::AugProb(p) => aug_prob = p,
            GridValue::Pattern(p) => setting = p,
        }
        let gate = GateParams { tau, aug_prob };
        let mut row = AblationRow {
            axis,
            value: value.to_string(),
            tau,
            aug_prob,
            setting,
            final_loss: f64::NAN,
            holdout_loss: f64::NAN,
            n_aug: 0,
            n_total: 0,
            observed_fraction: f64::NAN,
            expected_fraction: gate.expected_aug_fraction(&schedule),
            mix_ok: false,
            pattern_counts: BTreeMap::new(),
            status: "ok".into(),
        };
        let outcome = (|| -> Result<()> {
            let d = data[&setting].as_ref().map_err(|e| Error::Curation(e.to_string()))?;
            row.pattern_counts = d.pattern_counts.clone();
            let mut cfg = base.train_config();
            cfg.gate = gate;
            cfg.seed = split_path(base.seed, &[lane::ABLATE, i as u64]);
            let (model, reports) = train(&cfg, d.original.shape(), &d.original, Some(&d.cutmix as &dyn Dataset))?;
            row.n_aug = reports.iter().map(|r| r.n_aug).sum();
            row.n_total = reports.iter().map(|r| r.batch).sum();
            if row.n_total > 0 {
                row.observed_fraction = row.n_aug as f64 / row.n_total as f64;
                row.final_loss = last_decile_mean(&reports);
            }
            row.mix_ok = (row.observed_fraction - row.expected_fraction).abs() <= MIX_TOLERANCE;
            row.holdout_loss = batch_loss(&model, &holdout_batch)?;
            Ok(())
        })();
        if let Err(e) = outcome {
            row.status = format!("failed: {e}");
        }
        row
    });
    Ok(AblationReport { rows })
}
