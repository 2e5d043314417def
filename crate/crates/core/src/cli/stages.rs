use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::domain::{CellId, Pollutant};
use crate::error::{Error, Result};
use crate::eval::{self, AblationAxis, AblationBase, EvalReport};
use crate::impute::{self, Imputed, ImputedViews};
use crate::ingest::{self, CellSplit, STFrameSet, TemporalSplit};
use crate::models::{Forecaster, ModelKind};
use crate::represent::{Dataset, StaticFeatures};
use crate::synth;

pub const MANIFEST_VERSION: u32 = 1;
pub const SPLIT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output directory when inside it.
    pub path: String,
    pub sha256: String,
}

/// Per-stage record written next to the artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub wall_clock_s: f64,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

/// Serialized cell and temporal split written by `ingest`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub format_version: u32,
    pub core: Vec<[usize; 2]>,
    pub extended: Vec<[usize; 2]>,
    pub train_bins: [usize; 2],
    pub test_bins: [usize; 2],
    pub train_days: usize,
    pub test_days: usize,
}

impl SplitFile {
    fn new(split: &CellSplit, t: &TemporalSplit) -> Self {
        let cells = |s: &std::collections::BTreeSet<CellId>| s.iter().map(|c| [c.row, c.col]).collect();
        SplitFile {
            format_version: SPLIT_VERSION,
            core: cells(&split.core_cells),
            extended: cells(&split.extended_cells),
            train_bins: [t.train_bins.start, t.train_bins.end],
            test_bins: [t.test_bins.start, t.test_bins.end],
            train_days: t.train_days,
            test_days: t.test_days,
        }
    }

    fn parts(&self) -> (CellSplit, TemporalSplit) {
        let cells = |v: &[[usize; 2]]| v.iter().map(|&[row, col]| CellId { row, col }).collect();
        (
            CellSplit {
                core_cells: cells(&self.core),
                extended_cells: cells(&self.extended),
            },
            TemporalSplit {
                train_bins: self.train_bins[0]..self.train_bins[1],
                test_bins: self.test_bins[0]..self.test_bins[1],
                train_days: self.train_days,
                test_days: self.test_days,
            },
        )
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn hash_parts(parts: &[(&str, serde_json::Value)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in parts {
        h.update(k.as_bytes());
        h.update([0u8]);
        h.update(serde_json::to_string(v).expect("json value").as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

/// Executes pipeline stages against one output directory.
pub struct Runner {
    pub cfg: RunConfig,
    /// Suppress the evaluation table on stdout.
    pub quiet: bool,
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Self {
        Runner { cfg, quiet: false }
    }

    pub fn out(&self) -> &Path {
        &self.cfg.paths.output_dir
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out().join(rel)
    }

    pub fn manifest_path(&self, stage: &str) -> PathBuf {
        self.path(&format!("manifests/{stage}.json"))
    }

    pub fn checkpoint_path(&self, kind: ModelKind) -> PathBuf {
        self.path(&format!("models/{kind}.ckpt"))
    }

    pub fn report_path(&self, kind: ModelKind) -> PathBuf {
        self.path(&format!("reports/{kind}.csv"))
    }

    fn synth_default(&self) -> bool {
        self.cfg.paths.readings.is_none()
    }

    fn readings_path(&self) -> PathBuf {
        self.cfg
            .paths
            .readings
            .clone()
            .unwrap_or_else(|| self.path("synth/readings.csv"))
    }

    /// Explicit static features, or the synthetic sidecar when readings come
    /// from `synth`.
    fn static_path(&self) -> Option<PathBuf> {
        match (&self.cfg.paths.static_features, self.synth_default()) {
            (Some(p), _) => Some(p.clone()),
            (None, true) => Some(self.path("synth/static.csv")),
            (None, false) => None,
        }
    }

    // Stage hashes chain the relevant config sections onto the upstream hash.

    pub fn synth_hash(&self) -> String {
        let c = &self.cfg;
        hash_parts(&[
            ("stage", json(&"synth")),
            ("grid", json(&c.grid)),
            ("temporal", json(&c.temporal)),
            ("synth", json(&c.synth)),
        ])
    }

    pub fn ingest_hash(&self) -> String {
        let c = &self.cfg;
        let upstream = if self.synth_default() {
            self.synth_hash()
        } else {
            String::new()
        };
        hash_parts(&[
            ("stage", json(&"ingest")),
            ("upstream", json(&upstream)),
            ("readings", json(&c.paths.readings)),
            ("format", json(&c.format)),
            ("ingest", json(&c.ingest)),
            ("grid", json(&c.grid)),
            ("temporal", json(&c.temporal)),
            ("split", json(&c.split)),
        ])
    }

    pub fn impute_hash(&self) -> String {
        hash_parts(&[
            ("stage", json(&"impute")),
            ("upstream", json(&self.ingest_hash())),
            ("idw", json(&self.cfg.idw)),
        ])
    }

    fn model_parts(&self) -> Vec<(&'static str, serde_json::Value)> {
        let c = &self.cfg;
        let statics = if c.model.use_static { self.static_path() } else { None };
        vec![
            ("upstream", json(&self.impute_hash())),
            ("windows", json(&c.windows)),
            ("train", json(&c.train)),
            ("static_features", json(&statics)),
        ]
    }

    pub fn train_hash(&self, kind: ModelKind) -> String {
        let mut model = self.cfg.model.clone();
        model.kind = kind;
        let mut parts = vec![("stage", json(&"train")), ("model", json(&model))];
        parts.extend(self.model_parts());
        hash_parts(&parts)
    }

    pub fn evaluate_hash(&self, kinds: &[ModelKind]) -> String {
        let mut parts = vec![("stage", json(&"evaluate"))];
        let hashes: Vec<String> = kinds.iter().map(|&k| self.train_hash(k)).collect();
        parts.push(("models", json(&hashes)));
        hash_parts(&parts)
    }

    pub fn ablate_hash(&self, axis: AblationAxis, values: &[usize]) -> String {
        let mut parts = vec![
            ("stage", json(&"ablate")),
            ("model", json(&self.cfg.model)),
            ("axis", json(&axis)),
            ("values", json(&values)),
        ];
        parts.extend(self.model_parts());
        hash_parts(&parts)
    }

    fn record(&self, path: &Path) -> Result<FileRecord> {
        let shown = path.strip_prefix(self.out()).unwrap_or(path);
        Ok(FileRecord {
            path: shown.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn write_manifest(
        &self,
        name: &str,
        stage: &str,
        hash: String,
        seed: Option<u64>,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        started: Instant,
        notes: BTreeMap<String, serde_json::Value>,
    ) -> Result<Manifest> {
        let m = Manifest {
            format_version: MANIFEST_VERSION,
            stage: stage.to_string(),
            config_hash: hash,
            seed,
            inputs: inputs.iter().map(|p| self.record(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| self.record(p)).collect::<Result<_>>()?,
            wall_clock_s: started.elapsed().as_secs_f64(),
            notes,
        };
        let path = self.manifest_path(name);
        create_parent(&path)?;
        fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(m)
    }

    /// Loads a stage manifest and checks that it was produced under the
    /// current configuration.
    fn require(&self, name: &str, stage: &'static str, expected: &str) -> Result<Manifest> {
        let path = self.manifest_path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact { path, stage });
        }
        let m: Manifest = serde_json::from_reader(BufReader::new(File::open(&path)?))?;
        if m.config_hash != expected {
            return Err(Error::StaleArtifact {
                path,
                stage,
                found: m.config_hash,
                expected: expected.to_string(),
            });
        }
        for o in &m.outputs {
            let p = self.path(&o.path);
            if !p.exists() {
                return Err(Error::MissingArtifact { path: p, stage });
            }
        }
        Ok(m)
    }

    pub fn synth(&self) -> Result<Manifest> {
        let started = Instant::now();
        let c = &self.cfg;
        let out = synth::generate(&c.synth, &c.grid, &c.temporal)?;
        let readings = self.path("synth/readings.csv");
        let truth = self.path("synth/truth.stfs");
        let statics = self.path("synth/static.csv");
        create_parent(&readings)?;
        write_with(&readings, |w| synth::write_readings_csv(w, &out.readings))?;
        out.truth.save(&truth)?;
        write_with(&statics, |w| synth::write_static_csv(w, &out.statics))?;
        let mut notes = BTreeMap::new();
        notes.insert("n_readings".into(), json(&out.readings.len()));
        self.write_manifest(
            "synth",
            "synth",
            self.synth_hash(),
            Some(c.synth.seed),
            &[],
            &[readings, truth, statics],
            started,
            notes,
        )
    }

    pub fn ingest(&self) -> Result<Manifest> {
        let started = Instant::now();
        let c = &self.cfg;
        if self.synth_default() {
            self.require("synth", "synth", &self.synth_hash())?;
        }
        let readings_path = self.readings_path();
        let file = File::open(&readings_path).map_err(|e| Error::Format {
            path: readings_path.display().to_string(),
            reason: e.to_string(),
        })?;
        let parsed = ingest::parse_readings(BufReader::new(file), &c.format)?;
        let grid = if c.ingest.auto_grid {
            ingest::covering_grid(&parsed.readings, c.grid.cell_size_m)?
        } else {
            c.grid
        };
        let frames = ingest::aggregate(&parsed.readings, &grid, &c.temporal)?;
        for &[row, col] in &c.split.holdout_cells {
            if row >= grid.n_rows || col >= grid.n_cols {
                return Err(Error::CellOutOfGrid {
                    row,
                    col,
                    n_rows: grid.n_rows,
                    n_cols: grid.n_cols,
                });
            }
        }
        let split = ingest::split_cells(&frames)?
            .with_holdout(c.split.holdout_cells.iter().map(|&[row, col]| CellId { row, col }))
            .with_random_holdout(c.split.random_holdout, c.split.holdout_seed)?;
        let tsplit = ingest::temporal_split(&frames, c.split.train_ratio)?;

        let frames_path = self.path("frames.stfs");
        let split_path = self.path("split.json");
        create_parent(&frames_path)?;
        frames.save(&frames_path)?;
        fs::write(&split_path, serde_json::to_string_pretty(&SplitFile::new(&split, &tsplit))? + "\n")?;
        let mut notes = BTreeMap::new();
        notes.insert("n_readings".into(), json(&parsed.readings.len()));
        notes.insert("skipped_rows".into(), json(&parsed.skipped));
        notes.insert("n_days".into(), json(&frames.n_days));
        notes.insert("core_cells".into(), json(&split.core_cells.len()));
        notes.insert("extended_cells".into(), json(&split.extended_cells.len()));
        self.write_manifest(
            "ingest",
            "ingest",
            self.ingest_hash(),
            Some(c.split.holdout_seed),
            &[readings_path],
            &[frames_path, split_path],
            started,
            notes,
        )
    }

    fn load_ingested(&self) -> Result<(STFrameSet, CellSplit, TemporalSplit)> {
        self.require("ingest", "ingest", &self.ingest_hash())?;
        let frames = STFrameSet::load(&self.path("frames.stfs"))?;
        let sf: SplitFile = serde_json::from_reader(BufReader::new(File::open(self.path("split.json"))?))?;
        if sf.format_version != SPLIT_VERSION {
            return Err(Error::Format {
                path: self.path("split.json").display().to_string(),
                reason: format!("unsupported split version {}", sf.format_version),
            });
        }
        let (split, tsplit) = sf.parts();
        Ok((frames, split, tsplit))
    }

    pub fn impute(&self) -> Result<Manifest> {
        let started = Instant::now();
        let (frames, split, _) = self.load_ingested()?;
        let views = impute::impute_frameset(&frames, &split, &self.cfg.idw)?;
        let train = self.path("imputed_train.stfs");
        let evalp = self.path("imputed_eval.stfs");
        let cov_train = self.path("coverage_train.csv");
        let cov_eval = self.path("coverage_eval.csv");
        views.train.frames.save(&train)?;
        views.eval.frames.save(&evalp)?;
        write_with(&cov_train, |w| impute::write_coverage_csv(w, &views.train.coverage))?;
        write_with(&cov_eval, |w| impute::write_coverage_csv(w, &views.eval.coverage))?;
        let mut notes = BTreeMap::new();
        notes.insert("fallback_train".into(), json(&views.train.fallback_count));
        notes.insert("fallback_eval".into(), json(&views.eval.fallback_count));
        self.write_manifest(
            "impute",
            "impute",
            self.impute_hash(),
            None,
            &[self.path("frames.stfs"), self.path("split.json")],
            &[train, evalp, cov_train, cov_eval],
            started,
            notes,
        )
    }

    fn load_statics(&self) -> Result<Option<StaticFeatures>> {
        if !self.cfg.model.use_static {
            return Ok(None);
        }
        let Some(p) = self.static_path() else {
            return Err(Error::Config("model.use_static needs paths.static_features".into()));
        };
        let f = File::open(&p).map_err(|e| Error::Format {
            path: p.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(Some(StaticFeatures::read_csv(BufReader::new(f), self.cfg.format.delimiter as u8)?))
    }

    /// Imputed views plus split, as consumed by model stages.
    pub fn load_views(&self) -> Result<(ImputedViews, CellSplit, TemporalSplit)> {
        let (_, split, tsplit) = self.load_ingested()?;
        self.require("impute", "impute", &self.impute_hash())?;
        let view = |rel: &str| -> Result<Imputed> {
            Ok(Imputed {
                frames: STFrameSet::load(&self.path(rel))?,
                coverage: Vec::new(),
                fallback_count: 0,
            })
        };
        let views = ImputedViews {
            train: view("imputed_train.stfs")?,
            eval: view("imputed_eval.stfs")?,
        };
        Ok((views, split, tsplit))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let (views, split, tsplit) = self.load_views()?;
        Dataset::new(&views, split, tsplit, self.cfg.windows, self.load_statics()?)
    }

    pub fn train(&self, kinds: &[ModelKind]) -> Result<Vec<Manifest>> {
        let ds = self.dataset()?;
        let mut out = Vec::new();
        for &kind in kinds {
            let started = Instant::now();
            let mut model = self.cfg.model.clone();
            model.kind = kind;
            let (f, report) = Forecaster::fit(model, &self.cfg.train, &ds)?;
            let ckpt = self.checkpoint_path(kind);
            let curve = self.path(&format!("models/{kind}_curve.csv"));
            create_parent(&ckpt)?;
            f.save(&ckpt)?;
            write_with(&curve, |w| report.write_curve_csv(w))?;
            let mut notes = BTreeMap::new();
            notes.insert("best_epoch".into(), json(&report.best_epoch));
            notes.insert("epochs_run".into(), json(&report.losses.len()));
            out.push(self.write_manifest(
                &format!("train_{kind}"),
                "train",
                self.train_hash(kind),
                Some(self.cfg.model.seed),
                &[self.path("imputed_train.stfs"), self.path("imputed_eval.stfs")],
                &[ckpt, curve],
                started,
                notes,
            )?);
        }
        Ok(out)
    }

    pub fn evaluate(&self, kinds: &[ModelKind]) -> Result<Vec<EvalReport>> {
        let started = Instant::now();
        // Check every checkpoint before the comparatively slow dataset build.
        for &kind in kinds {
            self.require(&format!("train_{kind}"), "train", &self.train_hash(kind))?;
        }
        let ds = self.dataset()?;
        let mut all = Vec::new();
        let mut outputs = Vec::new();
        let mut inputs = Vec::new();
        for &kind in kinds {
            let ckpt = self.checkpoint_path(kind);
            let f = Forecaster::load(&ckpt)?;
            let reports = eval::evaluate(&f, &ds)?;
            let path = self.report_path(kind);
            create_parent(&path)?;
            write_with(&path, |w| eval::write_reports_csv(w, &reports))?;
            outputs.push(path);
            inputs.push(ckpt);
            all.extend(reports);
        }
        let summary = self.path("reports/summary.csv");
        write_with(&summary, |w| eval::write_reports_csv(w, &all))?;
        outputs.push(summary);
        if !self.quiet {
            print!("{}", eval::format_table(&all));
        }
        self.write_manifest(
            "evaluate",
            "evaluate",
            self.evaluate_hash(kinds),
            None,
            &inputs,
            &outputs,
            started,
            BTreeMap::new(),
        )?;
        Ok(all)
    }

    pub fn ablate(&self, axis: AblationAxis, values: Option<&[usize]>) -> Result<Manifest> {
        let started = Instant::now();
        let kind = self.cfg.model.kind;
        axis.check_kind(kind)?;
        let values = match values {
            Some(v) if !v.is_empty() => v.to_vec(),
            _ if !self.cfg.ablate.values.is_empty() => self.cfg.ablate.values.clone(),
            _ => axis.default_values(),
        };
        let (views, split, tsplit) = self.load_views()?;
        let statics = self.load_statics()?;
        let base = AblationBase {
            views: &views,
            split: &split,
            tsplit: &tsplit,
            statics: statics.as_ref(),
            windows: self.cfg.windows,
            model: self.cfg.model.clone(),
            train: self.cfg.train.clone(),
        };
        let rows = eval::ablate(axis, &values, &base)?;
        let mut outputs = Vec::new();
        for p in Pollutant::ALL {
            let path = self.path(&format!("ablate/{}", eval::ablation_file_name(axis, p)));
            create_parent(&path)?;
            write_with(&path, |w| eval::write_ablation_csv(w, &rows, p))?;
            outputs.push(path);
        }
        let mut notes = BTreeMap::new();
        notes.insert("kind".into(), json(&kind));
        self.write_manifest(
            &format!("ablate_{}", axis.as_str()),
            "ablate",
            self.ablate_hash(axis, &values),
            Some(self.cfg.model.seed),
            &[self.path("imputed_train.stfs"), self.path("imputed_eval.stfs")],
            &outputs,
            started,
            notes,
        )
    }

    /// synth (optional), ingest, impute, train and evaluate in one go.
    pub fn pipeline(&self) -> Result<Vec<EvalReport>> {
        if self.cfg.pipeline.synth {
            self.synth()?;
        }
        self.ingest()?;
        self.impute()?;
        let kinds = self.cfg.pipeline.kinds.clone();
        if kinds.is_empty() {
            return Err(Error::Config("pipeline.kinds is empty".into()));
        }
        self.train(&kinds)?;
        self.evaluate(&kinds)
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    Ok(())
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    create_parent(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}
