//! Pipeline stages over one output directory. Each stage reads what the
//! earlier stages recorded in the run record, writes its own artifacts and
//! records them with their hashes.

use std::fs;
use std::path::{Path, PathBuf};

use mtkd_core::corpus::{generate_corpus, Corpus, GenerationSpec, Split};
use mtkd_core::losses::LossHyperparams;
use mtkd_core::model::BeamConfig;
use mtkd_core::strategies::Strategy;
use mtkd_core::training::{
    build_cache_entries, check_vocabulary, default_max_len, default_teacher_grid, distill, evaluate,
    init_student_from_teacher, prepare, select_student_teacher, substream_seed, train_teacher, validate_grid,
    Checkpoint, DistillationCache, EvalReport, HeadReset, OptimConfig, TeacherSpec, TrainRunConfig,
};
use serde::{Deserialize, Serialize};

use crate::analysis::homophone_diagnostic;
use crate::formats::{
    cache_key, read_cache, read_checkpoint, read_corpus, read_json, sha256_file, write_cache, write_checkpoint,
    write_comparison, write_corpus, write_evaluation, write_homophones, write_json, write_selection, write_selection_counts,
    write_teacher_summary, write_train_log, write_weight_trace, ArtifactRef, CacheRecord, ComparisonRow, HomophoneRow,
    RunManifest, RunRecord, SelectionCountRow, TeacherRecord, TeacherSummaryRow,
};
use crate::{parallel_map, Error, Result};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const GRID_FILE: &str = "grid.json";

fn teacher_stem(id: usize) -> String {
    format!("teachers/teacher-{id:02}")
}

fn artifact(out: &Path, rel: &str) -> Result<ArtifactRef> {
    Ok(ArtifactRef {
        path: rel.into(),
        sha256: sha256_file(&out.join(rel))?,
    })
}

/// Resolves `artifact` under `out` and checks that its content is unchanged.
fn verified(out: &Path, artifact: &ArtifactRef) -> Result<PathBuf> {
    let path = out.join(&artifact.path);
    if !path.exists() {
        return Err(Error::Missing { what: "artifact", path });
    }
    if sha256_file(&path)? != artifact.sha256 {
        return Err(Error::format(&path, 0, "content hash differs from the run record"));
    }
    Ok(path)
}

/// Writes the corpus drawn from the `corpus` sub-stream of `seed` and
/// starts a fresh run record unless the existing one already describes it.
pub fn gen_corpus(out: &Path, seed: u64, spec: GenerationSpec) -> Result<Corpus> {
    let spec = GenerationSpec {
        seed: substream_seed(seed, "corpus"),
        ..spec
    };
    let corpus = generate_corpus(&spec)?;
    write_corpus(&corpus, &out.join(CORPUS_FILE))?;
    let corpus_ref = artifact(out, CORPUS_FILE)?;
    let manifest = match RunManifest::load(out) {
        Ok(m) if m.seed == seed && m.corpus.as_ref() == Some(&corpus_ref) => m,
        _ => RunManifest {
            corpus: Some(corpus_ref),
            ..RunManifest::new(seed)
        },
    };
    manifest.save(out)?;
    Ok(corpus)
}

pub fn load_corpus(out: &Path, manifest: &RunManifest) -> Result<Corpus> {
    let reference = manifest.corpus.as_ref().ok_or_else(|| Error::Missing {
        what: "corpus (run gen-corpus first)",
        path: out.join(CORPUS_FILE),
    })?;
    read_corpus(&verified(out, reference)?)
}

/// The recorded grid, else the default grid for the corpus and seed.
pub fn load_grid(out: &Path, manifest: &RunManifest, corpus: &Corpus) -> Result<Vec<TeacherSpec>> {
    match &manifest.grid {
        Some(g) => read_json(&verified(out, g)?),
        None => Ok(default_teacher_grid(corpus, manifest.seed)),
    }
}

/// Records `grid` as the ensemble definition. A changed grid invalidates
/// trained teachers and the cache.
pub fn set_grid(out: &Path, manifest: &mut RunManifest, corpus: &Corpus, grid: &[TeacherSpec]) -> Result<()> {
    validate_grid(grid)?;
    for spec in grid {
        check_vocabulary(&spec.model, corpus)?;
    }
    write_json(&out.join(GRID_FILE), &grid)?;
    let grid_ref = artifact(out, GRID_FILE)?;
    if manifest.grid.as_ref() != Some(&grid_ref) {
        manifest.grid = Some(grid_ref);
        manifest.teachers.clear();
        manifest.selected_teacher = None;
        manifest.cache = None;
    }
    Ok(())
}

struct TrainedTeacher {
    id: usize,
    checkpoint: Checkpoint,
    test: EvalReport,
}

/// Trains the grid members in `only` (all when `None`) on up to `threads`
/// workers, then rewrites the ensemble summary.
pub fn train_teachers(
    out: &Path,
    grid: Option<Vec<TeacherSpec>>,
    only: Option<usize>,
    threads: usize,
) -> Result<Vec<TeacherSummaryRow>> {
    let mut manifest = RunManifest::load(out)?;
    let corpus = load_corpus(out, &manifest)?;
    let grid = match grid {
        Some(g) => g,
        None => load_grid(out, &manifest, &corpus)?,
    };
    set_grid(out, &mut manifest, &corpus, &grid)?;
    let ids: Vec<usize> = match only {
        Some(i) if i >= grid.len() => {
            return Err(Error::Usage(format!("--only {i} is outside the {}-member grid", grid.len())))
        }
        Some(i) => vec![i],
        None => (0..grid.len()).collect(),
    };
    let max_len = default_max_len(&corpus);
    let trained = parallel_map(&ids, threads, |&id| {
        let checkpoint = train_teacher(&grid[id], &corpus, &mut |_| {})?;
        let test = evaluate(&checkpoint.params, &corpus.test, max_len)?;
        Ok(TrainedTeacher { id, checkpoint, test })
    })?;
    for t in trained {
        let stem = teacher_stem(t.id);
        let ckpt = format!("{stem}.ckpt.json");
        write_checkpoint(&t.checkpoint, &out.join(&ckpt))?;
        write_train_log(&out.join(format!("{stem}.train_log.csv")), &t.checkpoint.history)?;
        write_evaluation(&out.join(format!("{stem}.test_eval.csv")), &t.test)?;
        manifest.upsert_teacher(TeacherRecord {
            id: t.id,
            checkpoint: artifact(out, &ckpt)?,
            best_epoch: t.checkpoint.epoch,
            valid_er: t.checkpoint.best_valid_er(),
            test_er: t.test.er,
        });
    }
    manifest.cache = None;
    manifest.selected_teacher = if manifest.teachers.len() == grid.len() {
        let ers: Vec<f64> = manifest.teachers.iter().map(|t| t.valid_er).collect();
        Some(select_student_teacher(&ers)?)
    } else {
        None
    };
    let rows: Vec<TeacherSummaryRow> = manifest
        .teachers
        .iter()
        .map(|t| {
            let spec = &grid[t.id];
            TeacherSummaryRow {
                teacher_id: t.id,
                cell: spec.model.cell.name().into(),
                hidden: spec.model.enc_hidden,
                layers: spec.model.enc_layers,
                dropout: spec.model.dropout,
                batch_size: spec.optim.batch_size,
                lr: spec.optim.lr,
                epochs: spec.optim.epochs,
                seed: spec.model.seed,
                parameters: spec.model.num_parameters(),
                best_epoch: t.best_epoch,
                valid_er: t.valid_er,
                test_er: t.test_er,
                selected: if manifest.selected_teacher == Some(t.id) { "*" } else { "" },
            }
        })
        .collect();
    write_teacher_summary(&out.join("teachers/summary.csv"), &rows)?;
    manifest.save(out)?;
    Ok(rows)
}

fn load_teachers(out: &Path, manifest: &RunManifest, corpus: &Corpus) -> Result<Vec<Checkpoint>> {
    let grid = load_grid(out, manifest, corpus)?;
    if manifest.teachers.len() != grid.len() {
        let missing = (0..grid.len())
            .find(|i| manifest.teachers.iter().all(|t| t.id != *i))
            .unwrap_or(grid.len());
        return Err(Error::Missing {
            what: "teacher checkpoint (run train-teachers first)",
            path: out.join(format!("{}.ckpt.json", teacher_stem(missing))),
        });
    }
    manifest
        .teachers
        .iter()
        .map(|t| {
            let ck = read_checkpoint(&verified(out, &t.checkpoint)?)?;
            check_vocabulary(&ck.params.config, corpus)?;
            Ok(ck)
        })
        .collect()
}

/// Loads the cache keyed by the current corpus and teachers, building and
/// recording it first if needed.
pub fn ensure_cache(out: &Path, beam_width: usize, threads: usize) -> Result<DistillationCache> {
    let mut manifest = RunManifest::load(out)?;
    let corpus = load_corpus(out, &manifest)?;
    let teachers = load_teachers(out, &manifest, &corpus)?;
    let corpus_hash = manifest.corpus.as_ref().map(|c| c.sha256.clone()).unwrap_or_default();
    let teacher_hashes: Vec<String> = manifest.teachers.iter().map(|t| t.checkpoint.sha256.clone()).collect();
    let key = cache_key(&corpus_hash, &teacher_hashes, beam_width);
    let digest = key.digest();
    let rel = format!("cache/{}.cache.json", &digest[..16]);
    let path = out.join(&rel);
    if path.exists() {
        if let Ok(cache) = read_cache(&path, &key) {
            if manifest.cache.as_ref().is_none_or(|c| c.digest != digest) {
                manifest.cache = Some(CacheRecord {
                    file: artifact(out, &rel)?,
                    key,
                    digest,
                });
                manifest.save(out)?;
            }
            return Ok(cache);
        }
    }
    let params: Vec<_> = teachers.into_iter().map(|c| c.params).collect();
    let beam = BeamConfig::new(beam_width, default_max_len(&corpus));
    let train = prepare(&corpus.train);
    let entries = parallel_map(&train, threads, |u| Ok(build_cache_entries(&params, u, &beam)?))?;
    let cache = DistillationCache::new(params.len(), beam, entries)?;
    write_cache(&cache, &key, &path)?;
    manifest.cache = Some(CacheRecord {
        file: artifact(out, &rel)?,
        key,
        digest,
    });
    manifest.save(out)?;
    Ok(cache)
}

/// Settings of one student run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillOptions {
    /// Run directory name under `runs/`; defaults to the strategy name.
    pub name: Option<String>,
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Defaults to the `distill` sub-stream of the run-record seed.
    pub seed: Option<u64>,
    pub heads: HeadReset,
    pub beam_width: usize,
}

impl Default for DistillOptions {
    fn default() -> Self {
        let loss = LossHyperparams::default();
        let optim = OptimConfig::default();
        Self {
            name: None,
            strategy: Strategy::Weighted,
            alpha: loss.alpha,
            beta: loss.beta,
            epochs: optim.epochs,
            lr: optim.lr,
            batch_size: optim.batch_size,
            momentum: optim.momentum,
            seed: None,
            heads: HeadReset::Both,
            beam_width: loss.nbest,
        }
    }
}

impl DistillOptions {
    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.strategy.name().into())
    }

    fn validate_name(&self) -> Result<()> {
        let name = self.run_name();
        let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !ok {
            return Err(Error::Usage(format!("run name {name:?} must be non-empty [A-Za-z0-9_-]")));
        }
        Ok(())
    }
}

/// Everything a student run needs, loaded once.
pub struct DistillInputs {
    pub manifest: RunManifest,
    pub corpus: Corpus,
    pub teacher: Checkpoint,
    pub cache: DistillationCache,
}

pub fn distill_inputs(out: &Path, beam_width: usize, threads: usize) -> Result<DistillInputs> {
    let cache = ensure_cache(out, beam_width, threads)?;
    let manifest = RunManifest::load(out)?;
    let corpus = load_corpus(out, &manifest)?;
    let selected = manifest.selected_teacher.ok_or_else(|| Error::Missing {
        what: "selected teacher (train every grid member first)",
        path: out.join("teachers"),
    })?;
    let record = manifest
        .teachers
        .iter()
        .find(|t| t.id == selected)
        .ok_or_else(|| Error::Missing {
            what: "teacher checkpoint",
            path: out.join(format!("{}.ckpt.json", teacher_stem(selected))),
        })?;
    let teacher = read_checkpoint(&verified(out, &record.checkpoint)?)?;
    Ok(DistillInputs {
        manifest,
        corpus,
        teacher,
        cache,
    })
}

/// Trains one student from the selected teacher and writes its run
/// directory. The run record is returned, not saved.
pub fn run_student(out: &Path, inputs: &DistillInputs, options: &DistillOptions) -> Result<RunRecord> {
    options.validate_name()?;
    let seed = options.seed.unwrap_or_else(|| substream_seed(inputs.manifest.seed, "distill"));
    let config = TrainRunConfig {
        strategy: options.strategy,
        loss: LossHyperparams {
            alpha: options.alpha,
            beta: options.beta,
            ..LossHyperparams::default()
        },
        optim: OptimConfig {
            epochs: options.epochs,
            batch_size: options.batch_size,
            lr: options.lr,
            momentum: options.momentum,
            ..OptimConfig::default()
        },
        heads: options.heads,
        seed,
        ..TrainRunConfig::default()
    };
    config.optim.validate()?;
    config.loss.validate()?;
    let teacher = &inputs.teacher.params;
    let student = init_student_from_teacher(teacher, &teacher.config, options.heads, substream_seed(seed, "student-init"))?;
    let max_len = default_max_len(&inputs.corpus);
    let outcome = distill(student, &inputs.cache, &inputs.corpus, &config, max_len, &mut |_| {})?;
    let test = evaluate(&outcome.checkpoint.params, &inputs.corpus.test, max_len)?;

    let name = options.run_name();
    let dir = format!("runs/{name}");
    let ckpt = format!("{dir}/student.ckpt.json");
    write_checkpoint(&outcome.checkpoint, &out.join(&ckpt))?;
    write_train_log(&out.join(format!("{dir}/train_log.csv")), &outcome.checkpoint.history)?;
    write_selection(&out.join(format!("{dir}/selection.csv")), &outcome.ledger)?;
    write_weight_trace(&out.join(format!("{dir}/weight_trace.csv")), &outcome.ledger)?;
    write_evaluation(&out.join(format!("{dir}/test_eval.csv")), &test)?;
    Ok(RunRecord {
        name,
        strategy: options.strategy,
        seed,
        alpha: options.alpha,
        beta: options.beta,
        epochs: options.epochs,
        student_of: inputs.manifest.selected_teacher.unwrap_or_default(),
        checkpoint: artifact(out, &ckpt)?,
        best_epoch: outcome.checkpoint.epoch,
        valid_er: outcome.checkpoint.best_valid_er(),
        test_er: test.er,
    })
}

/// One distillation run with the cache built on demand; records the run.
pub fn distill_run(out: &Path, options: &DistillOptions, threads: usize) -> Result<RunRecord> {
    options.validate_name()?;
    let inputs = distill_inputs(out, options.beam_width, threads)?;
    let record = run_student(out, &inputs, options)?;
    let mut manifest = RunManifest::load(out)?;
    manifest.upsert_run(record.clone());
    manifest.save(out)?;
    Ok(record)
}

/// Cumulative selection counts of a finished run, read back from its CSV.
pub fn read_selection(out: &Path, run: &str) -> Result<Vec<(usize, u64, u64)>> {
    let path = out.join(format!("runs/{run}/selection.csv"));
    if !path.exists() {
        return Err(Error::Missing { what: "selection report", path });
    }
    let mut r = csv::Reader::from_path(&path).map_err(|source| Error::Csv { path: path.clone(), source })?;
    r.deserialize::<(usize, u64, u64)>()
        .map(|row| row.map_err(|source| Error::Csv { path: path.clone(), source }))
        .collect()
}

/// Which checkpoint `evaluate` scores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    Teacher(usize),
    Run(String),
    File(PathBuf),
}

/// Greedy-decodes `split` with the target checkpoint and writes the
/// per-sentence CSV under `eval/`.
pub fn evaluate_target(out: &Path, target: &EvalTarget, split: Split) -> Result<(PathBuf, EvalReport)> {
    let manifest = RunManifest::load(out)?;
    let corpus = load_corpus(out, &manifest)?;
    let (label, path) = match target {
        EvalTarget::Teacher(i) => {
            let t = manifest.teachers.iter().find(|t| t.id == *i).ok_or_else(|| Error::Missing {
                what: "teacher checkpoint",
                path: out.join(format!("{}.ckpt.json", teacher_stem(*i))),
            })?;
            (format!("teacher-{i:02}"), verified(out, &t.checkpoint)?)
        }
        EvalTarget::Run(name) => {
            let r = manifest.runs.iter().find(|r| &r.name == name).ok_or_else(|| Error::Missing {
                what: "run directory",
                path: out.join("runs").join(name),
            })?;
            (format!("run-{name}"), verified(out, &r.checkpoint)?)
        }
        EvalTarget::File(p) => {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
            (stem.trim_end_matches(".ckpt").to_string(), p.clone())
        }
    };
    let ck = read_checkpoint(&path)?;
    check_vocabulary(&ck.params.config, &corpus)?;
    let report = evaluate(&ck.params, corpus.split(split), default_max_len(&corpus))?;
    let csv = out.join(format!("eval/{label}.{}.csv", split.name()));
    write_evaluation(&csv, &report)?;
    Ok((csv, report))
}

/// Consolidated strategy comparison, per-run selection counts and the
/// per-teacher homophone diagnostic, written under `report/`.
pub fn report(out: &Path) -> Result<Vec<ComparisonRow>> {
    let manifest = RunManifest::load(out)?;
    let mut rows = Vec::new();
    let mut selection = Vec::new();
    for run in &manifest.runs {
        let dir = out.join("runs").join(&run.name);
        if !dir.is_dir() {
            return Err(Error::Missing { what: "run directory", path: dir });
        }
        verified(out, &run.checkpoint)?;
        for (teacher_id, top1_count, topk_count) in read_selection(out, &run.name)? {
            selection.push(SelectionCountRow {
                run: run.name.clone(),
                teacher_id,
                top1_count,
                topk_count,
            });
        }
        rows.push(ComparisonRow {
            run: run.name.clone(),
            strategy: run.strategy.name().into(),
            alpha: run.alpha,
            beta: run.beta,
            epochs: run.epochs,
            seed: run.seed,
            best_epoch: run.best_epoch,
            valid_er: run.valid_er,
            test_er: run.test_er,
        });
    }
    write_comparison(&out.join("report/comparison.csv"), &rows)?;
    write_selection_counts(&out.join("report/selection_counts.csv"), &selection)?;

    if !manifest.teachers.is_empty() {
        let corpus = load_corpus(out, &manifest)?;
        let max_len = default_max_len(&corpus);
        let homophones = manifest
            .teachers
            .iter()
            .map(|t| {
                let ck = read_checkpoint(&verified(out, &t.checkpoint)?)?;
                let eval = evaluate(&ck.params, &corpus.test, max_len)?;
                let d = homophone_diagnostic(&corpus, &eval)?;
                Ok(HomophoneRow {
                    teacher_id: t.id,
                    valid_er: t.valid_er,
                    substitutions: d.tally.substitutions,
                    with_partner: d.tally.with_partner,
                    to_partner: d.tally.to_partner,
                    observed_rate: d.tally.observed_rate(),
                    uniform_rate: d.uniform_rate,
                    p_value: d.p_value,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_homophones(&out.join("report/homophones.csv"), &homophones)?;
    }
    Ok(rows)
}

/// A whole experiment: corpus, ensemble, cache, one student per strategy
/// and the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Its `seed` field is replaced by the `corpus` sub-stream of `seed`.
    pub corpus: GenerationSpec,
    /// `None` selects the default ten-member grid.
    pub grid: Option<Vec<TeacherSpec>>,
    pub strategies: Vec<Strategy>,
    /// Shared by every strategy run; `name` and `strategy` are ignored.
    pub distill: DistillOptions,
    /// Adds a `finetune` run: the selected teacher trained without KD.
    pub finetune_control: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: GenerationSpec::default(),
            grid: None,
            strategies: Strategy::ALL.to_vec(),
            distill: DistillOptions {
                epochs: 10,
                ..DistillOptions::default()
            },
            finetune_control: false,
        }
    }
}

pub fn experiment(out: &Path, config: &ExperimentConfig, threads: usize) -> Result<RunManifest> {
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let corpus = gen_corpus(out, config.seed, config.corpus.clone())?;
    if let Some(grid) = &config.grid {
        let mut manifest = RunManifest::load(out)?;
        set_grid(out, &mut manifest, &corpus, grid)?;
        manifest.save(out)?;
    }
    train_teachers(out, config.grid.clone(), None, threads)?;
    let inputs = distill_inputs(out, config.distill.beam_width, threads)?;
    let mut runs: Vec<DistillOptions> = config
        .strategies
        .iter()
        .map(|&strategy| DistillOptions {
            name: None,
            strategy,
            ..config.distill.clone()
        })
        .collect();
    if config.finetune_control {
        runs.push(DistillOptions {
            name: Some("finetune".into()),
            beta: 0.0,
            ..config.distill.clone()
        });
    }
    let records = parallel_map(&runs, threads, |o| run_student(out, &inputs, o))?;
    let mut manifest = RunManifest::load(out)?;
    for r in records {
        manifest.upsert_run(r);
    }
    manifest.save(out)?;
    report(out)?;
    Ok(manifest)
}
