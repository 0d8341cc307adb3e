//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mtkd::analysis::{homophone_diagnostic, HomophoneDiagnostic};
use mtkd::formats::{read_checkpoint, RunManifest};
use mtkd::pipeline::{self, DistillOptions, ExperimentConfig};
use mtkd::thread_count;
use mtkd_core::corpus::{generate_corpus, Corpus, GenerationSpec, SplitSizes};
use mtkd_core::losses::{
    ce_kd_frame, ce_kd_topk, ce_loss, ctc_kd_sequence, ctc_loss, joint_loss, kd_loss, total_loss, GridKind,
    LossHyperparams, PosteriorGrid,
};
use mtkd_core::metrics::{edit_distance, ErrorRate};
use mtkd_core::model::{BeamConfig, Bound, CellKind, ModelConfig, ModelParams};
use mtkd_core::numerics::check_gradient;
use mtkd_core::strategies::{er_softmax_weights, select_top1, select_topk, Strategy};
use mtkd_core::training::{
    batch_gradients, build_cache_entries, default_max_len, evaluate, init_student_from_teacher, prepare,
    train_teacher, DistillationCache, HeadReset, KdObjective, Objective, OptimConfig, TeacherSpec, TrainRunConfig,
};
use mtkd_core::{Error, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Written to the stderr handle directly so the lines survive output capture.
fn say(line: &str) {
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

fn verdict(criterion: u32, what: &str, ok: bool, detail: &str) {
    say(&format!("criterion {criterion} ({what}): {} {detail}", if ok { "PASS" } else { "FAIL" }));
}

fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        // Log-uniform entries give both flat and peaked rows.
        let row: Vec<f64> = (0..cols).map(|_| (rng.random_range(-4.0..0.0f64)).exp()).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|x| x / s));
    }
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn random_logits(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Sums the probability of every frame path that collapses to `target`.
fn brute_force_ctc(probs: &Tensor<f64>, target: &[usize]) -> f64 {
    let (frames, width) = probs.shape();
    let blank = width - 1;
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        let mut collapsed = Vec::with_capacity(frames);
        let mut prev = None;
        for &s in &path {
            if s != blank && prev != Some(s) {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &s)| probs.data()[t * width + s]).product::<f64>();
        }
        let mut t = 0;
        loop {
            if t == frames {
                return total;
            }
            path[t] += 1;
            if path[t] < width {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

#[test]
fn criterion_1_ctc_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut infeasible = 0;
    let mut mismatches = Vec::new();
    let cases = 1500;
    for case in 0..cases {
        let z = rng.random_range(1..=3);
        let frames = rng.random_range(1..=8);
        let len = rng.random_range(1..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..z)).collect();
        let probs = random_probs(&mut rng, frames, z + 1);
        let oracle = brute_force_ctc(&probs, &target);

        let mut g = Graph::<f64>::new();
        let grid = PosteriorGrid::constant(&mut g, &probs, GridKind::CtcFrame);
        match ctc_loss(&mut g, &grid, &target) {
            Ok(node) if oracle > 0.0 => worst = worst.max((g.scalar(node) + oracle.ln()).abs()),
            Err(Error::NoValidAlignment { .. }) if oracle == 0.0 => infeasible += 1,
            other => mismatches.push(format!("case {case}: {other:?} vs oracle {oracle}")),
        }
    }
    let elapsed = start.elapsed();
    let ok = mismatches.is_empty() && worst < 1e-8 && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "CTC oracle",
        ok,
        &format!("{cases} grids, {infeasible} infeasible, max |diff| {worst:.2e}, {elapsed:.1?}"),
    );
    assert!(mismatches.is_empty(), "{mismatches:?}");
    assert!(worst < 1e-8);
    assert!(elapsed < Duration::from_secs(60));
}

fn tiny_model(cell: CellKind, seed: u64) -> (ModelConfig, Vec<Tensor<f64>>) {
    let config = ModelConfig {
        input_dim: 3,
        vocab_size: 3,
        enc_hidden: 4,
        enc_layers: 2,
        dec_hidden: 3,
        att_dim: 3,
        emb_dim: 2,
        cell,
        dropout: 0.0,
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = ModelParams::<f64>::init(&config)
        .unwrap()
        .tensors
        .into_iter()
        .map(|t| {
            let mut v = t.value;
            v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
            v
        })
        .collect();
    (config, point)
}

fn record(name: &'static str, err: f64, results: &mut Vec<(&'static str, f64)>) {
    match results.iter_mut().find(|r| r.0 == name) {
        Some(r) => r.1 = r.1.max(err),
        None => results.push((name, err)),
    }
}

#[test]
fn criterion_2_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut results: Vec<(&str, f64)> = Vec::new();

    for _ in 0..3 {
        let frames = rng.random_range(4..=7);
        let width = rng.random_range(3..=4);
        let target: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(0..width - 1)).collect();
        let err = check_gradient(
            |g, x| {
                let lp = g.log_softmax(x[0]);
                ctc_loss(g, &PosteriorGrid::new(lp, GridKind::CtcFrame), &target)
            },
            &[random_logits(&mut rng, frames, width)],
            1e-5,
        )
        .unwrap();
        record("ctc_loss", err, &mut results);

        let steps = target.len() + 1;
        let err = check_gradient(
            |g, x| {
                let lp = g.log_softmax(x[0]);
                ce_loss(g, &PosteriorGrid::new(lp, GridKind::DecoderStep), &target)
            },
            &[random_logits(&mut rng, steps, width)],
            1e-5,
        )
        .unwrap();
        record("ce_loss", err, &mut results);

        let t1 = random_probs(&mut rng, steps, width);
        let t2 = random_probs(&mut rng, steps, width);
        let err = check_gradient(
            |g, x| {
                let lp = g.log_softmax(x[0]);
                let s = PosteriorGrid::new(lp, GridKind::DecoderStep);
                let a = PosteriorGrid::constant(g, &t1, GridKind::DecoderStep);
                ce_kd_frame(g, &s, &a, 0.6)
            },
            &[random_logits(&mut rng, steps, width)],
            1e-5,
        )
        .unwrap();
        record("ce_kd_frame", err, &mut results);

        let err = check_gradient(
            |g, x| {
                let lp = g.log_softmax(x[0]);
                let s = PosteriorGrid::new(lp, GridKind::DecoderStep);
                let a = PosteriorGrid::constant(g, &t1, GridKind::DecoderStep);
                let b = PosteriorGrid::constant(g, &t2, GridKind::DecoderStep);
                ce_kd_topk(g, &s, &[a, b])
            },
            &[random_logits(&mut rng, steps, width)],
            1e-5,
        )
        .unwrap();
        record("ce_kd_topk", err, &mut results);

        let other: Vec<usize> = target.iter().map(|&t| (t + 1) % (width - 1)).collect();
        let err = check_gradient(
            |g, x| {
                let lp = g.log_softmax(x[0]);
                let s = PosteriorGrid::new(lp, GridKind::CtcFrame);
                ctc_kd_sequence(g, &s, &[(&target, 0.5), (&other, 0.3), (&target[..1], 0.2)]).map(|r| r.0)
            },
            &[random_logits(&mut rng, frames, width)],
            1e-5,
        )
        .unwrap();
        record("ctc_kd_sequence", err, &mut results);
    }

    for (i, cell) in [CellKind::Gru, CellKind::Mgu].into_iter().enumerate() {
        let (config, point) = tiny_model(cell, 10 + i as u64);
        let x = random_logits(&mut rng, 6, 3);
        let tokens = [1, 2, 1];
        let err = check_gradient(
            |g, nodes| {
                let b = Bound::attach(g, &config, nodes.to_vec())?;
                let enc = b.encode(g, &x, None)?;
                let ctc_grid = b.ctc_posteriors(g, &enc)?;
                let dec_grid = b.teacher_forced(g, &enc, &tokens)?;
                let ce = ce_loss(g, &dec_grid, &tokens)?;
                let ctc = ctc_loss(g, &ctc_grid, &tokens)?;
                joint_loss(g, ce, ctc, 0.7)
            },
            &point,
            1e-5,
        )
        .unwrap();
        record("joint model loss", err, &mut results);

        let teacher = random_probs(&mut rng, tokens.len() + 1, 4);
        let err = check_gradient(
            |g, nodes| {
                let b = Bound::attach(g, &config, nodes.to_vec())?;
                let enc = b.encode(g, &x, None)?;
                let ctc_grid = b.ctc_posteriors(g, &enc)?;
                let dec_grid = b.teacher_forced(g, &enc, &tokens)?;
                let t = PosteriorGrid::constant(g, &teacher, GridKind::DecoderStep);
                let ce_kd = ce_kd_frame(g, &dec_grid, &t, 1.0)?;
                let (ctc_kd, _) = ctc_kd_sequence(g, &ctc_grid, &[(&[1, 2], 0.6), (&[1, 2, 1], 0.4)])?;
                let kd = kd_loss(g, ce_kd, ctc_kd, 0.7)?;
                let ce = ce_loss(g, &dec_grid, &tokens)?;
                let ctc = ctc_loss(g, &ctc_grid, &tokens)?;
                let supervised = joint_loss(g, ce, ctc, 0.7)?;
                total_loss(g, kd, supervised, 0.6)
            },
            &point,
            1e-5,
        )
        .unwrap();
        record("total model loss", err, &mut results);
    }

    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let ok = worst < 1e-4 && elapsed < Duration::from_secs(120);
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(2, "gradient checks", ok, &format!("{}; {elapsed:.1?}", detail.join(", ")));
    assert!(worst < 1e-4, "{results:?}");
    assert!(elapsed < Duration::from_secs(120));
}

#[test]
fn criterion_3_edit_distance_oracle() {
    let start = Instant::now();
    let mut strings: Vec<Vec<u8>> = vec![Vec::new()];
    let mut frontier = 0;
    while frontier < strings.len() {
        let s = strings[frontier].clone();
        frontier += 1;
        if s.len() < 6 {
            for c in 0..3u8 {
                let mut t = s.clone();
                t.push(c);
                strings.push(t);
            }
        }
    }
    let index: HashMap<Vec<u8>, usize> = strings.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let neighbours: Vec<Vec<usize>> = strings
        .iter()
        .map(|s| {
            let mut out = Vec::new();
            for i in 0..s.len() {
                let mut t = s.clone();
                t.remove(i);
                out.push(index[&t]);
                for c in 0..3u8 {
                    if c != s[i] {
                        let mut t = s.clone();
                        t[i] = c;
                        out.push(index[&t]);
                    }
                }
            }
            if s.len() < 6 {
                for i in 0..=s.len() {
                    for c in 0..3u8 {
                        let mut t = s.clone();
                        t.insert(i, c);
                        out.push(index[&t]);
                    }
                }
            }
            out
        })
        .collect();

    let mut pairs = 0usize;
    let mut mismatches = Vec::new();
    let mut dist = vec![usize::MAX; strings.len()];
    for (src, a) in strings.iter().enumerate() {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in &neighbours[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for (dst, b) in strings.iter().enumerate() {
            pairs += 1;
            let got = edit_distance(a, b).distance();
            if got != dist[dst] && mismatches.len() < 5 {
                mismatches.push(format!("{a:?} -> {b:?}: {got} vs {}", dist[dst]));
            }
        }
    }
    let kitten: Vec<char> = "kitten".chars().collect();
    let sitting: Vec<char> = "sitting".chars().collect();
    let ks = edit_distance(&kitten, &sitting).distance();
    let elapsed = start.elapsed();
    let ok = mismatches.is_empty() && ks == 3 && elapsed < Duration::from_secs(60);
    verdict(
        3,
        "edit-distance oracle",
        ok,
        &format!("{pairs} pairs, kitten/sitting = {ks}, {elapsed:.1?}"),
    );
    assert!(mismatches.is_empty(), "{mismatches:?}");
    assert_eq!(ks, 3);
    assert!(elapsed < Duration::from_secs(60));
}

fn small_corpus(seed: u64) -> Corpus {
    generate_corpus(&GenerationSpec {
        z: 3,
        dim: 4,
        min_len: 1,
        max_len: 3,
        min_repeat: 2,
        max_repeat: 3,
        sigma: 0.3,
        homophones: vec![],
        splits: SplitSizes {
            train: 16,
            valid: 4,
            test: 4,
        },
        seed,
    })
    .unwrap()
}

fn small_teacher(corpus: &Corpus, seed: u64) -> ModelParams<f32> {
    let spec = TeacherSpec {
        model: ModelConfig {
            enc_hidden: 8,
            dec_hidden: 8,
            att_dim: 4,
            emb_dim: 4,
            seed,
            ..ModelConfig::new(corpus.dim(), corpus.vocab.content_size())
        },
        optim: OptimConfig {
            epochs: 2,
            batch_size: 4,
            lr: 0.5,
            ..OptimConfig::default()
        },
        alpha: 0.7,
    };
    train_teacher(&spec, corpus, &mut |_| {}).unwrap().params
}

fn batch_loss(student: &ModelParams<f32>, cache: &DistillationCache, corpus: &Corpus, config: &TrainRunConfig) -> f64 {
    let train = prepare(&corpus.train);
    let batch: Vec<usize> = (0..8).collect();
    let mut objective = KdObjective::new(cache, config).unwrap();
    objective.begin_batch(0, &batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    batch_gradients(student, &train, &batch, &mut objective, &mut rng).unwrap().0
}

#[test]
fn criterion_4_strategy_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();

    for _ in 0..500 {
        let m = rng.random_range(1..=10);
        let ers: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let w = er_softmax_weights(&ers).unwrap();
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            failures.push(format!("weights of {ers:?} sum to {sum}"));
        }
        for i in 0..m {
            for j in 0..m {
                if ers[i] < ers[j] && !(w[i] > w[j]) {
                    failures.push(format!("er {} < {} but w {} <= {}", ers[i], ers[j], w[i], w[j]));
                }
            }
        }
    }
    let pair = er_softmax_weights(&[0.0, 1.0]).unwrap();
    if (pair[0] - 0.7311).abs() > 1e-4 || (pair[1] - 0.2689).abs() > 1e-4 {
        failures.push(format!("[0, 1] -> {pair:?}"));
    }

    for _ in 0..500 {
        let m = rng.random_range(1..=6);
        let ers: Vec<ErrorRate> = (0..m)
            .map(|_| ErrorRate::new(rng.random_range(0..4), rng.random_range(1..=3)).unwrap())
            .collect();
        let top1 = select_top1(&ers).unwrap();
        let topk = select_topk(&ers).unwrap();
        if !topk.contains(&top1) {
            failures.push(format!("top-k {topk:?} misses top-1 {top1} for {ers:?}"));
        }
    }

    let corpus = small_corpus(4);
    let teacher = small_teacher(&corpus, 1);
    let beam = BeamConfig::new(4, default_max_len(&corpus));
    let entries = prepare(&corpus.train)
        .iter()
        .map(|u| build_cache_entries(std::slice::from_ref(&teacher), u, &beam).unwrap())
        .collect();
    let cache = DistillationCache::new(1, beam, entries).unwrap();
    let student = init_student_from_teacher(&teacher, &teacher.config, HeadReset::Both, 3).unwrap();
    let losses: Vec<f64> = Strategy::ALL
        .iter()
        .map(|&strategy| batch_loss(&student, &cache, &corpus, &TrainRunConfig { strategy, ..Default::default() }))
        .collect();
    let spread = losses.iter().map(|l| (l - losses[0]).abs()).fold(0.0, f64::max);
    if spread > 1e-12 {
        failures.push(format!("M=1 batch losses differ: {losses:?}"));
    }

    verdict(
        4,
        "strategy algebra",
        failures.is_empty(),
        &format!("[0,1] -> [{:.4}, {:.4}], M=1 loss spread {spread:.1e}", pair[0], pair[1]),
    );
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn criterion_5_degeneracies() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    let mut worst_onehot = 0.0f64;
    let mut worst_k1 = 0.0f64;
    for _ in 0..200 {
        let len = rng.random_range(1..=4);
        let width = rng.random_range(2..=5);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..width - 1)).collect();
        let mut g = Graph::<f64>::new();
        let student_probs = random_probs(&mut rng, len + 1, width);
        let student = PosteriorGrid::constant(&mut g, &student_probs, GridKind::DecoderStep);

        let mut onehot = Tensor::zeros(len + 1, width);
        for (t, &c) in tokens.iter().chain([width - 1].iter()).enumerate() {
            onehot.data_mut()[t * width + c] = 1.0;
        }
        let teacher = PosteriorGrid::constant(&mut g, &onehot, GridKind::DecoderStep);
        let kd = ce_kd_frame(&mut g, &student, &teacher, 1.0).unwrap();
        let ce = ce_loss(&mut g, &student, &tokens).unwrap();
        worst_onehot = worst_onehot.max((g.scalar(kd) - g.scalar(ce)).abs());

        let soft = random_probs(&mut rng, len + 1, width);
        let soft = PosteriorGrid::constant(&mut g, &soft, GridKind::DecoderStep);
        let frame = ce_kd_frame(&mut g, &student, &soft, 1.0).unwrap();
        let topk = ce_kd_topk(&mut g, &student, &[soft]).unwrap();
        worst_k1 = worst_k1.max((g.scalar(frame) - g.scalar(topk)).abs());

        let ctc_probs = random_probs(&mut rng, 2 * len + 1, width);
        let ctc_grid = PosteriorGrid::constant(&mut g, &ctc_probs, GridKind::CtcFrame);
        let (ctc_kd, _) = ctc_kd_sequence(&mut g, &ctc_grid, &[(&tokens, 1.0)]).unwrap();
        let ctc = ctc_loss(&mut g, &ctc_grid, &tokens).unwrap();
        let kd_total = kd_loss(&mut g, frame, ctc_kd, 0.7).unwrap();
        let supervised = joint_loss(&mut g, ce, ctc, 0.7).unwrap();
        let total = total_loss(&mut g, kd_total, supervised, 1.0).unwrap();
        if g.scalar(total) != g.scalar(kd_total) {
            failures.push(format!("beta=1: {} vs {}", g.scalar(total), g.scalar(kd_total)));
        }
    }
    if worst_onehot >= 1e-9 {
        failures.push(format!("one-hot teacher differs from CE by {worst_onehot}"));
    }
    if worst_k1 != 0.0 && worst_k1 >= 1e-12 {
        failures.push(format!("K=1 differs from frame KD by {worst_k1}"));
    }

    // The same endpoint through a trained model and the cached ensemble.
    let corpus = small_corpus(5);
    let teachers = [small_teacher(&corpus, 1), small_teacher(&corpus, 2)];
    let beam = BeamConfig::new(4, default_max_len(&corpus));
    let entries = prepare(&corpus.train)
        .iter()
        .map(|u| build_cache_entries(&teachers, u, &beam).unwrap())
        .collect();
    let cache = DistillationCache::new(2, beam, entries).unwrap();
    let student = init_student_from_teacher(&teachers[0], &teachers[0].config, HeadReset::Both, 3).unwrap();
    let config = |beta| TrainRunConfig {
        loss: LossHyperparams { beta, ..Default::default() },
        ..Default::default()
    };
    let full = batch_loss(&student, &cache, &corpus, &config(1.0));
    let zero = batch_loss(&student, &cache, &corpus, &config(0.0));
    let half = batch_loss(&student, &cache, &corpus, &config(0.5));
    let mid = (half - 0.5 * (full + zero)).abs();
    if mid > 1e-4 * half.abs() {
        failures.push(format!("beta=0.5 gives {half}, endpoints {zero} and {full}"));
    }

    verdict(
        5,
        "degeneracies",
        failures.is_empty(),
        &format!("one-hot |diff| {worst_onehot:.1e}, K=1 |diff| {worst_k1:.1e}, beta=1 exact"),
    );
    assert!(failures.is_empty(), "{failures:?}");
}

const SEEDS: [u64; 3] = [1, 2, 3];

struct SeedOutcome {
    seed: u64,
    selected: usize,
    selected_test: f64,
    runs: BTreeMap<String, f64>,
    top1: Vec<u64>,
    topk: Vec<u64>,
    worst_teacher: usize,
    worst_valid: f64,
    homophones: HomophoneDiagnostic,
}

impl SeedOutcome {
    fn checks(&self) -> [bool; 4] {
        let average = self.runs["average"];
        let a = average >= self.selected_test;
        let b = ["weighted", "top1", "topk"].iter().any(|r| self.runs[*r] < average);
        let best = *self.top1.iter().max().unwrap();
        let c = self.top1[self.selected] == best && self.top1.iter().filter(|&&n| n == best).count() == 1;
        let d = self.top1.iter().zip(&self.topk).all(|(t1, tk)| tk >= t1);
        [a, b, c, d]
    }
}

struct Experiments {
    outcomes: Vec<SeedOutcome>,
    elapsed: Duration,
}

fn run_seed(dir: &Path, seed: u64, threads: usize) -> SeedOutcome {
    let config = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let manifest = pipeline::experiment(dir, &config, threads).unwrap();
    let selected = manifest.selected_teacher.unwrap();
    let runs = manifest.runs.iter().map(|r| (r.name.clone(), r.test_er)).collect();
    let select = pipeline::read_selection(dir, "top1").unwrap();
    let worst = manifest
        .teachers
        .iter()
        .max_by(|a, b| a.valid_er.total_cmp(&b.valid_er).then(b.id.cmp(&a.id)))
        .unwrap();
    let corpus = pipeline::load_corpus(dir, &manifest).unwrap();
    let params = read_checkpoint(&dir.join(&worst.checkpoint.path)).unwrap().params;
    let report = evaluate(&params, &corpus.test, default_max_len(&corpus)).unwrap();
    SeedOutcome {
        seed,
        selected,
        selected_test: manifest.teachers[selected].test_er,
        runs,
        top1: select.iter().map(|r| r.1).collect(),
        topk: pipeline::read_selection(dir, "topk").unwrap().iter().map(|r| r.2).collect(),
        worst_teacher: worst.id,
        worst_valid: worst.valid_er,
        homophones: homophone_diagnostic(&corpus, &report).unwrap(),
    }
}

fn experiments() -> &'static Experiments {
    static CELL: OnceLock<Experiments> = OnceLock::new();
    CELL.get_or_init(|| {
        let threads = thread_count().unwrap();
        let start = Instant::now();
        let outcomes = SEEDS
            .iter()
            .map(|&seed| {
                let dir = tempfile::tempdir().unwrap();
                run_seed(dir.path(), seed, threads)
            })
            .collect();
        Experiments {
            outcomes,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_6_desk_scale_experiment() {
    let exp = experiments();
    let mut passing = 0;
    for o in &exp.outcomes {
        let checks = o.checks();
        if checks.iter().all(|&c| c) {
            passing += 1;
        }
        say(&format!(
            "  seed {}: selected teacher {} test {:.4}; {}; top1 {:?}; topk {:?}; (a)-(d) {:?}",
            o.seed,
            o.selected,
            o.selected_test,
            o.runs.iter().map(|(k, v)| format!("{k} {v:.4}")).collect::<Vec<_>>().join(", "),
            o.top1,
            o.topk,
            checks
        ));
    }
    let in_time = exp.elapsed < Duration::from_secs(30 * 60);
    verdict(
        6,
        "desk-scale experiment",
        passing >= 2 && in_time,
        &format!("{passing}/{} seeds hold (a)-(d), {:.1?}", exp.outcomes.len(), exp.elapsed),
    );
    assert!(passing >= 2);
    assert!(in_time);
}

fn small_experiment() -> ExperimentConfig {
    let corpus = GenerationSpec {
        z: 4,
        dim: 6,
        min_len: 2,
        max_len: 4,
        max_repeat: 3,
        homophones: vec![(0, 1)],
        splits: SplitSizes {
            train: 48,
            valid: 12,
            test: 12,
        },
        ..GenerationSpec::default()
    };
    let member = |hidden, cell, dropout, seed| TeacherSpec {
        model: ModelConfig {
            input_dim: 6,
            vocab_size: 4,
            enc_hidden: hidden,
            enc_layers: 1,
            dec_hidden: hidden,
            att_dim: 4,
            emb_dim: 4,
            cell,
            dropout,
            seed,
        },
        optim: OptimConfig {
            epochs: 2,
            batch_size: 8,
            lr: 0.5,
            ..OptimConfig::default()
        },
        alpha: 0.7,
    };
    ExperimentConfig {
        seed: 11,
        corpus,
        grid: Some(vec![
            member(12, CellKind::Gru, 0.0, 1),
            member(8, CellKind::Mgu, 0.2, 2),
            member(6, CellKind::Gru, 0.1, 3),
        ]),
        strategies: Strategy::ALL.to_vec(),
        distill: DistillOptions {
            epochs: 2,
            batch_size: 8,
            ..DistillOptions::default()
        },
        finetune_control: true,
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn criterion_7_reproducibility() {
    let config = small_experiment();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline::experiment(a.path(), &config, 1).unwrap();
    pipeline::experiment(b.path(), &config, 2).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let names: Vec<_> = ta.keys().collect();
    let differing: Vec<_> = ta
        .iter()
        .filter(|(k, v)| tb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_set = ta.len() == tb.len();
    let kinds = |ext: &str| names.iter().filter(|n| n.to_string_lossy().ends_with(ext)).count();
    let ok = same_set && differing.is_empty() && kinds(".ckpt.json") > 0 && kinds(".cache.json") > 0 && kinds(".csv") > 0;
    verdict(
        7,
        "reproducibility",
        ok,
        &format!(
            "{} files ({} checkpoints, {} caches, {} CSVs), {} differ",
            ta.len(),
            kinds(".ckpt.json"),
            kinds(".cache.json"),
            kinds(".csv"),
            differing.len()
        ),
    );
    assert!(same_set, "{:?} vs {:?}", ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    assert!(differing.is_empty(), "{differing:?}");
    assert!(ok);

    let manifest = RunManifest::load(a.path()).unwrap();
    assert_eq!(manifest.runs.len(), 5);
}

#[test]
fn criterion_8_homophone_diagnostic() {
    let exp = experiments();
    for o in &exp.outcomes {
        let h = &o.homophones;
        say(&format!(
            "  seed {}: worst teacher {} (valid {:.4}) substitutions {} to partner {} ({} with a partner) uniform rate {:.4} p {:?}",
            o.seed,
            o.worst_teacher,
            o.worst_valid,
            h.tally.substitutions,
            h.tally.to_partner,
            h.tally.with_partner,
            h.uniform_rate.unwrap_or(f64::NAN),
            h.p_value
        ));
    }
    let first = &exp.outcomes[0].homophones;
    let observed = first.tally.observed_rate().unwrap_or(0.0);
    let uniform = first.uniform_rate.unwrap_or(f64::NAN);
    let p = first.p_value.unwrap_or(1.0);
    let ok = observed > uniform && p < 0.01;
    verdict(
        8,
        "homophone diagnostic",
        ok,
        &format!("seed {}: observed {observed:.4} vs uniform {uniform:.4}, p = {p:.2e}", exp.outcomes[0].seed),
    );
    assert!(ok);
}
