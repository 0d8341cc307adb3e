use super::*;
use crate::losses::{ce_kd_frame, ce_loss, ctc_kd_sequence, ctc_loss, joint_loss, kd_loss, total_loss};
use crate::numerics::check_gradient;
use rand::{Rng, SeedableRng};

fn tiny(cell: CellKind) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        vocab_size: 3,
        enc_hidden: 4,
        enc_layers: 2,
        dec_hidden: 3,
        att_dim: 3,
        emb_dim: 2,
        cell,
        dropout: 0.0,
        seed: 5,
    }
}

fn frames(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn config_validation() {
    let mut c = tiny(CellKind::Gru);
    assert!(c.validate().is_ok());
    c.dropout = 1.0;
    assert!(c.validate().is_err());
    let mut c = tiny(CellKind::Gru);
    c.enc_layers = 0;
    assert!(ModelParams::<f64>::init(&c).is_err());
}

#[test]
fn encode_contract() {
    for cell in [CellKind::Gru, CellKind::Mgu] {
        let p = ModelParams::<f64>::init(&tiny(cell)).unwrap();
        assert!(encode(&p, &Tensor::zeros(0, 3)).is_err());
        assert!(encode(&p, &frames(4, 2, 0)).is_err());
        let x = frames(5, 3, 1);
        let a = encode(&p, &x).unwrap();
        assert_eq!(a.shape(), (5, 4));
        assert_eq!(a, encode(&p, &x).unwrap());

        let mut q = p.clone();
        q.get_mut("enc.0.w_x").unwrap().data_mut()[0] += 1e-3;
        assert_ne!(a, encode(&q, &x).unwrap());
    }
}

#[test]
fn dropout_only_with_rng() {
    let mut c = tiny(CellKind::Gru);
    c.dropout = 0.5;
    let p = ModelParams::<f64>::init(&c).unwrap();
    let x = frames(6, 3, 2);
    let mut g = Graph::new();
    let b = Bound::new(&mut g, &p, false).unwrap();
    let plain = b.encode(&mut g, &x, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dropped = b.encode(&mut g, &x, Some(&mut rng)).unwrap();
    let (pv, dv) = (g.value(plain.states), g.value(dropped.states));
    assert_ne!(pv, dv);
    for (a, b) in pv.data().iter().zip(dv.data()) {
        assert!(*b == 0.0 || (*b - 2.0 * a).abs() < 1e-12);
    }
}

#[test]
fn ctc_grid_contract() {
    let p = ModelParams::<f32>::init(&tiny(CellKind::Mgu)).unwrap();
    for t in 1..5 {
        let x = frames(t, 3, t as u64).cast::<f32>();
        let probs = ctc_frame_posteriors(&p, &x).unwrap();
        assert_eq!(probs.shape(), (t, 4));
        for row in probs.iter_rows() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        let mut g = Graph::new();
        let grid = PosteriorGrid::constant(&mut g, &probs, GridKind::CtcFrame);
        assert!(ctc_loss(&mut g, &grid, &[1]).is_ok());
    }
}

#[test]
fn decode_step_contract() {
    let p = ModelParams::<f64>::init(&tiny(CellKind::Gru)).unwrap();
    let mut g = Graph::new();
    let b = Bound::new(&mut g, &p, false).unwrap();
    let enc = b.encode(&mut g, &frames(7, 3, 3), None).unwrap();
    let s0 = b.initial_state(&mut g);
    let (lp, s1) = b.decode_step(&mut g, &enc, &s0, p.config.vocabulary().bos()).unwrap();
    assert_eq!(g.value(lp).shape(), (1, 4));
    let total: f64 = g.value(lp).data().iter().map(|v| v.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let alpha = g.value(s1.attention.unwrap());
    assert_eq!(alpha.shape(), (1, 7));
    assert!((alpha.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(b.decode_step(&mut g, &enc, &s1, 3).is_err());

    // One encoder row: the context is that row.
    let enc1 = b.encode(&mut g, &frames(1, 3, 4), None).unwrap();
    let (_, s) = b.decode_step(&mut g, &enc1, &s0, 0).unwrap();
    for (c, h) in g.value(s.context).data().iter().zip(g.value(enc1.states).data()) {
        assert!((c - h).abs() < 1e-15);
    }
}

#[test]
fn teacher_forcing_contract() {
    let p = ModelParams::<f64>::init(&tiny(CellKind::Gru)).unwrap();
    let mut other_cfg = tiny(CellKind::Mgu);
    other_cfg.seed = 9;
    let q = ModelParams::<f64>::init(&other_cfg).unwrap();
    let x = frames(6, 3, 6);
    let tokens = [2, 0, 1];
    let a = teacher_forced_posteriors(&p, &x, &tokens).unwrap();
    let b = teacher_forced_posteriors(&q, &x, &tokens).unwrap();
    assert_eq!(a.shape(), (4, 4));
    assert_eq!(a.shape(), b.shape());
    assert!(teacher_forced_posteriors(&p, &x, &[3]).is_err());

    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &p, false).unwrap();
    let enc = bound.encode(&mut g, &x, None).unwrap();
    let grid = bound.teacher_forced(&mut g, &enc, &tokens).unwrap();
    let ce = ce_loss(&mut g, &grid, &tokens).unwrap();
    let by_hand: f64 = tokens
        .iter()
        .chain(&[3])
        .enumerate()
        .map(|(t, &c)| -a.get(t, c).ln())
        .sum();
    assert!((g.scalar(ce) - by_hand).abs() < 1e-12);

    // The first step of the teacher-forced grid is the first decode step.
    let mut scorer = ModelScorer::new(&p, &x).unwrap();
    let s0 = scorer.start().unwrap();
    let (lp, _) = scorer.step(&s0, None).unwrap();
    for (c, l) in lp.iter().enumerate() {
        assert!((l.exp() - a.get(0, c)).abs() < 1e-15);
    }
}

/// History-independent scorer: step `t` emits row `t` of a log grid.
struct GridScorer {
    rows: Vec<Vec<f64>>,
}

impl StepScorer for GridScorer {
    type State = usize;

    fn eos_column(&self) -> usize {
        self.rows[0].len() - 1
    }

    fn start(&mut self) -> Result<usize> {
        Ok(0)
    }

    fn step(&mut self, state: &usize, _prev: Option<usize>) -> Result<(Vec<f64>, usize)> {
        Ok((self.rows[*state].clone(), state + 1))
    }
}

fn random_grid(rng: &mut ChaCha8Rng, steps: usize, z: usize) -> Vec<Vec<f64>> {
    (0..steps)
        .map(|_| {
            let row: Vec<f64> = (0..=z).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter().map(|v| (v / s).ln()).collect()
        })
        .collect()
}

/// Every sequence of 1..=max_len content tokens, ranked like the decoder.
fn enumerate(rows: &[Vec<f64>], max_len: usize) -> Vec<Hypothesis> {
    let z = rows[0].len() - 1;
    let mut all = Vec::new();
    let mut stack: Vec<Vec<usize>> = (0..z).map(|v| vec![v]).collect();
    while let Some(seq) = stack.pop() {
        let prefix: f64 = seq.iter().enumerate().map(|(t, &v)| rows[t][v]).sum();
        all.push(Hypothesis {
            log_prob: prefix + rows[seq.len()][z],
            tokens: seq.clone(),
        });
        if seq.len() < max_len {
            for v in 0..z {
                let mut next = seq.clone();
                next.push(v);
                stack.push(next);
            }
        }
    }
    all.sort_by(|a, b| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    all
}

fn assert_same(beam: &NBestList, exact: &[Hypothesis]) {
    assert_eq!(beam.len(), exact.len());
    for (b, e) in beam.hypotheses().iter().zip(exact) {
        assert_eq!(b.tokens, e.tokens);
        assert!((b.log_prob - e.log_prob).abs() < 1e-12);
    }
}

#[test]
fn beam_matches_enumeration_on_toy_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let rows = random_grid(&mut rng, 4, 2);
    let exact = enumerate(&rows, 3);
    assert_eq!(exact.len(), 14);
    let beam = beam_search_with(&mut GridScorer { rows }, &BeamConfig::new(8, 3)).unwrap();
    assert_same(&beam, &exact[..8]);
}

#[test]
fn beam_is_exact_on_history_independent_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let z = rng.random_range(2..=3);
        let max_len = rng.random_range(1..=3);
        let rows = random_grid(&mut rng, max_len + 1, z);
        let exact = enumerate(&rows, max_len);
        for width in 1..=exact.len() + 1 {
            let beam = beam_search_with(&mut GridScorer { rows: rows.clone() }, &BeamConfig::new(width, max_len)).unwrap();
            assert_same(&beam, &exact[..width.min(exact.len())]);
        }
    }
}

#[test]
fn width_one_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let rows = random_grid(&mut rng, 5, 3);
        let greedy = greedy_with(&mut GridScorer { rows: rows.clone() }, 4).unwrap();
        let beam = beam_search_with(&mut GridScorer { rows }, &BeamConfig::new(1, 4)).unwrap();
        assert_eq!(beam.hypotheses(), &[greedy]);
    }
    for seed in 0..4 {
        let mut c = tiny(CellKind::Gru);
        c.seed = seed;
        let p = ModelParams::<f32>::init(&c).unwrap();
        let x = frames(6, 3, seed).cast();
        let g = greedy_decode(&p, &x, 5).unwrap();
        assert_eq!(beam_search(&p, &x, &BeamConfig::new(1, 5)).unwrap().best(), &g);
        assert_eq!(greedy_decode(&p, &x, 5).unwrap(), g);
        assert!(!g.tokens.is_empty() && g.tokens.len() <= 5);
        assert!(g.log_prob <= 0.0);
    }
}

#[test]
fn beam_on_model_is_sorted_and_unique() {
    let p = ModelParams::<f64>::init(&tiny(CellKind::Mgu)).unwrap();
    let x = frames(5, 3, 8);
    let list = beam_search(&p, &x, &BeamConfig::new(6, 4)).unwrap();
    assert_eq!(list.len(), 6);
    let h = list.hypotheses();
    for w in h.windows(2) {
        assert!(w[0].log_prob >= w[1].log_prob);
        assert_ne!(w[0].tokens, w[1].tokens);
    }
    for hyp in h {
        // Rescoring through teacher forcing reproduces the beam score.
        let grid = teacher_forced_posteriors(&p, &x, &hyp.tokens).unwrap();
        let score: f64 = hyp
            .tokens
            .iter()
            .chain(&[3])
            .enumerate()
            .map(|(t, &c)| grid.get(t, c).ln())
            .sum();
        assert!((score - hyp.log_prob).abs() < 1e-9);
    }
    // Forced eos caps the length.
    let capped = beam_search(&p, &x, &BeamConfig::new(3, 1)).unwrap();
    assert!(capped.hypotheses().iter().all(|h| h.tokens.len() == 1));
}

#[test]
fn length_normalized_ranking() {
    let rows = vec![
        vec![(0.9f64).ln(), (0.05f64).ln(), (0.05f64).ln()],
        vec![(0.5f64).ln(), (0.1f64).ln(), (0.4f64).ln()],
        vec![(0.5f64).ln(), (0.1f64).ln(), (0.4f64).ln()],
        vec![(0.1f64).ln(), (0.1f64).ln(), (0.8f64).ln()],
    ];
    let mut config = BeamConfig::new(14, 3);
    let raw = beam_search_with(&mut GridScorer { rows: rows.clone() }, &config).unwrap();
    config.length_normalize = true;
    let norm = beam_search_with(&mut GridScorer { rows }, &config).unwrap();
    let per_step = |h: &Hypothesis| h.log_prob / (h.tokens.len() + 1) as f64;
    for w in norm.hypotheses().windows(2) {
        assert!(per_step(&w[0]) >= per_step(&w[1]));
    }
    assert_eq!(raw.len(), norm.len());
}

#[test]
fn reinitialize_touches_only_named() {
    let p = ModelParams::<f64>::init(&tiny(CellKind::Gru)).unwrap();
    let mut q = p.clone();
    q.reinitialize(&[DEC_OUT_W, CTC_W], 99).unwrap();
    for (a, b) in p.tensors.iter().zip(&q.tensors) {
        if a.name == DEC_OUT_W || a.name == CTC_W {
            assert_ne!(a.value, b.value);
        } else {
            assert_eq!(a.value, b.value);
        }
    }
    assert!(q.reinitialize(&["nope"], 1).is_err());
    assert_eq!(p.cast::<f32>().cast::<f64>().tensors.len(), p.tensors.len());
}

fn param_point(cell: CellKind) -> (ModelConfig, Vec<Tensor<f64>>) {
    let c = tiny(cell);
    let p = ModelParams::<f64>::init(&c).unwrap();
    // Non-zero biases so their gradients are exercised away from zero.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let point = p
        .tensors
        .into_iter()
        .map(|t| {
            let mut v = t.value;
            v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
            v
        })
        .collect();
    (c, point)
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    for cell in [CellKind::Gru, CellKind::Mgu] {
        let (cfg, point) = param_point(cell);
        let x = frames(6, 3, 11);
        let tokens = [1, 1, 0];
        let err = check_gradient(
            |g, nodes| {
                let b = Bound::attach(g, &cfg, nodes.to_vec())?;
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
        assert!(err < 1e-4, "{cell:?}: {err}");
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (cfg, point) = param_point(CellKind::Gru);
    let x = frames(7, 3, 12);
    let tokens = [2, 0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let teacher: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..1.0)).collect();
    let teacher = Tensor::from_vec(3, 4, teacher).unwrap();
    let teacher = Tensor::from_vec(
        3,
        4,
        teacher
            .iter_rows()
            .flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(move |v| v / s).collect::<Vec<_>>()
            })
            .collect(),
    )
    .unwrap();
    let err = check_gradient(
        |g, nodes| {
            let b = Bound::attach(g, &cfg, nodes.to_vec())?;
            let enc = b.encode(g, &x, None)?;
            let ctc_grid = b.ctc_posteriors(g, &enc)?;
            let dec_grid = b.teacher_forced(g, &enc, &tokens)?;
            let t = PosteriorGrid::constant(g, &teacher, GridKind::DecoderStep);
            let ce_kd = ce_kd_frame(g, &dec_grid, &t, 1.0)?;
            let (ctc_kd, _) = ctc_kd_sequence(g, &ctc_grid, &[(&[2, 0], 0.6), (&[2], 0.4)])?;
            let kd = kd_loss(g, ce_kd, ctc_kd, 0.7)?;
            let ce = ce_loss(g, &dec_grid, &tokens)?;
            let ctc = ctc_loss(g, &ctc_grid, &tokens)?;
            let sup = joint_loss(g, ce, ctc, 0.7)?;
            total_loss(g, kd, sup, 0.5)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
