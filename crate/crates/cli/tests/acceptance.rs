//! Acceptance suite. Each test checks one criterion and prints a single
//! `PASS`/`FAIL` line with its measurement and wall time. Tests run one at
//! a time so the timings are not skewed by each other.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use prefcap_core::evalmetrics::{bleu4, fleiss_kappa, win_rate, MetricRow, Outcome, VoteMatrix};
use prefcap_core::jsonl::read_jsonl;
use prefcap_core::numkit::{grad_check, grad_check_coords, Matrix, NumError, ParamSet, Tape, Var};
use prefcap_core::policy::{
    init_policy, mle_pretrain, sequence_log_prob, weighted_log_prob_grad, MleConfig, PolicyDims, PolicyParams,
};
use prefcap_core::prefdata::{
    filter_unanimous, mismatch_augment, oracle_records, resolve, select_challenging, split_80_20, CaptionedSample,
    OracleAnnotation, Origin, PreferenceRecord, Vote,
};
use prefcap_core::reward::{
    bt_loss, bt_loss_rows, input_row, loss_terms, preference_probability, score, train_reward, triples_from_resolved,
    Clamp, RewardParams, RewardTrainConfig, HIDDEN1, HIDDEN2,
};
use prefcap_core::rng::seeded;
use prefcap_core::scst::{length_penalty, rlhf_train, shape_reward, OracleReward, RlSample, RlhfConfig, ShapingConfig};
use prefcap_core::synthworld::{generate_world, Preference, WorldSpec, EOS};
use prefcap_core::{Embedding, EMBED_DIM};
use rand::seq::SliceRandom;
use rand::Rng;

const EXPECTED_LEN: usize = 13;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("[{verdict}] {name}: {detail} ({:.1}s)\n", elapsed.as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn finish(name: &str, pass: bool, detail: String, started: Instant) {
    report(name, pass, &detail, started.elapsed());
    assert!(pass, "{name}: {detail}");
}

fn random_unit(rng: &mut impl Rng) -> Embedding {
    let v: Vec<f64> = (0..EMBED_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    Embedding::normalized(&v)
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

type Unary = fn(&mut Tape, Var, Var, Var) -> Result<Var, NumError>;

/// `Σ c ⊙ op(x, w, b)` with its gradient with respect to all three inputs.
fn tape_objective(op: Unary, shapes: [(usize, usize); 3], flat: &[f64], coeff: &Matrix) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let mut offset = 0;
    let leaves: Vec<Var> = shapes
        .iter()
        .map(|&(r, c)| {
            let m = Matrix::from_vec(r, c, flat[offset..offset + r * c].to_vec()).unwrap();
            offset += r * c;
            tape.param(m)
        })
        .collect();
    let out = op(&mut tape, leaves[0], leaves[1], leaves[2]).unwrap();
    let c = tape.constant(coeff.clone());
    let prod = tape.mul(out, c).unwrap();
    let loss = tape.sum(prod);
    let value = tape.scalar(loss);
    let grads = tape.backward(loss);
    let mut g = Vec::new();
    for (leaf, &(r, c)) in leaves.iter().zip(&shapes) {
        match grads.get(*leaf) {
            Some(m) => g.extend_from_slice(m.as_slice()),
            None => g.extend(std::iter::repeat_n(0.0, r * c)),
        }
    }
    (value, g)
}

fn check_layer(op: Unary, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let (n, d_in, d_out) = (3, 4, 5);
    let shapes = [(n, d_in), (d_out, d_in), (1, d_out)];
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    let point: Vec<f64> = (0..total).map(|_| rng.random_range(-1.5..1.5)).collect();
    let coeff = random_matrix(&mut rng, n, d_out);
    let (_, analytic) = tape_objective(op, shapes, &point, &coeff);
    grad_check(|x| tape_objective(op, shapes, x, &coeff).0, &analytic, &point).unwrap()
}

fn policy_grad_error(params: &PolicyParams, audio: &[Embedding], targets: &[Vec<usize>], weights: &[f64]) -> f64 {
    let refs: Vec<&Embedding> = audio.iter().collect();
    let (_, _, grads) = weighted_log_prob_grad(params, &refs, targets, weights).unwrap();
    let objective = |flat: &[f64]| {
        let mut p = params.clone();
        p.assign_flat(flat);
        targets.iter().zip(audio).zip(weights).map(|((t, a), w)| w * sequence_log_prob(&p, a, t).unwrap()).sum::<f64>()
    };
    grad_check(objective, &grads.flatten(), &params.flatten()).unwrap()
}

/// Moves every parameter by a small random amount so that no pre-activation
/// sits exactly on a ReLU kink.
fn off_kinks(mut params: RewardParams, rng: &mut impl Rng) -> RewardParams {
    let jittered: Vec<f64> = params.flatten().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
    params.assign_flat(&jittered);
    params
}

#[test]
fn gradient_integrity() {
    let _guard = serial();
    let started = Instant::now();
    let mut errors: BTreeMap<&str, f64> = BTreeMap::new();

    let layers: [(&str, Unary); 5] = [
        ("affine", |t, x, w, b| t.affine(x, w, b)),
        ("affine+relu", |t, x, w, b| {
            let a = t.affine(x, w, b)?;
            Ok(t.relu(a))
        }),
        ("affine+sigmoid", |t, x, w, b| {
            let a = t.affine(x, w, b)?;
            Ok(t.sigmoid(a))
        }),
        ("affine+tanh", |t, x, w, b| {
            let a = t.affine(x, w, b)?;
            Ok(t.tanh(a))
        }),
        ("affine+log_softmax", |t, x, w, b| {
            let a = t.affine(x, w, b)?;
            Ok(t.log_softmax_rows(a))
        }),
    ];
    for (i, (name, op)) in layers.into_iter().enumerate() {
        errors.insert(name, check_layer(op, 100 + i as u64));
    }

    let mut rng = seeded(7);
    let dims = PolicyDims { vocab: 9, embed: 4, hidden: 5 };
    let policy = PolicyParams::init(dims, &mut rng);
    let audio = vec![random_unit(&mut rng), random_unit(&mut rng)];
    errors.insert("gru step", policy_grad_error(&policy, &audio, &[vec![4], vec![EOS]], &[1.0, -0.7]));
    errors.insert(
        "policy sequence log-prob",
        policy_grad_error(&policy, &audio, &[vec![3, 7, 4, 8, EOS], vec![5, 5, 6, EOS]], &[1.0, -0.5]),
    );

    let cfg = RewardTrainConfig::default();
    let small = off_kinks(RewardParams::init_with_dims(6, 5, 4, &mut rng), &mut rng);
    let (xw, xl) = (random_matrix(&mut rng, 3, 6), random_matrix(&mut rng, 3, 6));
    let loss_at = |p: &RewardParams, flat: &[f64], xw: &Matrix, xl: &Matrix| {
        let mut q = p.clone();
        q.assign_flat(flat);
        bt_loss_rows(&q, xw, xl, &cfg).unwrap().total
    };
    let out = bt_loss_rows(&small, &xw, &xl, &cfg).unwrap();
    let err = grad_check(|f| loss_at(&small, f, &xw, &xl), &out.grads.flatten(), &small.flatten()).unwrap();
    errors.insert("reward BT loss (small net, all coordinates)", err);

    let full = off_kinks(RewardParams::init(&mut rng), &mut rng);
    let a = random_unit(&mut rng);
    let (w, l) = (random_unit(&mut rng), random_unit(&mut rng));
    let out = bt_loss(&full, &a, &w, &l, &cfg).unwrap();
    let (xw, xl) = (Matrix::row_vector(input_row(&a, &w)), Matrix::row_vector(input_row(&a, &l)));
    let point = full.flatten();
    let analytic = out.grads.flatten();
    let n1 = full.l1_w.len();
    let mut coords: Vec<usize> = (n1..n1 + HIDDEN1).collect();
    let tail = point.len() - HIDDEN2 * HIDDEN1 - HIDDEN1 - n1;
    coords.extend(point.len() - tail..point.len());
    coords.extend((0..300).map(|_| rng.random_range(0..n1)).filter(|&i| analytic[i] != 0.0));
    coords.extend((0..150).map(|_| rng.random_range(n1 + HIDDEN1..n1 + HIDDEN1 + HIDDEN2 * HIDDEN1)));
    let err = grad_check_coords(|f| loss_at(&full, f, &xw, &xl), &analytic, &point, &coords).unwrap();
    errors.insert("reward BT loss (1024-512-128-1, sampled coordinates)", err);

    let worst = errors.values().copied().fold(0.0, f64::max);
    let elapsed = started.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(120);
    let detail = errors.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    finish("gradient integrity", pass, format!("max rel err {worst:.2e} < 1e-4; {detail}"), started);
}

#[test]
fn preference_probability_and_bt_invariants() {
    let _guard = serial();
    let started = Instant::now();
    let mut rng = seeded(31);
    let params = RewardParams::init_with_dims(EMBED_DIM * 2, 16, 8, &mut rng);
    let clamp = Clamp::default();
    let n = 10_000;
    let mut worst_sym = 0.0f64;
    let mut worst_shift = 0.0f64;
    for _ in 0..n {
        let audio = random_unit(&mut rng);
        let r1 = score(&params, &audio, &random_unit(&mut rng), clamp).unwrap();
        let r2 = score(&params, &audio, &random_unit(&mut rng), clamp).unwrap();
        worst_sym = worst_sym.max((preference_probability(r1, r2) + preference_probability(r2, r1) - 1.0).abs());

        let (rw, rl) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
        let shift = rng.random_range(-0.5..0.5);
        let beta = rng.random_range(0.1..10.0);
        let (bt, _, _) = loss_terms(rw, rl, beta, 0.1);
        let (bt_shifted, _, _) = loss_terms(rw + shift, rl + shift, beta, 0.1);
        worst_shift = worst_shift.max((bt - bt_shifted).abs() / bt.abs().max(1.0));
    }
    let pass = worst_sym < 1e-12 && worst_shift < 1e-12;
    finish(
        "preference probability antisymmetry and BT difference dependence",
        pass,
        format!("{n} instances each; |P(1,2)+P(2,1)-1| max {worst_sym:.1e}, shifted BT max rel diff {worst_shift:.1e}"),
        started,
    );
}

#[test]
fn bt_loss_closed_form() {
    let _guard = serial();
    let started = Instant::now();
    let (bt_equal, _, _) = loss_terms(0.42, 0.42, 5.0, 0.1);
    let (_, _, total) = loss_terms(0.9, 0.1, 5.0, 0.1);
    // -ln σ(5·0.8) + 0.1·(0.81 + 0.01)
    let expected = (1.0 + (-4.0f64).exp()).ln() + 0.082;
    let pass =
        (bt_equal - 2f64.ln()).abs() <= 1e-12 && (total - 0.1001).abs() <= 1e-4 && (total - expected).abs() < 1e-12;
    finish(
        "BT loss closed form",
        pass,
        format!("equal rewards BT {bt_equal:.15} vs ln 2; (0.9, 0.1, 5, 0.1) total {total:.6} vs 0.1001"),
        started,
    );
}

#[test]
fn reward_model_learning() {
    let _guard = serial();
    let started = Instant::now();
    let world = generate_world(&WorldSpec { seed: 17, ..WorldSpec::default() }, 2500).unwrap();
    let records = oracle_records(&world, &OracleAnnotation { pairs: 2500, seed: 17, ..Default::default() }).unwrap();
    let resolved = resolve(&filter_unanimous(&records)).unwrap();
    let triples =
        triples_from_resolved(&resolved, |id| world.sample(id).map(|s| &s.audio_embedding), &world.text_encoder())
            .unwrap();
    assert_eq!(triples.len(), 2500, "every oracle record should be unanimous and resolvable");
    let (train, val) = triples.split_at(2000);
    let cfg = RewardTrainConfig { epochs: 70, ..Default::default() };
    let full = train_reward(train, val, &cfg).unwrap();
    let small = train_reward(&train[..500], val, &cfg).unwrap();
    let best = full.curve.iter().filter_map(|e| e.val_accuracy).fold(0.0, f64::max);
    let acc_full = full.curve.last().unwrap().val_accuracy.unwrap();
    let acc_small = small.curve.last().unwrap().val_accuracy.unwrap();
    let elapsed = started.elapsed();
    let pass = best >= 0.95 && acc_full > acc_small && elapsed < Duration::from_secs(300);
    finish(
        "reward-model learning",
        pass,
        format!(
            "2000 pairs: best val acc {best:.4}, final {acc_full:.4} (>= 0.95 within 70 epochs); 500 pairs: final {acc_small:.4}; runtime < 300s"
        ),
        started,
    );
}

#[test]
fn length_penalty_unit_checks() {
    let _guard = serial();
    let started = Instant::now();
    let cfg = ShapingConfig { alpha: 1.0, expected_len: EXPECTED_LEN };
    let zero_below = (0..=EXPECTED_LEN).all(|l| length_penalty(l, &cfg) == 0.0);
    let at_26 = length_penalty(26, &cfg);
    let monotone = [0.0, 0.4, 1.0, 2.5].iter().all(|&alpha| {
        let c = ShapingConfig { alpha, expected_len: EXPECTED_LEN };
        (0..200).all(|l| shape_reward(0.7, l + 1, &c) <= shape_reward(0.7, l, &c))
    });
    let pass = zero_below && (at_26 - 6.5).abs() <= 1e-12 && monotone;
    finish(
        "length penalty",
        pass,
        format!("zero for L_c <= 13: {zero_below}; penalty(26) = {at_26}; shaped reward non-increasing: {monotone}"),
        started,
    );
}

#[test]
fn reward_hacking_reproduction() {
    let _guard = serial();
    let started = Instant::now();
    let world = generate_world(&WorldSpec::default(), 800).unwrap();
    let corpus: Vec<_> =
        world.samples[..500].iter().map(|s| (s.audio_embedding.clone(), s.reference.clone())).collect();
    let (policy, _) = mle_pretrain(init_policy(PolicyDims::default(), 0), &corpus, &MleConfig::default()).unwrap();
    let pretrain_time = started.elapsed();
    let clips: Vec<RlSample> = world.samples[..256]
        .iter()
        .map(|s| RlSample { sample_id: s.sample_id.clone(), audio: s.audio_embedding.clone() })
        .collect();
    // Event-F1 plus a per-token bonus: longer captions always score higher.
    let reward = OracleReward { world: &world, length_bonus: 0.05 };
    let rl_started = Instant::now();
    let mut lengths = Vec::new();
    for alpha in [0.0, 1.0] {
        let cfg = RlhfConfig {
            epochs: 50,
            lr: 3e-3,
            weight_decay: 0.0,
            decay_every: 20,
            shaping: ShapingConfig { alpha, expected_len: EXPECTED_LEN },
            ..Default::default()
        };
        let (_, curve) = rlhf_train(policy.clone(), &reward, &clips, &cfg).unwrap();
        lengths.push(curve.last().unwrap().mean_len_greedy);
    }
    let rl_time = rl_started.elapsed();
    let pass = lengths[0] > (EXPECTED_LEN + 5) as f64
        && lengths[1] <= (EXPECTED_LEN + 2) as f64
        && rl_time < Duration::from_secs(600);
    finish(
        "reward hacking reproduction",
        pass,
        format!(
            "final mean greedy length alpha=0: {:.2} (> 18), alpha=1: {:.2} (<= 15); both runs {:.0}s (< 600s), pretraining {:.0}s",
            lengths[0],
            lengths[1],
            rl_time.as_secs_f64(),
            pretrain_time.as_secs_f64()
        ),
        started,
    );
}

#[test]
fn metrics_fixtures() {
    let _guard = serial();
    let started = Instant::now();
    let kappa = fleiss_kappa(&VoteMatrix::from_labels(&[vec![0, 0], vec![1, 1], vec![0, 1]], 2).unwrap());
    let perfect = fleiss_kappa(&VoteMatrix::from_labels(&[vec![0, 0, 0], vec![1, 1, 1], vec![1, 1, 1]], 2).unwrap());
    // Precisions 6/6, 4/5, 3/4, 1/3 and candidate length equal to the closest reference.
    let candidate = ["a", "b", "c", "d", "e", "f"];
    let refs = vec![vec!["a", "b", "c", "d"], vec!["c", "d", "e"], vec!["f", "g", "h", "i", "j", "k"]];
    let bleu = bleu4(&candidate, &refs).unwrap();
    let mut outcomes = vec![Outcome::Win; 6];
    outcomes.extend([Outcome::Loss; 3]);
    outcomes.push(Outcome::Tie);
    let wr = win_rate(&outcomes).unwrap();
    let pass = (kappa - 1.0 / 3.0).abs() <= 1e-9
        && (perfect - 1.0).abs() <= 1e-12
        && (bleu - 0.2f64.powf(0.25)).abs() <= 1e-9
        && (wr - 66.67).abs() <= 0.01;
    finish(
        "metrics fixtures",
        pass,
        format!("kappa {kappa:.12} (1/3), perfect {perfect}, BLEU-4 {bleu:.12} (0.2^0.25), win rate {wr:.4} (66.67)"),
        started,
    );
}

fn record(i: usize, choices: &[Preference]) -> PreferenceRecord {
    PreferenceRecord {
        pair_id: format!("r{i}"),
        sample_id: format!("s{}", i % 97),
        caption_a: format!("caption a {i}"),
        caption_b: format!("caption b {i}"),
        votes: choices
            .iter()
            .enumerate()
            .map(|(k, &choice)| Vote { annotator_id: format!("ann{k}"), choice })
            .collect(),
        origin: Origin::Oracle,
        mismatch_source: None,
    }
}

#[test]
fn prefdata_pipeline() {
    let _guard = serial();
    let started = Instant::now();
    let mut rng = seeded(5);
    let prefs = [Preference::A, Preference::B, Preference::Tie];
    let records: Vec<PreferenceRecord> = (0..2000)
        .map(|i| {
            let n = rng.random_range(1..=5);
            let choices: Vec<Preference> = if rng.random_bool(0.5) {
                vec![prefs[rng.random_range(0..2)]; n]
            } else {
                (0..n).map(|_| prefs[rng.random_range(0..3)]).collect()
            };
            record(i, &choices)
        })
        .collect();
    let kept = filter_unanimous(&records);
    let brute: Vec<&PreferenceRecord> = records
        .iter()
        .filter(|r| {
            let first = r.votes[0].choice;
            first != Preference::Tie && r.votes.iter().all(|v| v.choice == first)
        })
        .collect();
    let filter_ok = kept.len() == brute.len() && kept.iter().zip(&brute).all(|(a, b)| a == *b);

    let (train, val) = split_80_20(&kept, 9).unwrap();
    let (train2, val2) = split_80_20(&kept, 9).unwrap();
    let mut ids: Vec<&str> = train.iter().chain(&val).map(|r| r.pair_id.as_str()).collect();
    ids.sort_unstable();
    let mut expected: Vec<&str> = kept.iter().map(|r| r.pair_id.as_str()).collect();
    expected.sort_unstable();
    let split_ok = ids == expected && train == train2 && val == val2 && train.len() == kept.len() * 8 / 10;

    let samples: Vec<CaptionedSample> = (0..60)
        .map(|i| CaptionedSample { sample_id: format!("clip{i}"), caption: format!("we hear sound {}", i % 50) })
        .collect();
    let mismatched = mismatch_augment(&samples, &mut seeded(3), 1000).unwrap();
    let mismatch_ok = mismatched.len() == 1000
        && mismatched
            .iter()
            .all(|r| r.mismatch_source.as_deref().is_some_and(|src| src != r.sample_id) && r.caption_a != r.caption_b);

    let candidates: Vec<String> = (0..500).map(|i| format!("h{i:03}")).collect();
    let scores: Vec<(String, f64)> =
        candidates.iter().map(|c| (c.clone(), (rng.random_range(0..40) as f64) / 40.0)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(&mut rng);
    let shuffled: Vec<String> = order.iter().map(|&i| candidates[i].clone()).collect();
    let picked = select_challenging(&shuffled, &scores, 100).unwrap();
    let mut oracle: Vec<(f64, &String)> = scores.iter().map(|(c, s)| (*s, c)).collect();
    oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let mut want: Vec<&String> = oracle[..100].iter().map(|(_, c)| *c).collect();
    let mut got: Vec<&String> = picked.iter().collect();
    want.sort();
    got.sort();
    let challenging_ok = got == want;

    let pass = filter_ok && split_ok && mismatch_ok && challenging_ok;
    finish(
        "prefdata pipeline",
        pass,
        format!(
            "unanimous filter {}/{} kept matches brute force: {filter_ok}; split partition and determinism: {split_ok}; 1000 mismatch records without self-pairs: {mismatch_ok}; bottom-100 of 500 matches sort: {challenging_ok}",
            kept.len(),
            records.len()
        ),
        started,
    );
}

struct PipelineRun {
    total: Duration,
    stage_times: Vec<(String, Duration)>,
    rerun_identical: Result<usize, String>,
    eval: Vec<MetricRow>,
    failure: Option<String>,
}

const STAGES: &[(&str, &[&str])] = &[
    ("synth-gen", &[]),
    ("policy-pretrain", &[]),
    ("prefs-oracle", &[]),
    ("prefs-filter", &[]),
    ("prefs-augment", &[]),
    ("reward-train", &[]),
    ("prefs-challenging", &[]),
    ("rlhf-train", &[]),
    ("decode", &[]),
    ("decode", &["--io.decode_policy", "policy_pretrained.parm", "--io.decode_output", "captions_pretrained.jsonl"]),
    ("evaluate", &[]),
];

fn run_stages(run_dir: &Path) -> Result<Vec<(String, Duration)>, String> {
    let mut times = Vec::new();
    for (stage, extra) in STAGES {
        let t = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_prefcap"))
            .arg(stage)
            .arg("--io.run_dir")
            .arg(run_dir)
            .args(*extra)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| format!("{stage}: {e}"))?;
        if !out.status.success() {
            return Err(format!("{stage} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        times.push((stage.to_string(), t.elapsed()));
    }
    Ok(times)
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.clone(), std::fs::read(&p).unwrap()))
        .collect()
}

fn pipeline() -> &'static PipelineRun {
    static RUN: OnceLock<PipelineRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("run");
        let started = Instant::now();
        let first = run_stages(&run_dir);
        let total = started.elapsed();
        let stage_times = match first {
            Ok(t) => t,
            Err(e) => {
                return PipelineRun {
                    total,
                    stage_times: Vec::new(),
                    rerun_identical: Err("first run failed".into()),
                    eval: Vec::new(),
                    failure: Some(e),
                }
            }
        };
        let before = snapshot(&run_dir);
        let eval: Vec<MetricRow> = read_jsonl(&run_dir.join("eval.jsonl")).unwrap();
        let rerun_identical = run_stages(&run_dir).and_then(|_| {
            let after = snapshot(&run_dir);
            if after.keys().ne(before.keys()) {
                return Err("rerun produced a different set of files".into());
            }
            match before.iter().find(|(p, bytes)| after[*p] != **bytes) {
                Some((p, _)) => Err(format!("{} differs after rerun", p.display())),
                None => Ok(before.len()),
            }
        });
        PipelineRun { total, stage_times, rerun_identical, eval, failure: None }
    })
}

fn metric(rows: &[MetricRow], system: &str, name: &str) -> Option<f64> {
    rows.iter().find(|r| r.system == system && r.metric == name).map(|r| r.value)
}

#[test]
fn rlhf_improvement() {
    let _guard = serial();
    let started = Instant::now();
    let run = pipeline();
    if let Some(e) = &run.failure {
        finish("RLHF improvement", false, format!("pipeline failed: {e}"), started);
    }
    let runtime: Duration = run.stage_times.iter().skip_while(|(s, _)| s != "rlhf-train").map(|(_, t)| *t).sum();
    let shaped_rlhf = metric(&run.eval, "all:rlhf", "shaped_reward").unwrap();
    let shaped_pre = metric(&run.eval, "all:pretrained", "shaped_reward").unwrap();
    let wins = metric(&run.eval, "all:rlhf", "oracle_win_rate").unwrap();
    let ratio = shaped_rlhf / shaped_pre;
    let pass = ratio >= 1.2 && wins > 55.0 && runtime < Duration::from_secs(900);
    let detail = format!(
        "held-out shaped reward {shaped_rlhf:.4} vs pretrained {shaped_pre:.4}, ratio {ratio:.3} (>= 1.2); oracle win rate {wins:.2}% (> 55%); rlhf-train to evaluate {:.0}s (< 900s)",
        runtime.as_secs_f64()
    );
    report("RLHF improvement", pass, &detail, runtime);
    assert!(pass, "RLHF improvement: {detail}");
}

#[test]
fn cli_pipeline_smoke() {
    let _guard = serial();
    let started = Instant::now();
    let run = pipeline();
    if let Some(e) = &run.failure {
        finish("full CLI pipeline", false, format!("pipeline failed: {e}"), started);
    }
    let stages =
        run.stage_times.iter().map(|(s, t)| format!("{s} {:.0}s", t.as_secs_f64())).collect::<Vec<_>>().join(", ");
    let pass = run.total < Duration::from_secs(1200) && run.rerun_identical.is_ok();
    let detail = format!(
        "{} stages in {:.0}s (< 1200s); rerun byte-identical: {:?}; {stages}",
        run.stage_times.len(),
        run.total.as_secs_f64(),
        run.rerun_identical.as_ref().map(|n| format!("{n} files"))
    );
    report("full CLI pipeline", pass, &detail, run.total);
    assert!(pass, "full CLI pipeline: {detail}");
}
