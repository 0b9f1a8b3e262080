use prefcap_core::checkpoint;
use prefcap_core::numkit::{grad_check, softmax, ParamSet};
use prefcap_core::policy::*;
use prefcap_core::rng::seeded;
use prefcap_core::synthworld::{event_f1, generate_world, WorldSpec, EOS};
use prefcap_core::{Embedding, EMBED_DIM};
use rand::Rng;

fn random_audio(rng: &mut impl Rng) -> Embedding {
    let v: Vec<f64> = (0..EMBED_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    Embedding::normalized(&v)
}

fn small() -> PolicyDims {
    PolicyDims { vocab: 9, embed: 4, hidden: 5 }
}

#[test]
fn sequence_log_prob_gradient_through_five_steps() {
    let mut rng = seeded(3);
    let params = PolicyParams::init(small(), &mut rng);
    let audio = [random_audio(&mut rng), random_audio(&mut rng)];
    let refs: Vec<&Embedding> = audio.iter().collect();
    let targets = vec![vec![3, 7, 4, 8, EOS], vec![5, 5, EOS]];
    let weights = [1.0, -0.5];
    let (_, _, grads) = weighted_log_prob_grad(&params, &refs, &targets, &weights).unwrap();
    let objective = |flat: &[f64]| {
        let mut p = params.clone();
        p.assign_flat(flat);
        targets.iter().zip(&audio).zip(weights).map(|((t, a), w)| w * sequence_log_prob(&p, a, t).unwrap()).sum::<f64>()
    };
    let err = grad_check(objective, &grads.flatten(), &params.flatten()).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn decoded_log_probs_match_rescoring() {
    let mut rng = seeded(4);
    let params = PolicyParams::init(PolicyDims::default(), &mut rng);
    for seed in 0..20 {
        let audio = random_audio(&mut rng);
        let d = decode(&params, &audio, &DecodeConfig::multinomial(30, seed)).unwrap();
        let summed: f64 = d.step_log_probs.iter().sum();
        assert!((summed - d.total_log_prob).abs() < 1e-10);
        let fresh = sequence_log_prob(&params, &audio, &d.scored_tokens()).unwrap();
        assert!((fresh - d.total_log_prob).abs() < 1e-10, "{fresh} vs {}", d.total_log_prob);
        let (_, taped, _) = weighted_log_prob_grad(&params, &[&audio], &[d.scored_tokens()], &[1.0]).unwrap();
        assert!((taped[0] - d.total_log_prob).abs() < 1e-10);
    }
}

#[test]
fn multinomial_frequencies_match_softmax() {
    let mut rng = seeded(5);
    let params = PolicyParams::init(PolicyDims::default(), &mut rng);
    let audio = random_audio(&mut rng);
    let h = params.initial_state(&audio).unwrap();
    let (mut logits, _) = step(&params, &h, prefcap_core::synthworld::BOS).unwrap();
    mask_logits(&mut logits);
    let probs = softmax(&logits);

    let draws = 10_000;
    let cfg = DecodeConfig::multinomial(1, 0);
    let mut counts = vec![0usize; probs.len()];
    let mut draw_rng = seeded(99);
    for _ in 0..draws {
        let d = decode_with_rng(&params, &audio, &cfg, &mut draw_rng).unwrap();
        let t = if d.ended { EOS } else { d.tokens[0] };
        counts[t] += 1;
    }
    assert_eq!(counts[0] + counts[1], 0, "pad/bos generated");
    for (t, (&c, &p)) in counts.iter().zip(&probs).enumerate() {
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - expected).abs() <= 3.0 * sigma + 1e-9, "token {t}: {c} vs {expected:.1} ± {sigma:.1}");
    }
}

#[test]
fn topk_over_whole_vocabulary_equals_multinomial() {
    let mut rng = seeded(6);
    let params = PolicyParams::init(PolicyDims::default(), &mut rng);
    for seed in 0..50 {
        let audio = random_audio(&mut rng);
        let multi = decode(&params, &audio, &DecodeConfig::multinomial(30, seed)).unwrap();
        let topk = DecodeConfig { mode: DecodeMode::Topk, k: 64, ..DecodeConfig::multinomial(30, seed) };
        assert_eq!(decode(&params, &audio, &topk).unwrap(), multi);
    }
}

#[test]
fn topk_only_emits_top_tokens() {
    let mut rng = seeded(7);
    let params = PolicyParams::init(PolicyDims::default(), &mut rng);
    let audio = random_audio(&mut rng);
    let h = params.initial_state(&audio).unwrap();
    let (mut logits, _) = step(&params, &h, prefcap_core::synthworld::BOS).unwrap();
    mask_logits(&mut logits);
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let allowed = &order[..3];
    for seed in 0..300 {
        let cfg = DecodeConfig { mode: DecodeMode::Topk, k: 3, max_len: 1, seed, ..Default::default() };
        let d = decode(&params, &audio, &cfg).unwrap();
        let t = if d.ended { EOS } else { d.tokens[0] };
        assert!(allowed.contains(&t));
    }
}

#[test]
fn greedy_ignores_temperature_and_is_repeatable() {
    let mut rng = seeded(8);
    let params = PolicyParams::init(PolicyDims::default(), &mut rng);
    let audio = random_audio(&mut rng);
    let base = decode(&params, &audio, &DecodeConfig::greedy(30)).unwrap();
    for temperature in [0.1, 0.7, 3.0] {
        let cfg = DecodeConfig { temperature, ..DecodeConfig::greedy(30) };
        assert_eq!(decode(&params, &audio, &cfg).unwrap(), base);
    }
    let cfg = DecodeConfig::multinomial(30, 17);
    assert_eq!(decode(&params, &audio, &cfg).unwrap(), decode(&params, &audio, &cfg).unwrap());
}

#[test]
fn single_pair_is_memorised() {
    let w = generate_world(&WorldSpec::default(), 1).unwrap();
    let s = &w.samples[0];
    let corpus = vec![(s.audio_embedding.clone(), s.reference.clone())];
    let cfg = MleConfig { epochs: 60, batch_size: 1, lr: 1e-2, ..Default::default() };
    let (p, _) = mle_pretrain(init_policy(PolicyDims::default(), 1), &corpus, &cfg).unwrap();
    let d = decode(&p, &s.audio_embedding, &DecodeConfig::greedy(30)).unwrap();
    assert_eq!(d.tokens, s.reference);
    assert!(d.ended);
}

#[test]
fn pretraining_learns_held_out_events() {
    let w = generate_world(&WorldSpec::default(), 700).unwrap();
    let corpus: Vec<_> = w.samples[..500].iter().map(|s| (s.audio_embedding.clone(), s.reference.clone())).collect();
    let cfg = MleConfig::default();
    let (p, curve) = mle_pretrain(init_policy(PolicyDims::default(), cfg.seed), &corpus, &cfg).unwrap();
    for pair in curve[..5].windows(2) {
        assert!(pair[1].loss < pair[0].loss, "{curve:?}");
    }
    let held_out = &w.samples[500..];
    let f1: f64 = held_out
        .iter()
        .map(|s| {
            let d = decode(&p, &s.audio_embedding, &DecodeConfig::greedy(30)).unwrap();
            event_f1(&s.true_events, &d.tokens, &w.vocab)
        })
        .sum::<f64>()
        / held_out.len() as f64;
    assert!(f1 >= 0.6, "held-out event F1 {f1}");
}

#[test]
fn pretraining_is_deterministic() {
    let w = generate_world(&WorldSpec::default(), 20).unwrap();
    let corpus: Vec<_> = w.samples.iter().map(|s| (s.audio_embedding.clone(), s.reference.clone())).collect();
    let cfg = MleConfig { epochs: 2, ..Default::default() };
    let a = mle_pretrain(init_policy(PolicyDims::default(), 3), &corpus, &cfg).unwrap();
    let b = mle_pretrain(init_policy(PolicyDims::default(), 3), &corpus, &cfg).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert!(matches!(mle_pretrain(a.0, &[], &cfg), Err(PolicyError::EmptyCorpus)));
}

#[test]
fn checkpoint_roundtrip() {
    let p = init_policy(PolicyDims::default(), 5);
    let bytes = checkpoint::encode_params(&p);
    let mut q = PolicyParams::zeros(PolicyDims::default());
    checkpoint::load_into(&bytes, &mut q).unwrap();
    assert_eq!(p, q);
    let mut wrong = PolicyParams::zeros(PolicyDims { hidden: 64, ..Default::default() });
    assert!(checkpoint::load_into(&bytes, &mut wrong).is_err());
}
