use lrmt_core::codec::Vocabulary;
use lrmt_core::corpus::{CharTable, LanguageCode};
use lrmt_core::decode::{
    beam_search, ensemble_step_logprobs, greedy, translate_corpus, BeamOptions, Combination, DecodeError, Ensemble,
    EnsembleSpec, StepModel,
};
use lrmt_core::model::{init_random, Checkpoint, TrainConfig, TransformerShape};

/// Deterministic toy: next-token distribution is a hash of the prefix.
/// Id 0 is eos, ids 1 and 2 are output symbols; bos is 1 when fed first.
struct Toy {
    salt: u64,
}

impl StepModel for Toy {
    type Source = u64;
    type Prefix = Vec<u32>;

    fn vocab_size(&self) -> usize {
        3
    }
    fn vocab_fingerprint(&self) -> u64 {
        0
    }
    fn max_prefix(&self) -> usize {
        64
    }
    fn encode(&self, src: &[u32]) -> Result<u64, DecodeError> {
        Ok(src.iter().fold(self.salt, |h, &x| h.wrapping_mul(31).wrapping_add(x as u64)))
    }
    fn start(&self, _src: &u64) -> Vec<u32> {
        Vec::new()
    }
    fn advance(&self, src: &u64, prefix: &mut Vec<u32>, token: u32) -> Vec<f64> {
        prefix.push(token);
        let mut h = *src ^ 0x9e37_79b9_7f4a_7c15;
        for &t in prefix.iter() {
            h = (h ^ t as u64).wrapping_mul(0x0100_0000_01b3).rotate_left(17);
        }
        let w: Vec<f64> = (0..3)
            .map(|i| {
                let x = h.wrapping_mul(2 * i + 1).wrapping_add(i * 0x51ed_2701) >> 11;
                0.05 + (x as f64) / (1u64 << 53) as f64
            })
            .collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| (x / z).ln()).collect()
    }
}

fn toy_opts(beam: usize, max_len: usize) -> BeamOptions {
    BeamOptions {
        bos: 1,
        eos: 0,
        ..BeamOptions::new(beam, max_len)
    }
}

/// Scores every eos-terminated sequence over {1, 2} of length <= max_len.
fn exhaustive(model: &Toy, src: &[u32], max_len: usize) -> (Vec<u32>, f64) {
    let enc = model.encode(src).unwrap();
    let mut best: Option<(Vec<u32>, f64)> = None;
    for len in 0..=max_len {
        for code in 0..(1u32 << len) {
            let seq: Vec<u32> = (0..len).map(|i| 1 + ((code >> (len - 1 - i)) & 1)).collect();
            let mut prefix = model.start(&enc);
            let mut lp = model.advance(&enc, &mut prefix, 1);
            let mut score = 0.0;
            for &t in &seq {
                score += lp[t as usize];
                lp = model.advance(&enc, &mut prefix, t);
            }
            score += lp[0];
            let better = match &best {
                None => true,
                Some((bs, b)) => score > *b || (score == *b && seq < *bs),
            };
            if better {
                best = Some((seq, score));
            }
        }
    }
    best.unwrap()
}

#[test]
fn wide_beam_equals_exhaustive_enumeration() {
    for salt in 0..30 {
        let toy = Toy { salt };
        let src = [salt as u32, 3];
        let hyp = beam_search(&toy, &src, &toy_opts(81, 4)).unwrap();
        let (seq, score) = exhaustive(&toy, &src, 4);
        assert_eq!(hyp.tokens, seq, "salt {salt}");
        assert!((hyp.score - score).abs() < 1e-12);
        assert!(hyp.tokens.len() <= 4);
    }
}

#[test]
fn beam_one_is_greedy() {
    for salt in 0..30 {
        let toy = Toy { salt };
        let enc = toy.encode(&[7]).unwrap();
        let mut prefix = toy.start(&enc);
        let mut lp = toy.advance(&enc, &mut prefix, 1);
        let mut out = Vec::new();
        let mut score = 0.0;
        loop {
            // forced eos at max_len = 6
            let t = if out.len() == 6 {
                0
            } else {
                (0..3u32).fold(0, |b, t| if lp[t as usize] > lp[b as usize] { t } else { b })
            };
            score += lp[t as usize];
            if t == 0 {
                break;
            }
            out.push(t);
            lp = toy.advance(&enc, &mut prefix, t);
        }
        let hyp = beam_search(&toy, &[7], &toy_opts(1, 6)).unwrap();
        assert_eq!(hyp.tokens, out);
        assert!((hyp.score - score).abs() < 1e-12);
        assert_eq!(greedy(&toy, &[7], &toy_opts(5, 6)).unwrap(), hyp);
    }
}

#[test]
fn beam_score_is_monotone_on_the_toy_model() {
    for salt in 0..30 {
        let toy = Toy { salt };
        let scores: Vec<f64> = [1, 2, 4, 8, 16, 81]
            .iter()
            .map(|&k| beam_search(&toy, &[1, 2], &toy_opts(k, 4)).unwrap().score)
            .collect();
        for w in scores.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "salt {salt}: {scores:?}");
        }
    }
}

#[test]
fn min_len_and_max_len_are_respected() {
    for salt in 0..10 {
        let toy = Toy { salt };
        let hyp = beam_search(&toy, &[1], &BeamOptions { min_len: 2, ..toy_opts(3, 5) }).unwrap();
        assert!((2..=5).contains(&hyp.tokens.len()));
    }
}

#[test]
fn hand_computed_two_member_average() {
    let a = vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
    let b = vec![0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()];
    let out = ensemble_step_logprobs(&[a.clone(), b], Combination::MeanLogProb);
    // geometric means 0.1^0.5, 0.3, 0.1^0.5 renormalized
    let g = 0.1f64.sqrt();
    let z = 2.0 * g + 0.3;
    let expect = [g / z, 0.3 / z, g / z];
    for (o, e) in out.iter().zip(expect) {
        assert!((o.exp() - e).abs() < 1e-12);
    }
    assert_eq!(ensemble_step_logprobs(&[a.clone()], Combination::MeanLogProb), a);
    let same = ensemble_step_logprobs(&[a.clone(), a.clone(), a.clone()], Combination::MeanLogProb);
    for (x, y) in same.iter().zip(&a) {
        assert!((x - y).abs() < 1e-9);
    }
    let mp = ensemble_step_logprobs(
        &[vec![0.5f64.ln(), 0.5f64.ln()], vec![0.1f64.ln(), 0.9f64.ln()]],
        Combination::MeanProb,
    );
    assert!((mp[0].exp() - 0.3).abs() < 1e-12);
}

fn vocab() -> Vocabulary {
    Vocabulary::from_chars("abcdefgh ".chars(), &[LanguageCode::new("quy").unwrap(), LanguageCode::new("czn").unwrap()])
}

fn model(seed: u64) -> Checkpoint {
    init_random(TransformerShape::tiny(), &vocab(), TrainConfig::default(), seed).unwrap()
}

#[test]
fn ensemble_of_copies_decodes_like_the_single_model() {
    let m = model(1);
    let v = vocab();
    let quy = LanguageCode::new("quy").unwrap();
    let sources: Vec<String> = (0..20).map(|i| "abcdefgh".chars().cycle().skip(i).take(3 + i % 5).collect()).collect();
    let single = translate_corpus(&m, &v, &sources, &quy, 3, 12, None);
    for k in [2, 3] {
        let ens = Ensemble::new(vec![&m; k], Combination::MeanLogProb).unwrap();
        assert_eq!(translate_corpus(&ens, &v, &sources, &quy, 3, 12, None), single);
    }
    assert_eq!(single.hypotheses.len(), 20);
    assert!(single.errors.is_empty());
    assert!(single.hypotheses.iter().all(|h| !h.is_empty()));
    assert_eq!(translate_corpus(&m, &v, &sources, &quy, 3, 12, None), single);
}

#[test]
fn members_must_share_a_vocabulary() {
    let a = model(1);
    let other = Vocabulary::from_chars("xyz".chars(), &[]);
    let b = init_random(TransformerShape::tiny(), &other, TrainConfig::default(), 1).unwrap();
    assert!(matches!(
        Ensemble::new(vec![&a, &b], Combination::MeanLogProb),
        Err(DecodeError::IncompatibleMembers(_))
    ));
    assert!(matches!(
        Ensemble::<Checkpoint>::new(vec![], Combination::MeanLogProb),
        Err(DecodeError::NoMembers)
    ));
}

#[test]
fn failing_segments_get_placeholders() {
    let m = model(2);
    let v = vocab();
    let unknown = LanguageCode::new("gn").unwrap();
    let out = translate_corpus(&m, &v, &["ab".into(), "cd".into()], &unknown, 2, 5, None);
    assert_eq!(out.hypotheses, vec![String::new(), String::new()]);
    assert_eq!(out.errors.len(), 2);
    let long = "a".repeat(200);
    let quy = LanguageCode::new("quy").unwrap();
    let out = translate_corpus(&m, &v, &["ab".into(), long], &quy, 2, 5, None);
    assert_eq!(out.hypotheses.len(), 2);
    assert_eq!(out.errors.len(), 1);
    assert_eq!(out.errors[0].index, 1);
}

/// Emits a fixed token script regardless of the source.
struct Scripted {
    vocab: Vocabulary,
    script: Vec<u32>,
}

impl StepModel for Scripted {
    type Source = ();
    type Prefix = usize;

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
    fn vocab_fingerprint(&self) -> u64 {
        self.vocab.fingerprint()
    }
    fn max_prefix(&self) -> usize {
        64
    }
    fn encode(&self, _src: &[u32]) -> Result<(), DecodeError> {
        Ok(())
    }
    fn start(&self, _src: &()) -> usize {
        0
    }
    fn advance(&self, _src: &(), fed: &mut usize, _token: u32) -> Vec<f64> {
        let next = self.script.get(*fed).copied().unwrap_or(lrmt_core::codec::EOS);
        *fed += 1;
        let mut lp = vec![-20.0; self.vocab.len()];
        lp[next as usize] = 0.0;
        lp
    }
}

#[test]
fn czn_outputs_are_restored() {
    let table = CharTable::czn_default();
    let czn = LanguageCode::new("czn").unwrap();
    let v = Vocabulary::from_chars("ta1 3".chars(), &[czn.clone()]);
    let script: Vec<u32> = "ta1 ta3".chars().map(|c| v.char_id(c)).collect();
    let m = Scripted { vocab: v.clone(), script };
    let out = translate_corpus(&m, &v, &["x".into()], &czn, 2, 20, Some(&table));
    assert_eq!(out.hypotheses, vec!["ta\u{b9} ta\u{b3}".to_string()]);
    let quy = LanguageCode::new("quy").unwrap();
    let v2 = v.extend_with_tags(&[quy.clone()]);
    let plain = Scripted { vocab: v2.clone(), script: m.script.clone() };
    let out = translate_corpus(&plain, &v2, &["x".into()], &quy, 2, 20, Some(&table));
    assert_eq!(out.hypotheses, vec!["ta1 ta3".to_string()]);
}

#[test]
fn spec_json_roundtrip_and_loading() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    model(1).save(&a).unwrap();
    model(2).save(&b).unwrap();
    let spec = EnsembleSpec::new(vec![a.clone(), b]);
    let path = dir.path().join("spec.json");
    std::fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    let back = EnsembleSpec::read(&path).unwrap();
    assert_eq!(back, spec);
    assert_eq!(back.load().unwrap().len(), 2);
    let other = Vocabulary::from_chars("xyz".chars(), &[]);
    let c = dir.path().join("c.ckpt");
    init_random(TransformerShape::tiny(), &other, TrainConfig::default(), 1).unwrap().save(&c).unwrap();
    assert!(matches!(
        EnsembleSpec::new(vec![a, c]).load(),
        Err(DecodeError::IncompatibleMembers(_))
    ));
}
