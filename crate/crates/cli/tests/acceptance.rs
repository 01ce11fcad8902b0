//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use pixfall::analysis::{centroid_distance, chrf_pp, compression_ratio, modality_gap};
use pixfall::checkpoint::Checkpoint;
use pixfall::data::{gen_cipher_task, gen_codeswitch_task, CipherSpec, Script};
use pixfall::encoder::{EncoderConfig, FallbackEncoder, InputMode, OwnedInput};
use pixfall::interleave::{build_mixed, plan, split_by_modality, Fallback, InterleaveMode};
use pixfall::lm::{LanguageModel, LmConfig, Segment, Slot, IMG, N_SPECIAL, TXT};
use pixfall::nn::gradcheck::check_gradients;
use pixfall::nn::{Bound, ParamStore};
use pixfall::rng::SplitMix64;
use pixfall::textrender::{render_sequence, render_word, RenderConfig, WhitespaceSegmenter, Word};
use pixfall::tokenizer::{expand_vocab, train_bpe, BpeVocab, NewRowInit};
use pixfall::training::dora::{adapted_matmul, DoraAdapters, DoraConfig};
use pixfall::training::pipeline::{aligned_embeddings, lm_examples, prepare_examples, train, Model, Translator};
use pixfall::training::{lr_at, Stage, TrainConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn word(s: &str) -> Word {
    Word::new(s).unwrap()
}

fn random_word(rng: &mut SplitMix64) -> String {
    const ALPHA: &[char] = &['a', 'b', 'e', 'k', 'r', 'x', 'д', 'ж', 'л', 'я', 'क', 'म'];
    let n = 1 + rng.below(6) as usize;
    (0..n).map(|_| ALPHA[rng.below(ALPHA.len() as u64) as usize]).collect()
}

fn small_render() -> RenderConfig {
    let mut r = RenderConfig::default();
    r.patch_size = 8;
    r
}

fn rel_err(a: ndarray::ArrayView1<f32>, b: ndarray::ArrayView1<f32>) -> f64 {
    let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum::<f64>().sqrt();
    d / n.max(1e-30)
}

fn c1_word_independence() -> Outcome {
    let t = Instant::now();
    let mut rng = SplitMix64::new(101);
    let render = RenderConfig::default();
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let mode = if draw % 2 == 0 { InputMode::Pixel } else { InputMode::Byte };
        let cfg = EncoderConfig::new(mode, 2, 64, 4, 128);
        let enc = FallbackEncoder::<f32>::init(cfg, rng.next_u64()).map_err(|e| e.to_string())?;
        let (u, v, v2) = (random_word(&mut rng), random_word(&mut rng), random_word(&mut rng));
        let enc_words = |ws: &[&str]| {
            let words: Vec<Word> = ws.iter().map(|w| word(w)).collect();
            let input = OwnedInput::prepare(&words, mode, &render).unwrap();
            enc.encode(&input.as_input()).unwrap()
        };
        let pair = enc_words(&[&u, &v]);
        let alone = enc_words(&[&u]);
        worst = worst.max(rel_err(pair.row(0), alone.row(0)));

        let enc64 = enc.cast::<f64>();
        let enc64_words = |ws: &[&str]| {
            let words: Vec<Word> = ws.iter().map(|w| word(w)).collect();
            let input = OwnedInput::prepare(&words, mode, &render).unwrap();
            enc64.encode(&input.as_input()).unwrap()
        };
        let a = enc64_words(&[&u, &v]);
        let b = enc64_words(&[&u, &v2]);
        let c = enc64_words(&[&v2, &v]);
        ensure!(a.row(0) == b.row(0), "draw {draw}: changing word 2 moved word 1 ({u:?}, {v:?} -> {v2:?})");
        ensure!(a.row(1) == c.row(1), "draw {draw}: changing word 1 moved word 2");
    }
    ensure!(worst < 1e-6, "relative error {worst:e}");
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("100 draws, worst relative error {worst:.1e}, perturbations bitwise stable, {secs:.1}s"))
}

fn encoder_gradcheck(rng: &mut SplitMix64, mode: InputMode) -> f64 {
    let d = [4, 6, 8][rng.below(3) as usize];
    let cfg = EncoderConfig {
        patch_dim: 64,
        max_word_positions: 16,
        feedforward_dim: 8,
        ..EncoderConfig::new(mode, 1 + rng.below(2) as usize, d, 2, 2 + rng.below(3) as usize)
    };
    let enc = FallbackEncoder::<f64>::init(cfg, rng.next_u64()).unwrap();
    let words: Vec<Word> = (0..2).map(|_| word(&random_word(rng)[..].chars().take(4).collect::<String>())).collect();
    let input = OwnedInput::prepare(&words, mode, &small_render()).unwrap();
    let target = Array2::from_shape_fn((2, enc.config.d_lm), |_| rng.normal() * 0.5);
    let names: Vec<String> = enc.weights.iter().map(|(n, _)| n.to_string()).collect();
    // moves attention off uniform without saturating it
    let values: Vec<Array2<f64>> = enc.weights.iter().map(|(_, v)| v * 3.0).collect();
    let mut worst = 0.0f64;
    for i in 0..names.len() {
        // the key bias cancels inside the row softmax: its gradient is exactly zero
        if names[i].ends_with("attn.k.b") {
            continue;
        }
        let err = check_gradients(&values[i..i + 1], |t, v| {
            let mut store = ParamStore::new();
            let mut vars = Vec::new();
            for (j, n) in names.iter().enumerate() {
                vars.push(if j == i { v[0] } else { t.constant(values[j].clone()) });
                store.insert(n.clone(), values[j].clone());
            }
            let bound = Bound::from_vars(&store, vars);
            let e = FallbackEncoder::from_parts(enc.config.clone(), store).unwrap();
            let out = e.forward(t, &bound, &input.as_input()).unwrap();
            let tv = t.constant(target.clone());
            t.sq_dist_mean(out, tv)
        });
        worst = worst.max(err);
    }
    worst
}

fn lm_ce_gradcheck(rng: &mut SplitMix64) -> f64 {
    let cfg = LmConfig {
        feedforward_dim: 8,
        ..LmConfig::new(N_SPECIAL + 5, 1, 4, 2, 12)
    };
    let lm = LanguageModel::<f64>::init(cfg, rng.next_u64()).unwrap();
    let soft = Array2::from_shape_fn((2, 4), |_| rng.normal());
    let slots = vec![Slot::Token(1), Slot::Soft(0), Slot::Soft(1), Slot::Token(3), Slot::Token(7), Slot::Token(2)];
    let targets = vec![(3, 7), (4, 2)];
    let logits = Array2::from_shape_fn((3, 5), |_| rng.normal());
    let direct = check_gradients(&[logits], |t, v| t.cross_entropy(v[0], vec![(0, 1), (1, 4), (2, 0)]));
    let through = check_gradients(&[soft], |t, v| {
        let bound = lm.weights.bind(t, false);
        let emb = lm.embed_slots(t, &bound, &slots, Some(v[0])).unwrap();
        let out = lm.forward_tape(t, &bound, emb, &[(0, 6)], None).unwrap();
        t.cross_entropy(out, targets.clone())
    });
    direct.max(through)
}

fn align_gradcheck(rng: &mut SplitMix64) -> f64 {
    let h = Array2::from_shape_fn((3, 5), |_| rng.normal());
    let e = Array2::from_shape_fn((3, 5), |_| rng.normal());
    check_gradients(&[h, e], |t, v| t.sq_dist_mean(v[0], v[1]))
}

fn dora_gradcheck(rng: &mut SplitMix64) -> f64 {
    let (din, dout, rank) = (4, 5, 2);
    let mut base = ParamStore::<f64>::new();
    base.insert("p.w", Array2::from_shape_fn((din, dout), |_| rng.normal()));
    let cfg = DoraConfig {
        rank,
        alpha: 3.0,
        dropout: 0.0,
    };
    let adapters = DoraAdapters::init(&base, &["p".into()], cfg, rng).unwrap();
    let x = Array2::from_shape_fn((3, din), |_| rng.normal());
    let mut inputs = vec![x];
    // random values everywhere, including the zero-initialised B
    inputs.extend(adapters.params.iter().map(|(_, v)| v.mapv(|_| rng.normal())));
    let w = base.expect("p.w").clone();
    check_gradients(&inputs, |t, v| {
        let binding = adapters.bind_vars(v[1..].to_vec(), None);
        let wv = t.constant(w.clone());
        let y = adapted_matmul(t, v[0], wv, binding.get("p").unwrap());
        let z = t.constant(Array2::zeros((3, dout)));
        t.sq_dist_mean(y, z)
    })
}

fn c2_gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = SplitMix64::new(202);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for k in 0..20 {
        let mode = if k % 2 == 0 { InputMode::Pixel } else { InputMode::Byte };
        let checks = [
            ("encoder", encoder_gradcheck(&mut rng, mode)),
            ("ce", lm_ce_gradcheck(&mut rng)),
            ("align", align_gradcheck(&mut rng)),
            ("dora", dora_gradcheck(&mut rng)),
        ];
        for (name, e) in checks {
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(e);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    for (name, &e) in &worst {
        ensure!(e < 1e-4, "{name}: relative error {e:e}");
    }
    ensure!(secs < 300.0, "took {secs:.0}s");
    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok(format!("20 configs, worst: {}, {secs:.1}s", summary.join(", ")))
}

/// SHA-256 of the embedded-font rendering of "Happy", recorded from an
/// earlier run.
const HAPPY_SHA256: &str = "b27370da1da3a8672a6486876c147239fc4a6eeedd8949aee13140368f9da570";

fn c3_rendering() -> Outcome {
    let cfg = RenderConfig::default();
    let r = render_word(&word("Happy"), &cfg).map_err(|e| e.to_string())?;
    ensure!(r.patches.len() == 4, "{} patches", r.patches.len());
    for (i, w) in ["Ha", "ap", "pp", "py"].iter().enumerate() {
        let single = render_word(&word(w), &cfg).unwrap();
        ensure!(single.patches.len() == 1 && single.patches[0] == r.patches[i], "patch {i} is not the {w:?} window");
    }
    let words: Vec<Word> = (0..530).map(|_| word("x")).collect();
    ensure!(render_sequence(&words, &cfg).is_err(), "530 patches accepted");
    ensure!(render_sequence(&words[..529], &cfg).is_ok(), "529 patches rejected");
    let mut h = Sha256::new();
    for p in &r.patches {
        for v in p.iter() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = hex(&h.finalize());
    let again = render_word(&word("Happy"), &cfg).unwrap();
    ensure!(again == r, "second render differs");
    ensure!(digest == HAPPY_SHA256, "render hash {digest}");
    Ok("Happy = Ha|ap|pp|py, 530 rejected, render hash stable".into())
}

fn c6_schedule() -> Outcome {
    for total in [1000, 2000, 3000] {
        let at = |s| lr_at(s, total, 3e-4, 3e-5, 0.1).unwrap();
        ensure!(at(0) == 0.0, "lr_at(0) = {}", at(0));
        ensure!((at(total / 10) - 3e-4).abs() < 1e-9, "lr_at(0.1T) = {}", at(total / 10));
        ensure!((at(total) - 3e-5).abs() < 1e-9, "lr_at(T) = {}", at(total));
    }
    Ok("0 → 3e-4 at 0.1·T → 3e-5 at T".into())
}

/// Standalone chrF++: n-grams as joined strings, F from raw counts.
fn oracle_chrf(hyp: &str, reference: &str) -> f64 {
    fn counts(units: &[String], n: usize, sep: &str) -> BTreeMap<String, i64> {
        let mut m = BTreeMap::new();
        if units.len() >= n {
            for i in 0..=units.len() - n {
                *m.entry(units[i..i + n].join(sep)).or_insert(0) += 1;
            }
        }
        m
    }
    let c = |s: &str| s.chars().filter(|c| !c.is_whitespace()).map(String::from).collect::<Vec<_>>();
    let w = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let mut f = Vec::new();
    for (h, r, max, sep) in [(c(hyp), c(reference), 6, ""), (w(hyp), w(reference), 2, " ")] {
        for n in 1..=max {
            let (gh, gr) = (counts(&h, n, sep), counts(&r, n, sep));
            let (th, tr) = (gh.values().sum::<i64>(), gr.values().sum::<i64>());
            if th == 0 || tr == 0 {
                continue;
            }
            let m: i64 = gh.iter().map(|(k, v)| *v.min(gr.get(k).unwrap_or(&0))).sum();
            f.push(5.0 * m as f64 / (4.0 * tr as f64 + th as f64));
        }
    }
    if f.is_empty() {
        0.0
    } else {
        100.0 * f.iter().sum::<f64>() / f.len() as f64
    }
}

fn c7_chrf() -> Outcome {
    let mut rng = SplitMix64::new(707);
    let mut worst = 0.0f64;
    let sentence = |rng: &mut SplitMix64| -> String {
        let n = 1 + rng.below(6) as usize;
        (0..n).map(|_| random_word(rng)).collect::<Vec<_>>().join(" ")
    };
    for _ in 0..100 {
        let (h, r) = (sentence(&mut rng), sentence(&mut rng));
        let got = chrf_pp(&h, &r).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle_chrf(&h, &r)).abs());
        let same = chrf_pp(&r, &r).unwrap();
        ensure!(same == 100.0, "identity scored {same}");
    }
    ensure!(worst < 1e-6, "max deviation {worst:e}");
    let zero = chrf_pp("abc def", "xyz uvw").unwrap();
    ensure!(zero == 0.0, "disjoint scored {zero}");
    Ok(format!("100 random pairs within {worst:.1e} of the oracle, identity 100, disjoint 0"))
}

fn random_text(rng: &mut SplitMix64) -> String {
    let n = rng.below(30) as usize;
    (0..n)
        .map(|_| {
            let (lo, hi) = match rng.below(4) {
                0 => (0x20u32, 0x7e),
                1 => (0x400, 0x4ff),
                2 => (0x900, 0x97f),
                _ => (0x20, 0x20),
            };
            char::from_u32(lo + rng.below((hi - lo + 1) as u64) as u32).unwrap_or('?')
        })
        .collect()
}

fn c8_bpe() -> Outcome {
    let mut rng = SplitMix64::new(808);
    let sample: Vec<String> = (0..200).map(|_| random_text(&mut rng)).collect();
    let vocab = train_bpe(sample.iter().map(String::as_str), 400).map_err(|e| e.to_string())?;
    for i in 0..1000 {
        let s = random_text(&mut rng);
        let back = vocab.decode(&vocab.encode(&s)).unwrap();
        ensure!(back == s, "round trip {i} failed: {s:?} -> {back:?}");
    }
    let ab = train_bpe(["abab abab"], 258).unwrap();
    let bytes = |v: &BpeVocab, id: usize| v.token_bytes(id).unwrap().to_vec();
    let merges: Vec<(Vec<u8>, Vec<u8>)> = ab.merges().iter().map(|&(l, r)| (bytes(&ab, l), bytes(&ab, r))).collect();
    ensure!(
        merges == vec![(b"a".to_vec(), b"b".to_vec()), (b"ab".to_vec(), b"ab".to_vec())],
        "merge order {merges:?}"
    );
    let base = train_bpe(["the cat sat on the mat"], 270).unwrap();
    let extra = train_bpe(["кот сидел на мате"], 290).unwrap();
    let lm = LanguageModel::<f32>::init(LmConfig::new(base.len() + N_SPECIAL, 1, 8, 2, 16), 3).unwrap();
    let (merged, big) = expand_vocab(&base, &extra, &lm, NewRowInit::Random, 4).unwrap();
    for id in 0..base.len() {
        ensure!(merged.token_bytes(id) == base.token_bytes(id), "id {id} moved");
    }
    let (old, new) = (lm.embedding_table(), big.embedding_table());
    for r in 0..old.nrows() {
        ensure!(old.row(r) == new.row(r), "row {r} changed");
    }
    Ok(format!("1000 round trips, abab merges a+b then ab+ab, {} base ids kept", base.len()))
}

fn c9_compression() -> Outcome {
    let corpus = gen_cipher_task(300, 909, CipherSpec {
        script: Script::Cyrillic,
        permute: false,
    });
    let vocab = train_bpe(corpus.targets(), 300).unwrap();
    let ratio = compression_ratio(corpus.sources(), &vocab, &WhitespaceSegmenter).map_err(|e| e.to_string())?;
    let (mut tokens, mut words) = (0usize, 0usize);
    for line in corpus.sources() {
        tokens += vocab.encode(line).len();
        words += line.split_whitespace().count();
    }
    let brute = tokens as f64 / words as f64;
    ensure!(ratio == brute, "{ratio} vs recount {brute}");
    let cyr_bytes: Vec<u8> = "абвгдежзийклмнопрстуфхцчшщ".bytes().collect();
    let merges_cyrillic = vocab.merges().iter().any(|&(l, r)| {
        [l, r].iter().any(|&t| vocab.token_bytes(t).unwrap().iter().any(|b| cyr_bytes.contains(b) && *b >= 0x80))
    });
    ensure!(!merges_cyrillic, "vocab merges source bytes");
    ensure!(ratio > 1.0, "ratio {ratio}");
    Ok(format!("{tokens} tokens / {words} words = {ratio:.4}, matches recount"))
}

fn c10_alignment() -> Outcome {
    let corpus = gen_cipher_task(500, 1010, CipherSpec::default());
    let vocab = train_bpe(corpus.targets(), 506).unwrap();
    let lm = LanguageModel::init(LmConfig::new(512, 4, 128, 4, 128), 11).unwrap();
    let enc = EncoderConfig::new(InputMode::Pixel, 2, 64, 4, 128);
    let mut model = Model {
        lm,
        fallback: Some(Fallback {
            encoder: FallbackEncoder::init(enc, 12).unwrap(),
            render: RenderConfig::default(),
        }),
        adapters: None,
        interleave: InterleaveMode::AsciiSplit,
        prefix: false,
    };
    let lm_cfg = TrainConfig {
        stage: Stage::Lm,
        total_steps: 600,
        seed: 13,
        ..Default::default()
    };
    train(&mut model, &lm_examples(&vocab, &corpus), &lm_cfg, |_| {}).map_err(|e| e.to_string())?;
    let examples = prepare_examples(&model, &vocab, &corpus).unwrap();
    let probe_set = &examples[..100];
    let gap = |m: &Model| {
        let (i, t) = aligned_embeddings(m, probe_set).unwrap();
        centroid_distance(&i, &t).unwrap()
    };
    let before = gap(&model);
    let cfg = TrainConfig {
        stage: Stage::Pretrain,
        total_steps: 600,
        align_loss: true,
        seed: 14,
        ..Default::default()
    };
    train(&mut model, &examples, &cfg, |_| {}).map_err(|e| e.to_string())?;
    let after = gap(&model);
    let drop = 1.0 - after / before;
    ensure!(drop >= 0.9, "‖μ_I − μ_T‖ {before:.4} -> {after:.4} ({:.1}% reduction)", 100.0 * drop);

    let mut rng = SplitMix64::new(1011);
    let cluster = |rng: &mut SplitMix64, shift: f64| Array2::from_shape_fn((500, 16), |(_, j)| rng.normal() + if j == 0 { shift } else { 0.0 });
    let (a, b) = (cluster(&mut rng, 5.0), cluster(&mut rng, -5.0));
    let sep = modality_gap(&a, &b, 1).unwrap().probe_accuracy;
    ensure!(sep == 1.0, "separated clusters: accuracy {sep}");
    let x = cluster(&mut rng, 0.0);
    let same = modality_gap(&x, &x, 1).unwrap().probe_accuracy;
    ensure!((0.35..=0.65).contains(&same), "identical sets: accuracy {same}");
    Ok(format!(
        "gap {before:.4} -> {after:.4} ({:.1}% reduction), probe 1.0 on 10σ clusters, {same:.3} on identical sets",
        100.0 * drop
    ))
}

fn c11_interleave() -> Outcome {
    let (corpus, masks) = gen_codeswitch_task(400, 1111, 0.25, Script::Devanagari).map_err(|e| e.to_string())?;
    let vocab = train_bpe(corpus.targets(), 400).unwrap();
    let cfg = EncoderConfig {
        patch_dim: 64,
        feedforward_dim: 16,
        max_word_positions: 16,
        ..EncoderConfig::new(InputMode::Pixel, 1, 8, 2, 8)
    };
    let fb = Fallback {
        encoder: FallbackEncoder::<f32>::init(cfg, 0).unwrap(),
        render: small_render(),
    };
    let (mut soft_total, mut expected_total) = (0, 0);
    for ((src, _), mask) in corpus.pairs.iter().zip(&masks) {
        let m = build_mixed(src, &vocab, Some(&fb), InterleaveMode::AsciiSplit, false).unwrap();
        let soft: usize = m.segments.iter().map(|s| if let Segment::Soft(r) = s { r.nrows() } else { 0 }).sum();
        let expected = mask.iter().filter(|a| !**a).count();
        ensure!(soft == expected, "{src:?}: {soft} soft rows, {expected} non-ASCII words");
        soft_total += soft;
        expected_total += expected;

        let forced = build_mixed(src, &vocab, Some(&fb), InterleaveMode::ForcePixels, false).unwrap();
        ensure!(
            forced.segments.iter().all(|s| matches!(s, Segment::Soft(_))),
            "force-pixels left a vocabulary segment in {src:?}"
        );

        let segments = split_by_modality(src).len();
        let prefixed = plan(src, &vocab, InterleaveMode::AsciiSplit, true).unwrap();
        let markers = prefixed
            .iter()
            .filter(|p| matches!(p, pixfall::interleave::Piece::Tokens(t) if t.len() == 1 && (t[0] == TXT || t[0] == IMG)))
            .count();
        ensure!(markers == segments && prefixed.len() == 2 * segments, "{src:?}: {markers} markers for {segments} segments");
    }
    let words: usize = masks.iter().map(Vec::len).sum();
    Ok(format!(
        "{soft_total} soft rows = {expected_total} generated non-ASCII words of {words}; force-pixels all soft; one marker per segment"
    ))
}

// ---------------------------------------------------------------------------
// End-to-end runs through the binary

const E2E_SEED: &str = "7";

struct Run {
    dir: PathBuf,
    chrf: f64,
    seconds: f64,
}

fn bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pixfall"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("pixfall {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path, mode: &str) -> Result<Run, String> {
    let t = Instant::now();
    let _ = std::fs::remove_dir_all(dir);
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let p = |f: &str| dir.join(f).to_string_lossy().into_owned();
    let d = dir.to_string_lossy().into_owned();
    bin(&["gen-data", "--task", "cipher", "--n", "2000", "--holdout", "100", "--seed", E2E_SEED, "--out", &d])?;
    bin(&["train-bpe", "--corpus", &p("train.tsv"), "--size", "506", "--out", &p("vocab.bpe")])?;
    let data = ["--corpus", &p("train.tsv"), "--align", &p("train.align"), "--vocab", &p("vocab.bpe")].map(String::from);
    let run = |head: &[&str]| -> Result<(), String> {
        let mut args: Vec<&str> = head.to_vec();
        args.extend(["--batch-size", "16", "--seed", E2E_SEED]);
        args.extend(data.iter().map(String::as_str));
        bin(&args)
    };
    let (lm, pre, ft) = (p("lm.pxfw"), p("pretrain.pxfw"), p("finetune.pxfw"));
    run(&["train-lm", "--out", &lm, "--layers", "4", "--d-model", "128", "--vocab-size", "512", "--steps", "1000"])?;
    run(&["pretrain", "--model", &lm, "--out", &pre, "--mode", mode, "--enc-layers", "2", "--enc-d-model", "64", "--steps", "2000"])?;
    run(&["finetune", "--model", &pre, "--out", &ft, "--steps", "1000"])?;
    let (model, vocab, src, hyp) = (p("finetune.pxfw"), p("vocab.bpe"), p("test.src"), p("hyp.txt"));
    bin(&["translate", "--model", &model, "--vocab", &vocab, "--in", &src, "--beam", "2", "--out", &hyp])?;
    bin(&["evaluate", "--hyp", &hyp, "--ref", &p("test.ref"), "--out", &p("eval.csv")])?;
    let csv = std::fs::read_to_string(p("eval.csv")).map_err(|e| e.to_string())?;
    let chrf = csv
        .lines()
        .find_map(|l| l.strip_prefix("corpus,"))
        .and_then(|v| v.parse().ok())
        .ok_or("no corpus score in eval.csv")?;
    Ok(Run {
        dir: dir.to_path_buf(),
        chrf,
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn work_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn runs() -> &'static Result<(Run, Run, Run), String> {
    static RUNS: OnceLock<Result<(Run, Run, Run), String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let base = work_dir();
        let a = pipeline(&base.join("pixel-a"), "pixel")?;
        let b = pipeline(&base.join("pixel-b"), "pixel")?;
        let c = pipeline(&base.join("byte"), "byte")?;
        Ok((a, b, c))
    })
}

fn c4_end_to_end() -> Outcome {
    let (pixel, _, byte) = runs().as_ref().map_err(Clone::clone)?;
    ensure!(pixel.chrf >= 90.0, "pixel chrF++ {:.2}", pixel.chrf);
    ensure!(byte.chrf >= 90.0, "byte chrF++ {:.2}", byte.chrf);
    Ok(format!(
        "chrF++ pixel {:.2} ({:.0}s), byte {:.2} ({:.0}s) on 100 held-out pairs",
        pixel.chrf, pixel.seconds, byte.chrf, byte.seconds
    ))
}

fn lm_hash(path: &Path) -> String {
    Checkpoint::load(path).unwrap().group("lm.").sha256()
}

fn c5_freezing() -> Outcome {
    let (pixel, _, byte) = runs().as_ref().map_err(Clone::clone)?;
    for run in [pixel, byte] {
        let base = lm_hash(&run.dir.join("lm.pxfw"));
        for stage in ["pretrain.pxfw", "finetune.pxfw"] {
            ensure!(lm_hash(&run.dir.join(stage)) == base, "{}: LM weights changed in {stage}", run.dir.display());
        }
    }
    let mut model = Model::load(&pixel.dir.join("pretrain.pxfw")).unwrap();
    let vocab = BpeVocab::load(&pixel.dir.join("vocab.bpe")).unwrap();
    let frozen = {
        let t = Translator::new(&model, &vocab).unwrap();
        let lm = model.inference_lm().unwrap();
        let srcs: Vec<String> = std::fs::read_to_string(pixel.dir.join("test.src")).unwrap().lines().take(5).map(String::from).collect();
        let prompts: Vec<_> = srcs.iter().map(|s| lm.embed_mixed(&t.prompt(s).unwrap()).unwrap()).collect();
        (prompts, srcs)
    };
    let before: Vec<Array2<f32>> = frozen.0.iter().map(|e| model.lm.forward(e).unwrap()).collect();
    let mut rng = SplitMix64::new(5);
    model.adapters = Some(DoraAdapters::init(&model.lm.weights, &model.lm.config.attention_targets(), DoraConfig::default(), &mut rng).unwrap());
    let adapted = model.inference_lm().unwrap();
    let mut worst = 0.0f32;
    for (e, b) in frozen.0.iter().zip(&before) {
        let a = adapted.forward(e).unwrap();
        worst = (&a - b).iter().fold(worst, |m, d| m.max(d.abs()));
    }
    ensure!(worst < 1e-6, "DoRA at init moves logits by {worst:e}");
    Ok(format!("LM SHA-256 unchanged through both stages (pixel and byte); DoRA-at-init max diff {worst:.1e}"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(p: &Path) -> String {
    hex(&Sha256::digest(std::fs::read(p).unwrap()))
}

fn c12_determinism() -> Outcome {
    let (a, b, _) = runs().as_ref().map_err(Clone::clone)?;
    let artifacts = [
        "train.tsv",
        "train.align",
        "vocab.bpe",
        "lm.pxfw",
        "pretrain.pxfw",
        "finetune.pxfw",
        "hyp.txt",
        "eval.csv",
    ];
    for f in artifacts {
        ensure!(file_hash(&a.dir.join(f)) == file_hash(&b.dir.join(f)), "{f} differs between runs");
    }
    Ok(format!("{} artifacts bit-identical across two runs", artifacts.len()))
}

fn main() {
    // `cargo test` passes harness flags; only a name filter is honoured
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "word independence", c1_word_independence),
        (2, "gradient checks", c2_gradients),
        (3, "rendering fixtures", c3_rendering),
        (6, "learning-rate schedule", c6_schedule),
        (7, "chrF++ oracle", c7_chrf),
        (8, "BPE", c8_bpe),
        (9, "compression ratio", c9_compression),
        (10, "alignment loss and probe", c10_alignment),
        (11, "interleaving", c11_interleave),
        (4, "desk-scale end-to-end", c4_end_to_end),
        (5, "freezing guarantees", c5_freezing),
        (12, "determinism", c12_determinism),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if let Some(flt) = &filter {
            if !name.contains(flt.as_str()) && flt != &n.to_string() {
                continue;
            }
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
