use pixfall::analysis::{chrf_pp, compression_ratio};
use pixfall::textrender::{pretokenize, read_patch_dump, render_sequence, write_patch_dump, RenderConfig, WhitespaceSegmenter};
use pixfall::tokenizer::{train_bpe, BpeVocab};

const LINES: [&str; 4] = ["the cat sat", "the cat ran", "a cat sat down", "the dog sat"];

#[test]
fn bpe_text_format_round_trip() {
    let vocab = train_bpe(LINES, 270).unwrap();
    let back = BpeVocab::from_text(&vocab.to_text()).unwrap();
    assert_eq!(back.len(), vocab.len());
    for line in LINES {
        assert_eq!(back.encode(line), vocab.encode(line));
        assert_eq!(back.decode(&back.encode(line)).unwrap(), line);
    }
}

#[test]
fn patch_dump_round_trip() {
    let cfg = RenderConfig::default();
    let words = pretokenize("Happy день नमस्ते", &WhitespaceSegmenter).unwrap();
    let seq = render_sequence(&words, &cfg).unwrap();
    let mut buf = Vec::new();
    write_patch_dump(&seq, &mut buf).unwrap();
    let back = read_patch_dump(&mut buf.as_slice()).unwrap();
    assert_eq!(back.patches, seq.patches);
    assert_eq!(back.word_offsets, seq.word_offsets);
    assert_eq!(back.positional_ids, seq.positional_ids);
}

#[test]
fn merges_only_shrink_token_counts() {
    let bytes = compression_ratio(LINES, &BpeVocab::bytes_only(), &WhitespaceSegmenter).unwrap();
    let trained = compression_ratio(LINES, &train_bpe(LINES, 280).unwrap(), &WhitespaceSegmenter).unwrap();
    // 13 words, 47 bytes with spaces
    assert!((bytes - 47.0 / 13.0).abs() < 1e-12, "{bytes}");
    assert!(trained < bytes);
}

#[test]
fn chrf_identity_and_order() {
    assert_eq!(chrf_pp("the cat sat", "the cat sat").unwrap(), 100.0);
    let near = chrf_pp("the cat sat", "the cat sat down").unwrap();
    let far = chrf_pp("dog", "the cat sat down").unwrap();
    assert!(near > far);
}
