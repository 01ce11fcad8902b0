//! End-to-end model bundle: examples, batched training steps, translation
//! and checkpointing.
//!
//! Every training sequence has the layout
//!
//! ```text
//! BOS  source…  SEP  target…  EOS
//! ```
//!
//! where the source is any mix of token ids and fallback rows. Loss covers the
//! predictions made at SEP and at every target position. Sequences of a batch
//! are packed end to end; attention never crosses sequence boundaries.

use std::time::Instant;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Alignment, ParallelCorpus};
use crate::encoder::{EncoderConfig, FallbackEncoder, OwnedInput};
use crate::error::{Error, Result};
use crate::interleave::{lm_ids, plan, Fallback, InterleaveMode, Piece};
use crate::lm::{GenerateConfig, LanguageModel, LmConfig, MixedSequence, Segment, Slot, BOS, EOS, N_SPECIAL, SEP};
use crate::nn::params::ParamStore;
use crate::nn::tape::Tape;
use crate::rng::{mix, SplitMix64};
use crate::textrender::{FontSpec, RenderConfig};
use crate::tokenizer::{chunks, BpeVocab};

use super::dora::{DoraAdapters, DoraConfig};
use super::{AdamW, Stage, TrainConfig};

/// Serializable subset of [`RenderConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub patch_size: usize,
    pub channels: usize,
    pub ink_value: f32,
    pub background_value: f32,
    pub max_patches: usize,
    pub max_word_patches: usize,
    /// `None` for the embedded font, else a `.hex` font path.
    pub font: Option<std::path::PathBuf>,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self::from_config(&RenderConfig::default())
    }
}

impl RenderSettings {
    pub fn from_config(c: &RenderConfig) -> Self {
        Self {
            patch_size: c.patch_size,
            channels: c.channels,
            ink_value: c.ink_value,
            background_value: c.background_value,
            max_patches: c.max_patches,
            max_word_patches: c.max_word_patches,
            font: match c.font_spec() {
                FontSpec::Embedded => None,
                FontSpec::System(p) => Some(p.clone()),
            },
        }
    }

    pub fn to_config(&self) -> Result<RenderConfig> {
        let mut c = RenderConfig::default();
        if let Some(p) = &self.font {
            c = c.with_font(FontSpec::System(p.clone()))?;
        }
        c.patch_size = self.patch_size;
        c.channels = self.channels;
        c.ink_value = self.ink_value;
        c.background_value = self.background_value;
        c.max_patches = self.max_patches;
        c.max_word_patches = self.max_word_patches;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    lm: LmConfig,
    encoder: Option<EncoderConfig>,
    render: RenderSettings,
    dora: Option<DoraConfig>,
    dora_targets: Vec<String>,
    interleave: InterleaveMode,
    prefix: bool,
}

/// Language model, optional fallback encoder and optional adapters.
#[derive(Debug, Clone)]
pub struct Model {
    pub lm: LanguageModel<f32>,
    pub fallback: Option<Fallback<f32>>,
    pub adapters: Option<DoraAdapters<f32>>,
    pub interleave: InterleaveMode,
    pub prefix: bool,
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = ModelHeader {
            kind: "pipeline".into(),
            lm: self.lm.config.clone(),
            encoder: self.fallback.as_ref().map(|f| f.encoder.config.clone()),
            render: self
                .fallback
                .as_ref()
                .map(|f| RenderSettings::from_config(&f.render))
                .unwrap_or_default(),
            dora: self.adapters.as_ref().map(|a| a.config),
            dora_targets: self.adapters.as_ref().map(|a| a.targets.clone()).unwrap_or_default(),
            interleave: self.interleave,
            prefix: self.prefix,
        };
        let mut tensors = Vec::new();
        let mut add = |prefix: &str, store: &ParamStore<f32>| {
            for (n, v) in store.iter() {
                tensors.push((format!("{prefix}{n}"), v.clone()));
            }
        };
        if let Some(f) = &self.fallback {
            add("encoder.", &f.encoder.weights);
        }
        add("lm.", &self.lm.weights);
        if let Some(a) = &self.adapters {
            add("adapter.", &a.params);
        }
        Checkpoint {
            config: serde_json::to_value(header).expect("header serializes"),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h: ModelHeader = serde_json::from_value(ck.config.clone())?;
        if h.kind != "pipeline" {
            return Err(Error::Format(format!("expected a pipeline checkpoint, found {}", h.kind)));
        }
        let lm = LanguageModel::from_parts(h.lm, ck.group("lm."))?;
        let fallback = match h.encoder {
            Some(cfg) => Some(Fallback {
                encoder: FallbackEncoder::from_parts(cfg, ck.group("encoder."))?,
                render: h.render.to_config()?,
            }),
            None => None,
        };
        let adapters = h.dora.map(|config| DoraAdapters {
            config,
            targets: h.dora_targets.clone(),
            params: ck.group("adapter."),
        });
        Ok(Self {
            lm,
            fallback,
            adapters,
            interleave: h.interleave,
            prefix: h.prefix,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// LM with adapters folded into the attention weights.
    pub fn inference_lm(&self) -> Result<LanguageModel<f32>> {
        match &self.adapters {
            Some(a) => LanguageModel::from_parts(self.lm.config.clone(), a.merge(&self.lm.weights)?),
            None => Ok(self.lm.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prepared {
    Tokens(Vec<usize>),
    Words(OwnedInput),
}

/// One training pair, ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source: Vec<Prepared>,
    /// LM ids of the target, EOS excluded.
    pub target: Vec<usize>,
    /// `(fallback word index within this example, LM ids of the aligned target word)`.
    pub align: Vec<(usize, Vec<usize>)>,
}

impl Example {
    pub fn fallback_words(&self) -> usize {
        self.source
            .iter()
            .map(|p| match p {
                Prepared::Words(w) => w.word_count(),
                Prepared::Tokens(_) => 0,
            })
            .sum()
    }

    pub fn len(&self) -> usize {
        let src: usize = self
            .source
            .iter()
            .map(|p| match p {
                Prepared::Tokens(t) => t.len(),
                Prepared::Words(w) => w.word_count(),
            })
            .sum();
        src + self.target.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Builds examples through the model's routing. Alignments link source words
/// to target words; a target word stands for its tokens.
pub fn prepare_examples(model: &Model, vocab: &BpeVocab, corpus: &ParallelCorpus) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(corpus.len());
    for (i, (src, tgt)) in corpus.pairs.iter().enumerate() {
        let pieces = plan(src, vocab, model.interleave, model.prefix)?;
        let mut source = Vec::with_capacity(pieces.len());
        let mut fallback_words = Vec::new();
        for p in pieces {
            source.push(match p {
                Piece::Tokens(t) => Prepared::Tokens(t),
                Piece::Words(w) => {
                    let f = model
                        .fallback
                        .as_ref()
                        .ok_or_else(|| Error::Config("fallback-routed text but the model has no fallback encoder".into()))?;
                    fallback_words.extend(w.iter().map(|x| x.text.clone()));
                    Prepared::Words(f.prepare(&w)?)
                }
            });
        }
        let word_tokens: Vec<Vec<usize>> = chunks(tgt).into_iter().map(|c| lm_ids(vocab, c)).collect();
        let target: Vec<usize> = word_tokens.concat();
        let align = match corpus.alignments.as_ref().map(|a| &a[i]) {
            Some(links) => align_rows(src, &fallback_words, &word_tokens, links),
            None => Vec::new(),
        };
        out.push(Example { source, target, align });
    }
    Ok(out)
}

fn align_rows(src: &str, fallback_words: &[String], word_tokens: &[Vec<usize>], links: &Alignment) -> Vec<(usize, Vec<usize>)> {
    // fallback words are an ordered subsequence of the source words
    let mut row_of = Vec::new();
    let mut next = 0;
    for w in src.split_whitespace() {
        if next < fallback_words.len() && fallback_words[next] == w {
            row_of.push(Some(next));
            next += 1;
        } else {
            row_of.push(None);
        }
    }
    links
        .iter()
        .filter_map(|&(i, j)| {
            let row = (*row_of.get(i)?)?;
            let toks = word_tokens.get(j)?;
            (!toks.is_empty()).then(|| (row, toks.clone()))
        })
        .collect()
}

/// Copy-task examples for base LM training: the target is its own source.
pub fn lm_examples(vocab: &BpeVocab, corpus: &ParallelCorpus) -> Vec<Example> {
    corpus
        .targets()
        .map(|t| {
            let ids = lm_ids(vocab, t);
            Example {
                source: vec![Prepared::Tokens(ids.clone())],
                target: ids,
                align: Vec::new(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub align: f64,
    pub seconds: f64,
}

/// Packed batch layout.
struct Batch<'a> {
    slots: Vec<Slot>,
    spans: Vec<(usize, usize)>,
    targets: Vec<(usize, usize)>,
    inputs: Vec<&'a OwnedInput>,
    align_rows: Vec<usize>,
    align_tokens: Vec<Vec<usize>>,
}

fn assemble<'a>(batch: &[&'a Example]) -> Batch<'a> {
    let mut b = Batch {
        slots: Vec::new(),
        spans: Vec::new(),
        targets: Vec::new(),
        inputs: Vec::new(),
        align_rows: Vec::new(),
        align_tokens: Vec::new(),
    };
    let mut soft = 0;
    for ex in batch {
        let start = b.slots.len();
        b.slots.push(Slot::Token(BOS));
        for (row, toks) in &ex.align {
            b.align_rows.push(soft + row);
            b.align_tokens.push(toks.clone());
        }
        for p in &ex.source {
            match p {
                Prepared::Tokens(t) => b.slots.extend(t.iter().map(|&x| Slot::Token(x))),
                Prepared::Words(w) => {
                    for _ in 0..w.word_count() {
                        b.slots.push(Slot::Soft(soft));
                        soft += 1;
                    }
                    b.inputs.push(w);
                }
            }
        }
        let sep = b.slots.len();
        b.slots.push(Slot::Token(SEP));
        b.slots.extend(ex.target.iter().map(|&x| Slot::Token(x)));
        b.slots.push(Slot::Token(EOS));
        for (k, &label) in ex.target.iter().chain(std::iter::once(&EOS)).enumerate() {
            b.targets.push((sep + k, label));
        }
        b.spans.push((start, b.slots.len() - start));
    }
    b
}

/// Losses of one batch as `(ce, align)`, with gradients applied by `update`.
struct StepOutput {
    ce: f64,
    align: f64,
    enc: Option<Vec<Option<Array2<f32>>>>,
    lm: Option<Vec<Option<Array2<f32>>>>,
    adapters: Option<Vec<Option<Array2<f32>>>>,
}

fn run_batch(model: &Model, batch: &[&Example], cfg: &TrainConfig, dropout_seed: Option<u64>, grads: bool) -> Result<StepOutput> {
    let b = assemble(batch);
    let mut tape = Tape::<f32>::new();
    let train_enc = grads && cfg.stage != Stage::Lm;
    let train_lm = grads && cfg.stage == Stage::Lm;
    let train_ad = grads && cfg.stage == Stage::Finetune;

    let enc_bound = model.fallback.as_ref().map(|f| f.encoder.weights.bind(&mut tape, train_enc));
    let lm_bound = model.lm.weights.bind(&mut tape, train_lm);
    let binding = model
        .adapters
        .as_ref()
        .map(|a| a.bind(&mut tape, train_ad, dropout_seed.filter(|_| train_ad)));

    let soft = if b.inputs.is_empty() {
        None
    } else {
        let f = model.fallback.as_ref().ok_or_else(|| Error::Config("no fallback encoder".into()))?;
        let joined = OwnedInput::concat(&b.inputs)?;
        Some(f.encoder.forward_batch(&mut tape, enc_bound.as_ref().unwrap(), &joined.as_input())?)
    };
    let emb = model.lm.embed_slots(&mut tape, &lm_bound, &b.slots, soft)?;
    let logits = model.lm.forward_tape(&mut tape, &lm_bound, emb, &b.spans, binding.as_ref())?;
    let ce = tape.cross_entropy(logits, b.targets.clone());
    let mut loss = ce;
    let mut align = 0.0;
    if cfg.align_loss && !b.align_rows.is_empty() {
        if let Some(soft) = soft {
            let table = model.lm.embedding_table();
            let mut e = Array2::zeros((b.align_rows.len(), model.lm.config.d_lm));
            for (k, toks) in b.align_tokens.iter().enumerate() {
                let rows = table.select(Axis(0), toks);
                e.row_mut(k).assign(&rows.mean_axis(Axis(0)).expect("non-empty"));
            }
            let h = tape.gather(soft, b.align_rows.clone());
            let e = tape.constant(e);
            let a = tape.sq_dist_mean(h, e);
            align = tape.scalar(a) as f64;
            let weighted = if cfg.align_weight == 1.0 {
                a
            } else {
                tape.scale(a, cfg.align_weight as f32)
            };
            loss = tape.add(ce, weighted);
        }
    }
    let ce_value = tape.scalar(ce) as f64;
    if !grads {
        return Ok(StepOutput {
            ce: ce_value,
            align,
            enc: None,
            lm: None,
            adapters: None,
        });
    }
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NumericalError("loss".into()));
    }
    let mut g = tape.backward(loss);
    let mut take = |vars: &[crate::nn::Var]| vars.iter().map(|&v| g.take(v)).collect::<Vec<_>>();
    let enc = if train_enc {
        enc_bound.as_ref().map(|b| take(b.vars()))
    } else {
        None
    };
    let lm = if train_lm { Some(take(lm_bound.vars())) } else { None };
    let adapters = if train_ad {
        binding.as_ref().map(|b| take(b.bound().vars()))
    } else {
        None
    };
    Ok(StepOutput {
        ce: ce_value,
        align,
        enc,
        lm,
        adapters,
    })
}

/// Mean cross-entropy (and alignment loss) over `data` without updates.
pub fn evaluate_loss(model: &Model, data: &[Example], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let mut ce = 0.0;
    let mut al = 0.0;
    let mut n = 0;
    for chunk in data.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let out = run_batch(model, &refs, cfg, None, false)?;
        ce += out.ce;
        al += out.align;
        n += 1;
    }
    Ok((ce / n.max(1) as f64, al / n.max(1) as f64))
}

/// Runs `cfg.total_steps` optimizer steps of `cfg.stage`. On divergence the
/// model keeps its last good weights and `Divergence` is returned.
pub fn train(model: &mut Model, data: &[Example], cfg: &TrainConfig, mut log: impl FnMut(&LogRow)) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    match cfg.stage {
        Stage::Pretrain if model.fallback.is_none() => {
            return Err(Error::Config("pretraining needs a fallback encoder".into()));
        }
        Stage::Finetune if model.adapters.is_none() => {
            let mut rng = SplitMix64::derive(cfg.seed, "dora");
            model.adapters = Some(DoraAdapters::init(
                &model.lm.weights,
                &model.lm.config.attention_targets(),
                cfg.dora,
                &mut rng,
            )?);
        }
        _ => {}
    }
    let mut enc_opt = model.fallback.as_ref().map(|f| AdamW::new(&f.encoder.weights, cfg));
    let mut lm_opt = AdamW::new(&model.lm.weights, cfg);
    let mut ad_opt = model.adapters.as_ref().map(|a| AdamW::new(&a.params, cfg));

    let mut order_rng = SplitMix64::derive(cfg.seed, "order");
    let mut order: Vec<usize> = Vec::new();
    let clock = Instant::now();
    for step in 1..=cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order_rng.shuffle(&mut order);
                order.reverse();
            }
            batch.push(&data[order.pop().unwrap()]);
        }
        let lr = cfg.lr_at(step)?;
        let out = match run_batch(model, &batch, cfg, Some(mix(cfg.seed ^ step as u64)), true) {
            Ok(o) => o,
            Err(Error::NumericalError(_)) => return Err(Error::Divergence { step }),
            Err(e) => return Err(e),
        };
        if let (Some(g), Some(opt), Some(f)) = (&out.enc, enc_opt.as_mut(), model.fallback.as_mut()) {
            opt.step(&mut f.encoder.weights, g, lr);
        }
        if let Some(g) = &out.lm {
            lm_opt.step(&mut model.lm.weights, g, lr);
        }
        if let (Some(g), Some(opt), Some(a)) = (&out.adapters, ad_opt.as_mut(), model.adapters.as_mut()) {
            opt.step(&mut a.params, g, lr);
        }
        log(&LogRow {
            step,
            lr,
            ce: out.ce,
            align: out.align,
            seconds: clock.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Inference-ready pieces: merged LM plus the model's routing.
pub struct Translator<'a> {
    model: &'a Model,
    lm: LanguageModel<f32>,
    vocab: &'a BpeVocab,
}

impl<'a> Translator<'a> {
    pub fn new(model: &'a Model, vocab: &'a BpeVocab) -> Result<Self> {
        Ok(Self {
            model,
            lm: model.inference_lm()?,
            vocab,
        })
    }

    pub fn prompt(&self, source: &str) -> Result<MixedSequence<f32>> {
        let pieces = plan(source, self.vocab, self.model.interleave, self.model.prefix)?;
        let mut mixed = crate::interleave::realize(&pieces, self.model.fallback.as_ref())?;
        mixed.segments.insert(0, Segment::Vocab(vec![BOS]));
        mixed.segments.push(Segment::Vocab(vec![SEP]));
        Ok(mixed)
    }

    pub fn translate(&self, source: &str, gen: &GenerateConfig) -> Result<String> {
        let prompt = self.lm.embed_mixed(&self.prompt(source)?)?;
        let hyp = self.lm.generate(&prompt, gen)?;
        let ids: Vec<usize> = hyp.tokens.iter().filter(|&&t| t >= N_SPECIAL).map(|&t| t - N_SPECIAL).collect();
        Ok(self.vocab.decode(&ids)?.trim().to_string())
    }
}

/// Fallback word vectors and the vocabulary embeddings they are aligned to
/// (mean over the aligned target word's tokens), one row each.
pub fn aligned_embeddings(model: &Model, examples: &[Example]) -> Result<(Array2<f32>, Array2<f32>)> {
    let f = model.fallback.as_ref().ok_or_else(|| Error::Config("no fallback encoder".into()))?;
    let table = model.lm.embedding_table();
    let d = model.lm.config.d_lm;
    let mut soft_rows = Vec::new();
    let mut vocab_rows = Vec::new();
    for ex in examples {
        if ex.align.is_empty() {
            continue;
        }
        let inputs: Vec<&OwnedInput> = ex
            .source
            .iter()
            .filter_map(|p| match p {
                Prepared::Words(w) => Some(w),
                Prepared::Tokens(_) => None,
            })
            .collect();
        let joined = OwnedInput::concat(&inputs)?;
        let mut tape = Tape::new();
        let bound = f.encoder.weights.bind(&mut tape, false);
        let out = f.encoder.forward_batch(&mut tape, &bound, &joined.as_input())?;
        let h = tape.value(out);
        for (row, toks) in &ex.align {
            soft_rows.push(h.row(*row).to_owned());
            vocab_rows.push(table.select(Axis(0), toks).mean_axis(Axis(0)).expect("non-empty"));
        }
    }
    let stack = |rows: &[ndarray::Array1<f32>]| -> Array2<f32> {
        let mut m = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            m.slice_mut(s![i, ..]).assign(r);
        }
        m
    };
    Ok((stack(&soft_rows), stack(&vocab_rows)))
}
