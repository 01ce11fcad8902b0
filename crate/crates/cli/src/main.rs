use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use pixfall::analysis::{self, Lengths};
use pixfall::checkpoint::{read_embeddings, write_embeddings};
use pixfall::data::{self, CipherSpec, ParallelCorpus, Script};
use pixfall::encoder::{EncoderConfig, FallbackEncoder, InputMode, OwnedInput};
use pixfall::interleave::{lm_ids, plan, Fallback, InterleaveMode, Piece};
use pixfall::lm::{GenerateConfig, LanguageModel, LmConfig, N_SPECIAL};
use pixfall::textrender::{self, FontSpec, RenderConfig, WhitespaceSegmenter};
use pixfall::tokenizer::{train_bpe, BpeVocab};
use pixfall::training::pipeline::{self, Model, Translator};
use pixfall::training::{Stage, TrainConfig};
use pixfall::Error;

#[derive(Parser)]
#[command(name = "pixfall", version, about = "Pixel fallback encoders for language models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parallel corpus.
    GenData(GenData),
    /// Render a text file to a patch dump.
    Render(RenderArgs),
    /// Train a byte-level BPE vocabulary.
    TrainBpe(TrainBpe),
    /// Train the base language model.
    TrainLm(TrainLm),
    /// Stage 1: train the fallback encoder against a frozen LM.
    Pretrain(StageArgs),
    /// Stage 2: train the fallback encoder plus DoRA adapters.
    Finetune(StageArgs),
    /// Translate one source per input line.
    Translate(TranslateArgs),
    /// chrF++ of hypotheses against references.
    Evaluate(EvaluateArgs),
    /// Write aligned fallback and vocabulary embeddings.
    ExportGapSets(ExportGapArgs),
    /// Centroid distance and probe accuracy between two embedding sets.
    AnalyzeGap(AnalyzeGapArgs),
    /// Per-line token, word and byte counts.
    CompareLengths(CompareArgs),
    /// Estimated FLOPs of the fallback pipeline against a tokenizer-only baseline.
    Flops(FlopsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Cipher,
    Codeswitch,
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "cyrillic")]
    script: Script,
    /// Reverse source word order.
    #[arg(long)]
    permute: bool,
    /// Probability that a source word stays ASCII (codeswitch).
    #[arg(long, default_value_t = 0.25)]
    ratio: f64,
    /// Pairs held out from the end as a test split.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    patch_size: usize,
    /// GNU Unifont style `.hex` font instead of the embedded one.
    #[arg(long)]
    font: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Source,
    Target,
    Both,
}

#[derive(Args)]
struct TrainBpe {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 506)]
    size: usize,
    #[arg(long, value_enum, default_value = "target")]
    side: Side,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainOpts {
    /// JSON config; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    warmup_ratio: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Training log CSV (default: <out>.log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DataOpts {
    #[arg(long)]
    corpus: PathBuf,
    /// Pharaoh alignments for the corpus.
    #[arg(long)]
    align: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct TrainLm {
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    train: TrainOpts,
    /// Input checkpoint (base LM for pretrain, pretrained model for finetune).
    #[arg(long, required_unless_present = "resume")]
    model: Option<PathBuf>,
    /// Continue from this checkpoint's weights instead of --model.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    enc_d_model: Option<usize>,
    #[arg(long)]
    enc_heads: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    font: Option<PathBuf>,
    #[arg(long)]
    interleave: Option<InterleaveMode>,
    /// Insert <txt>/<img> before each modality segment.
    #[arg(long)]
    modality_prefix: bool,
    /// Add the alignment loss (needs --align).
    #[arg(long)]
    align_loss: bool,
    #[arg(long)]
    align_weight: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pixel,
    Byte,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 2)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportGapArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataOpts,
    #[arg(long)]
    soft_out: PathBuf,
    #[arg(long)]
    vocab_out: PathBuf,
}

#[derive(Args)]
struct AnalyzeGapArgs {
    #[arg(long)]
    soft: PathBuf,
    /// Vocabulary-side embeddings file.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_enum, default_value = "source")]
    side: Side,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

type Res<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Res {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Render(a) => render(a),
        Cmd::TrainBpe(a) => train_bpe_cmd(a),
        Cmd::TrainLm(a) => train_lm(a),
        Cmd::Pretrain(a) => stage(a, Stage::Pretrain),
        Cmd::Finetune(a) => stage(a, Stage::Finetune),
        Cmd::Translate(a) => translate(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::ExportGapSets(a) => export_gap(a),
        Cmd::AnalyzeGap(a) => analyze_gap(a),
        Cmd::CompareLengths(a) => compare_lengths(a),
        Cmd::Flops(a) => flops(a),
    }
}

/// Writes to `out` when given, else prints `summary`.
fn emit(out: Option<&Path>, body: &str, summary: &str) -> Res {
    match out {
        Some(p) => fs::write(p, body)?,
        None => print!("{summary}"),
    }
    Ok(())
}

fn lines(path: &Path) -> Res<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

fn gen_data(a: GenData) -> Res {
    fs::create_dir_all(&a.out)?;
    let mut masks = None;
    let corpus = match a.task {
        Task::Cipher => data::gen_cipher_task(
            a.n,
            a.seed,
            CipherSpec {
                script: a.script,
                permute: a.permute,
            },
        ),
        Task::Codeswitch => {
            let (c, m) = data::gen_codeswitch_task(a.n, a.seed, a.ratio, a.script)?;
            masks = Some(m);
            c
        }
    };
    if a.holdout >= a.n {
        return Err(Failure::Usage("--holdout must be smaller than --n".into()));
    }
    let (train, test) = corpus.split_at(a.n - a.holdout);
    let write_split = |name: &str, c: &ParallelCorpus| -> Res {
        data::save_tsv(c, &a.out.join(format!("{name}.tsv")))?;
        if let Some(al) = &c.alignments {
            fs::write(a.out.join(format!("{name}.align")), data::format_pharaoh(al))?;
        }
        Ok(())
    };
    write_split("train", &train)?;
    if !test.is_empty() {
        write_split("test", &test)?;
        let join = |it: &mut dyn Iterator<Item = &str>| it.map(|s| format!("{s}\n")).collect::<String>();
        fs::write(a.out.join("test.src"), join(&mut test.sources()))?;
        fs::write(a.out.join("test.ref"), join(&mut test.targets()))?;
    }
    if let Some(m) = masks {
        let text: String = m
            .iter()
            .map(|row| row.iter().map(|&b| if b { "1" } else { "0" }).collect::<Vec<_>>().join(" ") + "\n")
            .collect();
        fs::write(a.out.join("ascii.mask"), text)?;
    }
    println!("wrote {} train and {} test pairs to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

fn render_config(patch_size: Option<usize>, font: Option<&PathBuf>) -> Res<RenderConfig> {
    let mut c = RenderConfig::default();
    if let Some(f) = font {
        c = c.with_font(FontSpec::System(f.clone()))?;
    }
    if let Some(p) = patch_size {
        c.patch_size = p;
    }
    c.validate()?;
    Ok(c)
}

fn render(a: RenderArgs) -> Res {
    let cfg = render_config(Some(a.patch_size), a.font.as_ref())?;
    let text = fs::read_to_string(&a.input)?;
    let words = textrender::pretokenize(&text, &WhitespaceSegmenter)?;
    let seq = textrender::render_sequence(&words, &cfg)?;
    let mut f = std::io::BufWriter::new(fs::File::create(&a.out)?);
    textrender::write_patch_dump(&seq, &mut f)?;
    use std::io::Write;
    f.flush()?;
    println!("{} words, {} patches", seq.word_count(), seq.len());
    Ok(())
}

fn train_bpe_cmd(a: TrainBpe) -> Res {
    let corpus = data::load_tsv(&a.corpus)?;
    let texts: Vec<&str> = match a.side {
        Side::Source => corpus.sources().collect(),
        Side::Target => corpus.targets().collect(),
        Side::Both => corpus.sources().chain(corpus.targets()).collect(),
    };
    let vocab = train_bpe(texts, a.size)?;
    vocab.save(&a.out)?;
    println!("{} tokens ({} merges)", vocab.len(), vocab.merges().len());
    Ok(())
}

fn load_config(path: Option<&PathBuf>) -> Res<Map<String, Value>> {
    match path {
        None => Ok(Map::new()),
        Some(p) => match serde_json::from_str(&fs::read_to_string(p)?).map_err(Error::from)? {
            Value::Object(m) => Ok(m),
            _ => Err(Failure::Usage(format!("{}: config must be a JSON object", p.display()))),
        },
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t.clone(),
    }
}

fn put<T: serde::Serialize>(m: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        m.insert(key.into(), json!(v));
    }
}

/// Defaults, then the config file, then explicit flags.
fn layered<T: serde::Serialize + serde::de::DeserializeOwned>(default: T, file: Option<&Value>, flags: Map<String, Value>) -> Res<T> {
    let mut v = serde_json::to_value(default).map_err(Error::from)?;
    if let Some(f) = file {
        merge(&mut v, f);
    }
    merge(&mut v, &Value::Object(flags));
    serde_json::from_value(v).map_err(|e| Failure::Usage(format!("invalid configuration: {e}")))
}

fn train_config(stage: Stage, t: &TrainOpts, file: &Map<String, Value>, extra: Map<String, Value>) -> Res<TrainConfig> {
    let mut file_train = file.clone();
    for k in ["lm", "encoder", "render"] {
        file_train.remove(k);
    }
    let mut flags = extra;
    put(&mut flags, "seed", t.seed);
    put(&mut flags, "total_steps", t.steps);
    put(&mut flags, "batch_size", t.batch_size);
    put(&mut flags, "peak_lr", t.lr);
    put(&mut flags, "min_lr", t.min_lr);
    put(&mut flags, "warmup_ratio", t.warmup_ratio);
    put(&mut flags, "weight_decay", t.weight_decay);
    flags.insert("stage".into(), json!(stage));
    let cfg: TrainConfig = layered(TrainConfig::default(), Some(&Value::Object(file_train)), flags)?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_data(d: &DataOpts) -> Res<(ParallelCorpus, BpeVocab)> {
    let mut corpus = data::load_tsv(&d.corpus)?;
    if let Some(a) = &d.align {
        let al = data::load_pharaoh(a)?;
        if al.len() != corpus.len() {
            return Err(Failure::Runtime(Error::Format(format!(
                "{} alignment lines for {} pairs",
                al.len(),
                corpus.len()
            ))));
        }
        corpus.alignments = Some(al);
    }
    Ok((corpus, BpeVocab::load(&d.vocab)?))
}

fn log_path(t: &TrainOpts, out: &Path) -> PathBuf {
    t.log.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.csv");
        s.into()
    })
}

/// Trains, writes the log, and saves `out`; on divergence saves the last
/// good weights and reports the step.
fn run_training(model: &mut Model, examples: &[pipeline::Example], cfg: &TrainConfig, out: &Path, log: &Path) -> Res {
    let mut csv = String::from("step,lr,ce,align,seconds\n");
    let result = pipeline::train(model, examples, cfg, |r| {
        let _ = writeln!(csv, "{},{:e},{:.6},{:.6},{:.3}", r.step, r.lr, r.ce, r.align, r.seconds);
        if r.step % 100 == 0 || r.step == cfg.total_steps {
            eprintln!("step {:>5}  lr {:.2e}  ce {:.4}  align {:.4}", r.step, r.lr, r.ce, r.align);
        }
    });
    fs::write(log, csv)?;
    model.save(out)?;
    result?;
    Ok(())
}

fn train_lm(a: TrainLm) -> Res {
    let file = load_config(a.train.config.as_ref())?;
    let cfg = train_config(Stage::Lm, &a.train, &file, Map::new())?;
    let (corpus, vocab) = load_data(&a.data)?;
    let mut flags = Map::new();
    put(&mut flags, "n_layers", a.layers);
    put(&mut flags, "d_lm", a.d_model);
    put(&mut flags, "n_heads", a.heads);
    put(&mut flags, "vocab_size", a.vocab_size);
    put(&mut flags, "max_positions", a.max_positions);
    let mut base = LmConfig::new(512, 4, 128, 4, 128);
    if let Some(d) = flags.get("d_lm").or_else(|| file.get("lm").and_then(|l| l.get("d_lm"))) {
        base.feedforward_dim = 4 * d.as_u64().unwrap_or(128) as usize;
    }
    let lm_cfg: LmConfig = layered(base, file.get("lm"), flags)?;
    if lm_cfg.vocab_size < vocab.len() + N_SPECIAL {
        return Err(Failure::Usage(format!(
            "vocab size {} is below tokenizer size {} plus {N_SPECIAL} specials",
            lm_cfg.vocab_size,
            vocab.len()
        )));
    }
    lm_cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let mut model = Model {
        lm: LanguageModel::init(lm_cfg, cfg.seed)?,
        fallback: None,
        adapters: None,
        interleave: InterleaveMode::default(),
        prefix: false,
    };
    let examples = pipeline::lm_examples(&vocab, &corpus);
    run_training(&mut model, &examples, &cfg, &a.out, &log_path(&a.train, &a.out))
}

fn stage(a: StageArgs, stage: Stage) -> Res {
    let file = load_config(a.train.config.as_ref())?;
    let mut extra = Map::new();
    if a.align_loss {
        if a.data.align.is_none() {
            return Err(Failure::Usage("--align-loss needs --align".into()));
        }
        extra.insert("align_loss".into(), json!(true));
    }
    put(&mut extra, "align_weight", a.align_weight);
    let mut dora = Map::new();
    put(&mut dora, "rank", a.rank);
    put(&mut dora, "alpha", a.alpha);
    put(&mut dora, "dropout", a.dropout);
    if !dora.is_empty() {
        extra.insert("dora".into(), Value::Object(dora));
    }
    let cfg = train_config(stage, &a.train, &file, extra)?;
    let (corpus, vocab) = load_data(&a.data)?;

    let source = a.resume.as_ref().or(a.model.as_ref()).expect("clap requires one");
    let mut model = Model::load(source)?;
    if model.lm.config.vocab_size < vocab.len() + N_SPECIAL {
        return Err(Failure::Usage("tokenizer does not fit the model's vocabulary".into()));
    }
    if let Some(m) = a.interleave {
        model.interleave = m;
    }
    if a.modality_prefix {
        model.prefix = true;
    }
    if model.fallback.is_none() {
        if stage == Stage::Finetune {
            return Err(Failure::Usage("finetune needs a pretrained model with a fallback encoder".into()));
        }
        let mode = match a.mode.unwrap_or(ModeArg::Pixel) {
            ModeArg::Pixel => InputMode::Pixel,
            ModeArg::Byte => InputMode::Byte,
        };
        let render = render_config(a.patch_size, a.font.as_ref())?;
        let mut flags = Map::new();
        put(&mut flags, "n_layers", a.enc_layers);
        put(&mut flags, "d_model", a.enc_d_model);
        put(&mut flags, "n_heads", a.enc_heads);
        flags.insert("d_lm".into(), json!(model.lm.config.d_lm));
        flags.insert("patch_dim".into(), json!(render.patch_dim()));
        let d = a.enc_d_model.unwrap_or(64);
        let mut base = EncoderConfig::new(mode, 2, d, 4, model.lm.config.d_lm);
        base.feedforward_dim = 4 * d;
        let enc: EncoderConfig = layered(base, file.get("encoder"), flags)?;
        enc.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        model.fallback = Some(Fallback {
            encoder: FallbackEncoder::init(enc, cfg.seed)?,
            render,
        });
    } else if a.mode.is_some() || a.patch_size.is_some() || a.font.is_some() {
        return Err(Failure::Usage("encoder options only apply when the model has no encoder yet".into()));
    }
    let examples = pipeline::prepare_examples(&model, &vocab, &corpus)?;
    run_training(&mut model, &examples, &cfg, &a.out, &log_path(&a.train, &a.out))
}

fn translate(a: TranslateArgs) -> Res {
    let model = Model::load(&a.model)?;
    let vocab = BpeVocab::load(&a.vocab)?;
    let t = Translator::new(&model, &vocab)?;
    let gen = GenerateConfig {
        beam_size: a.beam,
        max_new: a.max_new,
        length_penalty: a.length_penalty,
        ..Default::default()
    };
    let mut out = String::new();
    for line in lines(&a.input)? {
        out.push_str(&t.translate(&line, &gen)?);
        out.push('\n');
    }
    emit(a.out.as_deref(), &out, &out)
}

fn evaluate(a: EvaluateArgs) -> Res {
    let hyp = lines(&a.hyp)?;
    let reference = lines(&a.reference)?;
    if hyp.len() != reference.len() {
        return Err(Failure::Runtime(Error::Format(format!(
            "{} hypotheses for {} references",
            hyp.len(),
            reference.len()
        ))));
    }
    let mut csv = String::from("line,chrf\n");
    for (i, (h, r)) in hyp.iter().zip(&reference).enumerate() {
        writeln!(csv, "{},{:.6}", i + 1, analysis::chrf_pp(h, r)?).unwrap();
    }
    let corpus = analysis::corpus_chrf_pp(hyp.iter().map(String::as_str).zip(reference.iter().map(String::as_str)))?;
    writeln!(csv, "corpus,{corpus:.6}").unwrap();
    emit(a.out.as_deref(), &csv, &format!("chrF++ {corpus:.4} over {} lines\n", hyp.len()))
}

fn export_gap(a: ExportGapArgs) -> Res {
    let model = Model::load(&a.model)?;
    let (corpus, vocab) = load_data(&a.data)?;
    if corpus.alignments.is_none() {
        return Err(Failure::Usage("export-gap-sets needs --align".into()));
    }
    let examples = pipeline::prepare_examples(&model, &vocab, &corpus)?;
    let (soft, emb) = pipeline::aligned_embeddings(&model, &examples)?;
    write_embeddings(&a.soft_out, &soft)?;
    write_embeddings(&a.vocab_out, &emb)?;
    println!("{} aligned pairs", soft.nrows());
    Ok(())
}

fn analyze_gap(a: AnalyzeGapArgs) -> Res {
    let soft = read_embeddings(&a.soft)?;
    let vocab = read_embeddings(&a.vocab)?;
    let r = analysis::modality_gap(&soft, &vocab, a.seed)?;
    let text = format!(
        "centroid_distance = {:.6}\nprobe_accuracy = {:.6}\nn_soft = {}\nn_vocab = {}\n",
        r.centroid_distance, r.probe_accuracy, r.n_soft, r.n_vocab
    );
    emit(a.out.as_deref(), &text, &text)
}

fn compare_lengths(a: CompareArgs) -> Res {
    let corpus = data::load_tsv(&a.corpus)?;
    let vocab = BpeVocab::load(&a.vocab)?;
    let texts: Vec<&str> = match a.side {
        Side::Source => corpus.sources().collect(),
        Side::Target => corpus.targets().collect(),
        Side::Both => corpus.sources().chain(corpus.targets()).collect(),
    };
    let mut csv = String::from("line,tokens,words,bytes,ratio\n");
    for (i, t) in texts.iter().enumerate() {
        let l = analysis::line_lengths(t, &vocab, &WhitespaceSegmenter)?;
        let ratio = l.ratio().map(|r| format!("{r:.6}")).unwrap_or_default();
        writeln!(csv, "{},{},{},{},{ratio}", i + 1, l.tokens, l.words, l.bytes).unwrap();
    }
    let ratio = analysis::compression_ratio(texts.iter().copied(), &vocab, &WhitespaceSegmenter)?;
    let mean = analysis::mean_line_ratio(texts.iter().copied(), &vocab, &WhitespaceSegmenter)?;
    writeln!(csv, "corpus,,,,{ratio:.6}").unwrap();
    emit(
        a.out.as_deref(),
        &csv,
        &format!("compression ratio {ratio:.4} (mean per line {mean:.4}) over {} lines\n", texts.len()),
    )
}

fn flops(a: FlopsArgs) -> Res {
    let model = Model::load(&a.model)?;
    let vocab = BpeVocab::load(&a.vocab)?;
    let corpus = data::load_tsv(&a.corpus)?;
    let enc = model.fallback.as_ref().map(|f| &f.encoder.config);
    let mut csv = String::from("line,base_prompt,fallback_prompt,generated,base_flops,fallback_flops,ratio\n");
    let (mut base_total, mut fb_total) = (0u128, 0u128);
    for (i, (src, tgt)) in corpus.pairs.iter().enumerate() {
        let generated = lm_ids(&vocab, tgt).len() + 1;
        let base = Lengths {
            word_units: Vec::new(),
            prompt: lm_ids(&vocab, src).len() + 2,
            generated,
        };
        let mut fb = Lengths {
            word_units: Vec::new(),
            prompt: 2,
            generated,
        };
        for p in plan(src, &vocab, model.interleave, model.prefix)? {
            fb.prompt += p.len();
            if let (Piece::Words(w), Some(f)) = (&p, &model.fallback) {
                match f.prepare(&w)? {
                    OwnedInput::Pixels(s) => fb.word_units.extend(s.word_offsets.iter().map(|&(_, n)| n)),
                    OwnedInput::Bytes(b) => fb.word_units.extend(b.word_offsets.iter().map(|&(_, n)| n)),
                }
            }
        }
        let fb_enc = if fb.word_units.is_empty() { None } else { enc };
        let bf = analysis::flops_estimate(None, &model.lm.config, &base).total();
        let ff = analysis::flops_estimate(fb_enc, &model.lm.config, &fb).total();
        base_total += bf as u128;
        fb_total += ff as u128;
        writeln!(
            csv,
            "{},{},{},{generated},{bf},{ff},{:.6}",
            i + 1,
            base.prompt,
            fb.prompt,
            ff as f64 / bf as f64
        )
        .unwrap();
    }
    let ratio = fb_total as f64 / base_total.max(1) as f64;
    writeln!(csv, "corpus,,,,{base_total},{fb_total},{ratio:.6}").unwrap();
    emit(
        a.out.as_deref(),
        &csv,
        &format!("FLOPs fallback/base {ratio:.4} ({fb_total} / {base_total})\n"),
    )
}
