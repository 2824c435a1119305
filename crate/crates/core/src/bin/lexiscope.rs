use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde_json::json;

use lexiscope::expansion::{evaluate_top1, load_expanded, ExpandOptions, InitMode};
use lexiscope::experiments::{AblationPolicy, SplitMode, TokenPosition};
use lexiscope::harness::{
    read_documents, read_report, run, synth_corpus, verify_manifest, CorpusIndex, Paths, RunConfig,
    SynthConfig, TrainConfig, WordFilter, DEFAULT_CONTEXT, REPORT_FILE,
};
use lexiscope::model::{evaluate_loss, generate, load_checkpoint, save_checkpoint, train, Model};
use lexiscope::patchscope::{build_patch_prompt, decode_sweep, PatchMode, REPEAT_TEMPLATE, XXXX_TEMPLATE};
use lexiscope::tokenizer::{
    artificial_split, make_nonword, perturb_typo, random_typo, train_bpe, TokenId, Vocabulary, WordRecord,
};
use lexiscope::{Error, Result};

/// Overrides the output directory of `exp`, `run` and `expand`.
const OUT_ENV: &str = "LEXISCOPE_OUT";

#[derive(Parser)]
#[command(name = "lexiscope", version, about = "Sub-word detokenization workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, apply and perturb byte-level BPE vocabularies.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Train, evaluate and sample from models.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Run one experiment from command-line flags.
    Exp(ExpArgs),
    /// Run one experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Decode each word's hidden states at every layer through a patch prompt.
    Patchscope(PatchscopeArgs),
    /// Expand the vocabulary with words the model detokenizes.
    Expand(ExpandCmd),
    /// Verify a run directory and summarize its report.
    Report { dir: PathBuf },
    /// Write a synthetic corpus, one document per line.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum TokenizerCmd {
    Train {
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print token ids for TEXT, or for stdin when TEXT is omitted.
    Encode {
        #[arg(long)]
        vocab: PathBuf,
        text: Option<String>,
    },
    Decode {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(required = true)]
        ids: Vec<TokenId>,
    },
    Perturb {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        word: String,
        /// split, typo or nonword.
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Piece count for split mode; drawn from 2..=min(5, len) if omitted.
        #[arg(long)]
        pieces: Option<usize>,
        /// Corpus supplying the token statistics for nonword mode.
        #[arg(long)]
        corpus: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Mean next-token loss on the config's corpus, without augmentation.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
    },
}

#[derive(Args)]
struct ExpArgs {
    name: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONTEXT)]
    context: usize,
    /// artificial, typo or suffix.
    #[arg(long)]
    mode: Option<String>,
    /// targeted, random or none.
    #[arg(long)]
    policy: Option<String>,
    /// last or penultimate.
    #[arg(long)]
    position: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// repeat, xxxx or a literal template.
    #[arg(long)]
    template: Option<String>,
    /// input or matched.
    #[arg(long)]
    patch_mode: Option<String>,
    #[arg(long)]
    max_word_tokens: Option<usize>,
}

#[derive(Args)]
struct PatchscopeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// One word per line.
    #[arg(long)]
    words: PathBuf,
    #[arg(long, default_value = "repeat")]
    template: String,
    #[arg(long, default_value = "input")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
struct ExpandCmd {
    #[command(subcommand)]
    sub: Option<ExpandSub>,
    #[command(flatten)]
    args: ExpandArgs,
}

#[derive(Subcommand)]
enum ExpandSub {
    /// Compare top-1 accuracy of the original and an expanded model.
    Eval {
        /// The `expanded/` directory of an expansion run.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        test: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct ExpandArgs {
    #[arg(long, required = true)]
    ckpt: Option<PathBuf>,
    #[arg(long, required = true)]
    vocab: Option<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    train: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    test: Vec<PathBuf>,
    #[arg(long, required = true)]
    out: Option<PathBuf>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    patch_mode: Option<String>,
    /// derived or mean_embedding.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    refine_steps: Option<usize>,
    #[arg(long)]
    refine_lr: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML generator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lines: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Tokenizer(t) => tokenizer(t),
        Command::Model(m) => model(m),
        Command::Exp(a) => run_and_print(exp_config(a)?),
        Command::Run { config } => run_and_print(RunConfig::load(&config)?),
        Command::Patchscope(a) => patchscope(a),
        Command::Expand(ExpandCmd { sub: Some(s), .. }) => expand_eval(s),
        Command::Expand(ExpandCmd { sub: None, args }) => run_and_print(expand_config(args)?),
        Command::Report { dir } => report(&dir),
        Command::Synth(a) => synth(a),
    }
}

fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| Error::Config(format!("unknown {what} {s:?}")))
}

fn template(name: &str) -> String {
    match name {
        "repeat" => REPEAT_TEMPLATE.to_owned(),
        "xxxx" => XXXX_TEMPLATE.to_owned(),
        other => other.to_owned(),
    }
}

fn out_dir(flag: PathBuf) -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or(flag)
}

fn print_json(v: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("json value serializes")
    );
}

fn read_stdin() -> Result<String> {
    let mut s = String::new();
    std::io::stdin()
        .read_to_string(&mut s)
        .map_err(|_| Error::Encoding(PathBuf::from("<stdin>")))?;
    Ok(s)
}

fn load_pair(ckpt: &Path, vocab: &Path) -> Result<(Model, Vocabulary)> {
    let model = load_checkpoint(ckpt)?;
    let vocab = Vocabulary::load(vocab)?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::DimensionMismatch {
            expected: model.config.vocab_size,
            got: vocab.len(),
        });
    }
    Ok((model, vocab))
}

fn tokenizer(cmd: TokenizerCmd) -> Result<()> {
    match cmd {
        TokenizerCmd::Train {
            corpus,
            vocab_size,
            out,
        } => {
            let docs = read_documents(&corpus)?;
            let vocab = train_bpe(docs.join("\n").as_bytes(), vocab_size)?;
            vocab.save(&out)?;
            print_json(&json!({ "vocab_size": vocab.len(), "merges": vocab.merges().len() }));
        }
        TokenizerCmd::Encode { vocab, text } => {
            let vocab = Vocabulary::load(vocab)?;
            let text = match text {
                Some(t) => t,
                None => read_stdin()?,
            };
            let ids: Vec<String> = vocab.encode(&text).ids.iter().map(|i| i.to_string()).collect();
            println!("{}", ids.join(" "));
        }
        TokenizerCmd::Decode { vocab, ids } => {
            let vocab = Vocabulary::load(vocab)?;
            println!("{}", vocab.decode_lossy(&ids)?);
        }
        TokenizerCmd::Perturb {
            vocab,
            word,
            mode,
            seed,
            pieces,
            corpus,
        } => {
            let vocab = Vocabulary::load(vocab)?;
            let out = match mode.as_str() {
                "split" => {
                    let len = word.chars().count();
                    let n = match pieces {
                        Some(n) => n,
                        None if len >= 2 => ChaCha8Rng::seed_from_u64(seed).gen_range(2..=len.min(5)),
                        None => 2,
                    };
                    let parts = artificial_split(&word, n, seed)?;
                    let ids = vocab.encode_pieces(&parts, true);
                    json!({ "word": word, "pieces": parts, "token_ids": ids })
                }
                "typo" => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let op = random_typo(&word, &mut rng)?;
                    let typo = perturb_typo(&word, op)?;
                    let ids = vocab.encode_word(&typo);
                    json!({ "word": word, "typo": typo, "op": op, "token_ids": ids })
                }
                "nonword" => {
                    if corpus.is_empty() {
                        return Err(Error::Config("nonword mode needs --corpus".into()));
                    }
                    let docs = read_documents(&corpus)?;
                    let idx = CorpusIndex::from_documents(&docs, &vocab);
                    let mut words = idx.records(&WordFilter::MultiToken, 0, seed);
                    words.push(WordRecord::new(word.clone(), vocab.encode_word(&word), vec![]));
                    let nw = make_nonword(&vocab, &words, seed)?;
                    let text = vocab.decode_lossy(&nw.ids)?;
                    json!({ "word": word, "nonword": text, "token_ids": nw.ids })
                }
                other => return Err(Error::Config(format!("unknown perturbation mode {other:?}"))),
            };
            println!("{out}");
        }
    }
    Ok(())
}

fn model(cmd: ModelCmd) -> Result<()> {
    match cmd {
        ModelCmd::Train { config, ckpt } => {
            let cfg = TrainConfig::load(&config)?;
            let vocab = Vocabulary::load(&cfg.vocab)?;
            let stream = cfg.stream(&vocab)?;
            let (model, rep) = train(cfg.model.clone(), &stream, &cfg.train)?;
            save_checkpoint(&model, &ckpt)?;
            print_json(&json!({
                "steps": rep.losses.len(),
                "tokens_seen": rep.tokens_seen,
                "first_loss": rep.losses.first(),
                "final_loss": rep.final_loss(),
                "n_params": model.config.n_params(),
            }));
        }
        ModelCmd::Eval { config, ckpt } => {
            let cfg = TrainConfig::load(&config)?;
            let (model, vocab) = load_pair(&ckpt, &cfg.vocab)?;
            let docs = read_documents(&cfg.corpus)?;
            let stream = lexiscope::harness::training_stream(&vocab, &docs, 0.0, 0)?;
            let loss = evaluate_loss(&model, &stream, cfg.train.seq_len)?;
            print_json(&json!({ "loss": loss, "tokens": stream.len() }));
        }
        ModelCmd::Generate {
            ckpt,
            vocab,
            prompt,
            max_new,
        } => {
            let (model, vocab) = load_pair(&ckpt, &vocab)?;
            let ids = vocab.encode(&prompt).ids;
            let max_new = max_new.min(model.config.max_seq.saturating_sub(ids.len()));
            let out = generate(&model, &ids, max_new, &[])?;
            println!("{}", vocab.decode_lossy(&out)?);
        }
    }
    Ok(())
}

fn exp_config(a: ExpArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig {
        experiment: a.name,
        seed: a.seed,
        context: a.context,
        timestamp: None,
        paths: Paths {
            corpus: a.corpus,
            checkpoint: a.ckpt,
            vocab: a.vocab,
            output_dir: out_dir(a.out),
            test_corpus: Vec::new(),
        },
        probing: Default::default(),
        retrieval: Default::default(),
        patchscope: Default::default(),
        attention: Default::default(),
        expand: Default::default(),
    };
    if let Some(m) = a.mode {
        cfg.retrieval.mode = parse_enum::<SplitMode>("split mode", &m)?;
    }
    if let Some(p) = a.policy {
        cfg.retrieval.policy = parse_enum::<AblationPolicy>("ablation policy", &p)?;
    }
    if let Some(p) = a.position {
        cfg.probing.position = parse_enum::<TokenPosition>("token position", &p)?;
    }
    if let Some(k) = a.k {
        cfg.probing.k = k;
    }
    if let Some(t) = a.template {
        cfg.patchscope.template = template(&t);
    }
    if let Some(m) = a.patch_mode {
        cfg.patchscope.mode = parse_enum::<PatchMode>("patch mode", &m)?;
    }
    if let Some(n) = a.max_word_tokens {
        cfg.attention.max_word_tokens = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn expand_config(a: ExpandArgs) -> Result<RunConfig> {
    let missing = |what: &str| Error::Config(format!("expand needs --{what}"));
    let mut opts = ExpandOptions::default();
    if let Some(m) = a.min_count {
        opts.min_count = m;
    }
    if let Some(t) = a.template {
        opts.template = template(&t);
    }
    if let Some(m) = a.patch_mode {
        opts.patch_mode = parse_enum::<PatchMode>("patch mode", &m)?;
    }
    if let Some(i) = a.init {
        opts.init = parse_enum::<InitMode>("init mode", &i)?;
    }
    if let Some(s) = a.refine_steps {
        opts.refine.steps = s;
    }
    if let Some(lr) = a.refine_lr {
        opts.refine.lr = lr;
    }
    opts.refine.seed = a.seed;
    let cfg = RunConfig {
        experiment: "expand".into(),
        seed: a.seed,
        context: DEFAULT_CONTEXT,
        timestamp: None,
        paths: Paths {
            corpus: a.train,
            checkpoint: a.ckpt.ok_or_else(|| missing("ckpt"))?,
            vocab: a.vocab.ok_or_else(|| missing("vocab"))?,
            output_dir: out_dir(a.out.ok_or_else(|| missing("out"))?),
            test_corpus: a.test,
        },
        probing: Default::default(),
        retrieval: Default::default(),
        patchscope: Default::default(),
        attention: Default::default(),
        expand: opts,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run_and_print(mut cfg: RunConfig) -> Result<()> {
    if let Some(dir) = std::env::var_os(OUT_ENV) {
        cfg.paths.output_dir = PathBuf::from(dir);
    }
    let out = run(&cfg)?;
    eprintln!(
        "wrote {} files to {}",
        out.manifest.files.len() + 1,
        cfg.paths.output_dir.display()
    );
    summarize(&out.report);
    Ok(())
}

fn summarize(report: &lexiscope::experiments::ExperimentReport) {
    println!("{}", report.name);
    for s in &report.series {
        let name = match &s.group {
            Some(g) => format!("{}[{}]", s.name, g),
            None => s.name.clone(),
        };
        let best = s
            .values
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |acc, (i, &v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((i, v)),
            });
        match best {
            Some((layer, v)) => println!("  {name}: best layer {layer} ({v:.4})"),
            None => println!("  {name}: empty"),
        }
    }
    for t in &report.stats {
        println!(
            "  t-test layer {}: t={:.3} p_greater={:.3e} p_less={:.3e}",
            t.layer, t.t_stat, t.p_greater, t.p_less
        );
    }
    for (k, v) in &report.scalars {
        println!("  {k} = {v}");
    }
}

fn patchscope(a: PatchscopeArgs) -> Result<()> {
    let (model, vocab) = load_pair(&a.ckpt, &a.vocab)?;
    let prompt = build_patch_prompt(&vocab, &template(&a.template))?;
    let mode = parse_enum::<PatchMode>("patch mode", &a.mode)?;
    let words = read_documents(&[a.words])?;
    let file = std::fs::File::create(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::Io {
        path: a.out.clone(),
        source: e,
    };
    let mut decoded = 0;
    for word in words.iter().map(|w| w.trim()) {
        let rec = WordRecord::new(word, vocab.encode_word(word), vec![]);
        let sweep = decode_sweep(&model, &vocab, &rec, &prompt, mode)?;
        decoded += sweep.iter().any(|d| d.success) as usize;
        for d in sweep {
            let line = serde_json::to_string(&d).map_err(|e| Error::Internal(e.to_string()))?;
            writeln!(w, "{line}").map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    eprintln!("{decoded}/{} words decoded at some layer", words.len());
    Ok(())
}

fn expand_eval(sub: ExpandSub) -> Result<()> {
    let ExpandSub::Eval {
        dir,
        ckpt,
        vocab,
        test,
    } = sub;
    let (model, vocab) = load_pair(&ckpt, &vocab)?;
    let ex = load_expanded(&dir)?;
    let docs = read_documents(&test)?;
    let before = evaluate_top1(&model, &vocab, &docs)?;
    let after = evaluate_top1(&ex.model, &ex.vocab, &docs)?;
    print_json(&json!({
        "n_new_words": ex.entries.len(),
        "original": before,
        "expanded": after,
    }));
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let manifest = verify_manifest(dir)?;
    let report = read_report(&dir.join(REPORT_FILE))?;
    println!(
        "{} files verified (config {}, seed {})",
        manifest.files.len(),
        &manifest.config_hash[..12.min(manifest.config_hash.len())],
        manifest.seed
    );
    summarize(&report);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(n) = a.lines {
        cfg.n_lines = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut text = synth_corpus(&cfg).join("\n");
    text.push('\n');
    std::fs::write(&a.out, text).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })
}
