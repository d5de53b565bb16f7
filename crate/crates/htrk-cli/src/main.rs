//! `htrk` — generate synthetic Cyrillic word datasets, train and evaluate
//! recognition models, recognize single images, and segment pages.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. Every command is deterministic for a fixed `--seed`.

mod config;

use clap::{Parser, Subcommand, ValueEnum};
use config::{parse_config, RunConfig};
use htrk::ctc::{ctc_loss, ProbMatrix};
use htrk::data::{generate, nfc_normalize, Charset, DatasetManifest, Split, SAMPLE_WORDS};
use htrk::decode::{
    beam_search, best_path, best_path_score, read_dictionary, word_beam_search, CharLM, PrefixTree,
};
use htrk::imaging::{deskew, read_image};
use htrk::metrics::{corpus_eval_with, EvalOptions};
use htrk::models::{Model, ModelKind, ModelSpec};
use htrk::segment::{segment_lines_with, segment_page, SegmentConfig};
use htrk::train::{history_csv, train_classifier, train_htr, Checkpoint, Optimizer};
use htrk::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "htrk", version, about = "Handwritten Cyrillic word recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderArg {
    Bestpath,
    Beamsearch,
    Wordbeamsearch,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Lines,
    Words,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic word-image dataset with split manifests.
    Gen {
        /// Word list file, one word per line; defaults to the embedded
        /// 42-word city/country vocabulary.
        #[arg(long)]
        words: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        per_word: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Charset file; defaults to the 43-symbol Cyrillic charset.
        #[arg(long)]
        charset: Option<PathBuf>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// INI-style config file ([train]/[decode] sections).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from an existing checkpoint (restores parameters and lr).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// History CSV path; defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        optimizer: Option<String>,
        /// Model build seed (parameter initialization).
        #[arg(long, default_value_t = 1)]
        init_seed: u64,
    },
    /// Recognize a single word image with a trained checkpoint.
    Recognize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value = "bestpath")]
        decoder: DecoderArg,
        #[arg(long)]
        charset: PathBuf,
        /// Dictionary file (required for wordbeamsearch).
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Corpus file to train the character bigram LM.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long, default_value_t = 25)]
        beam_width: usize,
    },
    /// Evaluate a checkpoint on a dataset split; emits a CSV report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test2")]
        split: String,
        #[arg(long, value_enum, default_value = "bestpath")]
        decoder: DecoderArg,
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long, default_value_t = 25)]
        beam_width: usize,
        /// Report macro-averaged CER instead of micro-averaged.
        #[arg(long)]
        macro_cer: bool,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment a page image into line or word boxes (CSV x,y,w,h).
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "words")]
        level: LevelArg,
        #[arg(long, default_value_t = 3)]
        min_gap_rows: usize,
        #[arg(long, default_value_t = 6)]
        min_gap_cols: usize,
        /// Deskew before segmenting.
        #[arg(long)]
        deskew: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_usage() { 2 } else { 1 });
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            words,
            per_word,
            out,
            seed,
            charset,
        } => cmd_gen(words, per_word, &out, seed, charset),
        Command::Train {
            model,
            data,
            out,
            config,
            resume,
            history,
            seed,
            epochs,
            lr,
            batch_size,
            optimizer,
            init_seed,
        } => cmd_train(
            &model, &data, &out, config, resume, history, seed, epochs, lr, batch_size, optimizer,
            init_seed,
        ),
        Command::Recognize {
            ckpt,
            image,
            decoder,
            charset,
            dict,
            lm,
            beam_width,
        } => cmd_recognize(&ckpt, &image, decoder, &charset, dict, lm, beam_width),
        Command::Eval {
            ckpt,
            data,
            split,
            decoder,
            dict,
            lm,
            beam_width,
            macro_cer,
            out,
        } => cmd_eval(
            &ckpt, &data, &split, decoder, dict, lm, beam_width, macro_cer, out,
        ),
        Command::Segment {
            image,
            out,
            level,
            min_gap_rows,
            min_gap_cols,
            deskew,
        } => cmd_segment(&image, out, level, min_gap_rows, min_gap_cols, deskew),
    }
}

fn cmd_gen(
    words_file: Option<PathBuf>,
    per_word: usize,
    out: &Path,
    seed: u64,
    charset_file: Option<PathBuf>,
) -> Result<()> {
    let charset = match charset_file {
        Some(path) => Charset::from_file(&path)?,
        None => Charset::htr_cyrillic(),
    };
    let words: Vec<String> = match words_file {
        Some(path) => std::fs::read_to_string(&path)?
            .lines()
            .map(|l| nfc_normalize(l.trim()))
            .filter(|l| !l.is_empty())
            .collect(),
        None => SAMPLE_WORDS.iter().map(|s| s.to_string()).collect(),
    };
    let manifest = generate(&words, per_word, &charset, seed, out)?;
    println!(
        "generated {} images for {} words into {}",
        manifest.entries.len(),
        words.len(),
        out.display()
    );
    for split in Split::ALL {
        println!("  {split}: {}", manifest.count(split));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    model_kind: &str,
    data: &Path,
    out: &Path,
    config: Option<PathBuf>,
    resume: Option<PathBuf>,
    history_path: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    optimizer: Option<String>,
    init_seed: u64,
) -> Result<()> {
    let kind = ModelKind::parse(model_kind)?;
    let mut cfg: RunConfig = match config {
        Some(path) => parse_config(
            &std::fs::read_to_string(&path)?,
            &path.display().to_string(),
        )?,
        None => RunConfig::default(),
    };
    if let Some(v) = seed {
        cfg.train.seed = v;
    }
    if let Some(v) = epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = lr {
        cfg.train.lr = v;
    }
    if let Some(v) = batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(ref v) = optimizer {
        cfg.train.optimizer = Optimizer::parse(v)?;
    }
    cfg.train.validate()?;

    let manifest = DatasetManifest::load(data)?;
    let charset = Charset::from_file(&data.join("charset.txt"))?;

    let mut model = match &resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.spec.kind != kind {
                return Err(Error::Config(format!(
                    "checkpoint holds a {} model, not {}",
                    ckpt.spec.kind, kind
                )));
            }
            cfg.train.lr = ckpt.lr;
            ckpt.to_model()?
        }
        None if kind.is_htr() => Model::build(ModelSpec::htr(kind, charset.len()), init_seed)?,
        None => {
            let classes = manifest.transcripts(Split::Train).len();
            let (w, h) = kind.default_input();
            Model::build(ModelSpec::classifier(kind, classes, w, h), init_seed)?
        }
    };

    let outcome = if kind.is_htr() {
        train_htr(&mut model, &manifest, data, &charset, &cfg.train)?
    } else {
        train_classifier(&mut model, &manifest, data, &cfg.train)?
    };

    for row in &outcome.history {
        println!(
            "epoch {:>3}  train_loss {:>10.5}  val_loss {:>10.5}  val_cer {:>7.2}%  lr {:.6}",
            row.epoch, row.train_loss, row.val_loss, row.val_cer, row.lr
        );
    }
    if outcome.stopped_early {
        println!("stopped early after {} epochs", outcome.history.len());
    }
    outcome.best.save(out)?;
    let history_path = history_path.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".history.csv");
        PathBuf::from(p)
    });
    std::fs::write(&history_path, history_csv(&outcome.history))?;
    println!(
        "saved checkpoint (epoch {}, val loss {:.5}) to {}",
        outcome.best.epoch,
        outcome.best.best_val_loss,
        out.display()
    );
    Ok(())
}

fn decode_matrix(
    m: &ProbMatrix,
    decoder: DecoderArg,
    charset: &Charset,
    dict: Option<&PrefixTree>,
    lm: Option<&CharLM>,
    beam_width: usize,
) -> Result<(String, f64)> {
    let (label, score) = match decoder {
        DecoderArg::Bestpath => {
            let label = best_path(m);
            let score = best_path_score(m);
            (label, score)
        }
        DecoderArg::Beamsearch => {
            let label = beam_search(m, beam_width)?;
            let score = (-ctc_loss(m, &label)?.loss).exp();
            (label, score)
        }
        DecoderArg::Wordbeamsearch => {
            let dict = dict.ok_or_else(|| {
                Error::Config("wordbeamsearch requires --dict".into())
            })?;
            let label = word_beam_search(m, dict, lm, beam_width)?;
            let score = (-ctc_loss(m, &label)?.loss).exp();
            (label, score)
        }
    };
    Ok((charset.decode(&label)?, 100.0 * score))
}

fn cmd_recognize(
    ckpt: &Path,
    image: &Path,
    decoder: DecoderArg,
    charset_file: &Path,
    dict: Option<PathBuf>,
    lm: Option<PathBuf>,
    beam_width: usize,
) -> Result<()> {
    if matches!(decoder, DecoderArg::Wordbeamsearch) && dict.is_none() {
        return Err(Error::Config("wordbeamsearch requires --dict".into()));
    }
    let charset = Charset::from_file(charset_file)?;
    let model = Checkpoint::load(ckpt)?.to_model()?;
    if model.spec().charset_size != charset.len() {
        return Err(Error::Config(format!(
            "checkpoint expects {} symbols, charset file has {}",
            model.spec().charset_size,
            charset.len()
        )));
    }
    let img = read_image(image)?;
    let sized = htrk::imaging::resize_pad(&img, model.spec().input_w, model.spec().input_h);
    let probs = model.forward_htr(&sized)?;
    let trie = dict
        .map(|p| read_dictionary(&p, &charset))
        .transpose()?;
    let lm = lm
        .map(|p| -> Result<CharLM> {
            CharLM::train(&std::fs::read_to_string(&p)?, &charset, 1.0)
        })
        .transpose()?;
    let (text, score) = decode_matrix(
        &probs,
        decoder,
        &charset,
        trie.as_ref(),
        lm.as_ref(),
        beam_width,
    )?;
    println!("{text}\t{score:.2}%");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    split_name: &str,
    decoder: DecoderArg,
    dict: Option<PathBuf>,
    lm: Option<PathBuf>,
    beam_width: usize,
    macro_cer: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let split = Split::parse(split_name)?;
    let manifest = DatasetManifest::load(data)?;
    let charset = Charset::from_file(&data.join("charset.txt"))?;
    let model = Checkpoint::load(ckpt)?.to_model()?;

    let trie = match (&dict, decoder) {
        (Some(path), _) => Some(read_dictionary(path, &charset)?),
        (None, DecoderArg::Wordbeamsearch) => {
            // default dictionary: the training vocabulary
            let words: Vec<String> = manifest
                .transcripts(Split::Train)
                .into_iter()
                .map(String::from)
                .collect();
            Some(PrefixTree::from_words(&words, &charset)?)
        }
        _ => None,
    };
    let lm = lm
        .map(|p| -> Result<CharLM> {
            CharLM::train(&std::fs::read_to_string(&p)?, &charset, 1.0)
        })
        .transpose()?;

    let entries: Vec<_> = manifest.of_split(split).collect();
    if entries.is_empty() {
        return Err(Error::Config(format!("split {split} is empty")));
    }
    let mut pairs = Vec::with_capacity(entries.len());
    for entry in entries {
        let img = htrk::data::load_entry_image(data, entry)?;
        let sized = htrk::imaging::resize_pad(&img, model.spec().input_w, model.spec().input_h);
        let probs = model.forward_htr(&sized)?;
        let (text, _) = decode_matrix(
            &probs,
            decoder,
            &charset,
            trie.as_ref(),
            lm.as_ref(),
            beam_width,
        )?;
        pairs.push((text, entry.transcript.clone()));
    }
    let report = corpus_eval_with(&pairs, EvalOptions { macro_cer })?;
    eprintln!(
        "{split}: CER {:.2}%  WER {:.2}%  WAR {:.2}%  CAR {:.2}%  ({} samples)",
        report.cer, report.wer, report.war, report.car, report.sample_count
    );
    let csv = report.to_csv();
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_segment(
    image: &Path,
    out: Option<PathBuf>,
    level: LevelArg,
    min_gap_rows: usize,
    min_gap_cols: usize,
    apply_deskew: bool,
) -> Result<()> {
    let mut img = read_image(image)?;
    if apply_deskew {
        let (corrected, angle) = deskew(&img, 15.0)?;
        eprintln!("deskewed by {angle:.1} degrees");
        img = corrected;
    }
    let cfg = SegmentConfig {
        min_gap_rows,
        min_gap_cols,
        ..SegmentConfig::default()
    };
    let mut csv = String::from("x,y,w,h\n");
    match level {
        LevelArg::Lines => {
            for b in segment_lines_with(&img, &cfg) {
                csv.push_str(&format!("{},{},{},{}\n", b.x, b.y, b.w, b.h));
            }
        }
        LevelArg::Words => {
            for (_, words) in segment_page(&img, &cfg) {
                for b in words {
                    csv.push_str(&format!("{},{},{},{}\n", b.x, b.y, b.w, b.h));
                }
            }
        }
    }
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
