use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aio_asr::checkpoint::{load_extlm, load_model, save_extlm, save_model};
use aio_asr::config::RunConfig;
use aio_asr::corpus::{corpus_ter, edit_distance, generate, read_split, write_corpus, Utterance};
use aio_asr::decode::{decode, DecodeMode, FusionWeights};
use aio_asr::dump::{attention_dump, write_dump};
use aio_asr::extlm::{train_extlm, ExternalLm};
use aio_asr::train::{train, Adam};
use aio_asr::{AioModel, Error, Result};

#[derive(Parser)]
#[command(name = "aio-asr", version, about = "Multi-mode joiner ASR on a synthetic token corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (train/dev/test directories).
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint offline + streaming training.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory produced by `gen`.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Resume from this checkpoint (parameters, optimizer state, epoch).
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
        /// Per-step loss log; defaults to `<out-ckpt>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Also write the checkpoint every N epochs (0: only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Decode one corpus split and report the token error rate.
    Decode {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// Split directory, e.g. `corpus/test`.
        #[arg(long)]
        corpus_split: PathBuf,
        /// hat | ctc | aed | aed-stream | joint
        #[arg(long)]
        mode: Option<DecodeMode>,
        #[arg(long)]
        streaming: bool,
        #[arg(long)]
        beam: Option<usize>,
        /// HAT weight in joint decoding; the AED weight is `1 - mu_hat`.
        #[arg(long)]
        mu_hat: Option<f64>,
        #[arg(long)]
        rho_extlm: Option<f64>,
        #[arg(long)]
        rho_ilm: Option<f64>,
        #[arg(long)]
        extlm_ckpt: Option<PathBuf>,
        /// Output directory for `nbest.tsv`, `hyp.tsv` and `ter.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Non-blank, sigmoid-attention and AED-attention series of one utterance.
    DumpAttention {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus_split: PathBuf,
        #[arg(long)]
        utt_id: String,
        #[arg(long)]
        streaming: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the external LM on the training transcripts.
    TrainExtlm {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut c = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    c.apply_seed_env()?;
    Ok(c)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_gen(config: Option<&Path>, out: &Path) -> Result<()> {
    let c = load_config(config)?;
    let corpus = generate(&c.corpus)?;
    write_corpus(out, &corpus)?;
    log::info!("wrote {} / {} / {} utterances to {}", corpus.train.len(), corpus.dev.len(), corpus.test.len(), out.display());
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    corpus: &Path,
    out_ckpt: &Path,
    init_ckpt: Option<&Path>,
    loss_csv: Option<&Path>,
    every: usize,
) -> Result<()> {
    let c = load_config(config)?;
    let data = read_split(&corpus.join("train"), c.model.feat_dim)?;
    let (mut model, mut opt, start) = match init_ckpt {
        Some(p) => {
            let (m, resume) = load_model(p, c.train.adam.clone())?;
            if m.config() != &c.model {
                log::warn!("model settings are taken from {}, not from the configuration", p.display());
            }
            match resume {
                Some((o, e)) => (m, o, e),
                None => {
                    let o = Adam::new(m.store(), c.train.adam.clone());
                    (m, o, 0)
                }
            }
        }
        None => {
            let m = AioModel::new(c.model.clone(), c.train.seed)?;
            let o = Adam::new(m.store(), c.train.adam.clone());
            (m, o, 0)
        }
    };
    let log = train(&mut model, &mut opt, &data, &c.train, start, |epoch, m, o| {
        if every > 0 && epoch % every == 0 {
            save_model(out_ckpt, m, Some((o, epoch)))?;
        }
        Ok(())
    })?;
    save_model(out_ckpt, &model, Some((&opt, start.max(c.train.epochs))))?;
    let csv = loss_csv.map_or_else(|| with_suffix(out_ckpt, ".loss.csv"), Path::to_path_buf);
    log.write_csv(fs::File::create(&csv)?)?;
    if log.skipped > 0 {
        log::warn!("{} utterance passes skipped as infeasible", log.skipped);
    }
    log::info!("checkpoint {}, loss log {}", out_ckpt.display(), csv.display());
    Ok(())
}

struct DecodeArgs<'a> {
    config: Option<&'a Path>,
    ckpt: &'a Path,
    split: &'a Path,
    mode: Option<DecodeMode>,
    streaming: bool,
    beam: Option<usize>,
    mu_hat: Option<f64>,
    rho_extlm: Option<f64>,
    rho_ilm: Option<f64>,
    extlm_ckpt: Option<&'a Path>,
    out: &'a Path,
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let mut c = load_config(a.config)?;
    let d = &mut c.decode;
    if let Some(m) = a.mode {
        d.mode = m;
    }
    if let Some(b) = a.beam {
        d.beam = b;
    }
    let w = d.weights;
    d.weights = match a.mu_hat {
        Some(mu) => FusionWeights::with_mu_hat(mu, a.rho_extlm.unwrap_or(w.rho_ext), a.rho_ilm.unwrap_or(w.rho_ilm))?,
        None => FusionWeights::new(w.mu_hat, w.mu_aed, a.rho_extlm.unwrap_or(w.rho_ext), a.rho_ilm.unwrap_or(w.rho_ilm))?,
    };
    let streaming = a.streaming || c.decode_streaming || d.mode == DecodeMode::AedStream;
    if streaming && d.mode == DecodeMode::AedOffline {
        return Err(Error::Config("--mode aed is offline; use --mode aed-stream for streaming AED".into()));
    }
    d.chunk = streaming.then_some(c.train.loss.chunk);
    if d.weights.rho_ext > 0.0 && a.extlm_ckpt.is_none() {
        return Err(Error::Config("--rho-extlm > 0 needs --extlm-ckpt".into()));
    }
    d.validate()?;
    let (model, _) = load_model(a.ckpt, c.train.adam.clone())?;
    let extlm = a.extlm_ckpt.map(load_extlm).transpose()?;
    let data = read_split(a.split, model.config().feat_dim)?;

    let mut nbest = String::new();
    let mut hyp = String::new();
    let mut best: Vec<Vec<usize>> = Vec::with_capacity(data.len());
    for u in &data {
        let hyps = decode(&model, &u.feats, &c.decode, extlm.as_ref())?;
        for (rank, h) in hyps.iter().enumerate() {
            writeln!(nbest, "{}\t{}\t{}", u.id, rank + 1, h.to_line()).expect("string write");
        }
        let top = hyps.first().map(|h| h.tokens.clone()).unwrap_or_default();
        writeln!(hyp, "{}\t{}", u.id, join(&top)).expect("string write");
        best.push(top);
    }
    let report = ter_report(&data, &best);
    fs::create_dir_all(a.out)?;
    fs::write(a.out.join("nbest.tsv"), nbest)?;
    fs::write(a.out.join("hyp.tsv"), hyp)?;
    fs::write(a.out.join("ter.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn ter_report(data: &[Utterance], hyps: &[Vec<usize>]) -> String {
    let edits: usize = data.iter().zip(hyps).map(|(u, h)| edit_distance(h, &u.tokens)).sum();
    let ref_len: usize = data.iter().map(|u| u.tokens.len().max(1)).sum();
    let ter = corpus_ter(data.iter().zip(hyps).map(|(u, h)| (h.as_slice(), u.tokens.as_slice())));
    format!("utterances\t{}\nedits\t{edits}\nref_tokens\t{ref_len}\nter\t{ter:.6}\n", data.len())
}

fn cmd_dump(config: Option<&Path>, ckpt: &Path, split: &Path, utt_id: &str, streaming: bool, out: &Path) -> Result<()> {
    let c = load_config(config)?;
    let (model, _) = load_model(ckpt, c.train.adam.clone())?;
    let data = read_split(split, model.config().feat_dim)?;
    let u = data
        .iter()
        .find(|u| u.id == utt_id)
        .ok_or_else(|| Error::InvalidInput(format!("no utterance {utt_id} in {}", split.display())))?;
    let chunk = streaming.then_some(c.train.loss.chunk);
    let d = attention_dump(&model, &u.feats, chunk, c.decode.max_symbols_per_frame)?;
    write_dump(out, &d)?;
    log::info!("{}: {} frames, {} tokens, written to {}", u.id, d.frames.len(), d.tokens.len(), out.display());
    Ok(())
}

fn cmd_train_extlm(config: Option<&Path>, corpus: &Path, out_ckpt: &Path) -> Result<()> {
    let c = load_config(config)?;
    let train: Vec<Vec<usize>> = read_split(&corpus.join("train"), c.corpus.feat_dim)?.into_iter().map(|u| u.tokens).collect();
    let dev_dir = corpus.join("dev");
    let dev: Vec<Vec<usize>> = if dev_dir.join("refs.tsv").exists() {
        read_split(&dev_dir, c.corpus.feat_dim)?.into_iter().map(|u| u.tokens).collect()
    } else {
        Vec::new()
    };
    let mut lm = ExternalLm::new(c.extlm.clone(), c.extlm_train.seed)?;
    let mut csv = String::from("epoch,train_ce,dev_ppl\n");
    train_extlm(&mut lm, &train, &c.extlm_train, |epoch, ce, lm| {
        let ppl = if dev.is_empty() { f64::NAN } else { lm.perplexity(&dev)? };
        log::info!("extlm epoch {epoch}: dev perplexity {ppl:.4}");
        writeln!(csv, "{epoch},{ce},{ppl}").expect("string write");
        Ok(())
    })?;
    save_extlm(out_ckpt, &lm)?;
    fs::write(with_suffix(out_ckpt, ".ppl.csv"), csv)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { config, out } => cmd_gen(config.as_deref(), out),
        Command::Train { config, corpus, out_ckpt, init_ckpt, loss_csv, checkpoint_every } => {
            cmd_train(config.as_deref(), corpus, out_ckpt, init_ckpt.as_deref(), loss_csv.as_deref(), *checkpoint_every)
        }
        Command::Decode { config, ckpt, corpus_split, mode, streaming, beam, mu_hat, rho_extlm, rho_ilm, extlm_ckpt, out } => {
            cmd_decode(DecodeArgs {
                config: config.as_deref(),
                ckpt,
                split: corpus_split,
                mode: *mode,
                streaming: *streaming,
                beam: *beam,
                mu_hat: *mu_hat,
                rho_extlm: *rho_extlm,
                rho_ilm: *rho_ilm,
                extlm_ckpt: extlm_ckpt.as_deref(),
                out,
            })
        }
        Command::DumpAttention { config, ckpt, corpus_split, utt_id, streaming, out } => {
            cmd_dump(config.as_deref(), ckpt, corpus_split, utt_id, *streaming, out)
        }
        Command::TrainExtlm { config, corpus, out_ckpt } => cmd_train_extlm(config.as_deref(), corpus, out_ckpt),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
