use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use greenlist::attacks::{
    greenaware_attack, greenaware_bigram_attack, random_edit_attack, random_swap_attack, rate_to_budget, EditMix,
};
use greenlist::certificates::{certified_edit_budget, PenaltyBound};
use greenlist::detector::{detect_any, effective_gamma, Detector, Threshold, DEFAULT_TAU};
use greenlist::divergence::{parse_alpha_list, quality_sweep};
use greenlist::harness::{self, ExperimentConfig, ModelSpec};
use greenlist::io::{self, Vocabulary};
use greenlist::par::Execution;
use greenlist::partition::keygen;
use greenlist::rng;
use greenlist::watermarker::{generate, Decoding, GenerationConfig};
use greenlist::{Scheme, WatermarkKey};

#[derive(Parser)]
#[command(name = "greenlist", version = greenlist::VERSION, about = "Green/red-list watermarking for token streams")]
struct Cli {
    /// Run trial loops on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a watermark key from a seed.
    Keygen {
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 2.0)]
        delta: f64,
        #[arg(long, default_value = "fixed-split")]
        scheme: Scheme,
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample tokens from a synthetic model, watermarked when a key is given.
    Generate {
        #[arg(long)]
        model: ModelSpec,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "multinomial")]
        decoding: Decoding,
        /// Token file to condition on.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a token file and write a detection report.
    Detect {
        #[arg(long)]
        key: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, conflicts_with = "alpha")]
        tau: Option<f64>,
        /// Use the input-adaptive threshold at this false-positive level.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Certified edit budget for a token file.
    Certify {
        #[arg(long)]
        key: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// `normalized` is sound for the z-score; `stated` is the published formula.
        #[arg(long, default_value = "normalized")]
        bound: PenaltyBound,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a bounded-edit attack to a token file.
    Attack {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, required_unless_present = "rate", conflicts_with = "rate")]
        eta: Option<usize>,
        /// Edit count as a fraction of the length, rounded.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, default_value = "ins:0,del:0,rep:1")]
        mix: EditMix,
        /// Random swaps (two edits each) instead of the mix.
        #[arg(long, conflicts_with = "greenaware")]
        swap: bool,
        /// Replace green tokens with red ones; needs --key.
        #[arg(long, requires = "key")]
        greenaware: bool,
        #[arg(long)]
        key: Option<PathBuf>,
        /// Vocabulary size for random tokens; defaults to the key's.
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the per-step quality bound on random distributions.
    QualityCheck {
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 100)]
        vocab: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value = "0.5,1,2,10,inf")]
        alphas: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo experiment from a config file.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Report path; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-trial CSV path; overrides the config's `csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Map whitespace-separated words to token ids.
    Tokenize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Add unseen words to the vocabulary file instead of mapping them to <unk>.
        #[arg(long)]
        grow: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::Keygen {
            gamma,
            delta,
            scheme,
            vocab,
            seed,
            out,
        } => {
            let key = keygen(gamma, delta, scheme, vocab, &mut rng::from_u64(seed))?;
            key.save(&out)?;
            println!("wrote {} key (gamma={gamma}, N={vocab}) to {}", scheme, out.display());
        }
        Command::Generate {
            model,
            key,
            n,
            decoding,
            prompt,
            seed,
            out,
        } => {
            let key = key.map(WatermarkKey::load).transpose()?;
            let prompt = prompt.map(io::read_tokens).transpose()?.unwrap_or_default();
            io::check_vocab(&prompt, model.vocab_size())?;
            let lm = model.build()?;
            let tokens = generate(lm.as_ref(), &prompt, key.as_ref(), &GenerationConfig::new(n, decoding, seed)?)?;
            io::write_tokens(&out, &tokens)?;
            println!("wrote {} tokens to {}", tokens.len(), out.display());
        }
        Command::Detect {
            key,
            input,
            tau,
            alpha,
            report,
        } => {
            let key = WatermarkKey::load(key)?;
            let tokens = io::read_tokens(&input)?;
            let threshold = match alpha {
                Some(alpha) => Threshold::Adaptive { alpha },
                None => Threshold::Fixed(tau.unwrap_or(DEFAULT_TAU)),
            };
            let r = detect_any(&tokens, &key, threshold)?;
            write_json(&r, Some(&report))?;
            println!("z = {:.4}, tau = {:.4}, decision = {}", r.z, r.tau, r.decision);
        }
        Command::Certify {
            key,
            input,
            tau,
            bound,
            out,
        } => {
            let key = WatermarkKey::load(key)?;
            let tokens = io::read_tokens(&input)?;
            let z = Detector::new(&key)?.z(&tokens)?;
            let Some(z) = z else {
                bail!("{} has too few tokens to score", input.display());
            };
            let n = match key.scheme {
                Scheme::FixedSplit => tokens.len(),
                Scheme::BigramHash => tokens.len() - 1,
            };
            let cert = certified_edit_budget(z, n, effective_gamma(&key), tau, key.scheme, bound)?;
            write_json(&cert, out.as_deref())?;
        }
        Command::Attack {
            input,
            eta,
            rate,
            mix,
            swap,
            greenaware,
            key,
            vocab,
            seed,
            out,
        } => {
            let tokens = io::read_tokens(&input)?;
            let key = key.map(WatermarkKey::load).transpose()?;
            let eta = match (eta, rate) {
                (Some(eta), _) => eta,
                (None, Some(rate)) => rate_to_budget(rate, tokens.len())?,
                (None, None) => unreachable!("clap requires one of --eta/--rate"),
            };
            let mut r = rng::from_u64(seed);
            let result = if greenaware {
                let key = key.as_ref().expect("clap requires --key");
                io::check_vocab(&tokens, key.vocab_size)?;
                match Detector::new(key)? {
                    Detector::Fixed { green, .. } => greenaware_attack(&tokens, &green, eta, &mut r)?,
                    Detector::Bigram(mut lists) => greenaware_bigram_attack(&tokens, &mut lists, eta, &mut r)?,
                }
            } else if swap {
                random_swap_attack(&tokens, eta, &mut r)
            } else {
                let Some(vocab) = vocab.or(key.as_ref().map(|k| k.vocab_size)) else {
                    bail!("random attacks need --vocab or --key to draw replacement tokens");
                };
                random_edit_attack(&tokens, eta, mix, vocab, &mut r)?
            };
            io::write_tokens(&out, &result.tokens)?;
            println!(
                "applied {} of {eta} edits{}; wrote {} tokens to {}",
                result.applied,
                if result.emptied { " (output emptied)" } else { "" },
                result.tokens.len(),
                out.display()
            );
        }
        Command::QualityCheck {
            delta,
            gamma,
            vocab,
            trials,
            alphas,
            seed,
            out,
        } => {
            let grid = parse_alpha_list(&alphas)?;
            let sweep = quality_sweep(delta, gamma, vocab, trials, &grid, seed, exec)?;
            write_json(&sweep, out.as_deref())?;
            if out.is_some() {
                println!("{}", if sweep.pass { "PASS" } else { "FAIL" });
            }
        }
        Command::Evaluate { config, out, csv } => {
            let cfg = ExperimentConfig::load(&config)?;
            let started = Instant::now();
            let report = harness::run(&cfg, exec)?;
            eprintln!("{} finished in {:.2?}", cfg.experiment, started.elapsed());
            match out.or(cfg.output.clone()) {
                Some(path) => harness::emit_report(&report, &path)?,
                None => print!("{}", report.to_json()),
            }
            if let Some(path) = csv.or(cfg.csv.clone()) {
                harness::emit_trials_csv(&report, &path)?;
            }
        }
        Command::Tokenize {
            input,
            vocab,
            grow,
            out,
        } => {
            let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let mut v = if vocab.exists() {
                Vocabulary::load(&vocab)?
            } else if grow {
                Vocabulary::new()
            } else {
                bail!("vocabulary {} does not exist; pass --grow to create it", vocab.display());
            };
            let tokens = v.encode(&text, grow);
            if grow {
                v.save(&vocab)?;
            }
            io::write_tokens(&out, &tokens)?;
            println!("wrote {} tokens ({} words in vocabulary)", tokens.len(), v.len());
        }
    }
    Ok(())
}
