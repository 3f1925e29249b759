//! `cbf`: separate, simulate and evaluate multichannel recordings.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{error::ErrorKind, CommandFactory, Parser, Subcommand, ValueEnum};
use ndarray::{s, Array3};

use cbf::io::{read_prior, read_wav, write_prior, write_wav, Report};
use cbf::metrics::{self, FwssnrParams};
use cbf::simulate::{gen_reverberant_system, gen_sources, mix, source_image};
use cbf::{analyze, run, synthesize, Mode, PipelineConfig, PriorSpectra, StftParams, TimeSignal};

#[derive(Parser, Debug)]
#[command(name = "cbf", version, about = "Joint dereverberation, denoising and separation with a convolutional beamformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    BlindIve,
    BlindCoarseFine,
    NnGuided,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::BlindIve => Mode::BlindIve,
            ModeArg::BlindCoarseFine => Mode::BlindCoarseFine,
            ModeArg::NnGuided => Mode::NnGuided,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    SiSdr,
    Fwssnr,
    Cd,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Separate a multichannel WAV into one WAV per source.
    Separate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of speech sources J (must be below the channel count).
        #[arg(long)]
        sources: usize,
        #[arg(long, value_enum, default_value = "blind-coarse-fine")]
        mode: ModeArg,
        /// Prior spectra file, required for nn-guided mode.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Prediction delay in frames.
        #[arg(long, default_value_t = 2)]
        delay: usize,
        #[arg(long, default_value_t = 10)]
        wpe_iters: usize,
        #[arg(long, default_value_t = 100)]
        ive_iters: usize,
        #[arg(long, default_value_t = 0)]
        ref_mic: usize,
        /// Where to write the diagnostics JSON (default: OUT_DIR/diagnostics.json).
        #[arg(long)]
        seed_report: Option<PathBuf>,
    },
    /// Generate a synthetic reverberant mixture with references and an oracle prior.
    Simulate {
        #[arg(long, default_value_t = 4)]
        mics: usize,
        #[arg(long, default_value_t = 2)]
        sources: usize,
        /// Mixing filter length in samples.
        #[arg(long, default_value_t = 4800)]
        taps: usize,
        #[arg(long, default_value_t = 300.0)]
        decay_ms: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Length in seconds.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
        /// Level of each noise source relative to the speech sources, in dB.
        #[arg(long, default_value_t = -10.0, allow_hyphen_values = true)]
        noise_db: f64,
    },
    /// Score estimates against references (channel by channel) and print JSON.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "si-sdr,fwssnr,cd")]
        metrics: Vec<MetricArg>,
    },
}

/// Length of the mixing-filter head whose image the simulated prior describes.
const EARLY_MS: f64 = 16.0;

fn usage_error(kind: ErrorKind, msg: String) -> ! {
    Cli::command().error(kind, msg).exit()
}

fn separate(
    input: &Path,
    out_dir: &Path,
    cfg: PipelineConfig,
    prior_path: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<()> {
    let signal = read_wav(input).with_context(|| format!("reading {}", input.display()))?;
    if cfg.num_sources >= signal.channels() {
        usage_error(
            ErrorKind::ValueValidation,
            format!("--sources {} must be below the {} input channels", cfg.num_sources, signal.channels()),
        );
    }
    let spec = analyze(&signal, &StftParams::for_sample_rate(signal.sample_rate())?)?;
    let cfg = PipelineConfig { num_mics: signal.channels(), ..cfg };
    let prior = match prior_path {
        Some(p) => Some(
            read_prior(p, (spec.num_bins(), spec.num_frames(), cfg.num_sources))
                .with_context(|| format!("reading prior {}", p.display()))?,
        ),
        None => None,
    };
    let out = run(&spec, &cfg, prior.as_ref())?;
    let separated = synthesize(&out.sources)?;

    fs::create_dir_all(out_dir)?;
    for j in 0..cfg.num_sources {
        let mono = TimeSignal::mono(&separated.channel(j).to_vec(), separated.sample_rate())?;
        write_wav(out_dir.join(format!("source_{}.wav", j + 1)), &mono)?;
    }
    let report_path = report_path.map(Path::to_path_buf).unwrap_or_else(|| out_dir.join("diagnostics.json"));
    Report::new(&out, &cfg).write(&report_path)?;
    eprintln!(
        "separated {} sources in {} passes ({} ms); final log-likelihood {:.6e}",
        cfg.num_sources,
        out.diagnostics.ive_passes,
        out.wall_ms,
        out.diagnostics.likelihood.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

struct SimulateArgs {
    mics: usize,
    sources: usize,
    taps: usize,
    decay_ms: f64,
    seed: u64,
    duration: f64,
    sample_rate: u32,
    noise_db: f64,
}

fn simulate(a: &SimulateArgs, out: &Path) -> Result<()> {
    if a.sources == 0 || a.sources >= a.mics {
        usage_error(ErrorKind::ValueValidation, format!("need 1 <= --sources < --mics, got {} and {}", a.sources, a.mics));
    }
    let n = (a.duration * a.sample_rate as f64).round() as usize;
    let raw = gen_sources(n, a.sources, a.mics, a.sample_rate, a.seed)?;
    let gain = 10f64.powf(a.noise_db / 20.0);
    let mut samples = raw.into_samples();
    for k in a.sources..a.mics {
        samples.row_mut(k).mapv_inplace(|v| v * gain);
    }
    let sources = TimeSignal::new(samples, a.sample_rate)?;
    let system = gen_reverberant_system(a.mics, a.taps, a.decay_ms, a.sample_rate, a.seed)?;
    let mixture = mix(&sources, &system)?;

    fs::create_dir_all(out)?;
    write_wav(out.join("mixture.wav"), &mixture)?;
    let params = StftParams::for_sample_rate(a.sample_rate)?;
    let frames = params.num_frames(n);
    let mut gamma = Array3::zeros((params.num_bins(), frames, a.sources));
    let early_taps = ((EARLY_MS * a.sample_rate as f64 / 1000.0).round() as usize).max(1);
    for j in 0..a.sources {
        let dry = TimeSignal::mono(&sources.channel(j).to_vec(), a.sample_rate)?;
        write_wav(out.join(format!("dry_{}.wav", j + 1)), &dry)?;
        let image = source_image(&sources, &system, j, None)?;
        write_wav(out.join(format!("image_{}.wav", j + 1)), &image)?;
        let early = source_image(&sources, &system, j, Some(early_taps))?;
        let at_ref = TimeSignal::mono(&early.channel(0).to_vec(), a.sample_rate)?;
        let spec = analyze(&at_ref, &params)?;
        gamma.slice_mut(s![.., .., j]).assign(&spec.data().slice(s![.., .., 0]).mapv(|v| v.norm_sqr()));
    }
    write_prior(out.join("prior.cbfp"), &PriorSpectra::new(gamma)?)?;
    Ok(())
}

fn evaluate(estimate: &Path, reference: &Path, wanted: &[MetricArg]) -> Result<serde_json::Value> {
    let est = read_wav(estimate).with_context(|| format!("reading {}", estimate.display()))?;
    let reff = read_wav(reference).with_context(|| format!("reading {}", reference.display()))?;
    if est.channels() != reff.channels() {
        bail!("estimate has {} channels, reference {}", est.channels(), reff.channels());
    }
    if est.sample_rate() != reff.sample_rate() {
        bail!("sample rates differ: {} vs {}", est.sample_rate(), reff.sample_rate());
    }
    let rate = reff.sample_rate();
    let mut channels = Vec::new();
    for c in 0..reff.channels() {
        let e = est.channel(c).to_vec();
        let r = reff.channel(c).to_vec();
        let mut scores = serde_json::Map::new();
        for m in wanted {
            let (key, value) = match m {
                MetricArg::SiSdr => ("si_sdr", metrics::si_sdr(&e, &r)?),
                MetricArg::Fwssnr => ("fwssnr", metrics::fwssnr(&e, &r, &FwssnrParams::new(rate)?)?),
                MetricArg::Cd => ("cd", metrics::cepstral_distance(&e, &r, metrics::CEPSTRAL_ORDER, rate)?),
            };
            scores.insert(key.into(), serde_json::json!(value));
        }
        channels.push(serde_json::Value::Object(scores));
    }
    Ok(serde_json::json!({ "channels": channels }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Separate { input, out_dir, sources, mode, prior, delay, wpe_iters, ive_iters, ref_mic, seed_report } => {
            let mode = Mode::from(mode);
            if mode == Mode::NnGuided && prior.is_none() {
                usage_error(ErrorKind::MissingRequiredArgument, "--mode nn-guided requires --prior FILE".into());
            }
            if mode != Mode::NnGuided && prior.is_some() {
                usage_error(ErrorKind::ArgumentConflict, "--prior is only used with --mode nn-guided".into());
            }
            let cfg = PipelineConfig {
                delay,
                wpe_iters,
                ive_iters,
                mode,
                reference_mic: ref_mic,
                ..PipelineConfig::new(sources + 1, sources)
            };
            separate(&input, &out_dir, cfg, prior.as_deref(), seed_report.as_deref())
        }
        Command::Simulate { mics, sources, taps, decay_ms, seed, out, duration, sample_rate, noise_db } => {
            let args = SimulateArgs { mics, sources, taps, decay_ms, seed, duration, sample_rate, noise_db };
            simulate(&args, &out)
        }
        Command::Evaluate { estimate, reference, metrics } => evaluate(&estimate, &reference, &metrics).map(|v| {
            println!("{}", serde_json::to_string_pretty(&v).expect("metrics serialize"));
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
