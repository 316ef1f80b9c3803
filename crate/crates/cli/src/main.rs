use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use payslice::campaign::{read_history, run_campaign, write_history, CampaignConfig, CohortSpec, ResponseModel};
use payslice::crypto::Purpose;
use payslice::harness::{analyze, emit_report};
use payslice::model::{CohortKey, CompensationData, MemberProfile, Timestamp};
use payslice::pipeline::{self, Pipeline, PipelineConfig, PipelineError, PipelineKeys, PASSPHRASE_ENV};
use payslice::synth;

#[derive(Parser)]
#[command(name = "payslice", version, about = "Privacy-preserving compensation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create missing keystores, or rotate one purpose's key.
    Keygen {
        #[arg(long)]
        config: PathBuf,
        /// attributes, compensation or threshold
        #[arg(long)]
        rotate: Option<Purpose>,
        #[arg(long)]
        at: Option<String>,
    },
    /// Submit one profile and compensation record.
    Submit {
        #[arg(long)]
        config: PathBuf,
        /// JSON member profile.
        #[arg(long)]
        profile: PathBuf,
        /// JSON compensation record, amounts in minor units.
        #[arg(long)]
        compensation: PathBuf,
        #[arg(long)]
        at: Option<String>,
    },
    /// Run a two-wave email campaign and write its history as JSONL.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        cohorts: usize,
        /// JSONL of {cohort_key, population}; overrides --cohorts.
        #[arg(long)]
        cohorts_file: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        alpha: u64,
        #[arg(long, default_value_t = 1_000)]
        min_population: u64,
        #[arg(long, default_value_t = 20_000)]
        max_population: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Feed a campaign history through the pipeline and publish insights.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        history: PathBuf,
    },
    /// Regenerate all derived stores by replaying the submission journal.
    Bootstrap {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compute response, availability and delay analyses for a history.
    Analyze {
        #[arg(long)]
        history: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,8,10")]
        k: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the manifest of the last run.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
    /// Look up insights for a cohort on behalf of a member.
    Query {
        #[arg(long)]
        config: PathBuf,
        /// e.g. `title-country:title=software-engineer,country=US`
        #[arg(long)]
        cohort: CohortKey,
        #[arg(long)]
        member: String,
        #[arg(long)]
        at: Option<String>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure { code: e.exit_code() as u8, message: e.to_string() }
    }
}

fn config_err(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn data_err(message: impl Into<String>) -> Failure {
    Failure { code: 3, message: message.into() }
}

fn passphrase() -> Result<String, Failure> {
    std::env::var(PASSPHRASE_ENV).map_err(|_| config_err(format!("{PASSPHRASE_ENV} is not set")))
}

fn timestamp(at: Option<&str>) -> Result<Timestamp, Failure> {
    match at {
        Some(s) => Timestamp::parse_rfc3339(s).map_err(|e| data_err(format!("bad timestamp `{s}`: {e}"))),
        None => {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_err(|e| data_err(e.to_string()))?
                .as_secs();
            Ok(Timestamp::from_unix(secs as i64))
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn load(config: &Path) -> Result<(PipelineConfig, PipelineKeys), Failure> {
    let cfg = PipelineConfig::load(config)?;
    let keys = PipelineKeys::load(&cfg, &passphrase()?)?;
    Ok((cfg, keys))
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Keygen { config, rotate, at } => {
            let cfg = PipelineConfig::load(&config)?;
            let pass = passphrase()?;
            let now = timestamp(at.as_deref())?;
            match rotate {
                Some(purpose) => {
                    let r = pipeline::rotate_key(&cfg, purpose, &pass, now)?;
                    println!("{} rotated to v{}, {} envelopes rewrapped", purpose.as_str(), r.new_version, r.rewrapped);
                }
                None => {
                    for (purpose, v) in pipeline::keygen(&cfg, &pass, now)? {
                        println!("{} v{v}", purpose.as_str());
                    }
                }
            }
        }
        Command::Submit { config, profile, compensation, at } => {
            let (cfg, keys) = load(&config)?;
            let member: MemberProfile = read_json(&profile)?;
            let comp: CompensationData = read_json(&compensation)?;
            let now = timestamp(at.as_deref())?;
            let mut p = Pipeline::open(cfg, keys)?;
            let result = p.submit(&member, &comp, now);
            p.checkpoint()?;
            let receipt = result?;
            println!("{}", receipt.submission_id);
        }
        Command::Simulate { config, cohorts, cohorts_file, alpha, min_population, max_population, out } => {
            let cfg = PipelineConfig::load(&config)?;
            if min_population > max_population {
                return Err(config_err("--min-population exceeds --max-population"));
            }
            let specs: Vec<CohortSpec> = match cohorts_file {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
                    text.lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(serde_json::from_str)
                        .collect::<Result<_, _>>()
                        .map_err(|e| data_err(format!("{}: {e}", path.display())))?
                }
                None => {
                    let std = cfg.standardizer()?;
                    synth::cohort_specs(&std, &cfg.currencies, cohorts, min_population, max_population, cfg.seed)
                }
            };
            let k = cfg.slice_types.iter().map(|s| s.min_threshold).max().unwrap_or(1);
            let mut campaign = CampaignConfig::new(alpha, cfg.seed, k);
            campaign.min_population = campaign.min_population.min(min_population);
            let outcome = run_campaign(&specs, &ResponseModel::default(), &campaign);
            std::fs::write(&out, write_history(&outcome.history)).map_err(|e| data_err(format!("{}: {e}", out.display())))?;
            let responses = outcome.history.iter().filter(|h| h.submitted_at.is_some()).count();
            println!(
                "{} cohorts targeted, {} emails, {} responses -> {}",
                outcome.plans.len(),
                outcome.history.len(),
                responses,
                out.display()
            );
        }
        Command::Run { config, history } => {
            let (cfg, keys) = load(&config)?;
            let text = std::fs::read_to_string(&history).map_err(|e| data_err(format!("{}: {e}", history.display())))?;
            let records = read_history(&text).map_err(|e| data_err(format!("{}: {e}", history.display())))?;
            print_json(&pipeline::run(cfg, keys, &records)?);
        }
        Command::Bootstrap { config } => {
            let (cfg, keys) = load(&config)?;
            print_json(&pipeline::bootstrap(cfg, keys)?);
        }
        Command::Analyze { history, k, out } => {
            if k.is_empty() || k.contains(&0) {
                return Err(config_err("--k needs positive thresholds"));
            }
            let text = std::fs::read_to_string(&history).map_err(|e| data_err(format!("{}: {e}", history.display())))?;
            let records = read_history(&text).map_err(|e| data_err(format!("{}: {e}", history.display())))?;
            let report = analyze(&records, &k).map_err(|e| data_err(e.to_string()))?;
            std::fs::create_dir_all(&out).map_err(|e| data_err(e.to_string()))?;
            for path in emit_report(&report, &out).map_err(|e| data_err(e.to_string()))? {
                println!("{}", path.display());
            }
        }
        Command::Report { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let path = cfg.layout().manifest();
            let text = std::fs::read_to_string(&path).map_err(|_| data_err(format!("no manifest at {}", path.display())))?;
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
        }
        Command::Query { config, cohort, member, at } => {
            let (cfg, keys) = load(&config)?;
            let now = timestamp(at.as_deref())?;
            let p = Pipeline::open(cfg, keys)?;
            print_json(&p.query(&cohort, &member, now)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
