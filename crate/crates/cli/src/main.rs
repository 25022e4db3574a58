use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use loramud::channel::write_iq;
use loramud::harness::{
    parse_kv_pairs, run_single_user_trial, trial_seed, write_csv, Experiment, ExperimentConfig,
    SerRecord, TrialLog,
};

#[derive(Parser)]
#[command(name = "loramud", version, about = "Two-user LoRa receiver simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an SER sweep and write SNR,SERu,SERi rows.
    Simulate(Box<SimulateArgs>),
    /// Quick end-to-end consistency checks; exit code 0 when all pass.
    Selftest,
}

#[derive(Args)]
struct SimulateArgs {
    /// Key-value file with the same option names; flags given on the
    /// command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sf: Option<u8>,
    /// Chip offset of the second user.
    #[arg(long)]
    tau: Option<f64>,
    /// Carrier offset of the second user in Hz.
    #[arg(long, allow_hyphen_values = true)]
    dfc: Option<f64>,
    #[arg(long = "power-delta-db", allow_hyphen_values = true)]
    power_delta_db: Option<f64>,
    /// Weak-user SNR grid: start:stop:step, a comma list, or one value.
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    /// genie or estimated.
    #[arg(long)]
    sync: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "payload-len")]
    payload_len: Option<usize>,
    #[arg(long = "overlap-delay")]
    overlap_delay: Option<usize>,
    #[arg(long = "os-factor")]
    os_factor: Option<usize>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print sync detections of each point's first trial as JSON lines on stderr.
    #[arg(long)]
    verbose: bool,
    /// With --verbose, also print per-window detector decisions.
    #[arg(long = "debug-detector")]
    debug_detector: bool,
    /// Write the received samples of the first trial as interleaved f32 I/Q.
    #[arg(long = "iq-out")]
    iq_out: Option<PathBuf>,
}

impl SimulateArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, Option<PathBuf>)> {
        let mut cfg = ExperimentConfig::default();
        let mut out = None;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            for (k, v) in parse_kv_pairs(&text)? {
                if k == "out" {
                    out = Some(PathBuf::from(v));
                } else {
                    cfg.set(&k, &v).with_context(|| format!("in {}", path.display()))?;
                }
            }
        }
        let flags: [(&str, Option<String>); 10] = [
            ("sf", self.sf.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("dfc", self.dfc.map(|v| v.to_string())),
            ("power-delta-db", self.power_delta_db.map(|v| v.to_string())),
            ("snr", self.snr.clone()),
            ("trials", self.trials.map(|v| v.to_string())),
            ("sync", self.sync.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("payload-len", self.payload_len.map(|v| v.to_string())),
            ("overlap-delay", self.overlap_delay.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if let Some(r) = self.os_factor {
            cfg.set("os-factor", &r.to_string())?;
        }
        if self.out.is_some() {
            out.clone_from(&self.out);
        }
        cfg.validate()?;
        Ok((cfg, out))
    }
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let (cfg, out) = args.resolve()?;
    let exp = Experiment::new(cfg.clone())?;

    if let Some(path) = &args.iq_out {
        let draw = exp.draw(cfg.snr_grid_db[0], trial_seed(cfg.seed, 0, 0))?;
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_iq(&draw.realization.samples, BufWriter::new(f))?;
    }

    let mut records: Vec<SerRecord> = Vec::with_capacity(cfg.snr_grid_db.len());
    let stderr = io::stderr();
    for (p, &snr) in cfg.snr_grid_db.iter().enumerate() {
        if args.verbose {
            let mut log = TrialLog::default();
            exp.trial(snr, trial_seed(cfg.seed, p, 0), None, Some(&mut log))?;
            let mut e = stderr.lock();
            for line in &log.sync {
                writeln!(e, "{line}")?;
            }
            if args.debug_detector {
                for line in &log.windows {
                    writeln!(e, "{line}")?;
                }
            }
        }
        records.push(exp.point(p)?);
    }

    match out {
        Some(path) => write_csv(&records, &path).with_context(|| format!("writing {}", path.display()))?,
        None => {
            let rows: Vec<_> = records.iter().map(Into::into).collect();
            print!("{}", loramud::harness::format_csv(&rows));
        }
    }
    Ok(())
}

fn selftest() -> Result<()> {
    let mut failures = 0;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    for sf in 7..=12u8 {
        let cfg = loramud::LoraConfig::new(sf)?;
        let demod = loramud::phy::Demodulator::new(&cfg);
        let n = cfg.n_chips();
        let ok = [0, 1, n / 2, n - 1].iter().all(|&v| {
            let s = loramud::Symbol::new(v, &cfg).expect("in range");
            let x = loramud::phy::modulate(s, &cfg, false);
            demod.demod(&x).map(|(d, _)| d == s).unwrap_or(false)
        });
        check(&format!("noiseless round trip SF{sf}"), ok);
    }

    for (mode, tau) in [("genie", 64.0), ("genie", 16.5), ("estimated", 64.0), ("estimated", 16.0)] {
        let mut cfg = ExperimentConfig {
            tau_chips: tau,
            snr_grid_db: vec![20.0],
            trials_per_point: 4,
            ..ExperimentConfig::default()
        };
        cfg.set("sync", mode)?;
        let exp = Experiment::new(cfg)?;
        let r = exp.point(0)?;
        check(
            &format!("{mode} sync, tau {tau}, 20 dB: error free"),
            r.valid_trials == r.trials && r.errors_weak == 0 && r.errors_strong == 0,
        );
    }

    let cfg = ExperimentConfig::default();
    let c = run_single_user_trial(&cfg, -8.0, 11)?;
    check("silent second user: joint detector equals plain demodulator", c.pipeline == c.standalone);

    let small = ExperimentConfig {
        snr_grid_db: vec![-8.0],
        trials_per_point: 16,
        ..ExperimentConfig::default()
    };
    let a = loramud::harness::run_sweep(&small)?;
    let b = loramud::harness::run_sweep(&small)?;
    check("sweep determinism", a == b);

    if failures > 0 {
        bail!("{failures} self-test check(s) failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Selftest => selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
