use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use pkd::entropy::{parse_seed_hex, EntropySource, Seed};
use pkd::gowf::Params;
use pkd::protocol::{
    run_alice, run_alice_session, run_bob, run_bob_session, KeyMaterial, ReconcileMode, Role, SessionConfig,
    SessionResult,
};
use pkd::stats::{format_table, run_suite, write_csv, Suite, SuiteOptions};
use pkd::transport::{loopback_pair, Channel, TcpChannel, DEFAULT_TIMEOUT};
use pkd::PkdError;

const EXIT_VERIFY: u8 = 1;
const EXIT_ABORT: u8 = 2;
const EXIT_USAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "pkd", version, about = "Probability key distribution sessions and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a key-material file sized for N sessions.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        sessions: u64,
        /// Sessions allowed on one K_fix (defaults to --sessions).
        #[arg(long)]
        reuse_limit: Option<u64>,
        #[arg(long, env = "PKD_SEED")]
        seed: Option<String>,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Listen and run sessions as Alice.
    Alice {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        listen: String,
        #[arg(long, default_value_t = 1)]
        sessions: u64,
        #[arg(long, env = "PKD_SEED")]
        seed: Option<String>,
        #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
        timeout_secs: u64,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Connect and run sessions as Bob.
    Bob {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        connect: String,
        #[arg(long, default_value_t = 1)]
        sessions: u64,
        #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
        timeout_secs: u64,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Run both roles over an in-memory channel.
    Simulate {
        #[arg(long, default_value_t = 1)]
        sessions: u64,
        #[arg(long, env = "PKD_SEED")]
        seed: Option<String>,
        /// Debit this key-material file instead of deriving keys from the seed.
        #[arg(long)]
        keys: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Run statistical checks; exits 1 if any fails.
    VerifyStats {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 1024)]
        m: u64,
        #[arg(long, default_value_t = 12)]
        b: u32,
        #[arg(long, default_value_t = 1_000_000)]
        trials: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, env = "PKD_SEED")]
        seed: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Discrimination,
    Joint,
    Ber,
    Entropy,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Clear,
    Otp,
}

#[derive(Args, Clone)]
struct SessionArgs {
    #[arg(long, default_value_t = 1024)]
    m: u64,
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    #[arg(long, default_value_t = 12)]
    b: u32,
    #[arg(long, default_value_t = 10_000)]
    s: usize,
    #[arg(long, default_value_t = 1e-15)]
    eps_cor: f64,
    #[arg(long, default_value_t = 1e-10)]
    eps_sec: f64,
    #[arg(long, default_value_t = 1.6)]
    f_max: f64,
    #[arg(long, default_value_t = 4)]
    passes: u32,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Clear)]
    reconcile_mode: ModeArg,
}

impl SessionArgs {
    fn config(&self) -> Result<SessionConfig, PkdError> {
        let params = Params {
            m: self.m,
            n: self.n,
            b: self.b,
            s: self.s,
            eps_cor: self.eps_cor,
            eps_sec: self.eps_sec,
            f_max: self.f_max,
        };
        let mut cfg = SessionConfig::new(params);
        cfg.passes = self.passes;
        if let Some(k) = self.block_size {
            cfg.initial_block_size = k;
        }
        cfg.mode = match self.reconcile_mode {
            ModeArg::Clear => ReconcileMode::Clear,
            ModeArg::Otp => ReconcileMode::Otp,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_USAGE, message: e.to_string() }
    }
}

impl From<PkdError> for Failure {
    fn from(e: PkdError) -> Self {
        let code = match e {
            PkdError::InvalidParams(_) | PkdError::InvalidInput(_) => EXIT_USAGE,
            _ => EXIT_VERIFY,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self { code: EXIT_VERIFY, message: e.to_string() }
    }
}

fn seed_or_system(seed: Option<&str>) -> Result<Option<Seed>, Failure> {
    seed.map(parse_seed_hex).transpose().map_err(Failure::usage)
}

fn source_for(seed: Option<Seed>) -> EntropySource {
    match seed {
        Some(s) => EntropySource::seeded(s),
        None => EntropySource::system(),
    }
}

fn emit(out: &mut impl Write, result: &SessionResult) -> Result<(), Failure> {
    let line = serde_json::to_string(result).map_err(|e| Failure { code: EXIT_VERIFY, message: e.to_string() })?;
    writeln!(out, "{line}")?;
    out.flush()?;
    Ok(())
}

fn report_abort(result: &SessionResult) {
    if let Some(reason) = result.aborted {
        let role = match result.role {
            Role::Alice => "alice",
            Role::Bob => "bob",
        };
        eprintln!("session {} ({role}) aborted: {reason}", result.session);
    }
}

fn keygen(
    out: &Path,
    sessions: u64,
    reuse_limit: Option<u64>,
    seed: Option<&str>,
    args: &SessionArgs,
) -> Result<(), Failure> {
    let cfg = args.config()?;
    let mut source = source_for(seed_or_system(seed)?);
    let extra = match cfg.mode {
        ReconcileMode::Clear => 0,
        ReconcileMode::Otp => cfg.otp_budget(),
    };
    let km = KeyMaterial::generate(&cfg.params, sessions, extra, reuse_limit.unwrap_or(sessions), &mut source)?;
    km.save(out)?;
    eprintln!(
        "wrote {}: K_fix {} bits, reserve {} bits for {sessions} session(s)",
        out.display(),
        km.k_fix().len(),
        km.reserve_remaining()
    );
    Ok(())
}

fn run_sessions<C: Channel>(
    role: Role,
    cfg: &SessionConfig,
    keys_path: &Path,
    sessions: u64,
    channel: &mut C,
    mut source: Option<EntropySource>,
) -> Result<(), Failure> {
    let mut keys = KeyMaterial::load(keys_path)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for _ in 0..sessions {
        let result = match (role, source.as_mut()) {
            (Role::Alice, Some(src)) => run_alice(cfg, &mut keys, channel, src)?,
            _ => run_bob(cfg, &mut keys, channel)?,
        };
        keys.save(keys_path)?;
        emit(&mut out, &result)?;
        if let Some(reason) = result.aborted {
            report_abort(&result);
            return Err(Failure { code: EXIT_ABORT, message: format!("session aborted: {reason}") });
        }
    }
    Ok(())
}

fn alice(
    keys: &Path,
    listen: &str,
    sessions: u64,
    seed: Option<&str>,
    timeout: Duration,
    args: &SessionArgs,
) -> Result<(), Failure> {
    let cfg = args.config()?;
    let source = source_for(seed_or_system(seed)?);
    let listener = TcpListener::bind(listen)?;
    eprintln!("listening on {}", listener.local_addr()?);
    let mut channel = TcpChannel::accept(&listener, timeout)?;
    run_sessions(Role::Alice, &cfg, keys, sessions, &mut channel, Some(source))
}

fn bob(keys: &Path, connect: &str, sessions: u64, timeout: Duration, args: &SessionArgs) -> Result<(), Failure> {
    let cfg = args.config()?;
    let deadline = Instant::now() + timeout;
    let mut channel = loop {
        match TcpChannel::connect(connect, timeout) {
            Ok(c) => break c,
            Err(e) if Instant::now() < deadline && e.kind() == io::ErrorKind::ConnectionRefused => {
                thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(e.into()),
        }
    };
    run_sessions(Role::Bob, &cfg, keys, sessions, &mut channel, None)
}

fn simulate(
    sessions: u64,
    seed: Option<&str>,
    keys_path: Option<&Path>,
    jobs: usize,
    args: &SessionArgs,
) -> Result<(), Failure> {
    let cfg = args.config()?;
    let seed = seed_or_system(seed)?.unwrap_or_else(|| EntropySource::system().draw_seed());
    let jobs = if cfg.mode == ReconcileMode::Otp { 1 } else { jobs.max(1) };

    let (mut ka, mut kb) = match keys_path {
        Some(p) => (KeyMaterial::load(p)?, KeyMaterial::load(p)?),
        None => {
            let extra = if cfg.mode == ReconcileMode::Otp { cfg.otp_budget() } else { 0 };
            let mut src = EntropySource::seeded_stream(seed, 0);
            let km = KeyMaterial::generate(&cfg.params, sessions, extra, sessions, &mut src)?;
            let mut buf = Vec::new();
            km.write_to(&mut buf)?;
            (km, KeyMaterial::read_from(&buf[..])?)
        }
    };
    ka.check_params(&cfg.params)?;

    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut aborted = None;
    let mut next = 0u64;
    while next < sessions && aborted.is_none() {
        let batch = (sessions - next).min(jobs as u64);
        let mut slices = Vec::new();
        for _ in 0..batch {
            match (ka.allocate(&cfg), kb.allocate(&cfg)) {
                (Ok(a), Ok(b)) => slices.push((a, b)),
                (Err(reason), _) | (_, Err(reason)) => {
                    let session = ka.k_fix_uses();
                    aborted = Some(reason);
                    let refused = [Role::Alice, Role::Bob].map(|r| SessionResult::refused(r, &cfg, session, reason));
                    slices.clear();
                    for r in &refused {
                        emit(&mut out, r)?;
                        report_abort(r);
                    }
                    break;
                }
            }
        }
        let results: Vec<(SessionResult, SessionResult)> = thread::scope(|scope| {
            let handles: Vec<_> = slices
                .iter()
                .map(|(sa, sb)| {
                    let cfg = &cfg;
                    scope.spawn(move || {
                        let (mut ca, mut cb) = loopback_pair();
                        let mut src = EntropySource::seeded_stream(seed, 1 + sa.index);
                        let alice = thread::scope(|inner| {
                            let h = inner.spawn(|| run_alice_session(cfg, sa, &mut ca, &mut src));
                            let rb = run_bob_session(cfg, sb, &mut cb);
                            (h.join().expect("alice thread panicked"), rb)
                        });
                        alice
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("session thread panicked")).collect()
        });
        for (ra, rb) in &results {
            ka.settle(ra.pad_bits);
            kb.settle(rb.pad_bits);
            emit(&mut out, ra)?;
            emit(&mut out, rb)?;
            for r in [ra, rb] {
                if r.aborted.is_some() {
                    report_abort(r);
                    aborted = aborted.or(r.aborted);
                }
            }
        }
        next += results.len() as u64;
        if results.len() < batch as usize {
            break;
        }
    }
    if let Some(p) = keys_path {
        ka.save(p)?;
    }
    match aborted {
        Some(reason) => Err(Failure { code: EXIT_ABORT, message: format!("session aborted: {reason}") }),
        None => Ok(()),
    }
}

fn verify_stats(
    suite: SuiteArg,
    m: u64,
    b: u32,
    trials: u64,
    csv: Option<&Path>,
    seed: Option<&str>,
) -> Result<(), Failure> {
    let suite = match suite {
        SuiteArg::Discrimination => Suite::Discrimination,
        SuiteArg::Joint => Suite::Joint,
        SuiteArg::Ber => Suite::Ber,
        SuiteArg::Entropy => Suite::Entropy,
        SuiteArg::All => Suite::All,
    };
    let opts = SuiteOptions { m, b, trials, seed: seed_or_system(seed)?.unwrap_or([0; 32]) };
    let checks = run_suite(suite, &opts)?;
    print!("{}", format_table(&checks));
    if let Some(path) = csv {
        write_csv(&checks, BufWriter::new(File::create(path)?))?;
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("{} checks, {} passed, {failed} failed", checks.len(), checks.len() - failed);
    if failed > 0 {
        return Err(Failure { code: EXIT_VERIFY, message: format!("{failed} check(s) failed") });
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Keygen { out, sessions, reuse_limit, seed, session } => {
            keygen(&out, sessions, reuse_limit, seed.as_deref(), &session)
        }
        Command::Alice { keys, listen, sessions, seed, timeout_secs, session } => {
            alice(&keys, &listen, sessions, seed.as_deref(), Duration::from_secs(timeout_secs), &session)
        }
        Command::Bob { keys, connect, sessions, timeout_secs, session } => {
            bob(&keys, &connect, sessions, Duration::from_secs(timeout_secs), &session)
        }
        Command::Simulate { sessions, seed, keys, jobs, session } => {
            simulate(sessions, seed.as_deref(), keys.as_deref(), jobs, &session)
        }
        Command::VerifyStats { suite, m, b, trials, csv, seed } => {
            verify_stats(suite, m, b, trials, csv.as_deref(), seed.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("pkd: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
