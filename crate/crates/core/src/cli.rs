//! Command-line entry point: `serve`, `import`, `simulate`, `batch`, `export`.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 domain error, 4 I/O.

use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::api::{router, ApiOptions};
use crate::batch::{parse_refs, rows_to_csv, run_batch, BatchError};
use crate::chain::Chain;
use crate::config::{Config, ProviderKind, DEFAULT_BIND};
use crate::engine::{Engine, TemplateSource};
use crate::gateway::{Gateway, HttpProvider, MockProvider, Provider, API_KEY_ENV};
use crate::import::{import_session, FrameSource, ImportRequest};
use crate::library::{LibraryError, SessionFiles};
use crate::relay::Relay;
use crate::session::MessageType;
use crate::simulate::{simulate, SimulateOptions};
use crate::store::{Store, StoreError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DOMAIN: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "replaykit", version, about = "Counterfactual session replay and live Wizard-of-Oz relay")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Directory holding one subdirectory per session.
    #[arg(long, default_value = "media")]
    pub media_root: PathBuf,
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,
    /// Directory with classify.txt and generate.<type>.txt; re-read per request.
    #[arg(long)]
    pub prompts_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP API and the live relay.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bind: Option<String>,
        /// Serve the console's static build from this directory.
        #[arg(long)]
        console_dir: Option<PathBuf>,
        #[arg(long)]
        cors_origin: Option<String>,
    },
    /// Build a session directory from recorded inputs.
    Import {
        #[arg(long, default_value = "media")]
        media_root: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        video: Option<PathBuf>,
        #[arg(long)]
        srt: PathBuf,
        #[arg(long)]
        brief: Option<PathBuf>,
        /// Directory of pre-extracted frame_<millis>.jpg|png files.
        #[arg(long, conflicts_with = "extract_cmd")]
        frames: Option<PathBuf>,
        /// Shell command with {video} {outdir} {stride_ms} placeholders.
        #[arg(long)]
        extract_cmd: Option<String>,
        #[arg(long, default_value_t = 5000)]
        stride_ms: u64,
    },
    /// Replay a stored session as a live user client.
    Simulate {
        #[arg(long, default_value = "media")]
        media_root: PathBuf,
        #[arg(long)]
        session: String,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// ws://host:port to create a new live session, or ws://host:port/ws/<id>.
        #[arg(long, default_value = "ws://127.0.0.1:8787")]
        target: String,
        /// Exit after this many idle seconds once everything is sent, instead
        /// of waiting for the server to close the session.
        #[arg(long)]
        linger_secs: Option<f64>,
    },
    /// Generate one counterfactual message per reference message.
    Batch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        session: String,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long = "type", default_value = "question")]
        msg_type: MessageType,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export ratings, annotations and decisions as CSV.
    Export {
        #[arg(long, default_value = "media")]
        media_root: PathBuf,
        #[arg(long)]
        session: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Domain(_) => EXIT_DOMAIN,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Domain(m) | CliError::Io(m) => m,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Domain(e.to_string()),
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<Config, CliError> {
    match path {
        Some(p) => Config::load(p).map_err(|e| CliError::Usage(e.to_string())),
        None => Ok(Config::default()),
    }
}

/// Builds the engine from config plus flag overrides.
pub fn build_engine(config: &Config, common_provider: Option<ProviderKind>, prompts_dir: Option<PathBuf>, store: Arc<Store>) -> Result<Engine, CliError> {
    let usage = |e: crate::config::ConfigError| CliError::Usage(e.to_string());
    let provider = match common_provider.or(config.provider).unwrap_or_default() {
        ProviderKind::Mock => Provider::Mock(MockProvider),
        ProviderKind::Http => {
            let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
            if key.is_none() {
                return Err(CliError::Usage(format!("--provider http needs {API_KEY_ENV}")));
            }
            Provider::Http(HttpProvider::new(config.http_config(key)).map_err(|e| CliError::Usage(e.to_string()))?)
        }
    };
    let gateway = Gateway::new(provider, config.max_in_flight().map_err(usage)?);
    let chain = Chain::new(gateway, config.chain_settings().map_err(usage)?);
    let templates = match prompts_dir.or_else(|| config.prompts_dir.clone()) {
        Some(dir) => {
            let source = TemplateSource::Dir(dir);
            source.load().map_err(|e| CliError::Usage(e.to_string()))?;
            source
        }
        None => TemplateSource::Builtin,
    };
    Ok(Engine::new(store, chain, templates, config.budget().map_err(usage)?))
}

fn open_store(root: &std::path::Path) -> Result<Arc<Store>, CliError> {
    Ok(Arc::new(Store::open(root)?))
}

fn write_output(out: Option<&PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::Io(e.to_string()))
        }
    }
}

pub async fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Serve {
            common,
            bind,
            console_dir,
            cors_origin,
        } => {
            let config = load_config(common.config.as_ref())?;
            let media_root = if common.media_root.as_os_str() == "media" {
                config.media_root.clone().unwrap_or(common.media_root)
            } else {
                common.media_root
            };
            let store = open_store(&media_root)?;
            let engine = build_engine(&config, common.provider, common.prompts_dir, store)?;
            let relay = Relay::new(engine, config.relay());
            let options = ApiOptions {
                cors_origin: cors_origin.or_else(|| config.cors_origin.clone()),
                console_dir: console_dir.or_else(|| config.console_dir.clone()),
            };
            let bind = bind.or_else(|| config.bind.clone()).unwrap_or_else(|| DEFAULT_BIND.to_string());
            let addr: SocketAddr = bind
                .parse()
                .map_err(|e| CliError::Usage(format!("bad --bind `{bind}`: {e}")))?;
            let listener = tokio::net::TcpListener::bind(addr)
                .await
                .map_err(|e| CliError::Usage(format!("cannot bind {addr}: {e}")))?;
            let local = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
            println!("listening on http://{local}");
            let _ = std::io::stdout().flush();
            axum::serve(listener, router(relay, &options))
                .with_graceful_shutdown(async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
                .map_err(|e| CliError::Io(e.to_string()))
        }
        Command::Import {
            media_root,
            id,
            title,
            video,
            srt,
            brief,
            frames,
            extract_cmd,
            stride_ms,
        } => {
            let frames = match (frames, extract_cmd) {
                (Some(d), _) => FrameSource::Dir(d),
                (None, Some(command)) => FrameSource::Extract { command, stride_ms },
                (None, None) => FrameSource::None,
            };
            let req = ImportRequest {
                media_root,
                id,
                title,
                video,
                srt,
                brief,
                frames,
            };
            let imported = tokio::task::spawn_blocking(move || import_session(&req))
                .await
                .map_err(|e| CliError::Io(e.to_string()))?
                .map_err(|e| if e.is_io() { CliError::Io(e.to_string()) } else { CliError::Domain(e.to_string()) })?;
            for w in &imported.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "imported {} ({} ms) into {}",
                imported.manifest.id,
                imported.manifest.duration.0,
                imported.dir.display()
            );
            Ok(())
        }
        Command::Simulate {
            media_root,
            session,
            speed,
            target,
            linger_secs,
        } => {
            if !(speed.is_finite() && speed > 0.0) {
                return Err(CliError::Usage(format!("--speed must be positive, got {speed}")));
            }
            let linger = match linger_secs {
                Some(s) if s.is_finite() && s >= 0.0 => Some(Duration::from_secs_f64(s)),
                Some(s) => return Err(CliError::Usage(format!("bad --linger-secs {s}"))),
                None => None,
            };
            let dir = media_root.join(&session);
            let files = SessionFiles::load(&dir).map_err(|e| match e {
                LibraryError::Io { .. } if !dir.exists() => CliError::Domain(format!("unknown session `{session}`")),
                other => CliError::Domain(other.to_string()),
            })?;
            let options = SimulateOptions {
                target,
                speed,
                linger,
                max_reconnects: 5,
            };
            let report = simulate(&files, &options, |id, text| {
                println!("delivered {id}: {text}");
                let _ = std::io::stdout().flush();
            })
            .await
            .map_err(|e| CliError::Io(e.to_string()))?;
            for e in &report.errors {
                eprintln!("relay error: {e}");
            }
            eprintln!(
                "live session {}: sent {} utterances, {} frames; {} delivered",
                report.live_session_id,
                report.utterances_sent,
                report.frames_sent,
                report.delivered.len()
            );
            Ok(())
        }
        Command::Batch {
            common,
            session,
            refs,
            msg_type,
            out,
        } => {
            let config = load_config(common.config.as_ref())?;
            let refs_text = std::fs::read_to_string(&refs).map_err(|e| CliError::Io(format!("{}: {e}", refs.display())))?;
            let refs = parse_refs(&refs_text).map_err(|e| CliError::Domain(e.to_string()))?;
            let store = open_store(&common.media_root)?;
            if !store.has_session(&session) {
                return Err(CliError::Domain(format!("unknown session `{session}`")));
            }
            let engine = build_engine(&config, common.provider, common.prompts_dir, store)?;
            let rows = run_batch(&engine, &session, &refs, msg_type).await.map_err(|e| match e {
                BatchError::UnknownSession(_) | BatchError::BadRefs { .. } | BatchError::Unsorted(_) => {
                    CliError::Domain(e.to_string())
                }
            })?;
            for r in rows.iter().filter(|r| r.error.is_some()) {
                eprintln!("row at {} ms failed: {}", r.t.0, r.error.as_deref().unwrap_or_default());
            }
            write_output(out.as_ref(), &rows_to_csv(&rows))
        }
        Command::Export {
            media_root,
            session,
            out,
        } => {
            let store = open_store(&media_root)?;
            let csv = store.export_csv(&session)?;
            write_output(out.as_ref(), &csv)
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
