use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing::{error, info};

use cellmine_core::pipeline::{self, DecomposeParams, IngestParams, PipelineConfig};
use cellmine_core::synth::{self, CitySpec, SynthError};
use cellmine_core::vectorize::{self, VectorFormat};

#[derive(Parser)]
#[command(name = "cellmine", version, about = "Mine urban traffic patterns from cellular tower session logs")]
struct Cli {
    /// Pipeline config (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dedup and bin session logs into 10-minute slots.
    Ingest {
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long)]
        towers: Option<PathBuf>,
        #[arg(long)]
        origin: Option<String>,
        #[arg(long)]
        days: Option<u32>,
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Trim to whole weeks and z-score each tower.
    Vectorize {
        #[arg(long)]
        binned: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: Option<VectorFormat>,
        #[command(flatten)]
        common: Common,
    },
    /// Average-linkage clustering with a DBI-tuned cut.
    Cluster {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        rmin: Option<usize>,
        #[arg(long)]
        rmax: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Weekday/weekend ratios, peaks, valleys and peak offsets.
    Features {
        #[arg(long)]
        binned: PathBuf,
        #[arg(long)]
        assignments: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Principal DFT components, variance and reconstruction reports.
    Spectrum {
        #[arg(long)]
        vectors: PathBuf,
        /// Raw binned traffic, for relative features and the aggregate spectrum.
        #[arg(long)]
        binned: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Convex decomposition onto four representative towers.
    Decompose {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        assignments: PathBuf,
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<String>>,
        #[arg(long)]
        density_radius: Option<f64>,
        #[arg(long)]
        min_density: Option<usize>,
        /// 1-based ids of the four primary clusters.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        primary: Option<Vec<usize>>,
        /// Cluster centroids, used to pick the primaries when --primary is absent.
        #[arg(long)]
        centroids: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// POI counts, TF-IDF and per-cluster POI table.
    Poi {
        #[arg(long)]
        towers: Option<PathBuf>,
        #[arg(long)]
        pois: Option<PathBuf>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        assignments: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic city with planted patterns.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every stage end to end.
    Run {
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long)]
        towers: Option<PathBuf>,
        #[arg(long)]
        pois: Option<PathBuf>,
        #[arg(long)]
        origin: Option<String>,
        #[arg(long)]
        days: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_poi: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write per-figure CSVs for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    week_start: Option<String>,
    #[arg(long)]
    weeks: Option<usize>,
}

/// A caller mistake: bad flags, config or missing inputs (exit 1).
#[derive(Debug)]
struct Validation(String);

impl std::fmt::Display for Validation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Validation {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Validation(msg.into()).into()
}

fn require(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("input file {} does not exist", p.display())))
    }
}

fn parse_format(s: &str) -> Result<VectorFormat, String> {
    match s {
        "csv" => Ok(VectorFormat::Csv),
        "bin" => Ok(VectorFormat::Bin),
        _ => Err(format!("unknown vector format `{s}` (csv or bin)")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl Common {
    fn apply(&self, cfg: &mut PipelineConfig) {
        set(&mut cfg.out_dir, self.out.clone());
        set(&mut cfg.week_start, self.week_start.clone());
        set(&mut cfg.weeks, self.weeks);
    }
}

fn week_start(cfg: &PipelineConfig) -> Result<u8> {
    vectorize::parse_weekday(&cfg.week_start).map_err(|e| invalid(e.to_string()))
}

fn log_files(stage: &str, files: &[PathBuf]) {
    for f in files {
        info!(stage, artifact = %f.display(), "wrote");
    }
}

fn exec(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require(p)?;
            PipelineConfig::from_file(p).map_err(|e| invalid(e.to_string()))?
        }
        None => PipelineConfig::default(),
    };
    match cli.cmd {
        Cmd::Ingest { sessions, towers, origin, days, strict, common } => {
            common.apply(&mut cfg);
            set(&mut cfg.sessions, sessions.map(Some));
            set(&mut cfg.towers, towers.map(Some));
            set(&mut cfg.origin, origin);
            set(&mut cfg.days, days);
            cfg.strict |= strict;
            let s = cfg.sessions.clone().ok_or_else(|| invalid("--sessions is required"))?;
            require(&s)?;
            if let Some(t) = &cfg.towers {
                require(t)?;
            }
            let p = IngestParams { origin: cfg.origin.clone(), days: cfg.days, utc_offset_minutes: cfg.utc_offset_minutes, strict: cfg.strict };
            let files = pipeline::stage_ingest(&s, cfg.towers.as_deref(), &p, &cfg.out_dir).context("ingest")?;
            log_files("ingest", &files);
        }
        Cmd::Vectorize { binned, format, common } => {
            common.apply(&mut cfg);
            set(&mut cfg.vector_format, format);
            require(&binned)?;
            let files = pipeline::stage_vectorize(&binned, cfg.weeks, week_start(&cfg)?, cfg.vector_format, &cfg.out_dir).context("vectorize")?;
            log_files("vectorize", &files);
        }
        Cmd::Cluster { vectors, rmin, rmax, common } => {
            common.apply(&mut cfg);
            set(&mut cfg.rmin, rmin);
            set(&mut cfg.rmax, rmax);
            require(&vectors)?;
            if cfg.rmin < 2 || cfg.rmin > cfg.rmax {
                return Err(invalid(format!("R range {}..{} invalid", cfg.rmin, cfg.rmax)));
            }
            let (model, files) = pipeline::stage_cluster(&vectors, cfg.rmin, cfg.rmax, &cfg.out_dir).context("cluster")?;
            info!(r = model.r, dbi = model.dbi, "selected cut");
            log_files("cluster", &files);
        }
        Cmd::Features { binned, assignments, common } => {
            common.apply(&mut cfg);
            require(&binned)?;
            require(&assignments)?;
            let files = pipeline::stage_features(&binned, &assignments, cfg.weeks, week_start(&cfg)?, &cfg.peak, &cfg.out_dir).context("features")?;
            log_files("features", &files);
        }
        Cmd::Spectrum { vectors, binned, common } => {
            common.apply(&mut cfg);
            require(&vectors)?;
            if let Some(b) = &binned {
                require(b)?;
            }
            let ws = week_start(&cfg)?;
            let raw = binned.as_deref().map(|b| (b, cfg.weeks, ws));
            let files = pipeline::stage_spectrum(&vectors, raw, cfg.principal_bins, &cfg.out_dir).context("spectrum")?;
            log_files("spectrum", &files);
        }
        Cmd::Decompose { features, assignments, columns, density_radius, min_density, primary, centroids, common } => {
            common.apply(&mut cfg);
            set(&mut cfg.qp_features, columns);
            set(&mut cfg.density_radius, density_radius);
            set(&mut cfg.min_density, min_density);
            if let Some(p) = primary {
                cfg.primary_clusters = Some([p[0], p[1], p[2], p[3]]);
            }
            require(&features)?;
            require(&assignments)?;
            match (&centroids, cfg.primary_clusters) {
                (Some(c), _) => require(c)?,
                (None, None) => return Err(invalid("give --primary or --centroids")),
                _ => {}
            }
            let p = DecomposeParams {
                columns: cfg.qp_features.clone(),
                density_radius: cfg.density_radius,
                min_density: cfg.min_density,
                primary_clusters: cfg.primary_clusters,
                centroids,
            };
            let files = pipeline::stage_decompose(&features, &assignments, &p, &cfg.out_dir).context("decompose")?;
            log_files("decompose", &files);
        }
        Cmd::Poi { towers, pois, radius, assignments, common } => {
            common.apply(&mut cfg);
            set(&mut cfg.towers, towers.map(Some));
            set(&mut cfg.pois, pois.map(Some));
            set(&mut cfg.radius_m, radius);
            let t = cfg.towers.clone().ok_or_else(|| invalid("--towers is required"))?;
            let p = cfg.pois.clone().ok_or_else(|| invalid("--pois is required"))?;
            require(&t)?;
            require(&p)?;
            if let Some(a) = &assignments {
                require(a)?;
            }
            if !(cfg.radius_m > 0.0) {
                return Err(invalid("--radius must be positive"));
            }
            let files = pipeline::stage_poi(&t, &p, cfg.radius_m, assignments.as_deref(), &cfg.out_dir).context("poi")?;
            log_files("poi", &files);
        }
        Cmd::Synth { spec, out, seed } => {
            let mut spec: CitySpec = match spec {
                Some(p) => {
                    require(&p)?;
                    let f = std::fs::File::open(&p).with_context(|| format!("open {}", p.display()))?;
                    serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| invalid(format!("{}: {e}", p.display())))?
                }
                None => CitySpec::default(),
            };
            set(&mut spec.seed, seed);
            spec.validate().map_err(|e| invalid(e.to_string()))?;
            let city = synth::generate(&spec).context("synth")?;
            let files = city.write(&out).context("synth")?;
            log_files("synth", &files);
        }
        Cmd::Run { sessions, towers, pois, origin, days, seed, no_poi, common } => {
            common.apply(&mut cfg);
            set(&mut cfg.sessions, sessions.map(Some));
            set(&mut cfg.towers, towers.map(Some));
            set(&mut cfg.pois, pois.map(Some));
            set(&mut cfg.origin, origin);
            set(&mut cfg.days, days);
            set(&mut cfg.seed, seed);
            if no_poi {
                cfg.poi_stage = false;
            }
            let manifest = pipeline::run_pipeline(&cfg)?;
            info!(stages = manifest.stages.len(), out = %cfg.out_dir.display(), "run complete");
        }
        Cmd::Report { run } => {
            if !run.is_dir() {
                return Err(invalid(format!("run directory {} does not exist", run.display())));
            }
            let files = pipeline::report(&run)?;
            log_files("report", &files);
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Validation>().is_some() {
            return 1;
        }
        match cause.downcast_ref::<cellmine_core::Error>() {
            Some(cellmine_core::Error::Pipeline(p)) if p.is_validation() => return 1,
            Some(cellmine_core::Error::Synth(SynthError::Spec(_))) => return 1,
            Some(_) => return 2,
            None => {}
        }
    }
    2
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match exec(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            error!(error = %format!("{e:#}"), exit_code = code, "failed");
            ExitCode::from(code)
        }
    }
}
