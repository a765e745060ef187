//! Experiment driver: training, evaluation, checkpoint conversion, cache
//! audits, linear probes, similarity analysis, and the loss-gap bench, all
//! as subcommands emitting CSV under a run directory.
//!
//! Configuration comes from optional line-oriented `key=value` files plus
//! flag overrides; every output starts with a config echo. The
//! `SKV1_RUN_DIR` environment variable overrides the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use skv1_core::analysis::{matrix_csv, probe_all, probe_csv, similarity, ProbeConfig};
use skv1_core::cache::{bytes_per_token, cache_report, CacheSpec};
use skv1_core::ckpt_io::{config_from_kv, load_checkpoint, parse_kv, save_checkpoint};
use skv1_core::config::{param_count, ModelConfig, VariantKind};
use skv1_core::convert::{convert, initial_loss_compare, initial_loss_csv, ConversionStrategy};
use skv1_core::data::Corpus;
use skv1_core::mesa::{verify_theorem, OptimizeOpts, TaskSpec};
use skv1_core::presets;
use skv1_core::train::{train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "skv1",
    about = "Value-skip transformer laboratory",
    arg_required_else_help = true,
    version
)]
struct Cli {
    /// Output directory (env SKV1_RUN_DIR overrides).
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level model and write run.csv + model.skv1.
    Train(TrainArgs),
    /// Report validation loss and perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Convert a standard checkpoint into a value-skip checkpoint.
    Convert(ConvertArgs),
    /// Verify the loss gap between the compressed and value-skip models.
    Mesa(MesaArgs),
    /// Exact per-token KV cache accounting.
    CacheAudit(CacheAuditArgs),
    /// Layerwise linear probes over a frozen checkpoint.
    Probe(ProbeArgs),
    /// Head-head and token-token cosine similarity at one layer.
    Similarity(SimilarityArgs),
}

#[derive(Args)]
struct ModelFlags {
    /// mha | skipv1 | resformer | gqa | skipv1-gqa | mla | skipv1-mla |
    /// yoco-v | cla-v | skipkv1 | skipv1-yoco
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    /// Skip-head ratio in [0, 1).
    #[arg(long)]
    ratio: Option<f64>,
    /// second-half | pooling | dynamic | odd-even | skip-res
    #[arg(long)]
    injection: Option<String>,
    /// learned | rotary
    #[arg(long)]
    positional: Option<String>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    d_c: Option<usize>,
    #[arg(long)]
    d_r: Option<usize>,
    /// Interpolation weight for the resformer variant.
    #[arg(long)]
    lambda: Option<f64>,
    /// Sharing period for the cla-v variant.
    #[arg(long)]
    period: Option<usize>,
    /// Cache element width in bytes.
    #[arg(long)]
    elem_bytes: Option<usize>,
}

impl ModelFlags {
    /// Overlay these flags onto key=value pairs (flags win).
    fn overlay(&self, kv: &mut BTreeMap<String, String>) {
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.insert(k.to_string(), v);
            }
        };
        set("variant", self.variant.clone());
        set("layers", self.layers.map(|v| v.to_string()));
        set("dim", self.dim.map(|v| v.to_string()));
        set("heads", self.heads.map(|v| v.to_string()));
        set("ffn_dim", self.ffn.map(|v| v.to_string()));
        set("n_max", self.n_max.map(|v| v.to_string()));
        set("skip_ratio", self.ratio.map(|v| v.to_string()));
        set("injection", self.injection.clone());
        set("positional", self.positional.clone());
        set("groups", self.groups.map(|v| v.to_string()));
        set("d_c", self.d_c.map(|v| v.to_string()));
        set("d_r", self.d_r.map(|v| v.to_string()));
        set("lambda", self.lambda.map(|v| v.to_string()));
        set("period", self.period.map(|v| v.to_string()));
        set("elem_bytes", self.elem_bytes.map(|v| v.to_string()));
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Line-oriented key=value config file (model + training keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// parity-mha | parity-skipv1 | pilot-mha
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    floor: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data/corpus.txt")]
    corpus: PathBuf,
    #[arg(long)]
    val_frac: Option<f64>,
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long)]
    val_windows: Option<usize>,
    /// Continue training from an existing checkpoint (uptraining).
    #[arg(long)]
    from: Option<PathBuf>,
    /// Basename for outputs inside the run directory.
    #[arg(long, default_value = "run")]
    name: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ck: PathBuf,
    #[arg(long, default_value = "data/corpus.txt")]
    corpus: PathBuf,
    #[arg(long, default_value_t = 64)]
    seq: usize,
    #[arg(long, default_value_t = 64)]
    windows: usize,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
}

#[derive(Args)]
struct ConvertArgs {
    /// meanv | meanvo | topv | topvo | svd
    #[arg(long)]
    strategy: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write an initial-loss comparison over every strategy.
    #[arg(long)]
    compare: bool,
    #[arg(long, default_value = "data/corpus.txt")]
    corpus: PathBuf,
    #[arg(long, default_value_t = 64)]
    seq: usize,
    #[arg(long, default_value_t = 48)]
    windows: usize,
}

#[derive(Args)]
struct MesaArgs {
    /// theorem-small
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    a: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Prior mean scale: W0 = scale * sqrt(d) * I.
    #[arg(long)]
    w0_scale: Option<f64>,
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    opt_batch: Option<usize>,
}

#[derive(Args)]
struct CacheAuditArgs {
    /// table3-gqa | table3-mla | slope
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    model: ModelFlags,
    /// Comma-separated sequence lengths for the report.
    #[arg(long, default_value = "1")]
    seq_lens: String,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ck: PathBuf,
    #[arg(long, default_value = "data/corpus.txt")]
    corpus: PathBuf,
    /// Layer index (1-based) or `all`.
    #[arg(long, default_value = "all")]
    layer: String,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    seq: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
}

#[derive(Args)]
struct SimilarityArgs {
    #[arg(long)]
    ck: PathBuf,
    #[arg(long, default_value = "data/corpus.txt")]
    corpus: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 32)]
    seq: usize,
    #[arg(long, default_value_t = 4)]
    windows: usize,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run_dir(flag: &Path) -> Result<PathBuf> {
    let dir = match std::env::var_os("SKV1_RUN_DIR") {
        Some(v) => PathBuf::from(v),
        None => flag.to_path_buf(),
    };
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))?;
    Ok(dir)
}

fn write_output(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    let dir = run_dir(&cli.out_dir)?;
    match cli.command {
        Command::Train(args) => cmd_train(&dir, args),
        Command::Eval(args) => cmd_eval(args),
        Command::Convert(args) => cmd_convert(&dir, args),
        Command::Mesa(args) => cmd_mesa(&dir, args),
        Command::CacheAudit(args) => cmd_cache_audit(&dir, args),
        Command::Probe(args) => cmd_probe(&dir, args),
        Command::Similarity(args) => cmd_similarity(&dir, args),
    }
}

fn build_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    // Precedence: preset < config file < flags.
    let mut cfg = match args.preset.as_deref() {
        Some("parity-mha") => presets::parity_train(VariantKind::Mha, 7),
        Some("parity-skipv1") => presets::parity_train(VariantKind::SkipV1, 7),
        Some("pilot-mha") => presets::pilot_train(7),
        Some(other) => bail!("unknown train preset '{other}'"),
        None => TrainConfig::desk_defaults(presets::parity_model(VariantKind::Mha)),
    };

    let mut model_kv: BTreeMap<String, String> = parse_kv(
        &skv1_core::ckpt_io::config_to_kv(&cfg.model),
    )
    .expect("round-trip");
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let file_kv = parse_kv(&text).map_err(|e| anyhow!("config file: {e}"))?;
        for (k, v) in &file_kv {
            match k.as_str() {
                "steps" => cfg.steps = v.parse().context("steps")?,
                "batch" => cfg.batch = v.parse().context("batch")?,
                "seq_len" => cfg.seq_len = v.parse().context("seq_len")?,
                "peak_lr" => cfg.peak_lr = v.parse().context("peak_lr")?,
                "warmup_frac" => cfg.warmup_frac = v.parse().context("warmup_frac")?,
                "floor_frac" => cfg.floor_frac = v.parse().context("floor_frac")?,
                "weight_decay" => cfg.weight_decay = v.parse().context("weight_decay")?,
                "grad_clip" => cfg.grad_clip = v.parse().context("grad_clip")?,
                "seed" => cfg.seed = v.parse().context("seed")?,
                "val_fraction" => cfg.val_fraction = v.parse().context("val_fraction")?,
                "val_every" => cfg.val_every = v.parse().context("val_every")?,
                "val_windows" => cfg.val_windows = v.parse().context("val_windows")?,
                _ => {
                    model_kv.insert(k.clone(), v.clone());
                }
            }
        }
    }
    args.model.overlay(&mut model_kv);
    cfg.model = config_from_kv(&model_kv).map_err(|e| anyhow!("model config: {e}"))?;
    cfg.model.vocab = skv1_core::data::BYTE_VOCAB;

    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.seq {
        cfg.seq_len = v;
    }
    if let Some(v) = args.lr {
        cfg.peak_lr = v;
    }
    if let Some(v) = args.warmup {
        cfg.warmup_frac = v;
    }
    if let Some(v) = args.floor {
        cfg.floor_frac = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.clip {
        cfg.grad_clip = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.val_frac {
        cfg.val_fraction = v;
    }
    if let Some(v) = args.val_every {
        cfg.val_every = v;
    }
    if let Some(v) = args.val_windows {
        cfg.val_windows = v;
    }
    Ok(cfg)
}

fn cmd_train(dir: &Path, args: TrainArgs) -> Result<()> {
    let cfg = build_train_config(&args)?;
    let corpus = Corpus::load(&args.corpus, cfg.val_fraction)
        .with_context(|| format!("loading corpus {}", args.corpus.display()))?;
    let (ck, log) = match &args.from {
        Some(path) => {
            let start = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            skv1_core::train::train_from(&cfg, &corpus, start)?
        }
        None => train(&cfg, &corpus)?,
    };
    let csv_path = write_output(dir, &format!("{}.csv", args.name), &log.to_csv())?;
    let ck_path = dir.join(format!("{}.skv1", args.name));
    save_checkpoint(&ck_path, &ck)?;
    let last = log.rows.last().expect("at least one step");
    println!(
        "trained {} steps | final train loss {:.4} | val loss {} | wrote {} and {}",
        cfg.steps,
        last.train_loss,
        last.val_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        csv_path.display(),
        ck_path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ck)?;
    let corpus = Corpus::load(&args.corpus, args.val_frac)?;
    let (loss, ppl) = skv1_core::analysis::eval(&ck, &corpus, args.seq, args.windows)?;
    let pc = param_count(&ck.config);
    println!("loss,{loss}");
    println!("perplexity,{ppl}");
    println!("params_total,{}", pc.total);
    Ok(())
}

fn cmd_convert(dir: &Path, args: ConvertArgs) -> Result<()> {
    let strategy = ConversionStrategy::parse(&args.strategy)
        .ok_or_else(|| anyhow!("unknown strategy '{}'", args.strategy))?;
    let ck = load_checkpoint(&args.input)?;
    let converted = convert(&ck, strategy)?;
    save_checkpoint(&args.out, &converted)?;
    println!(
        "converted {} -> {} with {}",
        args.input.display(),
        args.out.display(),
        strategy.name()
    );
    if args.compare {
        let corpus = Corpus::load(&args.corpus, 0.1)?;
        let rows = initial_loss_compare(
            &ck,
            &corpus,
            &ConversionStrategy::ALL,
            args.seq,
            args.windows,
        )?;
        let mut csv = format!(
            "# in={} seq={} windows={}\n",
            args.input.display(),
            args.seq,
            args.windows
        );
        csv.push_str(&initial_loss_csv(&rows));
        let path = write_output(dir, "initial_loss.csv", &csv)?;
        for (name, loss) in &rows {
            println!("{name},{loss}");
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_mesa(dir: &Path, args: MesaArgs) -> Result<()> {
    let mut spec = match args.preset.as_deref() {
        Some("theorem-small") => presets::theorem_small(),
        Some(other) => bail!("unknown mesa preset '{other}'"),
        None => presets::theorem_small(),
    };
    if let Some(v) = args.d {
        spec = TaskSpec::with_identity_mean(
            v,
            spec.a.min(v),
            spec.n,
            spec.sigma,
            3.0,
            spec.mc,
            spec.seed,
        );
    }
    if let Some(v) = args.a {
        spec.a = v;
    }
    if let Some(v) = args.n {
        spec.n = v;
    }
    if let Some(v) = args.sigma {
        spec.sigma = v;
    }
    if let Some(v) = args.w0_scale {
        spec.set_w0_scale(v);
    }
    if let Some(v) = args.mc {
        spec.mc = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let mut opts = OptimizeOpts::default();
    if let Some(v) = args.steps {
        opts.steps = v;
    }
    if let Some(v) = args.restarts {
        opts.restarts = v;
    }
    if let Some(v) = args.lr {
        opts.lr = v;
    }
    if let Some(v) = args.opt_batch {
        opts.opt_batch = v;
    }
    let report = verify_theorem(&spec, &opts)?;
    let path = write_output(dir, "mesa_report.csv", &report.to_csv(&spec))?;
    println!("{}", report.summary());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_cache_audit(dir: &Path, args: CacheAuditArgs) -> Result<()> {
    let seq_lens: Vec<u64> = args
        .seq_lens
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| anyhow!("bad seq len '{s}'")))
        .collect::<Result<_>>()?;
    let configs: Vec<ModelConfig> = match args.preset.as_deref() {
        Some("table3-gqa") => vec![presets::table3_gqa(), presets::table3_skipv1_gqa()],
        Some("table3-mla") => vec![presets::table3_mla(), presets::table3_skipv1_mla()],
        Some("slope") => {
            let mut v = Vec::new();
            for layers in [2usize, 12, 24, 32] {
                let (mha, skip) = presets::slope_pair(layers);
                v.push(mha);
                v.push(skip);
            }
            v
        }
        Some(other) => bail!("unknown cache-audit preset '{other}'"),
        None => {
            let mut kv: BTreeMap<String, String> =
                parse_kv(&skv1_core::ckpt_io::config_to_kv(&presets::table3_gqa()))
                    .expect("round-trip");
            args.model.overlay(&mut kv);
            vec![config_from_kv(&kv).map_err(|e| anyhow!("model config: {e}"))?]
        }
    };
    let specs: Vec<CacheSpec> = configs.iter().map(CacheSpec::from_config).collect();
    let csv = cache_report(&specs, &seq_lens);
    print!("{csv}");
    for spec in &specs {
        println!("# {}: {} bytes/token", spec.variant, bytes_per_token(spec));
    }
    println!("# element width per spec as configured; latent-skip rows use uniform accounting");
    let path = write_output(dir, "cache_audit.csv", &csv)?;
    println!("# wrote {}", path.display());
    Ok(())
}

fn cmd_probe(dir: &Path, args: ProbeArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ck)?;
    let corpus = Corpus::load(&args.corpus, args.val_frac)?;
    let pc = ProbeConfig {
        steps: args.steps,
        lr: args.lr,
        batch: 4,
        seq_len: args.seq,
        seed: args.seed,
        val_windows: 32,
    };
    let rows = if args.layer == "all" {
        probe_all(&ck, &corpus, &pc)?
    } else {
        let layer: usize = args.layer.parse().map_err(|_| anyhow!("bad layer '{}'", args.layer))?;
        vec![(layer, skv1_core::analysis::probe(&ck, &corpus, layer, &pc)?)]
    };
    let mut csv = format!(
        "# ck={} steps={} lr={} seq={} seed={}\n",
        args.ck.display(),
        args.steps,
        args.lr,
        args.seq,
        args.seed
    );
    csv.push_str(&probe_csv(&rows));
    print!("{csv}");
    let path = write_output(dir, "probe.csv", &csv)?;
    println!("# wrote {}", path.display());
    Ok(())
}

fn cmd_similarity(dir: &Path, args: SimilarityArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ck)?;
    let corpus = Corpus::load(&args.corpus, args.val_frac)?;
    let (heads, tokens) = similarity(&ck, &corpus, args.layer, args.seq, args.windows)?;
    let echo = format!(
        "# ck={} layer={} seq={} windows={}\n",
        args.ck.display(),
        args.layer,
        args.seq,
        args.windows
    );
    let head_path = write_output(dir, "head_head.csv", &format!("{echo}{}", matrix_csv(&heads)))?;
    let token_path =
        write_output(dir, "token_token.csv", &format!("{echo}{}", matrix_csv(&tokens)))?;
    println!("wrote {} and {}", head_path.display(), token_path.display());
    Ok(())
}
