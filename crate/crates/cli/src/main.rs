mod bundle;
mod error;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vdit_core::config::RunConfig;
use vdit_core::demo::{run_demo, HeadTraining, SyntheticSpec};
use vdit_core::dtl_encoder::{extract_features, pool_project, DiffusionCondition, LatentVideo, StubDenoiser};
use vdit_core::gradcheck::{run_gradcheck, Check, GradcheckSettings, DEFAULT_INSTANCES};
use vdit_core::grounding_gate::{read_detections, run_gate, select_best_proposals, track_from_detections};
use vdit_core::metrics::{aggregate, join_records, read_jsonl, GroundTruthRow, DEFAULT_IOU_THRESHOLDS};
use vdit_core::numerics::Affine;
use vdit_core::prompt::{extract_nouns, lexicon_terms, Lexicon, NounSet};
use vdit_core::span_decoder::read_predictions;

use error::{classify, CliError, CliResult};

#[derive(Parser)]
#[command(name = "vdit", version, about = "Entity-gated temporal grounding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Detection thresholds: `0.5` or `0.5,dog:0.7,red ball:0.6`.
    #[arg(long)]
    thresholds: Option<String>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| CliError::input(path, e))?,
            None => RunConfig::default(),
        };
        if let Some(csv) = &self.thresholds {
            cfg.thresholds.apply_csv(csv).map_err(|e| CliError::Input(e.to_string()))?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate().map_err(|e| CliError::Input(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct NounArgs {
    /// Noun lexicon, one term per line.
    #[arg(long)]
    lexicon: PathBuf,
    /// Modifier lexicon for phrases such as "red ball".
    #[arg(long)]
    modifiers: Option<PathBuf>,
    /// Query to extract target nouns from; without it every lexicon term is a target.
    #[arg(long)]
    query: Option<String>,
}

impl NounArgs {
    fn nouns(&self) -> CliResult<NounSet> {
        let text = std::fs::read_to_string(&self.lexicon).map_err(|e| CliError::input(&self.lexicon, e))?;
        let Some(query) = &self.query else {
            return Ok(NounSet::new(lexicon_terms(&text)));
        };
        let modifiers = match &self.modifiers {
            Some(p) => Some(Lexicon::load(p).map_err(|e| CliError::input(p, e))?),
            None => None,
        };
        Ok(extract_nouns(query, &Lexicon::parse(&text), modifiers.as_ref()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Gate a detection stream and report the start frame and span.
    Ground {
        #[arg(long)]
        detections: PathBuf,
        #[command(flatten)]
        nouns: NounArgs,
        #[command(flatten)]
        common: Common,
        /// Gate JSON destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn clean latents into framewise embeddings under detection masks.
    Encode {
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[command(flatten)]
        nouns: NounArgs,
        #[command(flatten)]
        common: Common,
        /// Spatial positions per latent frame.
        #[arg(long, default_value_t = 4)]
        positions: usize,
        #[arg(long, default_value_t = 16)]
        embed_dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// IoU thresholds for recall.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_IOU_THRESHOLDS.to_vec())]
        thresholds: Vec<f64>,
        /// Directory for report.json and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthetic end-to-end run that writes every intermediate to a bundle.
    Demo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "demo_out")]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = vdit_core::config::DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, hide = true)]
        corrupt: Option<CorruptTarget>,
        #[arg(long)]
        json: bool,
    },
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CorruptTarget {
    HeadStart,
    HeadEnd,
    Kl,
}

impl From<CorruptTarget> for Check {
    fn from(t: CorruptTarget) -> Self {
        match t {
            CorruptTarget::HeadStart => Check::HeadStart,
            CorruptTarget::HeadEnd => Check::HeadEnd,
            CorruptTarget::Kl => Check::KlAlignment,
        }
    }
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::input(path, e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::stage("output", format!("{}: {e}", dir.display())))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::stage("output", format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| CliError::stage("output", e))
}

fn load_detections(
    path: &Path,
    nouns: &NounSet,
    frames: usize,
) -> CliResult<Vec<vdit_core::grounding_gate::DetectionRecord>> {
    let dets = read_detections(open(path)?).map_err(|e| CliError::input(path, e))?;
    for (i, d) in dets.iter().enumerate() {
        if nouns.index_of(&d.noun).is_none() {
            return Err(CliError::input(path, format!("record {}: unknown noun {:?}", i + 1, d.noun)));
        }
        if d.frame > frames {
            return Err(CliError::input(path, format!("record {}: frame {} beyond T = {frames}", i + 1, d.frame)));
        }
        if !(0.0..=1.0).contains(&d.score) {
            return Err(CliError::input(path, format!("record {}: score {} outside [0, 1]", i + 1, d.score)));
        }
    }
    Ok(dets)
}

fn ground(detections: &Path, nouns: &NounArgs, common: &Common, out: Option<&Path>) -> CliResult<()> {
    let cfg = common.load()?;
    let nouns = nouns.nouns()?;
    let dets = load_detections(detections, &nouns, cfg.frames)?;
    let table = select_best_proposals(&dets, &nouns, cfg.frames).map_err(|e| classify("gate", e))?;
    let gate_cfg = cfg.gate_config(&nouns).map_err(|e| classify("gate", e))?;
    let gate = run_gate(&table, &gate_cfg).map_err(|e| classify("gate", e))?;
    let json = serde_json::to_string(&gate).map_err(|e| CliError::stage("gate", e))?;
    match out {
        Some(path) => write_text(path, &format!("{json}\n")),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn encode(
    latents: &Path,
    detections: &Path,
    nouns: &NounArgs,
    common: &Common,
    positions: usize,
    embed_dim: usize,
    out: &Path,
) -> CliResult<()> {
    let mut cfg = common.load()?;
    let latent = LatentVideo::read_from(open(latents)?).map_err(|e| CliError::input(latents, e))?;
    cfg.frames = latent.frames();
    let nouns = nouns.nouns()?;
    let dets = load_detections(detections, &nouns, cfg.frames)?;
    if positions == 0 || latent.dim() % positions != 0 {
        return Err(CliError::input(
            latents,
            format!("latent width {} is not a multiple of {positions} positions", latent.dim()),
        ));
    }
    let (width, height) =
        dets.iter().find_map(|d| d.mask.as_ref().map(|m| (m.width(), m.height()))).unwrap_or((16, 16));

    let table = select_best_proposals(&dets, &nouns, cfg.frames).map_err(|e| classify("gate", e))?;
    let gate_cfg = cfg.gate_config(&nouns).map_err(|e| classify("gate", e))?;
    let gate = run_gate(&table, &gate_cfg).map_err(|e| classify("gate", e))?;
    let (_, unions) = track_from_detections(&dets, &table, &gate_cfg.thresholds, gate.t_s, width, height)
        .map_err(|e| classify("masks", e))?;

    let channels = latent.dim() / positions;
    let mut dtl = cfg.dtl_config();
    dtl.positions = positions;
    dtl.embed_dim = embed_dim;
    let denoiser = StubDenoiser::seeded(channels, positions, cfg.seed).map_err(|e| classify("dtl", e))?;
    let condition = DiffusionCondition::new(unions, vdit_core::demo::HIGHLIGHT_TEXT);
    let features = extract_features(&latent, &condition, &dtl, &denoiser, cfg.seed).map_err(|e| classify("dtl", e))?;
    let projection = {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        Affine::random(embed_dim, channels, &mut rng)
    };
    let z = pool_project(&features, positions, &projection).map_err(|e| classify("dtl", e))?;
    let embeddings = LatentVideo::new(z).map_err(|e| classify("dtl", e))?;
    let mut w = create(out)?;
    embeddings.write_to(&mut w).map_err(|e| CliError::stage("output", e))?;
    w.flush().map_err(|e| CliError::stage("output", e))
}

fn eval(pred: &Path, gt: &Path, thresholds: &[f64], out: Option<&Path>) -> CliResult<()> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(CliError::Input(format!("IoU thresholds must lie in [0, 1], got {thresholds:?}")));
    }
    let preds = read_predictions(open(pred)?).map_err(|e| CliError::input(pred, e))?;
    let gts: Vec<GroundTruthRow> = read_jsonl(open(gt)?).map_err(|e| CliError::input(gt, e))?;
    let pairs = preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.interval().map(|iv| (p.id.clone(), iv)).map_err(|e| CliError::input(pred, format!("line {}: {e}", i + 1)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let records =
        join_records(&pairs, &gts).map_err(|e| CliError::Input(e.to_string()))?.map_err(CliError::Mismatch)?;
    let report = aggregate(&records, thresholds).map_err(|e| classify("eval", e))?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::stage("eval", e))?;
        write_text(&dir.join("report.json"), &format!("{json}\n"))?;
        write_text(&dir.join("report.txt"), &table)?;
    }
    Ok(())
}

fn demo(common: &Common, out: &Path) -> CliResult<()> {
    let cfg = common.load()?;
    let outcome = run_demo(&cfg, SyntheticSpec::planted(cfg.frames), HeadTraining::default())?;
    bundle::write_bundle(out, &cfg, &outcome)?;
    println!("span {}..{} of {} frames", outcome.run.span.start, outcome.run.span.end, cfg.frames);
    println!("ground truth {}..{}", outcome.video.gt.0, outcome.video.gt.1);
    println!("IoU {:.4}", outcome.iou);
    Ok(())
}

fn gradcheck(seed: u64, instances: usize, corrupt: Option<CorruptTarget>, json: bool) -> CliResult<()> {
    let settings = GradcheckSettings { instances, corrupt: corrupt.map(Check::from), ..Default::default() };
    let report = run_gradcheck(seed, &settings).map_err(|e| classify("gradcheck", e))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::stage("gradcheck", e))?);
    } else {
        print!("{}", report.to_table());
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::ChecksFailed)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Ground { detections, nouns, common, out } => ground(&detections, &nouns, &common, out.as_deref()),
        Command::Encode { latents, detections, nouns, common, positions, embed_dim, out } => {
            encode(&latents, &detections, &nouns, &common, positions, embed_dim, &out)
        }
        Command::Eval { pred, gt, thresholds, out } => eval(&pred, &gt, &thresholds, out.as_deref()),
        Command::Demo { common, out } => demo(&common, &out),
        Command::Gradcheck { seed, instances, corrupt, json } => gradcheck(seed, instances, corrupt, json),
        Command::Config { common } => {
            print!("{}", common.load()?.dump());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(error::EXIT_SCHEMA);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vdit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
