use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crd_core::estimate::PairTable;
use crd_core::io::{write_frame, AnalysisConfig, SCHEMA_VERSION};
use crd_core::model::{NeighborhoodSpec, StudyFrame};
use crd_core::pipeline::{self as pl, AtStage, MatchOutput, Stage, StageError, WeightOutput};
use crd_core::synth::{self, DgpConfig};
use crd_core::Error;

#[derive(Parser)]
#[command(name = "crd", version, about = "Design and analysis of complex discontinuity designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Analysis config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output`, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Data CSV; defaults to the config's `data`, relative to the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Overrides the selection threshold p*.
    #[arg(long = "p-star")]
    p_star: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic data set, its ground truth and a matching config.
    Generate {
        /// Generator settings (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        /// Honest half-width around the cutoffs; omitted means everywhere.
        #[arg(long)]
        honest: Option<f64>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Select the discontinuity neighborhood.
    Select(Common),
    /// Cardinality matching inside the selected neighborhood.
    Match(Common),
    /// Balancing weights inside the selected neighborhood.
    Weigh(Common),
    /// Effect estimates on the matched (and weighted) sample.
    Estimate(Common),
    /// Sensitivity to hidden bias for the binary outcomes.
    Sensitivity(Common),
    /// Representative matching toward the target population.
    Generalize(Common),
    /// Every stage, writing the full report bundle.
    Pipeline(Common),
}

#[derive(Serialize, Deserialize)]
struct NeighborhoodFile {
    schema_version: u32,
    neighborhood: NeighborhoodSpec,
}

const NEIGHBORHOOD: &str = "neighborhood.json";
const MATCHED: &str = "matched.json";
const WEIGHTS: &str = "weights.json";
const GENERALIZATION: &str = "generalization.json";

struct Ctx {
    config: AnalysisConfig,
    frame: StudyFrame,
    out: PathBuf,
}

fn set_threads(n: usize) -> anyhow::Result<()> {
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    Ok(())
}

fn load(c: &Common) -> Result<Ctx, StageError> {
    let (mut config, frame) = pl::load(&c.config, c.data.as_deref())?;
    if let Some(s) = c.seed {
        config.seed = s;
    }
    if let Some(p) = c.p_star {
        config.selection.p_star = p;
        config.check().at(Stage::Config)?;
    }
    let out = c
        .out
        .clone()
        .or_else(|| config.output.as_ref().map(|o| c.config.parent().unwrap_or(Path::new(".")).join(o)))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Ctx { config, frame, out })
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), StageError> {
    fs::create_dir_all(dir).and_then(|_| fs::write(dir.join(name), bytes)).map_err(Error::from).at(Stage::Output)
}

fn read_json<T: serde::de::DeserializeOwned>(dir: &Path, name: &str, stage: Stage) -> Result<T, StageError> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {} ({e}); run the earlier stage first", path.display())))
        .at(stage)?;
    serde_json::from_str(&text).map_err(Error::from).at(stage)
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>, StageError> {
    pl::to_json(v).at(Stage::Output)
}

fn fail_marker(dir: &Path, e: &StageError) {
    let _ = fs::create_dir_all(dir);
    let _ = fs::write(dir.join(pl::FAILED_MARKER), format!("stage: {}\nerror: {}\n", e.stage.name(), e.error));
}

fn neighborhood(ctx: &Ctx) -> Result<NeighborhoodSpec, StageError> {
    if let Some(spec) = &ctx.config.selection.fixed {
        if ctx.config.selection.method == crd_core::io::SelectionMethod::Fixed {
            return Ok(spec.clone());
        }
    }
    Ok(read_json::<NeighborhoodFile>(&ctx.out, NEIGHBORHOOD, Stage::Match)?.neighborhood)
}

fn select(ctx: &Ctx) -> Result<(), StageError> {
    let sel = pl::run_selection(&ctx.config, &ctx.frame).at(Stage::Select)?;
    write(&ctx.out, pl::ARTIFACTS[0], sel.trace_csv.as_bytes())?;
    let spec = sel.selected.ok_or(Error::NoPassingNeighborhood).at(Stage::Select)?;
    write(&ctx.out, NEIGHBORHOOD, &json(&NeighborhoodFile { schema_version: SCHEMA_VERSION, neighborhood: spec })?)?;
    eprintln!("selected a neighborhood after {} candidates", sel.candidates);
    Ok(())
}

fn matching(ctx: &Ctx) -> Result<(), StageError> {
    let spec = neighborhood(ctx)?;
    let frame = pl::analysis_frame(&ctx.config, &ctx.frame).at(Stage::Match)?;
    let m = pl::run_matching(&ctx.config, &frame, &spec).at(Stage::Match)?;
    let rows = pl::balance_rows(&ctx.config, &frame, &m.treated_in, &m.controls_in, Some(&m.sample), None).at(Stage::Match)?;
    write(&ctx.out, pl::ARTIFACTS[1], pl::balance_csv(&rows).at(Stage::Output)?.as_bytes())?;
    write(&ctx.out, MATCHED, &json(&m)?)?;
    eprintln!("{} matched pairs from {} treated and {} controls", m.sample.len(), m.treated_in.len(), m.controls_in.len());
    Ok(())
}

fn weigh(ctx: &Ctx) -> Result<(), StageError> {
    let spec = neighborhood(ctx)?;
    let frame = pl::analysis_frame(&ctx.config, &ctx.frame).at(Stage::Weigh)?;
    let w = pl::run_weighting(&ctx.config, &frame, &spec).at(Stage::Weigh)?;
    let (treated, controls) = (w.treated_in.clone(), w.solution.controls.clone());
    let matched: Option<MatchOutput> = read_json(&ctx.out, MATCHED, Stage::Weigh).ok();
    let rows = pl::balance_rows(&ctx.config, &frame, &treated, &controls, matched.as_ref().map(|m| &m.sample), Some(&w.solution)).at(Stage::Weigh)?;
    write(&ctx.out, pl::ARTIFACTS[1], pl::balance_csv(&rows).at(Stage::Output)?.as_bytes())?;
    write(&ctx.out, WEIGHTS, &json(&w)?)?;
    eprintln!("weights on {} controls, effective sample size {:.1}", controls.len(), pl::WeightSummary::of(&w.solution).effective_sample_size);
    Ok(())
}

fn estimate(ctx: &Ctx) -> Result<(), StageError> {
    let m: MatchOutput = read_json(&ctx.out, MATCHED, Stage::Estimate)?;
    let weights: Option<WeightOutput> = match ctx.config.weighting {
        Some(_) => Some(read_json(&ctx.out, WEIGHTS, Stage::Estimate)?),
        None => None,
    };
    let frame = pl::analysis_frame(&ctx.config, &ctx.frame).at(Stage::Estimate)?;
    let outcomes = pl::run_estimation(&ctx.config, &frame, &m.sample, weights.as_ref()).at(Stage::Estimate)?;
    let report = pl::EstimateReport {
        schema_version: SCHEMA_VERSION,
        seed: ctx.config.seed,
        neighborhood: m.neighborhood.clone(),
        treated_in_neighborhood: m.treated_in.len(),
        controls_in_neighborhood: m.controls_in.len(),
        pairs: m.sample.len(),
        outcomes,
        weighting: weights.as_ref().map(|w| pl::WeightSummary::of(&w.solution)),
        generalization: None,
    };
    write(&ctx.out, pl::ARTIFACTS[2], pl::pair_tables_csv(&report.outcomes).at(Stage::Output)?.as_bytes())?;
    write(&ctx.out, pl::ARTIFACTS[3], &json(&report)?)?;
    write(&ctx.out, pl::ARTIFACTS[5], pl::outcome_summary_csv(&frame, &m.sample).at(Stage::Output)?.as_bytes())?;
    Ok(())
}

fn sensitivity(ctx: &Ctx) -> Result<(), StageError> {
    let m: MatchOutput = read_json(&ctx.out, MATCHED, Stage::Sensitivity)?;
    let frame = pl::analysis_frame(&ctx.config, &ctx.frame).at(Stage::Sensitivity)?;
    let tables: Vec<(String, PairTable)> = frame
        .outcomes
        .iter()
        .filter(|o| o.kind == crd_core::model::OutcomeKind::Binary)
        .map(|o| Ok((o.name.clone(), crd_core::estimate::pair_table(&m.sample, &o.values)?)))
        .collect::<crd_core::Result<_>>()
        .at(Stage::Sensitivity)?;
    let report = pl::run_sensitivity(&ctx.config, &tables).at(Stage::Sensitivity)?;
    write(&ctx.out, pl::ARTIFACTS[4], &json(&report)?)?;
    for o in &report.outcomes {
        eprintln!("{}: gamma* {:.4}", o.outcome, o.gamma_star);
    }
    Ok(())
}

fn generalize(ctx: &Ctx) -> Result<(), StageError> {
    if ctx.config.generalization.is_none() {
        return Err(Error::InvalidArgument("the config has no `generalization` section".into())).at(Stage::Config);
    }
    let spec = neighborhood(ctx)?;
    let frame = pl::analysis_frame(&ctx.config, &ctx.frame).at(Stage::Generalize)?;
    let mut g = pl::run_generalization(&ctx.config, &frame, &spec).at(Stage::Generalize)?;
    g.sample = None;
    #[derive(Serialize)]
    struct Report<'a> {
        schema_version: u32,
        #[serde(flatten)]
        report: &'a pl::GeneralizationReport,
    }
    write(&ctx.out, GENERALIZATION, &json(&Report { schema_version: SCHEMA_VERSION, report: &g })?)?;
    eprintln!("{} representative pairs, max |std diff| {:.4}", g.pairs, g.max_abs_std_diff);
    Ok(())
}

fn pipeline(ctx: &Ctx) -> Result<(), StageError> {
    let bundle = pl::run_pipeline(&ctx.config, &ctx.frame);
    bundle.write_to(&ctx.out).at(Stage::Output)?;
    if let Some(s) = bundle.get(pl::ARTIFACTS[6]) {
        print!("{}", String::from_utf8_lossy(s));
    }
    match bundle.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn run_stage(c: &Common, f: fn(&Ctx) -> Result<(), StageError>) -> ExitCode {
    if let Err(e) = set_threads(c.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let ctx = match load(c) {
        Ok(ctx) => ctx,
        // Nothing is written when the config or the data is invalid.
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.stage.exit_code() as u8);
        }
    };
    let marker = ctx.out.join(pl::FAILED_MARKER);
    if marker.exists() {
        let _ = fs::remove_file(&marker);
    }
    match f(&ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            fail_marker(&ctx.out, &e);
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}

fn generate(config: Option<&Path>, out: &Path, seed: Option<u64>, n: Option<usize>, honest: Option<f64>) -> anyhow::Result<()> {
    let mut dgp: DgpConfig = match config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => DgpConfig::default(),
    };
    if let Some(s) = seed {
        dgp.seed = s;
    }
    if let Some(n) = n {
        dgp.n = n;
    }
    if honest.is_some() {
        dgp.honest_half_width = honest;
    }
    let (frame, truth) = synth::generate(&dgp)?;
    fs::create_dir_all(out)?;
    write_frame(&frame, fs::File::create(out.join("data.csv"))?)?;
    fs::write(out.join("ground_truth.json"), pl::to_json(&truth)?)?;
    let analysis = synth::analysis_config(&dgp, &frame);
    fs::write(out.join("config.json"), analysis.to_json()? + "\n")?;
    eprintln!("wrote {} units to {}", dgp.n, out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate { config, out, seed, n, honest, threads } => {
            let r = set_threads(*threads).and_then(|_| {
                if honest.is_some_and(|h| !(h >= 0.0)) {
                    bail!("--honest must be nonnegative");
                }
                generate(config.as_deref(), out, *seed, *n, *honest)
            });
            match r {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Select(c) => run_stage(c, select),
        Command::Match(c) => run_stage(c, matching),
        Command::Weigh(c) => run_stage(c, weigh),
        Command::Estimate(c) => run_stage(c, estimate),
        Command::Sensitivity(c) => run_stage(c, sensitivity),
        Command::Generalize(c) => run_stage(c, generalize),
        Command::Pipeline(c) => run_stage(c, pipeline),
    }
}
