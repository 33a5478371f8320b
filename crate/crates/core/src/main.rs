use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use deepglstm::datasets::{load_registries, AffinityDataset, AffinityRecord, Measure, DEFAULT_TEST_FRACTION};
use deepglstm::featurize::featurize;
use deepglstm::graph_ops::{normalized_power, PowerMode, MAX_POWER};
use deepglstm::model::checkpoint::load_checkpoint;
use deepglstm::model::{BlockMask, HyperParams, ModelConfig, ModelParameters, ProteinEncoderKind};
use deepglstm::protein::DEFAULT_SEQ_LEN;
use deepglstm::repurpose::{combined_scores, rank_top_k, sort_scores, PredictionRow};
use deepglstm::smiles::parse_smiles;
use deepglstm::training::{
    evaluate, gradient_check, predict_records, train, Evaluation, PreparedInputs, TrainConfig,
};

#[derive(Parser)]
#[command(name = "deepglstm", version, about = "Drug-target binding affinity prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a SMILES string and print or dump its graph inputs.
    Featurize(FeaturizeArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Evaluate(EvaluateArgs),
    /// Predict affinities with a checkpoint.
    Predict(PredictArgs),
    /// Rank drugs against a target by combined KIBA/pKd score.
    Rank(RankArgs),
    /// Check analytic gradients of the full model against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    smiles: String,
    #[arg(long, default_value = "binarized")]
    power_mode: PowerMode,
    /// Write features.csv and adjacency.csv here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also write the normalized A, A^2, A^3 matrices.
    #[arg(long, requires = "out_dir")]
    dump_norm: bool,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Measure of raw affinity values: pKd (raw Kd in nM), KIBA, pKi, AC50, STITCH_SCORES.
    #[arg(long)]
    measure: Measure,
    /// Write dataset loading warnings as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    /// Seed of the record-level train/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = DEFAULT_TEST_FRACTION)]
    test_fraction: f64,
}

#[derive(Args)]
struct OutputArgs {
    /// Write the test-set metrics as JSON.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Write measured,predicted rows for the test set.
    #[arg(long)]
    scatter_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    output: OutputArgs,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Defaults to 512, or 128 with --davis.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Use the Davis preset (batch size 128).
    #[arg(long)]
    davis: bool,
    #[arg(long, default_value_t = 0.0005)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
    seq_len: usize,
    /// Active GCN blocks, e.g. 1,2,3 or 2.
    #[arg(long, default_value = "1,2,3")]
    blocks: BlockMask,
    #[arg(long, default_value = "binarized")]
    power_mode: PowerMode,
    #[arg(long, default_value = "bilstm")]
    protein_encoder: ProteinEncoderKind,
    /// Checkpoint path, written at the end and every --checkpoint-every epochs.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Line-delimited JSON epoch log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Evaluate only the test part of the split with this seed.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_TEST_FRACTION)]
    test_fraction: f64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single drug (with --sequence).
    #[arg(long, requires = "sequence", conflicts_with = "data_dir")]
    smiles: Option<String>,
    #[arg(long, requires = "smiles")]
    sequence: Option<String>,
    /// Predict every record of this dataset directory.
    #[arg(long, requires = "measure")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    measure: Option<Measure>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    /// CSV with drug_id,protein_id,kiba_pred,pkd_pred instead of checkpoints.
    #[arg(long, conflicts_with_all = ["kiba_checkpoint", "pkd_checkpoint", "data_dir"])]
    predictions: Option<PathBuf>,
    #[arg(long, requires_all = ["pkd_checkpoint", "data_dir"])]
    kiba_checkpoint: Option<PathBuf>,
    #[arg(long, requires = "kiba_checkpoint")]
    pkd_checkpoint: Option<PathBuf>,
    /// Directory holding drugs.csv and proteins.csv to screen.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    protein_id: String,
    #[arg(long, default_value_t = 18)]
    top_k: usize,
    /// Full scored CSV, best first.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Serialize)]
struct CliError {
    error: &'static str,
    message: String,
}

type CliResult<T = ()> = Result<T, (&'static str, String)>;

fn fail<E: std::fmt::Display>(kind: &'static str) -> impl Fn(E) -> (&'static str, String) {
    move |e| (kind, e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(fail("io"))?;
    std::fs::write(path, text + "\n").map_err(fail("io"))
}

fn write_csv<I, R>(path: Option<&Path>, header: &[&str], rows: I) -> CliResult
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(fail("io"))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(header).map_err(fail("io"))?;
    for row in rows {
        w.write_record(row).map_err(fail("io"))?;
    }
    w.flush().map_err(fail("io"))
}

fn load_data(args: &DataArgs) -> CliResult<AffinityDataset> {
    let (dataset, report) = AffinityDataset::load(&args.data_dir, args.measure).map_err(fail("dataset"))?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok(dataset)
}

fn write_outputs(eval: &Evaluation, output: &OutputArgs) -> CliResult {
    if let Some(path) = &output.metrics_out {
        write_json(path, &eval.report)?;
    }
    if let Some(path) = &output.scatter_out {
        write_csv(
            Some(path),
            &["measured", "predicted"],
            eval.scatter
                .iter()
                .map(|r| [format!("{:?}", r.measured), format!("{:?}", r.predicted)]),
        )?;
    }
    Ok(())
}

fn run_featurize(args: FeaturizeArgs) -> CliResult {
    let graph = parse_smiles(&args.smiles).map_err(fail("smiles"))?;
    let (x, a) = featurize(&graph).map_err(fail("featurize"))?;
    let summary = serde_json::json!({
        "atoms": graph.atom_count(),
        "bonds": graph.bond_count(),
        "feature_shape": x.0.dim(),
    });
    println!("{summary}");
    let Some(dir) = args.out_dir else {
        return Ok(());
    };
    std::fs::create_dir_all(&dir).map_err(fail("io"))?;
    let rows = |m: &ndarray::Array2<f64>| -> Vec<Vec<String>> {
        m.rows()
            .into_iter()
            .map(|r| r.iter().map(|v| format!("{v:?}")).collect())
            .collect()
    };
    let header = |n: usize| (0..n).map(|i| format!("c{i}")).collect::<Vec<_>>();
    let dump = |name: &str, m: &ndarray::Array2<f64>| {
        let h = header(m.ncols());
        let h: Vec<&str> = h.iter().map(String::as_str).collect();
        write_csv(Some(&dir.join(name)), &h, rows(m))
    };
    dump("features.csv", &x.0)?;
    dump("adjacency.csv", &a.0.mapv(f64::from))?;
    if args.dump_norm {
        for k in 1..=MAX_POWER {
            let norm = normalized_power(&a, k, args.power_mode).map_err(fail("graph"))?;
            dump(&format!("norm_a{k}.csv"), &norm.values)?;
        }
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> CliResult {
    let dataset = load_data(&args.data)?;
    let (train_set, test_set) = dataset
        .split(args.split.split_seed, args.split.test_fraction)
        .map_err(fail("dataset"))?;
    let preset = if args.davis {
        HyperParams::davis()
    } else {
        HyperParams::default()
    };
    let hyper = HyperParams {
        lr: args.lr,
        dropout: args.dropout,
        batch_size: args.batch_size.unwrap_or(preset.batch_size),
        epochs: args.epochs,
        seq_len: args.seq_len,
        seed: args.seed,
    };
    let model = ModelConfig {
        blocks: args.blocks,
        protein_encoder: args.protein_encoder,
        power_mode: args.power_mode,
    };
    let config = TrainConfig {
        hyper,
        model,
        checkpoint: args.checkpoint,
        checkpoint_every: args.checkpoint_every,
        log_path: args.log,
    };
    let outcome = train(&config, &train_set, Some(&test_set)).map_err(fail("train"))?;
    let last = outcome.logs.last().map(|l| serde_json::to_value(l).unwrap_or_default());
    if !test_set.is_empty() {
        let inputs = PreparedInputs::from_dataset(&test_set, model.power_mode, hyper.seq_len)
            .map_err(fail("train"))?;
        let eval = evaluate(&outcome.params, &inputs, &test_set).map_err(fail("evaluate"))?;
        write_outputs(&eval, &args.output)?;
        println!("{}", serde_json::json!({ "final_epoch": last, "test": eval.report }));
    } else {
        println!("{}", serde_json::json!({ "final_epoch": last }));
    }
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> CliResult {
    let ckpt = load_checkpoint(&args.checkpoint).map_err(fail("checkpoint"))?;
    let mut dataset = load_data(&args.data)?;
    if let Some(seed) = args.split_seed {
        dataset = dataset.split(seed, args.test_fraction).map_err(fail("dataset"))?.1;
    }
    let inputs = PreparedInputs::from_dataset(&dataset, ckpt.params.config.power_mode, ckpt.hyperparams.seq_len)
        .map_err(fail("evaluate"))?;
    let eval = evaluate(&ckpt.params, &inputs, &dataset).map_err(fail("evaluate"))?;
    write_outputs(&eval, &args.output)?;
    println!("{}", serde_json::to_string(&eval.report).map_err(fail("io"))?);
    Ok(())
}

fn run_predict(args: PredictArgs) -> CliResult {
    let ckpt = load_checkpoint(&args.checkpoint).map_err(fail("checkpoint"))?;
    let dataset = match (&args.data_dir, args.measure, &args.smiles, &args.sequence) {
        (Some(dir), Some(measure), _, _) => AffinityDataset::load(dir, measure).map_err(fail("dataset"))?.0,
        (None, _, Some(smiles), Some(sequence)) => {
            let one = |id: &str, text: &str| BTreeMap::from([(id.to_string(), text.to_string())]);
            AffinityDataset {
                drugs: one("drug", smiles),
                proteins: one("protein", sequence),
                records: vec![AffinityRecord {
                    drug_id: "drug".into(),
                    protein_id: "protein".into(),
                    value: f64::NAN,
                    measure: Measure::Pkd,
                }],
            }
        }
        _ => return Err(("usage", "give --data-dir/--measure or --smiles/--sequence".into())),
    };
    let preds = predictions_for(&ckpt.params, ckpt.hyperparams.seq_len, &dataset)?;
    write_csv(
        args.out.as_deref(),
        &["drug_id", "protein_id", "predicted"],
        dataset
            .records
            .iter()
            .zip(&preds)
            .map(|(r, p)| [r.drug_id.clone(), r.protein_id.clone(), format!("{p:?}")]),
    )
}

fn predictions_for(params: &ModelParameters<f32>, seq_len: usize, dataset: &AffinityDataset) -> CliResult<Vec<f64>> {
    let inputs =
        PreparedInputs::from_dataset(dataset, params.config.power_mode, seq_len).map_err(fail("predict"))?;
    predict_records(params, &inputs, &dataset.records).map_err(fail("predict"))
}

fn read_prediction_rows(path: &Path) -> CliResult<Vec<PredictionRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(fail("io"))?;
    reader
        .deserialize()
        .map(|r| r.map_err(fail("predictions")))
        .collect()
}

fn run_rank(args: RankArgs) -> CliResult {
    let rows = if let Some(path) = &args.predictions {
        read_prediction_rows(path)?
    } else {
        let (Some(kiba), Some(pkd), Some(dir)) = (&args.kiba_checkpoint, &args.pkd_checkpoint, &args.data_dir) else {
            return Err(("usage", "give --predictions or both checkpoints with --data-dir".into()));
        };
        let (drugs, proteins, _) = load_registries(dir).map_err(fail("dataset"))?;
        if !proteins.contains_key(&args.protein_id) {
            return Err(("repurpose", format!("unknown protein {:?}", args.protein_id)));
        }
        let records = drugs
            .keys()
            .map(|d| AffinityRecord {
                drug_id: d.clone(),
                protein_id: args.protein_id.clone(),
                value: f64::NAN,
                measure: Measure::Kiba,
            })
            .collect();
        let screen = AffinityDataset {
            drugs,
            proteins,
            records,
        };
        let kiba = load_checkpoint(kiba).map_err(fail("checkpoint"))?;
        let pkd = load_checkpoint(pkd).map_err(fail("checkpoint"))?;
        let kb = predictions_for(&kiba.params, kiba.hyperparams.seq_len, &screen)?;
        let db = predictions_for(&pkd.params, pkd.hyperparams.seq_len, &screen)?;
        screen
            .records
            .iter()
            .zip(kb.iter().zip(&db))
            .map(|(r, (&k, &d))| PredictionRow {
                drug_id: r.drug_id.clone(),
                protein_id: r.protein_id.clone(),
                kiba_pred: k,
                pkd_pred: d,
            })
            .collect()
    };
    let mut scored = combined_scores(&rows).map_err(fail("repurpose"))?;
    let top = rank_top_k(&scored, &args.protein_id, args.top_k).map_err(fail("repurpose"))?;
    if let Some(out) = &args.out {
        sort_scores(&mut scored);
        write_csv(
            Some(out),
            &["drug_id", "protein_id", "kiba_pred", "pkd_pred", "cb"],
            scored.iter().map(|r| {
                [
                    r.drug_id.clone(),
                    r.protein_id.clone(),
                    format!("{:?}", r.kiba_pred),
                    format!("{:?}", r.pkd_pred),
                    format!("{:?}", r.cb),
                ]
            }),
        )?;
    }
    println!("{:>4}  {:<24} {:>10} {:>10} {:>8}", "rank", "drug_id", "kiba_pred", "pkd_pred", "cb");
    for (i, r) in top.iter().enumerate() {
        println!(
            "{:>4}  {:<24} {:>10.4} {:>10.4} {:>8.4}",
            i + 1,
            r.drug_id,
            r.kiba_pred,
            r.pkd_pred,
            r.cb
        );
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> CliResult<bool> {
    let report = gradient_check(args.seed).map_err(fail("gradcheck"))?;
    println!(
        "{}",
        serde_json::json!({
            "max_relative_error": report.max_relative_error,
            "checked": report.checked,
            "skipped_kinks": report.skipped_kinks,
        })
    );
    Ok(report.max_relative_error < 1e-4)
}

/// Print clap's message followed by the flag table of the subcommand used.
fn usage_error(err: clap::Error) -> ExitCode {
    use clap::error::ErrorKind;
    if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        let _ = err.print();
        return ExitCode::SUCCESS;
    }
    let _ = err.print();
    let mut cmd = Cli::command();
    let sub = std::env::args().nth(1).unwrap_or_default();
    let help = match cmd.find_subcommand_mut(&sub) {
        Some(sc) => sc.render_help(),
        None => cmd.render_help(),
    };
    eprintln!("\n{help}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => return usage_error(err),
    };
    let result = match cli.command {
        Command::Featurize(a) => run_featurize(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Evaluate(a) => run_evaluate(a).map(|_| true),
        Command::Predict(a) => run_predict(a).map(|_| true),
        Command::Rank(a) => run_rank(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err((kind, message)) => {
            let err = CliError { error: kind, message };
            eprintln!("{}", serde_json::to_string(&err).unwrap_or_default());
            ExitCode::FAILURE
        }
    }
}
