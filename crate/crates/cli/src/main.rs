//! `exprtree` command line: data generation, label compilation, training,
//! evaluation and analysis exports.
//!
//! Machine-readable output goes to stdout; logs go to stderr at the level set
//! by `EXPRTREE_LOG` (default `info`).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use exprtree::data::{load_jsonl, step_report, structure_mix, synth_generate, write_jsonl, DataError, ProblemInstance, SynthSpec};
use exprtree::equation::{ConstantTable, Triple};
use exprtree::labels::compile_label_sets;
use exprtree::matching::{assign, cost_matrix, set_loss_with, LossPolicy, Matching};
use exprtree::metrics::{evaluate_model, export_query_similarity};
use exprtree::model::{parse_kv, Model, ModelConfig, ModelError, Vocab};
use exprtree::numeric::Tape;
use exprtree::train::{gradient_check, prepare, sweep_csv, sweep_queries, train, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "exprtree", version, about = "Expression-tree decoding for math word problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic word-problem corpus as JSONL.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Upper bound on operators per equation.
        #[arg(long, default_value_t = 4)]
        max_nodes: usize,
        #[arg(long, default_value_t = 0.5)]
        branch_bias: f64,
    },
    /// Compile gold equations into per-layer label sets.
    CompileLabels {
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long)]
        input: PathBuf,
        /// JSONL destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decoding-step statistics for four generation families.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 6)]
        k: usize,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        /// key=value file; keys not given keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated query counts; trains one model per value instead.
        #[arg(long)]
        sweep_k: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Predict equations and answers, one JSON line per instance.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Show the cost matrix, matching and loss terms for one decoding layer.
    MatchDemo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Instance id; the first instance when absent.
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value = "bipartite")]
        matching: String,
    },
    /// Compare analytic and finite-difference gradients on a toy model.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        d: usize,
    },
    /// Write query-to-token cosine similarity CSVs, one per decoding layer.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes, mapped one-to-one onto exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Failure::Usage(e.to_string()),
            ModelError::EmptyText | ModelError::MissingNumber(_) => Failure::Data(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            TrainError::LabelCompileError { .. } | TrainError::EmptyData(_) => Failure::Data(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::DivergedLoss { .. } => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EXPRTREE_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Synth { n, seed, out, max_nodes, branch_bias } => synth(n, seed, &out, max_nodes, branch_bias),
        Command::CompileLabels { k, input, out } => compile_labels(k, &input, out.as_deref()),
        Command::Stats { input, k } => stats(&input, k),
        Command::Train { config, data, dev, out, sweep_k } => {
            train_cmd(config.as_deref(), &data, &dev, &out, sweep_k.as_deref())
        }
        Command::Eval { checkpoint, input } => eval(&checkpoint, &input),
        Command::Infer { checkpoint, input } => infer(&checkpoint, &input),
        Command::MatchDemo { checkpoint, input, id, layer, matching } => {
            match_demo(&checkpoint, &input, id.as_deref(), layer, &matching)
        }
        Command::GradCheck { eps, tolerance, seed, d } => grad_check(eps, tolerance, seed, d),
        Command::ExportAttn { checkpoint, input, id, out } => export_attn(&checkpoint, &input, id.as_deref(), &out),
    }
}

fn emit(text: &str) -> Outcome {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Failure::Runtime(format!("stdout: {e}")))
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_checkpoint(dir: &Path) -> Result<Model, Failure> {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("checkpoint directory {} does not exist", dir.display())));
    }
    Model::load(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn find<'a>(data: &'a [ProblemInstance], id: Option<&str>) -> Result<&'a ProblemInstance, Failure> {
    match id {
        None => data.first().ok_or_else(|| Failure::Data("input has no instances".into())),
        Some(id) => data
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Failure::Data(format!("no instance with id {id}"))),
    }
}

fn synth(n: usize, seed: u64, out: &Path, max_nodes: usize, branch_bias: f64) -> Outcome {
    if n == 0 || max_nodes == 0 {
        return Err(Failure::Usage("--n and --max-nodes must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&branch_bias) {
        return Err(Failure::Usage("--branch-bias must lie in [0, 1]".into()));
    }
    let spec = SynthSpec {
        n_instances: n,
        max_internal_nodes: max_nodes,
        branch_bias,
        seed,
        ..SynthSpec::default()
    };
    let data = synth_generate(&spec);
    write_jsonl(out, &data)?;
    info!("wrote {} instances to {}", data.len(), out.display());
    let mut csv = String::from("structure,fraction\n");
    for (s, f) in structure_mix(&data) {
        let _ = writeln!(csv, "{},{f:.6}", s.name());
    }
    emit(&csv)
}

fn render_triples(triples: &[Triple]) -> Vec<String> {
    triples.iter().map(Triple::to_string).collect()
}

fn compile_labels(k: usize, input: &Path, out: Option<&Path>) -> Outcome {
    if k == 0 {
        return Err(Failure::Usage("--k must be at least 1".into()));
    }
    let mut constants = ConstantTable::default();
    let data = load_jsonl(input, &mut constants)?;
    let mut lines = String::new();
    for inst in &data {
        let tree = inst.tree(&mut constants)?;
        let compiled = compile_label_sets(&tree, k).map_err(DataError::from)?;
        for w in &compiled.warnings {
            log::warn!("{}: {w}", inst.id);
        }
        let layers: Vec<Vec<String>> = compiled.layers.iter().map(|l| render_triples(&l.triples)).collect();
        let record = json!({"id": inst.id, "layers": layers, "warnings": compiled.warnings});
        let _ = writeln!(lines, "{record}");
    }
    match out {
        Some(path) => {
            write_file(path, &lines)?;
            info!("wrote label sets for {} instances to {}", data.len(), path.display());
            Ok(())
        }
        None => emit(&lines),
    }
}

fn stats(input: &Path, k: usize) -> Outcome {
    if k == 0 {
        return Err(Failure::Usage("--k must be at least 1".into()));
    }
    let mut constants = ConstantTable::default();
    let data = load_jsonl(input, &mut constants)?;
    let report = step_report(&data, &mut constants, k)?;
    emit(&report.to_csv())
}

fn train_cmd(config: Option<&Path>, data: &Path, dev: &Path, out: &Path, sweep_k: Option<&str>) -> Outcome {
    let config = match config {
        None => TrainConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let kv = parse_kv(&text).map_err(|e| Failure::Usage(e.to_string()))?;
            TrainConfig::from_kv(&kv)?
        }
    };
    config.validate()?;
    let train_set = load_jsonl(data, &mut ConstantTable::default())?;
    let dev_set = load_jsonl(dev, &mut ConstantTable::default())?;

    if let Some(list) = sweep_k {
        let ks = list
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::Usage(format!("--sweep-k: {e}")))?;
        if ks.is_empty() || ks.contains(&0) {
            return Err(Failure::Usage("--sweep-k needs positive query counts".into()));
        }
        let rows = sweep_queries(&config, &ks, &train_set, &dev_set);
        let csv = sweep_csv(&rows);
        fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
        write_file(&out.join("sweep.csv"), &csv)?;
        return emit(&csv);
    }

    let trained = train(&config, &train_set, &dev_set)?;
    trained.model.save(out)?;
    let report = serde_json::to_string_pretty(&trained.report).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_file(&out.join("report.json"), &report)?;
    info!("checkpoint written to {}", out.display());
    let mut csv = String::from("seed,best_epoch,best_dev_accuracy\n");
    for r in &trained.report.runs {
        let _ = writeln!(csv, "{},{},{:.6}", r.seed, r.best_epoch, r.best_dev_accuracy);
    }
    emit(&csv)
}

fn eval(checkpoint: &Path, input: &Path) -> Outcome {
    let model = load_checkpoint(checkpoint)?;
    let data = load_jsonl(input, &mut model.constants.clone())?;
    let report = evaluate_model(&model, &data);
    emit(&report.to_csv())
}

fn infer(checkpoint: &Path, input: &Path) -> Outcome {
    let model = load_checkpoint(checkpoint)?;
    let data = load_jsonl(input, &mut model.constants.clone())?;
    let mut lines = String::new();
    for inst in &data {
        let record = match model.infer(inst) {
            Ok(r) => json!({
                "id": inst.id,
                "equation": r.tree.as_ref().map(|t| t.infix_string(&model.constants)),
                "answer": r.answer.map(|v| v.to_record_string()),
                "layers": r.layers.iter().map(|l| render_triples(l)).collect::<Vec<_>>(),
            }),
            Err(e) => json!({"id": inst.id, "error": e.to_string()}),
        };
        let _ = writeln!(lines, "{record}");
    }
    emit(&lines)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', ' ']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn match_demo(checkpoint: &Path, input: &Path, id: Option<&str>, layer: usize, matching: &str) -> Outcome {
    let matching = Matching::from_name(matching)
        .ok_or_else(|| Failure::Usage(format!("unknown matching `{matching}`; use bipartite, sequence or random")))?;
    let model = load_checkpoint(checkpoint)?;
    let data = load_jsonl(input, &mut model.constants.clone())?;
    let inst = find(&data, id)?;
    let mut constants = model.constants.clone();
    let labels = prepare(std::slice::from_ref(inst), &mut constants, &model.config)?
        .pop()
        .ok_or_else(|| Failure::Data(format!("{} needs more than max_layers layers", inst.id)))?
        .labels;
    if layer >= labels.len() {
        return Err(Failure::Usage(format!("--layer {layer} out of range; instance has {} label layers", labels.len())));
    }
    let policy = LossPolicy {
        matching,
        operand_none_loss: model.config.operand_pad,
        ..LossPolicy::default()
    };
    let mut tape = Tape::new(&model.params);
    let outputs = model.forward_train(&mut tape, inst, &labels[..=layer])?;
    let out = &outputs[layer];
    let preds = out.predictions(&tape);
    let gold = &labels[layer];
    let cost = cost_matrix(gold, &preds, &out.space).map_err(ModelError::from)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let beta = assign(gold, &preds, &out.space, matching, &mut rng).map_err(ModelError::from)?;
    let loss = set_loss_with(gold, &preds, &out.space, &policy, beta.clone()).map_err(ModelError::from)?;

    let k = cost.k();
    let mut s = String::from("gold");
    for j in 0..k {
        let _ = write!(s, ",p{j}");
    }
    s.push('\n');
    for (i, row) in cost.rows().enumerate() {
        s.push_str(&csv_field(&gold.triples[i].to_string()));
        for c in row {
            let _ = write!(s, ",{c:.6}");
        }
        s.push('\n');
    }
    s.push_str("\ngold,pred,cost,op_loss,left_loss,right_loss\n");
    for (i, terms) in loss.rows.iter().enumerate() {
        let j = beta.0[i];
        let _ = writeln!(
            s,
            "{},p{j},{:.6},{:.6},{:.6},{:.6}",
            csv_field(&gold.triples[i].to_string()),
            cost.get(i, j),
            terms.op,
            terms.left,
            terms.right
        );
    }
    let _ = writeln!(s, "\nmatching,total_cost,set_loss\n{},{:.6},{:.6}", matching.name(), beta.total(&cost), loss.loss);
    emit(&s)
}

fn grad_check(eps: f64, tolerance: f64, seed: u64, d: usize) -> Outcome {
    if !(eps > 0.0) || d < 2 || d % 2 != 0 {
        return Err(Failure::Usage("--eps must be positive and --d an even number ≥ 2".into()));
    }
    let inst = ProblemInstance::toy();
    let config = ModelConfig {
        d,
        k: 3,
        max_layers: 3,
        n_heads: 2,
        encoder_depth: 1,
        seed,
        ..ModelConfig::default()
    };
    let model = Model::new(config, Vocab::build([inst.text.as_slice()]), ConstantTable::default())?;
    let report = gradient_check(&model, &inst, &LossPolicy::default(), eps)?;
    let verdict = if report.max_rel_error < tolerance { "pass" } else { "fail" };
    emit(&format!(
        "checked,max_rel_error,worst_param,verdict\n{},{:.3e},{},{verdict}\n",
        report.checked,
        report.max_rel_error,
        report.worst_param.as_deref().unwrap_or(""),
    ))?;
    if verdict == "fail" {
        return Err(Failure::Runtime(format!("max relative error {:.3e} ≥ {tolerance:e}", report.max_rel_error)));
    }
    Ok(())
}

fn export_attn(checkpoint: &Path, input: &Path, id: Option<&str>, out: &Path) -> Outcome {
    let model = load_checkpoint(checkpoint)?;
    let data = load_jsonl(input, &mut model.constants.clone())?;
    let inst = find(&data, id)?;
    let files = export_query_similarity(&model, inst, out)?;
    let mut csv = String::from("layer,path\n");
    for (l, f) in files.iter().enumerate() {
        let _ = writeln!(csv, "{l},{}", f.display());
    }
    emit(&csv)
}
