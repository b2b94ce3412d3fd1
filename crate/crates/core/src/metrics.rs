//! Evaluation of a solver over a dataset, and query-similarity exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ProblemInstance;
use crate::equation::{canonical_equal, classify_structure, ConstantTable, ExprTree, Structure};
use crate::labels::{compile_label_sets, replay, triples_to_tree};
use crate::model::{Inference, Model, ModelError};
use crate::numeric::Tensor;

/// Relative tolerance for answer matching.
pub const ANSWER_REL_TOL: f64 = 1e-4;

/// Anything that maps a problem to layer-wise expressions.
pub trait Solver: Sync {
    fn solve(&self, inst: &ProblemInstance) -> Result<Inference, ModelError>;
    /// Table used to parse gold equations.
    fn constants(&self) -> &ConstantTable;
}

impl Solver for Model {
    fn solve(&self, inst: &ProblemInstance) -> Result<Inference, ModelError> {
        self.infer(inst)
    }

    fn constants(&self) -> &ConstantTable {
        &self.constants
    }
}

/// Replays compiled gold labels; an upper bound for any solver.
pub struct GoldReplay {
    pub k: usize,
    pub constants: ConstantTable,
}

impl Solver for GoldReplay {
    fn solve(&self, inst: &ProblemInstance) -> Result<Inference, ModelError> {
        let mut c = self.constants.clone();
        let tree = inst.tree(&mut c).map_err(|e| ModelError::Config(e.to_string()))?;
        let layers = compile_label_sets(&tree, self.k)
            .map_err(|e| ModelError::Config(e.to_string()))?
            .layers;
        if layers.is_empty() {
            return Err(ModelError::NoExpressionProduced);
        }
        let answer = replay(&layers, &inst.numbers, &c.values()).ok().flatten();
        let layers: Vec<_> = layers.iter().map(|l| l.valid().copied().collect::<Vec<_>>()).collect();
        let flat: Vec<_> = layers.iter().flatten().copied().collect();
        Ok(Inference {
            tree: triples_to_tree(&flat),
            answer,
            layers,
            trace: Vec::new(),
        })
    }

    fn constants(&self) -> &ConstantTable {
        &self.constants
    }
}

/// Outcome of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub structure: Option<Structure>,
    pub answer_correct: bool,
    pub equation_correct: bool,
    /// Zero when inference failed.
    pub layers_used: usize,
    pub first_layer_emitted: usize,
    pub gold_first_layer: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StructureStat {
    pub count: usize,
    pub answer_accuracy: f64,
    pub equation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub answer_accuracy: f64,
    pub equation_accuracy: f64,
    pub per_structure: BTreeMap<String, StructureStat>,
    /// Over instances where inference succeeded.
    pub layers_avg: f64,
    pub layers_std: f64,
    pub layers_max: usize,
    /// Instances whose gold first layer holds ≥2 expressions.
    pub parallel_eligible: usize,
    /// Share of eligible instances with ≥2 expressions emitted at layer 0.
    pub parallelism_rate: f64,
    pub parallel_eligible_solved: usize,
    /// Same share restricted to correctly answered instances.
    pub parallelism_rate_solved: f64,
    pub failures: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn from_records(records: &[InstanceRecord]) -> Self {
        let n = records.len();
        let count = |f: &dyn Fn(&InstanceRecord) -> bool| records.iter().filter(|r| f(r)).count();
        let mut per_structure = BTreeMap::new();
        for s in Structure::ALL {
            let group: Vec<&InstanceRecord> = records.iter().filter(|r| r.structure == Some(s)).collect();
            per_structure.insert(
                s.name().to_string(),
                StructureStat {
                    count: group.len(),
                    answer_accuracy: ratio(group.iter().filter(|r| r.answer_correct).count(), group.len()),
                    equation_accuracy: ratio(group.iter().filter(|r| r.equation_correct).count(), group.len()),
                },
            );
        }
        let ok: Vec<f64> = records
            .iter()
            .filter(|r| r.error.is_none())
            .map(|r| r.layers_used as f64)
            .collect();
        let avg = if ok.is_empty() { 0.0 } else { ok.iter().sum::<f64>() / ok.len() as f64 };
        let std = if ok.is_empty() {
            0.0
        } else {
            (ok.iter().map(|x| (x - avg).powi(2)).sum::<f64>() / ok.len() as f64).sqrt()
        };
        let eligible = |r: &InstanceRecord| r.gold_first_layer >= 2;
        let parallel = |r: &InstanceRecord| r.first_layer_emitted >= 2;
        let eligible_n = count(&eligible);
        let eligible_solved = count(&|r| eligible(r) && r.answer_correct);
        EvalReport {
            instances: n,
            answer_accuracy: ratio(count(&|r| r.answer_correct), n),
            equation_accuracy: ratio(count(&|r| r.equation_correct), n),
            per_structure,
            layers_avg: avg,
            layers_std: std,
            layers_max: records.iter().map(|r| r.layers_used).max().unwrap_or(0),
            parallel_eligible: eligible_n,
            parallelism_rate: ratio(count(&|r| eligible(r) && parallel(r)), eligible_n),
            parallel_eligible_solved: eligible_solved,
            parallelism_rate_solved: ratio(count(&|r| eligible(r) && r.answer_correct && parallel(r)), eligible_solved),
            failures: count(&|r| r.error.is_some()),
        }
    }

    /// `metric,value` rows, per-structure rows included.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "instances,{}", self.instances);
        let _ = writeln!(s, "answer_accuracy,{:.6}", self.answer_accuracy);
        let _ = writeln!(s, "equation_accuracy,{:.6}", self.equation_accuracy);
        for (name, st) in &self.per_structure {
            let _ = writeln!(s, "{name}_count,{}", st.count);
            let _ = writeln!(s, "{name}_answer_accuracy,{:.6}", st.answer_accuracy);
            let _ = writeln!(s, "{name}_equation_accuracy,{:.6}", st.equation_accuracy);
        }
        let _ = writeln!(s, "layers_avg,{:.6}", self.layers_avg);
        let _ = writeln!(s, "layers_std,{:.6}", self.layers_std);
        let _ = writeln!(s, "layers_max,{}", self.layers_max);
        let _ = writeln!(s, "parallel_eligible,{}", self.parallel_eligible);
        let _ = writeln!(s, "parallelism_rate,{:.6}", self.parallelism_rate);
        let _ = writeln!(s, "parallel_eligible_solved,{}", self.parallel_eligible_solved);
        let _ = writeln!(s, "parallelism_rate_solved,{:.6}", self.parallelism_rate_solved);
        let _ = writeln!(s, "failures,{}", self.failures);
        s
    }
}

fn gold_tree(inst: &ProblemInstance, constants: &ConstantTable) -> Option<ExprTree> {
    inst.tree(&mut constants.clone()).ok()
}

pub fn evaluate_instance<S: Solver + ?Sized>(solver: &S, inst: &ProblemInstance, k: usize) -> InstanceRecord {
    let gold = gold_tree(inst, solver.constants());
    let gold_first_layer = gold
        .as_ref()
        .and_then(|t| compile_label_sets(t, k).ok())
        .and_then(|c| c.layers.first().map(|l| l.valid_count()))
        .unwrap_or(0);
    let mut rec = InstanceRecord {
        id: inst.id.clone(),
        structure: gold.as_ref().map(classify_structure),
        answer_correct: false,
        equation_correct: false,
        layers_used: 0,
        first_layer_emitted: 0,
        gold_first_layer,
        error: None,
    };
    match solver.solve(inst) {
        Ok(inf) => {
            rec.answer_correct = inf.answer.is_some_and(|a| a.approx_eq(&inst.answer, ANSWER_REL_TOL));
            rec.equation_correct = match (&inf.tree, &gold) {
                (Some(p), Some(g)) => canonical_equal(p, g),
                _ => false,
            };
            rec.layers_used = inf.layers_used();
            rec.first_layer_emitted = inf.layers.first().map_or(0, Vec::len);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Per-instance records in dataset order, computed on all available cores.
pub fn evaluate_records<S: Solver + ?Sized>(solver: &S, data: &[ProblemInstance], k: usize) -> Vec<InstanceRecord> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(data.len().max(1));
    if threads <= 1 {
        return data.iter().map(|i| evaluate_instance(solver, i, k)).collect();
    }
    let chunk = data.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|i| evaluate_instance(solver, i, k)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation thread"))
            .collect()
    })
}

pub fn evaluate_model(model: &Model, data: &[ProblemInstance]) -> EvalReport {
    EvalReport::from_records(&evaluate_records(model, data, model.config.k))
}

/// Cosine similarity of every query row with every memory row.
pub fn cosine_matrix(queries: &Tensor, memory: &Tensor) -> Vec<Vec<f64>> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (0..queries.rows())
        .map(|i| {
            let q = queries.row(i);
            (0..memory.rows())
                .map(|j| {
                    let p = memory.row(j);
                    let dot: f64 = q.iter().zip(p).map(|(a, b)| a * b).sum();
                    let den = norm(q) * norm(p);
                    if den == 0.0 {
                        0.0
                    } else {
                        dot / den
                    }
                })
                .collect()
        })
        .collect()
}

pub fn similarity_csv(matrix: &[Vec<f64>]) -> String {
    let cols = matrix.first().map_or(0, Vec::len);
    let mut s = String::from("query");
    for j in 0..cols {
        let _ = write!(s, ",p{j}");
    }
    s.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        let _ = write!(s, "q{i}");
        for v in row {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}

/// Writes `layer_<l>.csv` (K × memory length) for each emitting inference layer.
pub fn export_query_similarity(model: &Model, inst: &ProblemInstance, dir: &Path) -> Result<Vec<PathBuf>, ModelError> {
    let inf = model.infer(inst)?;
    fs::create_dir_all(dir).map_err(crate::numeric::NumericError::from)?;
    let mut paths = Vec::new();
    for (l, layer) in inf.trace.iter().enumerate() {
        let path = dir.join(format!("layer_{l}.csv"));
        fs::write(&path, similarity_csv(&cosine_matrix(&layer.queries, &layer.memory)))
            .map_err(crate::numeric::NumericError::from)?;
        paths.push(path);
    }
    Ok(paths)
}
