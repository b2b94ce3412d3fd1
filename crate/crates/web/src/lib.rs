//! Browser bindings for the label compiler, the Hungarian solver and the
//! synthetic generator. Every export returns a JSON string; errors come back
//! as `{"error": "..."}` so the page needs no exception handling.

use serde_json::{json, Value as Json};
use wasm_bindgen::prelude::wasm_bindgen;

use exprtree::data::{synth_generate, SynthSpec};
use exprtree::equation::{classify_structure, evaluate, parse_decimal, parse_infix, ConstantTable, Triple, Value};
use exprtree::labels::{compile_label_sets, replay, step_stats};
use exprtree::matching::{hungarian, CostMatrix};

/// Highest placeholder index accepted in typed equations, plus one.
const MAX_NUMBERS: usize = 16;

fn error(msg: impl ToString) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

fn render(value: Option<Value>) -> Json {
    value.map_or(Json::Null, |v| Json::String(v.to_record_string()))
}

fn describe(equation: &str, numbers: &[Value], k: usize) -> Result<Json, String> {
    if k == 0 {
        return Err("K must be at least 1".into());
    }
    let mut constants = ConstantTable::default();
    let n = if numbers.is_empty() { MAX_NUMBERS } else { numbers.len() };
    let tree = parse_infix(equation, n, &mut constants).map_err(|e| e.to_string())?;
    let compiled = compile_label_sets(&tree, k).map_err(|e| e.to_string())?;
    let steps = step_stats(&tree, k).map_err(|e| e.to_string())?;
    let layers: Vec<Vec<String>> = compiled
        .layers
        .iter()
        .map(|l| l.triples.iter().map(Triple::to_string).collect())
        .collect();
    let (value, replayed) = if numbers.is_empty() {
        (None, None)
    } else {
        let values = constants.values();
        let v = evaluate(&tree, numbers, &values, &[]).map_err(|e| e.to_string())?;
        let r = replay(&compiled.layers, numbers, &values).map_err(|e| e.to_string())?;
        (Some(v), r)
    };
    Ok(json!({
        "infix": tree.infix_string(&constants),
        "prefix": tree.prefix_string(&constants),
        "structure": classify_structure(&tree).name(),
        "layers": layers,
        "warnings": compiled.warnings,
        "steps": {
            "seq2seq": steps.seq2seq_steps,
            "seq2tree": steps.seq2tree_steps,
            "seq2exp": steps.seq2exp_steps,
            "exprtree": steps.exprtree_steps,
        },
        "value": render(value),
        "replayed": render(replayed),
    }))
}

/// Label sets, structure class and step counts of an infix equation.
/// `numbers` is an optional whitespace-separated list of values for `N0, N1, ...`.
#[wasm_bindgen]
pub fn compile_equation(equation: &str, numbers: &str, k: usize) -> String {
    let parsed: Result<Vec<Value>, String> = numbers
        .split_whitespace()
        .map(|t| parse_decimal(t).map(Value::Exact).ok_or_else(|| format!("`{t}` is not a number")))
        .collect();
    match parsed.and_then(|nums| describe(equation, &nums, k)) {
        Ok(j) => j.to_string(),
        Err(e) => error(e),
    }
}

/// Optimal assignment of a square cost matrix given as rows of numbers
/// separated by newlines or semicolons.
#[wasm_bindgen]
pub fn solve_assignment(matrix: &str) -> String {
    let rows: Result<Vec<Vec<f64>>, String> = matrix
        .split(['\n', ';'])
        .filter(|r| !r.trim().is_empty())
        .map(|r| {
            r.split([' ', ',', '\t'])
                .filter(|c| !c.is_empty())
                .map(|c| c.parse::<f64>().map_err(|_| format!("`{c}` is not a number")))
                .collect()
        })
        .collect();
    let result = rows.and_then(|rows| {
        let cost = CostMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
        let beta = hungarian(&cost).map_err(|e| e.to_string())?;
        Ok(json!({ "assignment": beta.0, "total": beta.total(&cost) }))
    });
    match result {
        Ok(j) => j.to_string(),
        Err(e) => error(e),
    }
}

/// One generated word problem together with its compiled label sets.
#[wasm_bindgen]
pub fn sample_problem(seed: u32, max_nodes: usize, branch_bias: f64, k: usize) -> String {
    if max_nodes == 0 || !(0.0..=1.0).contains(&branch_bias) {
        return error("max_nodes must be positive and branch_bias in [0, 1]");
    }
    let spec = SynthSpec {
        n_instances: 1,
        max_internal_nodes: max_nodes,
        branch_bias,
        seed: seed.into(),
        ..SynthSpec::default()
    };
    let inst = synth_generate(&spec).remove(0);
    match describe(&inst.equation, &inst.numbers, k) {
        Ok(mut j) => {
            j["text"] = Json::String(inst.text.join(" "));
            j["numbers"] = inst.numbers.iter().map(|v| Json::String(v.to_record_string())).collect();
            j["answer"] = Json::String(inst.answer.to_record_string());
            j.to_string()
        }
        Err(e) => error(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Json {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn compiles_two_layer_equation() {
        let j = parse(&compile_equation("N0*N1+N2*N3", "50 5 60 4", 6));
        assert_eq!(j["layers"].as_array().unwrap().len(), 2);
        assert_eq!(j["layers"][0][0], "N0 * N1");
        assert_eq!(j["layers"][0][1], "N2 * N3");
        assert_eq!(j["structure"], "tree");
        assert_eq!(j["value"], "490");
        assert_eq!(j["replayed"], "490");
        assert_eq!(j["steps"]["exprtree"], 2);
    }

    #[test]
    fn reports_errors_as_json() {
        assert!(parse(&compile_equation("N0+", "", 6))["error"].is_string());
        assert!(parse(&compile_equation("N0+N1", "1 x", 6))["error"].is_string());
        assert!(parse(&compile_equation("N0+N1", "", 0))["error"].is_string());
        assert!(parse(&solve_assignment("1 2; 3"))["error"].is_string());
    }

    #[test]
    fn solves_small_assignment() {
        let j = parse(&solve_assignment("4 1 3\n2 0 5\n3 2 2"));
        assert_eq!(j["assignment"], json!([1, 0, 2]));
        assert_eq!(j["total"], 5.0);
    }

    #[test]
    fn sample_replays_to_its_answer() {
        for seed in 0..20 {
            let j = parse(&sample_problem(seed, 4, 0.5, 6));
            assert!(j["text"].is_string());
            assert_eq!(j["replayed"], j["value"]);
        }
    }
}
