//! Problem encoder and the query-based layer-wise decoder.
//!
//! Operand columns follow [`OperandSpace`]: problem numbers, constants,
//! results of earlier layers, then the optional pad class.

mod config;
mod vocab;

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::data::ProblemInstance;
use crate::equation::{ConstantTable, ExprTree, Operand, Operator, Triple, Value};
use crate::labels::{triples_to_tree, LabelSet};
use crate::matching::{MatchError, OperandSpace, PredictionSet};
use crate::numeric::nn::{Attention, FeedForward, LayerNorm};
use crate::numeric::{read_params, to_bytes, NumericError, ParamId, ParamStore, Tape, Tensor, Var};

pub use config::{kv_get, parse_kv, ModelConfig};
pub use vocab::{number_slot, Vocab, NUMBER_SLOTS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("problem text is empty")]
    EmptyText,
    #[error("placeholder N{0} does not occur in the text")]
    MissingNumber(usize),
    #[error("no numbers or constants to choose operands from")]
    NoOperands,
    #[error("label sets have K = {got}, model has K = {expected}")]
    KMismatch { expected: usize, got: usize },
    #[error("layer {layer} exceeds the limit of {max} layers")]
    LayerLimitExceeded { layer: usize, max: usize },
    #[error("every query predicted None at the first layer")]
    NoExpressionProduced,
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

struct EncoderBlock {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

struct Parts {
    tok_emb: ParamId,
    encoder: Vec<EncoderBlock>,
    enc_ln: LayerNorm,
    const_emb: Option<ParamId>,
    pad_emb: Option<ParamId>,
    queries: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
    head_l: FeedForward,
    head_r: FeedForward,
    head_op: FeedForward,
    op_emb: ParamId,
    var_mlp: FeedForward,
    update_mlp: FeedForward,
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub constants: ConstantTable,
    pub params: ParamStore,
    parts: Parts,
}

/// Decoder state between layers: queries `Q`, memory `P` and operand rows
/// `V_n` (numbers, constants, results; no pad row).
#[derive(Clone, Copy, Debug)]
pub struct DecodeState {
    pub queries: Var,
    pub memory: Var,
    pub operands: Var,
    pub n_numbers: usize,
    pub n_constants: usize,
    pub n_results: usize,
}

impl DecodeState {
    pub fn space(&self, pad: bool) -> OperandSpace {
        OperandSpace {
            n_constants: self.n_constants,
            n_numbers: self.n_numbers,
            n_results: self.n_results,
            pad,
        }
    }
}

/// Output of one decoder layer. Log-probability matrices are `K×6` and
/// `K×|space|`.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub queries: Var,
    pub s_l: Var,
    pub s_r: Var,
    pub s_op: Var,
    pub log_op: Var,
    pub log_left: Var,
    pub log_right: Var,
    pub space: OperandSpace,
}

impl LayerOutput {
    pub fn predictions(&self, tape: &Tape) -> PredictionSet {
        let rows = |v: Var| -> Vec<Vec<f64>> { (0..tape.rows(v)).map(|i| tape.row(v, i).to_vec()).collect() };
        PredictionSet::from_log_probs(rows(self.log_op), rows(self.log_left), rows(self.log_right))
    }
}

/// Snapshot of one inference layer, for similarity exports.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// `Q^l`, the layer's output queries.
    pub queries: Tensor,
    /// `P^{l-1}`, the memory the layer attended to.
    pub memory: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Valid triples per emitting layer, in query order.
    pub layers: Vec<Vec<Triple>>,
    /// Value of the last realized result; `None` if evaluation failed.
    pub answer: Option<Value>,
    /// Tree rooted at the last realized result.
    pub tree: Option<ExprTree>,
    pub trace: Vec<LayerTrace>,
}

impl Inference {
    pub fn layers_used(&self) -> usize {
        self.layers.len()
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.layers.iter().flatten()
    }
}

/// Sinusoidal position table, `len×d`.
pub fn sinusoid(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            out[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// Lowest index among maxima.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, constants: ConstantTable) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d;
        let hidden = config.ffn_mult * d;
        let mut p = ParamStore::new(config.seed);
        let tok_emb = p.uniform("tok_emb", &[vocab.len(), d], 1.0);
        let encoder = (0..config.encoder_depth)
            .map(|i| EncoderBlock {
                ln_attn: LayerNorm::new(&mut p, &format!("enc.{i}.ln_attn"), d),
                attn: Attention::new(&mut p, &format!("enc.{i}.attn"), d, config.n_heads),
                ln_ffn: LayerNorm::new(&mut p, &format!("enc.{i}.ln_ffn"), d),
                ffn: FeedForward::new(&mut p, &format!("enc.{i}.ffn"), d, hidden, d),
            })
            .collect();
        let enc_ln = LayerNorm::new(&mut p, "enc.ln", d);
        let const_emb = (!constants.is_empty()).then(|| p.uniform("const_emb", &[constants.len(), d], 1.0));
        let pad_emb = config.operand_pad.then(|| p.uniform("pad_emb", &[1, d], 1.0));
        let queries = p.uniform("queries", &[config.k, d], 1.0);
        let n_dec = if config.layer_shared { 1 } else { config.max_layers };
        let decoder = (0..n_dec)
            .map(|i| DecoderLayer {
                ln_self: LayerNorm::new(&mut p, &format!("dec.{i}.ln_self"), d),
                self_attn: Attention::new(&mut p, &format!("dec.{i}.self"), d, config.n_heads),
                ln_cross: LayerNorm::new(&mut p, &format!("dec.{i}.ln_cross"), d),
                cross_attn: Attention::new(&mut p, &format!("dec.{i}.cross"), d, config.n_heads),
                ln_ffn: LayerNorm::new(&mut p, &format!("dec.{i}.ln_ffn"), d),
                ffn: FeedForward::new(&mut p, &format!("dec.{i}.ffn"), d, hidden, d),
            })
            .collect();
        let dec_ln = LayerNorm::new(&mut p, "dec.ln", d);
        let head_l = FeedForward::new(&mut p, "head.l", d, d, d);
        let head_r = FeedForward::new(&mut p, "head.r", d, d, d);
        let head_op = FeedForward::new(&mut p, "head.op", d, d, d);
        let op_emb = p.uniform("op_emb", &[Operator::COUNT, d], 1.0);
        let var_mlp = FeedForward::new(&mut p, "var_mlp", 4 * d, d, d);
        let update_mlp = FeedForward::new(&mut p, "update_mlp", d, d, d);
        Ok(Model {
            config,
            vocab,
            constants,
            params: p,
            parts: Parts {
                tok_emb,
                encoder,
                enc_ln,
                const_emb,
                pad_emb,
                queries,
                decoder,
                dec_ln,
                head_l,
                head_r,
                head_op,
                op_emb,
                var_mlp,
                update_mlp,
            },
        })
    }

    /// Encodes the problem into `P` and the initial operand rows.
    pub fn encode(&self, tape: &mut Tape, inst: &ProblemInstance) -> Result<DecodeState, ModelError> {
        let p = &self.parts;
        let len = inst.text.len();
        if len == 0 {
            return Err(ModelError::EmptyText);
        }
        let positions = (0..inst.numbers.len())
            .map(|i| {
                let tok = format!("N{i}");
                inst.text.iter().position(|t| *t == tok).ok_or(ModelError::MissingNumber(i))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if positions.is_empty() && p.const_emb.is_none() {
            return Err(ModelError::NoOperands);
        }
        let ids: Vec<usize> = inst.text.iter().map(|t| self.vocab.id(t)).collect();
        let emb = tape.param(p.tok_emb);
        let mut x = tape.gather_rows(emb, &ids);
        if self.config.positional {
            let pe = tape.input(len, self.config.d, sinusoid(len, self.config.d));
            x = tape.add(x, pe);
        }
        for block in &p.encoder {
            let h = block.ln_attn.forward(tape, x);
            let a = block.attn.forward(tape, h, h, h)?;
            x = tape.add(x, a);
            let h = block.ln_ffn.forward(tape, x);
            let f = block.ffn.forward(tape, h)?;
            x = tape.add(x, f);
        }
        let memory = p.enc_ln.forward(tape, x);
        let mut rows = Vec::new();
        if !positions.is_empty() {
            rows.push(tape.gather_rows(memory, &positions));
        }
        if let Some(c) = p.const_emb {
            rows.push(tape.param(c));
        }
        let operands = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) };
        Ok(DecodeState {
            queries: tape.param(p.queries),
            memory,
            operands,
            n_numbers: positions.len(),
            n_constants: self.constants.len(),
            n_results: 0,
        })
    }

    /// One decoder layer plus the three prediction heads.
    pub fn decode_layer(&self, tape: &mut Tape, state: &DecodeState, layer: usize) -> Result<LayerOutput, ModelError> {
        if layer >= self.config.max_layers {
            return Err(ModelError::LayerLimitExceeded {
                layer,
                max: self.config.max_layers,
            });
        }
        let p = &self.parts;
        let dl = &p.decoder[if self.config.layer_shared { 0 } else { layer }];
        let mut q = state.queries;
        let h = dl.ln_self.forward(tape, q);
        let a = dl.self_attn.forward(tape, h, h, h)?;
        q = tape.add(q, a);
        let h = dl.ln_cross.forward(tape, q);
        let a = dl.cross_attn.forward(tape, h, state.memory, state.memory)?;
        q = tape.add(q, a);
        let h = dl.ln_ffn.forward(tape, q);
        let f = dl.ffn.forward(tape, h)?;
        q = tape.add(q, f);

        let out = p.dec_ln.forward(tape, q);
        let s_l = p.head_l.forward(tape, out)?;
        let s_r = p.head_r.forward(tape, out)?;
        let s_op = p.head_op.forward(tape, out)?;
        let candidates = match p.pad_emb {
            Some(pad) => {
                let pad = tape.param(pad);
                tape.concat_rows(&[state.operands, pad])
            }
            None => state.operands,
        };
        let left = tape.matmul_bt(s_l, candidates);
        let right = tape.matmul_bt(s_r, candidates);
        let op_emb = tape.param(p.op_emb);
        let ops = tape.matmul_bt(s_op, op_emb);
        for v in [left, right, ops] {
            if tape.value(v).iter().any(|x| !x.is_finite()) {
                return Err(NumericError::NaNInput.into());
            }
        }
        Ok(LayerOutput {
            queries: q,
            s_l,
            s_r,
            s_op,
            log_op: tape.log_softmax(ops),
            log_left: tape.log_softmax(left),
            log_right: tape.log_softmax(right),
            space: state.space(p.pad_emb.is_some()),
        })
    }

    /// Expression embeddings from operator and operand embeddings:
    /// `MLP([e_op; e_l; e_r; e_l∘e_r])`, one row per triple.
    pub fn realize(&self, tape: &mut Tape, state: &DecodeState, triples: &[Triple]) -> Result<Var, ModelError> {
        let space = state.space(false);
        let mut ops = Vec::with_capacity(triples.len());
        let mut ls = Vec::with_capacity(triples.len());
        let mut rs = Vec::with_capacity(triples.len());
        for t in triples {
            let col = |o: Option<Operand>| {
                let o = o.expect("realized triples are valid");
                space.column(o).ok_or(MatchError::OperandNotInVocab(o))
            };
            ops.push(t.op.index());
            ls.push(col(t.left)?);
            rs.push(col(t.right)?);
        }
        let op_emb = tape.param(self.parts.op_emb);
        let e_op = tape.gather_rows(op_emb, &ops);
        let e_l = tape.gather_rows(state.operands, &ls);
        let e_r = tape.gather_rows(state.operands, &rs);
        let prod = tape.mul(e_l, e_r);
        let x = tape.concat_cols(&[e_op, e_l, e_r, prod]);
        Ok(self.parts.var_mlp.forward(tape, x)?)
    }

    /// Appends transformed expression embeddings to `P` and `V_n`.
    pub fn update_state(&self, tape: &mut Tape, state: &DecodeState, queries: Var, vars: Option<Var>) -> Result<DecodeState, ModelError> {
        let mut next = DecodeState { queries, ..*state };
        if let Some(vars) = vars {
            let u = self.parts.update_mlp.forward(tape, vars)?;
            next.memory = tape.concat_rows(&[state.memory, u]);
            next.operands = tape.concat_rows(&[state.operands, u]);
            next.n_results += tape.rows(u);
        }
        Ok(next)
    }

    /// Teacher-forced pass: one decoder layer per label set, with gold
    /// expressions realized into the state after each layer.
    pub fn forward_train(&self, tape: &mut Tape, inst: &ProblemInstance, labels: &[LabelSet]) -> Result<Vec<LayerOutput>, ModelError> {
        if let Some(bad) = labels.iter().find(|l| l.k() != self.config.k) {
            return Err(ModelError::KMismatch {
                expected: self.config.k,
                got: bad.k(),
            });
        }
        let mut state = self.encode(tape, inst)?;
        let mut outputs = Vec::with_capacity(labels.len());
        for (layer, set) in labels.iter().enumerate() {
            let out = self.decode_layer(tape, &state, layer)?;
            let gold: Vec<Triple> = set.valid().copied().collect();
            let vars = if gold.is_empty() {
                None
            } else {
                Some(self.realize(tape, &state, &gold)?)
            };
            state = self.update_state(tape, &state, out.queries, vars)?;
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Layer-by-layer argmax decoding until every query predicts `None` or
    /// the layer limit is reached.
    pub fn infer(&self, inst: &ProblemInstance) -> Result<Inference, ModelError> {
        let mut tape = Tape::new(&self.params);
        let mut state = self.encode(&mut tape, inst)?;
        let constant_values = self.constants.values();
        let mut results: Vec<Option<Value>> = Vec::new();
        let mut layers = Vec::new();
        let mut trace = Vec::new();
        for layer in 0..self.config.max_layers {
            let out = self.decode_layer(&mut tape, &state, layer)?;
            let space = state.space(false);
            let width = space.width();
            let mut triples = Vec::new();
            for i in 0..self.config.k {
                let op = Operator::from_index(argmax(tape.row(out.log_op, i))).expect("operator row");
                if op == Operator::Null {
                    continue;
                }
                let l = argmax(&tape.row(out.log_left, i)[..width]);
                let r = argmax(&tape.row(out.log_right, i)[..width]);
                let (Some(l), Some(r)) = (space.operand(l), space.operand(r)) else {
                    unreachable!("columns below width map to operands");
                };
                triples.push(Triple::new(l, op, r));
            }
            if triples.is_empty() {
                if layer == 0 {
                    return Err(ModelError::NoExpressionProduced);
                }
                break;
            }
            trace.push(LayerTrace {
                queries: tape.to_tensor(out.queries),
                memory: tape.to_tensor(state.memory),
            });
            for t in &triples {
                let value = |o: Operand| -> Option<Value> {
                    match o {
                        Operand::Number(i) => inst.numbers.get(i).cloned(),
                        Operand::Constant(i) => constant_values.get(i).cloned(),
                        Operand::Result(i) => results.get(i).cloned().flatten(),
                    }
                };
                let v = match (t.left.and_then(value), t.right.and_then(value)) {
                    (Some(a), Some(b)) => Value::apply(t.op, a, b).ok(),
                    _ => None,
                };
                results.push(v);
            }
            let vars = self.realize(&mut tape, &state, &triples)?;
            state = self.update_state(&mut tape, &state, out.queries, Some(vars))?;
            layers.push(triples);
        }
        let flat: Vec<Triple> = layers.iter().flatten().copied().collect();
        Ok(Inference {
            answer: results.last().cloned().flatten(),
            tree: triples_to_tree(&flat),
            layers,
            trace,
        })
    }

    /// Writes `model.ckpt`, `config.txt`, `vocab.txt` and `constants.txt`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir).map_err(NumericError::from)?;
        fs::write(dir.join("model.ckpt"), to_bytes(&self.params)).map_err(NumericError::from)?;
        fs::write(dir.join("config.txt"), self.config.to_kv()).map_err(NumericError::from)?;
        fs::write(dir.join("vocab.txt"), self.vocab.to_text()).map_err(NumericError::from)?;
        let constants: String = self
            .constants
            .names()
            .zip(self.constants.values())
            .map(|(n, v)| match v {
                Value::Exact(_) => format!("{n}\texact\t{}\n", v.to_record_string()),
                Value::Real(x) => format!("{n}\treal\t{x:?}\n"),
            })
            .collect();
        fs::write(dir.join("constants.txt"), constants).map_err(NumericError::from)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let read = |name: &str| fs::read_to_string(dir.join(name)).map_err(|e| ModelError::from(NumericError::from(e)));
        let config = ModelConfig::from_kv(&parse_kv(&read("config.txt")?)?)?;
        let vocab = Vocab::from_text(&read("vocab.txt")?);
        let mut constants = ConstantTable::empty();
        for line in read("constants.txt")?.lines().filter(|l| !l.is_empty()) {
            let bad = || ModelError::Config(format!("bad constants line: {line}"));
            let mut fields = line.split('\t');
            let (Some(name), Some(kind), Some(text)) = (fields.next(), fields.next(), fields.next()) else {
                return Err(bad());
            };
            let value = match kind {
                "exact" => Value::parse_record(text).filter(|v| matches!(v, Value::Exact(_))),
                "real" => text.parse().ok().map(Value::Real),
                _ => None,
            }
            .ok_or_else(bad)?;
            constants.intern(name, value);
        }
        let mut model = Model::new(config, vocab, constants)?;
        let bytes = fs::read(dir.join("model.ckpt")).map_err(NumericError::from)?;
        let stored = read_params(bytes.as_slice())?;
        model.params.load_from(&stored)?;
        Ok(model)
    }

    /// Parameter count.
    pub fn numel(&self) -> usize {
        self.params.numel()
    }
}
