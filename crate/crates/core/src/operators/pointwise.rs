//! Element-wise operators and their fusion.
//!
//! Every pointwise node carries an [`Expr`] over its direct inputs. When
//! fusion is enabled, a pointwise task substitutes the expressions of
//! pointwise inputs recursively and requests only the non-pointwise leaves,
//! so a chain of element-wise operations runs as one kernel and produces no
//! intermediate chunks. Each substituted node is wrapped in a cast to its own
//! element type, which keeps fused and unfused results bit-identical.

use std::any::Any;
use std::collections::HashMap;
use std::sync::Arc;

use crate::chunk::{OperatorId, ParamWriter, TensorMetaData};
use crate::dtype::{ElementType, ScalarType};
use crate::engine::{ChunkRef, TaskContext};
use crate::error::{Error, Result};
use crate::graph::{Node, Operator, TaskFuture};
use crate::store::{Allocation, DataState};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Abs,
    Neg,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    /// The node's i-th input.
    Input(usize),
    Const(f64),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    /// Conversion to the given scalar type (round half to even, saturating).
    Cast(ScalarType, Box<Expr>),
}

impl Expr {
    fn serialize(&self, w: ParamWriter) -> ParamWriter {
        match self {
            Expr::Input(i) => w.str("in").u64(*i as u64),
            Expr::Const(v) => w.str("c").f64(*v),
            Expr::Unary(op, a) => a.serialize(w.str("u").u64(*op as u64)),
            Expr::Binary(op, a, b) => b.serialize(a.serialize(w.str("b").u64(*op as u64))),
            Expr::Cast(t, a) => a.serialize(w.str("cast").u64(t.code() as u64)),
        }
    }

    fn max_input(&self) -> Option<usize> {
        match self {
            Expr::Input(i) => Some(*i),
            Expr::Const(_) => None,
            Expr::Unary(_, a) | Expr::Cast(_, a) => a.max_input(),
            Expr::Binary(_, a, b) => a.max_input().max(b.max_input()),
        }
    }
}

struct Pointwise {
    expr: Expr,
}

impl Operator for Pointwise {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture {
        Box::pin(compute_pointwise(ctx, positions))
    }

    fn pointwise_expr(&self) -> Option<&Expr> {
        Some(&self.expr)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Builds a pointwise node computing `expr` over `inputs` and converting the
/// result to `output`. All inputs must share size and chunk size.
pub fn pointwise(expr: Expr, inputs: Vec<Node>, output: ElementType) -> Result<Node> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("pointwise operators need at least one input"))?;
    if let Some(m) = expr.max_input() {
        if m >= inputs.len() {
            return Err(Error::invalid(format!(
                "expression references input {m} of {}",
                inputs.len()
            )));
        }
    }
    for n in &inputs[1..] {
        if n.metadata().size() != first.metadata().size()
            || n.metadata().chunk_size() != first.metadata().chunk_size()
        {
            return Err(Error::ShapeMismatch(format!(
                "pointwise inputs {:?}/{:?} and {:?}/{:?} differ",
                first.metadata().size(),
                first.metadata().chunk_size(),
                n.metadata().size(),
                n.metadata().chunk_size()
            )));
        }
        if n.metadata().element_type().lanes != first.metadata().element_type().lanes
            && n.metadata().element_type().lanes != 1
            && first.metadata().element_type().lanes != 1
        {
            return Err(Error::TypeMismatch("pointwise inputs have different lane counts".into()));
        }
    }
    for n in &inputs {
        let l = n.metadata().element_type().lanes;
        if l != 1 && l != output.lanes {
            return Err(Error::TypeMismatch(format!(
                "cannot produce {output} from an input with {l} lanes"
            )));
        }
    }
    let md = first.metadata().with_element_type(output);
    let params = expr.serialize(ParamWriter::new()).finish();
    Ok(Node::new(
        "pointwise",
        params,
        md,
        first.embedding().cloned(),
        inputs,
        Arc::new(Pointwise { expr }),
    ))
}

fn binary(a: &Node, b: &Node, op: BinaryOp) -> Result<Node> {
    let ta = a.metadata().element_type();
    let tb = b.metadata().element_type();
    if ta != tb {
        return Err(Error::TypeMismatch(format!(
            "{op:?} of {ta} and {tb}; cast one operand first"
        )));
    }
    pointwise(
        Expr::Binary(op, Box::new(Expr::Input(0)), Box::new(Expr::Input(1))),
        vec![a.clone(), b.clone()],
        ta,
    )
}

fn with_scalar(a: &Node, v: f64, op: BinaryOp) -> Result<Node> {
    pointwise(
        Expr::Binary(op, Box::new(Expr::Input(0)), Box::new(Expr::Const(v))),
        vec![a.clone()],
        a.metadata().element_type(),
    )
}

impl Node {
    pub fn add(&self, other: &Node) -> Result<Node> {
        binary(self, other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Node) -> Result<Node> {
        binary(self, other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Node) -> Result<Node> {
        binary(self, other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Node) -> Result<Node> {
        binary(self, other, BinaryOp::Div)
    }

    pub fn min(&self, other: &Node) -> Result<Node> {
        binary(self, other, BinaryOp::Min)
    }

    pub fn max(&self, other: &Node) -> Result<Node> {
        binary(self, other, BinaryOp::Max)
    }

    pub fn add_scalar(&self, v: f64) -> Result<Node> {
        with_scalar(self, v, BinaryOp::Add)
    }

    pub fn mul_scalar(&self, v: f64) -> Result<Node> {
        with_scalar(self, v, BinaryOp::Mul)
    }

    pub fn min_scalar(&self, v: f64) -> Result<Node> {
        with_scalar(self, v, BinaryOp::Min)
    }

    pub fn max_scalar(&self, v: f64) -> Result<Node> {
        with_scalar(self, v, BinaryOp::Max)
    }

    pub fn abs(&self) -> Result<Node> {
        pointwise(
            Expr::Unary(UnaryOp::Abs, Box::new(Expr::Input(0))),
            vec![self.clone()],
            self.metadata().element_type(),
        )
    }

    pub fn neg(&self) -> Result<Node> {
        pointwise(
            Expr::Unary(UnaryOp::Neg, Box::new(Expr::Input(0))),
            vec![self.clone()],
            self.metadata().element_type(),
        )
    }

    /// Converts every element. A scalar input may be broadcast to all lanes.
    pub fn cast(&self, to: impl Into<ElementType>) -> Result<Node> {
        let to = to.into();
        pointwise(Expr::Input(0), vec![self.clone()], to)
    }
}

/// Non-pointwise nodes feeding a fused evaluation of `node`.
pub fn fused_leaves(node: &Node) -> Vec<Node> {
    let mut out: Vec<Node> = Vec::new();
    fn walk(n: &Node, out: &mut Vec<Node>) {
        for i in n.inputs() {
            if i.operator().pointwise_expr().is_some() {
                walk(i, out);
            } else if !out.iter().any(|o| o.id() == i.id()) {
                out.push(i.clone());
            }
        }
    }
    if node.operator().pointwise_expr().is_some() {
        walk(node, &mut out);
    }
    out
}

#[derive(Clone, Debug)]
enum Instr {
    Leaf(usize),
    Const(f64),
    Unary(UnaryOp),
    Binary(BinaryOp),
    Cast(ScalarType),
}

/// An expression over leaf tensors compiled to a stack program.
#[derive(Clone, Debug)]
pub(crate) struct Program {
    code: Vec<Instr>,
    depth: usize,
}

impl Program {
    fn finish(code: Vec<Instr>) -> Program {
        let mut depth = 0usize;
        let mut max = 0usize;
        for i in &code {
            match i {
                Instr::Leaf(_) | Instr::Const(_) => depth += 1,
                Instr::Binary(_) => depth -= 1,
                _ => {}
            }
            max = max.max(depth);
        }
        Program { code, depth: max }
    }

    #[inline]
    fn eval(&self, leaves: &[f64], stack: &mut Vec<f64>) -> f64 {
        stack.clear();
        for i in &self.code {
            match *i {
                Instr::Leaf(l) => stack.push(leaves[l]),
                Instr::Const(v) => stack.push(v),
                Instr::Unary(op) => {
                    let a = stack.last_mut().unwrap();
                    *a = match op {
                        UnaryOp::Abs => a.abs(),
                        UnaryOp::Neg => -*a,
                    };
                }
                Instr::Binary(op) => {
                    let b = stack.pop().unwrap();
                    let a = stack.last_mut().unwrap();
                    *a = match op {
                        BinaryOp::Add => *a + b,
                        BinaryOp::Sub => *a - b,
                        BinaryOp::Mul => *a * b,
                        BinaryOp::Div => *a / b,
                        BinaryOp::Min => a.min(b),
                        BinaryOp::Max => a.max(b),
                    };
                }
                Instr::Cast(t) => {
                    let a = stack.last_mut().unwrap();
                    *a = t.convert(*a);
                }
            }
        }
        stack[0]
    }
}

/// Fused (or plain) evaluation plan for one pointwise node.
pub(crate) struct Plan {
    pub leaves: Vec<Node>,
    program: Program,
}

impl Plan {
    pub fn new(node: &Node, fusion: bool) -> Plan {
        let leaves = if fusion {
            fused_leaves(node)
        } else {
            let mut v: Vec<Node> = Vec::new();
            for i in node.inputs() {
                if !v.iter().any(|n| n.id() == i.id()) {
                    v.push(i.clone());
                }
            }
            v
        };
        let index: HashMap<OperatorId, usize> =
            leaves.iter().enumerate().map(|(i, n)| (n.id(), i)).collect();
        let mut code = Vec::new();
        let expr = node.operator().pointwise_expr().expect("pointwise node");
        emit(node, expr, &mut code, fusion, &index);
        Plan {
            leaves,
            program: Program::finish(code),
        }
    }
}

fn emit(n: &Node, e: &Expr, code: &mut Vec<Instr>, fuse: bool, index: &HashMap<OperatorId, usize>) {
    match e {
        Expr::Input(i) => {
            let inp = &n.inputs()[*i];
            match inp.operator().pointwise_expr() {
                Some(inner) if fuse => {
                    emit(inp, inner, code, fuse, index);
                    code.push(Instr::Cast(inp.metadata().element_type().scalar));
                }
                _ => code.push(Instr::Leaf(index[&inp.id()])),
            }
        }
        Expr::Const(v) => code.push(Instr::Const(*v)),
        Expr::Unary(op, a) => {
            emit(n, a, code, fuse, index);
            code.push(Instr::Unary(*op));
        }
        Expr::Binary(op, a, b) => {
            emit(n, a, code, fuse, index);
            emit(n, b, code, fuse, index);
            code.push(Instr::Binary(*op));
        }
        Expr::Cast(t, a) => {
            emit(n, a, code, fuse, index);
            code.push(Instr::Cast(*t));
        }
    }
}

/// Evaluates `program` over whole chunks. `alias` names a leaf whose data
/// lives in `out` itself (in-place evaluation).
fn eval_chunk(
    program: &Program,
    out_type: ElementType,
    elements: usize,
    leaves: &[(ElementType, Option<Arc<Vec<u8>>>)],
    out: &mut [u8],
) {
    let lanes = out_type.lanes as usize;
    let mut vals = vec![0.0; leaves.len()];
    let mut stack = Vec::with_capacity(program.depth + 1);
    let mut aliased = vec![0.0; lanes];
    let alias = leaves.iter().find(|l| l.1.is_none()).map(|l| l.0);
    for e in 0..elements {
        if let Some(t) = alias {
            for (k, a) in aliased.iter_mut().enumerate().take(t.lanes as usize) {
                *a = t.scalar.read(out, e * t.lanes as usize + k);
            }
        }
        for k in 0..lanes {
            for (li, (t, data)) in leaves.iter().enumerate() {
                let lane = if t.lanes == 1 { 0 } else { k };
                vals[li] = match data {
                    Some(d) => t.scalar.read(d, e * t.lanes as usize + lane),
                    None => aliased[lane],
                };
            }
            let v = program.eval(&vals, &mut stack);
            out_type.scalar.write(out, e * lanes + k, v);
        }
    }
}

async fn compute_pointwise(ctx: TaskContext, positions: Vec<Vec<u64>>) -> Result<()> {
    let node = ctx.node().clone();
    let plan = Arc::new(Plan::new(&node, ctx.fusion_enabled()));
    let md: TensorMetaData = node.metadata().clone();
    let out_type = md.element_type();
    let elements = md.chunk_elements();

    let mut by_pos: Vec<Vec<Option<ChunkRef>>> = positions.iter().map(|_| Vec::new()).collect();
    for leaf in &plan.leaves {
        let chunks = ctx.request_chunks(leaf, positions.clone()).await?;
        for (i, c) in chunks.into_iter().enumerate() {
            by_pos[i].push(Some(c));
        }
    }
    let leaf_types: Vec<ElementType> = plan
        .leaves
        .iter()
        .map(|l| l.metadata().element_type())
        .collect();

    let mut jobs = Vec::with_capacity(positions.len());
    for (pos, mut chunks) in positions.iter().zip(by_pos) {
        let mut alloc: Option<Allocation<Vec<u8>>> = None;
        let mut alias: Option<usize> = None;
        if ctx.inplace_enabled() {
            for (li, t) in leaf_types.iter().enumerate() {
                if t.size() == out_type.size() && t.lanes == out_type.lanes {
                    let c = chunks[li].take().unwrap();
                    match ctx.try_inplace(c) {
                        Ok(a) => {
                            alloc = Some(a);
                            alias = Some(li);
                            break;
                        }
                        Err(c) => chunks[li] = Some(c),
                    }
                }
            }
        }
        let alloc = match alloc {
            Some(a) => a,
            None => ctx.alloc_chunk().await?,
        };
        let leaves: Vec<(ElementType, Option<Arc<Vec<u8>>>)> = chunks
            .iter()
            .enumerate()
            .map(|(li, c)| {
                if Some(li) == alias {
                    (leaf_types[li], None)
                } else {
                    (leaf_types[li], Some(c.as_ref().unwrap().payload().clone()))
                }
            })
            .collect();
        let plan = plan.clone();
        let keep = chunks;
        jobs.push((
            pos.clone(),
            ctx.run_job(move || {
                let mut alloc = alloc;
                eval_chunk(&plan.program, out_type, elements, &leaves, &mut alloc);
                drop(keep);
                Ok(alloc)
            }),
        ));
    }
    for (pos, job) in jobs {
        let alloc = job.await?;
        ctx.publish(&pos, alloc, DataState::Final)?;
    }
    Ok(())
}
