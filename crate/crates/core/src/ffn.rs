//! Feedforward blocks acting column-wise on `rows x n` matrices.
//!
//! A block of depth `L` is `L - 1` activated affine layers followed by a
//! final affine layer with identity activation. Biases are full matrices, so
//! each column may be shifted differently. There are no skip connections.

use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::error::{KstError, Result};
use crate::matrix::Matrix;
use crate::scalar::{ActivationKind, Arith, Mode, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix<Scalar>,
    pub bias: Matrix<Scalar>,
    pub activations: Vec<ActivationKind>,
}

impl Layer {
    pub fn new(weight: Matrix<Scalar>, bias: Matrix<Scalar>, activations: Vec<ActivationKind>) -> Self {
        Layer { weight, bias, activations }
    }

    /// Layer with the same activation on every unit.
    pub fn uniform(weight: Matrix<Scalar>, bias: Matrix<Scalar>, activation: ActivationKind) -> Self {
        let units = weight.rows();
        Layer { weight, bias, activations: vec![activation; units] }
    }

    pub fn units(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BlockRepr", into = "BlockRepr")]
pub struct FfnBlock {
    input_rows: usize,
    output_rows: usize,
    n_columns: usize,
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct BlockRepr {
    input_rows: usize,
    output_rows: usize,
    n_columns: usize,
    layers: Vec<Layer>,
}

impl TryFrom<BlockRepr> for FfnBlock {
    type Error = KstError;
    fn try_from(repr: BlockRepr) -> Result<Self> {
        let block = FfnBlock::new(repr.layers, repr.n_columns)?;
        if block.input_rows != repr.input_rows || block.output_rows != repr.output_rows {
            return Err(KstError::ShapeMismatch("declared block dimensions disagree with its layers".into()));
        }
        if block.layers.last().is_some_and(|l| l.activations.iter().any(|a| *a != ActivationKind::Identity)) {
            return Err(KstError::ShapeMismatch("final layer must be linear".into()));
        }
        Ok(block)
    }
}

impl From<FfnBlock> for BlockRepr {
    fn from(b: FfnBlock) -> Self {
        BlockRepr { input_rows: b.input_rows, output_rows: b.output_rows, n_columns: b.n_columns, layers: b.layers }
    }
}

impl FfnBlock {
    /// Validates the layer chain and forces the final layer to be linear.
    pub fn new(mut layers: Vec<Layer>, n_columns: usize) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| KstError::ShapeMismatch("a block needs at least one layer".into()))?;
        let input_rows = first.weight.cols();
        let mut prev = input_rows;
        for (i, layer) in layers.iter().enumerate() {
            let units = layer.weight.rows();
            if layer.weight.cols() != prev {
                return Err(KstError::ShapeMismatch(format!(
                    "layer {i} expects {} inputs but receives {prev}",
                    layer.weight.cols()
                )));
            }
            if layer.bias.shape() != (units, n_columns) {
                return Err(KstError::ShapeMismatch(format!(
                    "layer {i} bias is {}x{}, expected {units}x{n_columns}",
                    layer.bias.rows(),
                    layer.bias.cols()
                )));
            }
            if layer.activations.len() != units {
                return Err(KstError::ShapeMismatch(format!(
                    "layer {i} has {} activation tags for {units} units",
                    layer.activations.len()
                )));
            }
            prev = units;
        }
        if let Some(last) = layers.last_mut() {
            last.activations.iter_mut().for_each(|a| *a = ActivationKind::Identity);
        }
        Ok(FfnBlock { input_rows, output_rows: prev, n_columns, layers })
    }

    /// Single affine map `W X + B`.
    pub fn affine(weight: Matrix<Scalar>, bias: Matrix<Scalar>) -> Result<Self> {
        let n_columns = bias.cols();
        FfnBlock::new(vec![Layer::uniform(weight, bias, ActivationKind::Identity)], n_columns)
    }

    pub fn identity(rows: usize, n_columns: usize) -> Self {
        FfnBlock::affine(Matrix::identity(rows), Matrix::exact_zeros(rows, n_columns))
            .expect("identity block is well formed")
    }

    pub fn input_rows(&self) -> usize {
        self.input_rows
    }

    pub fn output_rows(&self) -> usize {
        self.output_rows
    }

    pub fn n_columns(&self) -> usize {
        self.n_columns
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of affine maps.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Largest layer size.
    pub fn width(&self) -> usize {
        self.layers.iter().map(Layer::units).max().unwrap_or(0)
    }

    /// Activation kinds used by hidden layers, in first-use order.
    pub fn activation_set(&self) -> Vec<ActivationKind> {
        let mut kinds = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            for a in &layer.activations {
                if !kinds.contains(a) {
                    kinds.push(*a);
                }
            }
        }
        kinds
    }

    /// True when every weight and bias is exact and every activation can run exactly.
    pub fn exact_capable(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.mode() != Some(Mode::Float)
                && l.bias.mode() != Some(Mode::Float)
                && l.activations.iter().all(|a| a.exact_capable())
        })
    }

    /// Repeats the bias columns so the block acts on `n` columns.
    pub fn broadcast(&self, n: usize) -> Result<FfnBlock> {
        if self.n_columns != 1 {
            return Err(KstError::ShapeMismatch("only single-column blocks can be broadcast".into()));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weight: l.weight.clone(),
                bias: Matrix::from_fn(l.units(), n, |r, _| l.bias.get(r, 0).clone()),
                activations: l.activations.clone(),
            })
            .collect();
        FfnBlock::new(layers, n)
    }

    /// Replaces the bias of the first layer by `W_1 * shift + B_1`, i.e. the
    /// block is applied to `X + shift`.
    pub fn with_input_shift(&self, shift: &Matrix<Scalar>) -> Result<FfnBlock> {
        if shift.shape() != (self.input_rows, self.n_columns) {
            return Err(KstError::ShapeMismatch("input shift shape".into()));
        }
        let mut layers = self.layers.clone();
        let first = &mut layers[0];
        let moved = scalar_matmul(&first.weight, shift)?;
        first.bias = scalar_add(&moved, &first.bias)?;
        FfnBlock::new(layers, self.n_columns)
    }

    /// Adds `offset` to the output.
    pub fn with_output_offset(&self, offset: &Matrix<Scalar>) -> Result<FfnBlock> {
        let mut layers = self.layers.clone();
        let last = layers.last_mut().expect("non-empty");
        last.bias = scalar_add(&last.bias, offset)?;
        FfnBlock::new(layers, self.n_columns)
    }

    pub fn lower<T: Arith>(&self) -> Result<LoweredBlock<T>> {
        let layers = self
            .layers
            .iter()
            .map(|l| -> Result<LoweredLayer<T>> {
                if T::MODE == Mode::Exact {
                    if let Some(bad) = l.activations.iter().find(|a| !a.exact_capable()) {
                        return Err(KstError::ModeUnsupported(format!(
                            "activation `{bad}` cannot run in exact mode"
                        )));
                    }
                }
                Ok(LoweredLayer {
                    weight: l.weight.lower()?,
                    bias: l.bias.lower()?,
                    activations: l.activations.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LoweredBlock { input_rows: self.input_rows, n_columns: self.n_columns, layers })
    }
}

/// A block whose weights have been converted to one numeric backend.
#[derive(Clone, Debug)]
pub struct LoweredBlock<T> {
    input_rows: usize,
    n_columns: usize,
    layers: Vec<LoweredLayer<T>>,
}

#[derive(Clone, Debug)]
struct LoweredLayer<T> {
    weight: Matrix<T>,
    bias: Matrix<T>,
    activations: Vec<ActivationKind>,
}

impl<T: Arith> LoweredBlock<T> {
    pub fn eval(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.shape() != (self.input_rows, self.n_columns) {
            return Err(KstError::ShapeMismatch(format!(
                "block expects {}x{} input, got {}x{}",
                self.input_rows,
                self.n_columns,
                x.rows(),
                x.cols()
            )));
        }
        let mut current = x.clone();
        for layer in &self.layers {
            let pre = layer.weight.matmul(&current)?.add(&layer.bias)?;
            let mut next = pre;
            for r in 0..next.rows() {
                let kind = layer.activations[r];
                if kind == ActivationKind::Identity {
                    continue;
                }
                for c in 0..next.cols() {
                    let v = T::activate(kind, next.get(r, c).clone())?;
                    next.set(r, c, v);
                }
            }
            current = next;
        }
        Ok(current)
    }
}

/// Evaluates `block` on `x`; the entries of `x` must all be in `mode`.
pub fn eval_ffn(block: &FfnBlock, x: &Matrix<Scalar>, mode: Mode) -> Result<Matrix<Scalar>> {
    match mode {
        Mode::Exact => {
            let input = x.read::<BigRational>()?;
            Ok(block.lower::<BigRational>()?.eval(&input)?.into_scalars())
        }
        Mode::Float => {
            let input = x.read::<f64>()?;
            Ok(block.lower::<f64>()?.eval(&input)?.into_scalars())
        }
    }
}

/// Sequential composition. The final linear map of each block is folded into
/// the first layer of the next, so depths add up minus one per junction.
pub fn stack(blocks: &[FfnBlock]) -> Result<FfnBlock> {
    let (first, rest) = blocks
        .split_first()
        .ok_or_else(|| KstError::ShapeMismatch("stack of zero blocks".into()))?;
    let mut acc = first.clone();
    for next in rest {
        if acc.output_rows != next.input_rows || acc.n_columns != next.n_columns {
            return Err(KstError::ShapeMismatch(format!(
                "cannot feed {}x{} output into a block expecting {}x{}",
                acc.output_rows, acc.n_columns, next.input_rows, next.n_columns
            )));
        }
        let mut layers = acc.layers.clone();
        let junction = layers.pop().expect("non-empty");
        let head = &next.layers[0];
        let weight = scalar_matmul(&head.weight, &junction.weight)?;
        let bias = scalar_add(&scalar_matmul(&head.weight, &junction.bias)?, &head.bias)?;
        layers.push(Layer { weight, bias, activations: head.activations.clone() });
        layers.extend(next.layers[1..].iter().cloned());
        acc = FfnBlock::new(layers, acc.n_columns)?;
    }
    Ok(acc)
}

/// Blocks sharing one input, outputs stacked in order.
pub fn concat_parallel(blocks: &[FfnBlock]) -> Result<FfnBlock> {
    combine(blocks, true)
}

/// Blocks applied to consecutive slices of the input rows, outputs stacked.
pub fn block_diagonal(blocks: &[FfnBlock]) -> Result<FfnBlock> {
    combine(blocks, false)
}

fn pad_to_depth(block: &FfnBlock, depth: usize) -> Result<FfnBlock> {
    let mut layers = block.layers.clone();
    while layers.len() < depth {
        let rows = layers.last().expect("non-empty").units();
        layers.push(Layer::uniform(
            Matrix::identity(rows),
            Matrix::exact_zeros(rows, block.n_columns),
            ActivationKind::Identity,
        ));
    }
    FfnBlock::new(layers, block.n_columns)
}

fn combine(blocks: &[FfnBlock], shared_input: bool) -> Result<FfnBlock> {
    let first = blocks
        .first()
        .ok_or_else(|| KstError::ShapeMismatch("combination of zero blocks".into()))?;
    let n_columns = first.n_columns;
    if blocks.iter().any(|b| b.n_columns != n_columns) {
        return Err(KstError::ShapeMismatch("blocks act on different column counts".into()));
    }
    if shared_input && blocks.iter().any(|b| b.input_rows != first.input_rows) {
        return Err(KstError::ShapeMismatch("parallel blocks must share input rows".into()));
    }
    let depth = blocks.iter().map(FfnBlock::depth).max().unwrap_or(1);
    let padded = blocks.iter().map(|b| pad_to_depth(b, depth)).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let members: Vec<&Layer> = padded.iter().map(|b| &b.layers[l]).collect();
        let rows: usize = members.iter().map(|m| m.units()).sum();
        let cols: usize = if l == 0 && shared_input {
            first.input_rows
        } else {
            members.iter().map(|m| m.weight.cols()).sum()
        };
        let mut weight = Matrix::exact_zeros(rows, cols);
        let mut bias = Matrix::exact_zeros(rows, n_columns);
        let mut activations = Vec::with_capacity(rows);
        let (mut r0, mut c0) = (0, 0);
        for m in &members {
            for r in 0..m.units() {
                for c in 0..m.weight.cols() {
                    weight.set(r0 + r, c0 + c, m.weight.get(r, c).clone());
                }
                for c in 0..n_columns {
                    bias.set(r0 + r, c, m.bias.get(r, c).clone());
                }
            }
            activations.extend(m.activations.iter().copied());
            r0 += m.units();
            if !(l == 0 && shared_input) {
                c0 += m.weight.cols();
            }
        }
        layers.push(Layer { weight, bias, activations });
    }
    FfnBlock::new(layers, n_columns)
}

fn common_mode(a: &Matrix<Scalar>, b: &Matrix<Scalar>) -> Mode {
    if a.iter().chain(b.iter()).any(|s| s.mode() == Mode::Float) {
        Mode::Float
    } else {
        Mode::Exact
    }
}

pub(crate) fn scalar_matmul(a: &Matrix<Scalar>, b: &Matrix<Scalar>) -> Result<Matrix<Scalar>> {
    match common_mode(a, b) {
        Mode::Exact => Ok(a.lower::<BigRational>()?.matmul(&b.lower::<BigRational>()?)?.into_scalars()),
        Mode::Float => Ok(a.lower::<f64>()?.matmul(&b.lower::<f64>()?)?.into_scalars()),
    }
}

pub(crate) fn scalar_add(a: &Matrix<Scalar>, b: &Matrix<Scalar>) -> Result<Matrix<Scalar>> {
    match common_mode(a, b) {
        Mode::Exact => Ok(a.lower::<BigRational>()?.add(&b.lower::<BigRational>()?)?.into_scalars()),
        Mode::Float => Ok(a.lower::<f64>()?.add(&b.lower::<f64>()?)?.into_scalars()),
    }
}

/// Feedforward net acting on single vectors (bias vectors instead of matrices).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorNet(FfnBlock);

impl VectorNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        FfnBlock::new(layers, 1).map(VectorNet)
    }

    pub fn from_block(block: FfnBlock) -> Result<Self> {
        if block.n_columns != 1 {
            return Err(KstError::ShapeMismatch("vector nets carry a single bias column".into()));
        }
        Ok(VectorNet(block))
    }

    pub fn block(&self) -> &FfnBlock {
        &self.0
    }

    /// `B_l = b_l 1_{1 x n}` for every layer.
    pub fn broadcast_to_block(&self, n: usize) -> Result<FfnBlock> {
        self.0.broadcast(n)
    }

    pub fn eval_scalar(&self, x: &Scalar) -> Result<Scalar> {
        let input = Matrix::filled(1, 1, x.clone());
        let out = eval_ffn(&self.0, &input, x.mode())?;
        Ok(out.get(0, 0).clone())
    }
}

fn scalar_row(values: &[i64]) -> Matrix<Scalar> {
    Matrix::from_fn(values.len(), 1, |r, _| Scalar::int(values[r]))
}

/// The clamp `x -> -relu(-relu(x) + 1) + 1` onto `[0, 1]`.
pub fn filter_block() -> VectorNet {
    use ActivationKind::{Identity, ReLU};
    VectorNet::new(vec![
        Layer::uniform(scalar_row(&[1]), scalar_row(&[0]), ReLU),
        Layer::uniform(scalar_row(&[-1]), scalar_row(&[1]), ReLU),
        Layer::uniform(scalar_row(&[-1]), scalar_row(&[1]), Identity),
    ])
    .expect("filter block is well formed")
}
