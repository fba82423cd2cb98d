//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value on a [`Tape`] is a 2-D array. Feature maps are stored as
//! `(height * width) x channels`, token sequences as `len x width`, and
//! scalars as `1 x 1`. Ops record just enough state for their backward rule;
//! [`Tape::backward`] walks the tape once in reverse.

use ndarray::{s, Array2, Axis, Zip};

use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel convolution over a `(h * w) x c` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Width of one unfolded patch row.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Source pixel index of patch tap `(ky, kx)` for output pixel `(oy, ox)`,
    /// or `None` when the tap falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm { input: Var, inv_std: Vec<F> },
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    Row { input: Var, index: usize },
    MeanRows(Var),
    Reshape(Var),
    Im2Col { input: Var, geometry: ConvGeometry },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Array2<F>, count: usize },
    BceWithLogits { logits: Var, targets: Array2<F> },
    Dice { probs: Var, targets: Array2<F>, smooth: F },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Array2<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Array2<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// A recording of computations for one forward pass.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Array2<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Array2<F> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, var: Var) -> F {
        self.nodes[var.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "add_row: shape mismatch");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    /// `a * row` with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "mul_row: shape mismatch");
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(F::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a), &[a])
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        self.softmax_limited(a, if causal { Some(0) } else { None })
    }

    /// Causal softmax for a block of queries at positions `offset..`: row
    /// `i` sees columns `..=offset + i`.
    pub fn softmax_causal_from(&mut self, a: Var, offset: usize) -> Var {
        self.softmax_limited(a, Some(offset))
    }

    fn softmax_limited(&mut self, a: Var, causal_offset: Option<usize>) -> Var {
        let mut value = self.value(a).clone();
        for (i, mut row) in value.axis_iter_mut(Axis(0)).enumerate() {
            let limit = causal_offset.map_or(row.len(), |o| (o + i + 1).min(row.len()));
            let max = row.iter().take(limit).fold(F::neg_infinity(), |m, &x| m.max(x));
            let mut total = F::zero();
            for (j, x) in row.iter_mut().enumerate() {
                if j < limit {
                    *x = (*x - max).exp();
                    total += *x;
                } else {
                    *x = F::zero();
                }
            }
            row.mapv_inplace(|x| x / total);
        }
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: F) -> Var {
        let input = self.value(a);
        let cols = F::of_usize(input.ncols());
        let mut value = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in value.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / cols;
            row.mapv_inplace(|x| x - mean);
            let var = row.iter().map(|&x| x * x).sum::<F>() / cols;
            let inv = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|x| x * inv);
            inv_std.push(inv);
        }
        self.push(value, Op::LayerNorm { input: a, inv_std }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { input: a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let value = self.value(table).select(Axis(0), ids);
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn row(&mut self, a: Var, index: usize) -> Var {
        let value = self.value(a).slice(s![index..index + 1, ..]).to_owned();
        self.push(value, Op::Row { input: a, index }, &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows: empty input")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a), &[a])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<F> = self.value(a).iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count");
        self.push(value, Op::Reshape(a), &[a])
    }

    /// Unfolds convolution patches: output row `oy * out_w + ox` holds the
    /// `kernel x kernel x channels` neighbourhood, tap-major then channel.
    pub fn im2col(&mut self, a: Var, geometry: ConvGeometry) -> Var {
        let input = self.value(a);
        assert_eq!(
            input.dim(),
            (geometry.height * geometry.width, geometry.channels),
            "im2col: input does not match geometry"
        );
        let (oh, ow) = (geometry.out_height(), geometry.out_width());
        let c = geometry.channels;
        let mut value = Array2::zeros((oh * ow, geometry.patch_len()));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut out_row = value.row_mut(oy * ow + ox);
                for ky in 0..geometry.kernel {
                    for kx in 0..geometry.kernel {
                        if let Some(src) = geometry.source(oy, ox, ky, kx) {
                            let base = (ky * geometry.kernel + kx) * c;
                            out_row
                                .slice_mut(s![base..base + c])
                                .assign(&input.row(src));
                        }
                    }
                }
            }
        }
        self.push(value, Op::Im2Col { input: a, geometry }, &[a])
    }

    /// Mean token-level cross-entropy over rows whose target is `Some`.
    ///
    /// Panics if no row is supervised; callers validate that first.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len(), "cross_entropy: target count");
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "cross_entropy: no supervised rows");
        let mut probs = x.clone();
        let mut total = F::zero();
        for ((mut row, logit_row), target) in
            probs.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))).zip(targets)
        {
            let max = logit_row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut norm = F::zero();
            row.mapv_inplace(|v| {
                let e = (v - max).exp();
                norm += e;
                e
            });
            row.mapv_inplace(|v| v / norm);
            if let Some(t) = *target {
                // log-sum-exp form stays finite when p[t] underflows
                total += norm.ln() + max - logit_row[t];
            }
        }
        let value = Array2::from_elem((1, 1), total / F::of_usize(count));
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count };
        self.push(value, op, &[logits])
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Array2<F>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.dim(), targets.dim(), "bce_with_logits: shape mismatch");
        let mut total = F::zero();
        Zip::from(x).and(targets).for_each(|&x, &t| {
            total += x.max(F::zero()) - x * t + (F::one() + (-x.abs()).exp()).ln();
        });
        let value = Array2::from_elem((1, 1), total / F::of_usize(x.len()));
        self.push(value, Op::BceWithLogits { logits, targets: targets.clone() }, &[logits])
    }

    /// Soft Dice loss `1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)`.
    pub fn dice(&mut self, probs: Var, targets: &Array2<F>, smooth: F) -> Var {
        let p = self.value(probs);
        assert_eq!(p.dim(), targets.dim(), "dice: shape mismatch");
        let (inter, denom) = dice_terms(p, targets);
        let two = F::of(2.0);
        let loss = F::one() - (two * inter + smooth) / (denom + smooth);
        let value = Array2::from_elem((1, 1), loss);
        self.push(value, Op::Dice { probs, targets: targets.clone(), smooth }, &[probs])
    }

    /// Backpropagates from the `1 x 1` node `root`.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be a scalar");
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), F::one()));

        for index in (0..=root.0).rev() {
            let node = &self.nodes[index];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[index].take() else {
                continue;
            };
            self.propagate(node, &grad, &mut grads);
            grads[index] = Some(grad);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<F>, grad: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let da = grad.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = self.value(*a).t().dot(grad);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.mapv(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, grad * self.value(*b));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, grad * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, grad.clone());
                if self.requires_grad(*row) {
                    self.accumulate(grads, *row, grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, grad * self.value(*row));
                }
                if self.requires_grad(*row) {
                    let d = (grad * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, d);
                }
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, grad * *factor),
            Op::Relu(a) => {
                let mut d = grad.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|g, &x| {
                    if x <= F::zero() {
                        *g = F::zero();
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = grad.clone();
                Zip::from(&mut d).and(&node.value).for_each(|g, &y| *g *= y * (F::one() - y));
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = grad.clone();
                Zip::from(&mut d).and(&node.value).for_each(|g, &y| *g *= F::one() - y * y);
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, grad.t().to_owned()),
            Op::Softmax(input) => {
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for ((mut d_row, y_row), g_row) in
                    d.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))).zip(grad.axis_iter(Axis(0)))
                {
                    let dot: F = y_row.iter().zip(g_row.iter()).map(|(&y, &g)| y * g).sum();
                    Zip::from(&mut d_row)
                        .and(&y_row)
                        .and(&g_row)
                        .for_each(|d, &y, &g| *d = y * (g - dot));
                }
                self.accumulate(grads, *input, d);
            }
            Op::LayerNorm { input, inv_std } => {
                let y = &node.value;
                let n = F::of_usize(y.ncols());
                let mut d = Array2::zeros(y.dim());
                for (i, mut d_row) in d.axis_iter_mut(Axis(0)).enumerate() {
                    let g_row = grad.row(i);
                    let y_row = y.row(i);
                    let mean_g = g_row.sum() / n;
                    let mean_gy: F = g_row.iter().zip(y_row.iter()).map(|(&g, &y)| g * y).sum::<F>() / n;
                    let inv = inv_std[i];
                    Zip::from(&mut d_row)
                        .and(&g_row)
                        .and(&y_row)
                        .for_each(|d, &g, &y| *d = inv * (g - mean_g - y * mean_gy));
                }
                self.accumulate(grads, *input, d);
            }
            Op::SliceCols { input, start } => {
                if self.requires_grad(*input) {
                    let mut d = Array2::zeros(self.shape(*input));
                    d.slice_mut(s![.., *start..*start + grad.ncols()]).assign(grad);
                    self.accumulate(grads, *input, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &part in parts {
                    let width = self.shape(part).1;
                    if self.requires_grad(part) {
                        let d = grad.slice(s![.., offset..offset + width]).to_owned();
                        self.accumulate(grads, part, d);
                    }
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &part in parts {
                    let height = self.shape(part).0;
                    if self.requires_grad(part) {
                        let d = grad.slice(s![offset..offset + height, ..]).to_owned();
                        self.accumulate(grads, part, d);
                    }
                    offset += height;
                }
            }
            Op::Gather { table, ids } => {
                if self.requires_grad(*table) {
                    let mut d = Array2::zeros(self.shape(*table));
                    for (row, &id) in ids.iter().enumerate() {
                        let mut target = d.row_mut(id);
                        target += &grad.row(row);
                    }
                    self.accumulate(grads, *table, d);
                }
            }
            Op::Row { input, index } => {
                if self.requires_grad(*input) {
                    let mut d = Array2::zeros(self.shape(*input));
                    d.row_mut(*index).assign(&grad.row(0));
                    self.accumulate(grads, *input, d);
                }
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let scale = F::one() / F::of_usize(rows);
                let row = grad.row(0).mapv(|g| g * scale);
                let d = row.broadcast((rows, cols)).expect("broadcast").to_owned();
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(*a);
                let flat: Vec<F> = grad.iter().copied().collect();
                let d = Array2::from_shape_vec((rows, cols), flat).expect("reshape grad");
                self.accumulate(grads, *a, d);
            }
            Op::Im2Col { input, geometry } => {
                if self.requires_grad(*input) {
                    let g = geometry;
                    let (oh, ow) = (g.out_height(), g.out_width());
                    let c = g.channels;
                    let mut d = Array2::zeros((g.height * g.width, c));
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let src_row = grad.row(oy * ow + ox);
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    if let Some(dst) = g.source(oy, ox, ky, kx) {
                                        let base = (ky * g.kernel + kx) * c;
                                        let mut target = d.row_mut(dst);
                                        target += &src_row.slice(s![base..base + c]);
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, d);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let upstream = grad[[0, 0]] / F::of_usize(*count);
                let mut d = probs.clone();
                for (mut row, target) in d.axis_iter_mut(Axis(0)).zip(targets) {
                    match target {
                        Some(t) => {
                            row[*t] -= F::one();
                            row.mapv_inplace(|v| v * upstream);
                        }
                        None => row.fill(F::zero()),
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::BceWithLogits { logits, targets } => {
                let x = self.value(*logits);
                let upstream = grad[[0, 0]] / F::of_usize(x.len());
                let mut d = Array2::zeros(x.dim());
                Zip::from(&mut d)
                    .and(x)
                    .and(targets)
                    .for_each(|d, &x, &t| *d = (sigmoid(x) - t) * upstream);
                self.accumulate(grads, *logits, d);
            }
            Op::Dice { probs, targets, smooth } => {
                let p = self.value(*probs);
                let (inter, denom) = dice_terms(p, targets);
                let two = F::of(2.0);
                let numer = two * inter + *smooth;
                let den = denom + *smooth;
                let upstream = grad[[0, 0]];
                let mut d = Array2::zeros(p.dim());
                Zip::from(&mut d).and(targets).for_each(|d, &g| {
                    *d = -(two * g * den - numer) / (den * den) * upstream;
                });
                self.accumulate(grads, *probs, d);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<F>>], var: Var, delta: Array2<F>) {
        if !self.requires_grad(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `(sum(p * g), sum(p) + sum(g))`.
fn dice_terms<F: Scalar>(p: &Array2<F>, g: &Array2<F>) -> (F, F) {
    let mut inter = F::zero();
    let mut denom = F::zero();
    Zip::from(p).and(g).for_each(|&p, &g| {
        inter += p * g;
        denom += p + g;
    });
    (inter, denom)
}
