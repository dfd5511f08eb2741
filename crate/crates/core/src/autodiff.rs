//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A `Tape` records each operation eagerly with its forward value; a single
//! `backward` pass from a scalar root then yields gradients for every node.
//! The op set is exactly what the decoder and loss graph need; each op's
//! backward rule is verified against central finite differences in the
//! tests below.

use ndarray::{Array2, Axis};

use crate::losses;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Var(usize);

enum Op {
    Input,
    MatMul(Var, Var),
    Add(Var, Var),
    #[allow(dead_code)] // exercised by the op tests
    Sub(Var, Var),
    #[allow(dead_code)] // exercised by the op tests
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    /// Broadcast-add a 1 x n row to every row of an m x n matrix.
    AddRow(Var, Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    SelectRows(Var, Vec<usize>),
    #[allow(dead_code)] // exercised by the op tests
    MeanAll(Var),
    BceWithLogits {
        logits: Var,
        targets: Array2<f64>,
    },
    DiceWithLogits {
        logits: Var,
        targets: Array2<f64>,
        eps: f64,
    },
    MseAgainst {
        pred: Var,
        targets: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        debug_assert_eq!(self.value(var).len(), 1);
        self.value(var)[(0, 0)]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    #[allow(dead_code)]
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    #[allow(dead_code)]
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let value = self
            .value(a)
            .slice(ndarray::s![.., from..to])
            .to_owned();
        self.push(value, Op::SliceCols(a, from, to))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("column concat shapes");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(losses::sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(losses::gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Per-row normalization over features with learned gain and bias
    /// (both 1 x n).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let value = {
            let input = self.value(x);
            let gain = self.value(gain);
            let bias = self.value(bias);
            let mut out = input.clone();
            for mut row in out.rows_mut() {
                let n = row.len() as f64;
                let mean = row.sum() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let denom = (var + eps).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) / denom * gain[(0, j)] + bias[(0, j)];
                }
            }
            out
        };
        self.push(value, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push(value, Op::SelectRows(a, rows.to_vec()))
    }

    #[allow(dead_code)]
    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).mean().unwrap());
        self.push(value, Op::MeanAll(a))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let value = Array2::from_elem((1, 1), losses::bce_with_logits(self.value(logits), &targets));
        self.push(value, Op::BceWithLogits { logits, targets })
    }

    pub fn dice_with_logits(&mut self, logits: Var, targets: Array2<f64>, eps: f64) -> Var {
        let value = Array2::from_elem(
            (1, 1),
            losses::dice_with_logits(self.value(logits), &targets, eps),
        );
        self.push(value, Op::DiceWithLogits { logits, targets, eps })
    }

    pub fn mse_against(&mut self, pred: Var, targets: Array2<f64>) -> Var {
        let value = Array2::from_elem((1, 1), losses::mse(self.value(pred), &targets));
        self.push(value, Op::MseAgainst { pred, targets })
    }

    /// Gradients of a scalar root with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input => {
                    grads[idx] = Some(grad);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = grad.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&grad);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, -grad);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &grad * self.value(*b));
                    accumulate(&mut grads, *b, &grad * self.value(*a));
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, *a, &grad * *factor);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, grad.t().to_owned());
                }
                Op::AddRow(a, row) => {
                    let row_grad = grad
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut grads, *a, grad);
                    accumulate(&mut grads, *row, row_grad);
                }
                Op::SliceCols(a, from, _to) => {
                    let mut full = Array2::zeros(self.value(*a).raw_dim());
                    full.slice_mut(ndarray::s![.., *from..*from + grad.ncols()])
                        .assign(&grad);
                    accumulate(&mut grads, *a, full);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for part in parts {
                        let width = self.value(*part).ncols();
                        let piece = grad
                            .slice(ndarray::s![.., offset..offset + width])
                            .to_owned();
                        accumulate(&mut grads, *part, piece);
                        offset += width;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut dx = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|c| grad[(r, c)] * y[(r, c)]).sum();
                        for c in 0..y.ncols() {
                            dx[(r, c)] = y[(r, c)] * (grad[(r, c)] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    accumulate(&mut grads, *a, &grad * &y.mapv(|v| v * (1.0 - v)));
                }
                Op::Gelu(a) => {
                    let dx = self.value(*a).mapv(losses::gelu_prime);
                    accumulate(&mut grads, *a, &grad * &dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let input = self.value(*x);
                    let gain_value = self.value(*gain);
                    let n = input.ncols() as f64;
                    let mut dx = Array2::zeros(input.raw_dim());
                    let mut dgain = Array2::zeros((1, input.ncols()));
                    let mut dbias = Array2::zeros((1, input.ncols()));
                    for r in 0..input.nrows() {
                        let row = input.row(r);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let denom = (var + eps).sqrt();
                        let normalized: Vec<f64> = row.iter().map(|v| (v - mean) / denom).collect();
                        let mut mean_dnorm = 0.0;
                        let mut mean_dnorm_norm = 0.0;
                        for c in 0..input.ncols() {
                            let dnorm = grad[(r, c)] * gain_value[(0, c)];
                            mean_dnorm += dnorm;
                            mean_dnorm_norm += dnorm * normalized[c];
                            dgain[(0, c)] += grad[(r, c)] * normalized[c];
                            dbias[(0, c)] += grad[(r, c)];
                        }
                        mean_dnorm /= n;
                        mean_dnorm_norm /= n;
                        for c in 0..input.ncols() {
                            let dnorm = grad[(r, c)] * gain_value[(0, c)];
                            dx[(r, c)] =
                                (dnorm - mean_dnorm - normalized[c] * mean_dnorm_norm) / denom;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::SelectRows(a, rows) => {
                    let mut full = Array2::zeros(self.value(*a).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..grad.ncols() {
                            full[(r, c)] += grad[(i, c)];
                        }
                    }
                    accumulate(&mut grads, *a, full);
                }
                Op::MeanAll(a) => {
                    let shape = self.value(*a).raw_dim();
                    let scale = grad[(0, 0)] / self.value(*a).len() as f64;
                    accumulate(&mut grads, *a, Array2::from_elem(shape, scale));
                }
                Op::BceWithLogits { logits, targets } => {
                    let dz = losses::bce_with_logits_grad(self.value(*logits), targets) * grad[(0, 0)];
                    accumulate(&mut grads, *logits, dz);
                }
                Op::DiceWithLogits { logits, targets, eps } => {
                    let dz =
                        losses::dice_with_logits_grad(self.value(*logits), targets, *eps) * grad[(0, 0)];
                    accumulate(&mut grads, *logits, dz);
                }
                Op::MseAgainst { pred, targets } => {
                    let dp = losses::mse_grad(self.value(*pred), targets) * grad[(0, 0)];
                    accumulate(&mut grads, *pred, dp);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], var: Var, grad: Array2<f64>) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &grad,
        slot @ None => *slot = Some(grad),
    }
}

/// Result of a backward pass, indexed by `Var`.
pub(crate) struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros if the node does
    /// not influence the root.
    pub fn get(&self, var: Var, shape: (usize, usize)) -> Array2<f64> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `build` (graph builder over the listed
    /// input matrices) against the tape's backward pass.
    fn check_gradients(
        inputs: &[Array2<f64>],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        tolerance: f64,
    ) {
        let eval = |values: &[Array2<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|v| tape.input(v.clone())).collect();
            let root = build(&mut tape, &vars);
            tape.scalar(root)
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.input(v.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);

        let h = 1e-5;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[which], input.dim());
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let mut plus = inputs.to_vec();
                plus[which][(r, c)] += h;
                let mut minus = inputs.to_vec();
                minus[which][(r, c)] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert!(
                    (fd - analytic[(r, c)]).abs() < tolerance,
                    "input {which} at ({r},{c}): fd={fd}, analytic={}",
                    analytic[(r, c)]
                );
            }
        }
    }

    fn seeded(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        // Cheap deterministic fill, spread across roughly [-1, 1].
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            let mut state = seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((r * 31 + c * 17) as u64 + 1);
            state ^= state >> 30;
            state = state.wrapping_mul(0xbf58476d1ce4e5b9);
            state ^= state >> 27;
            (state % 2000) as f64 / 1000.0 - 1.0
        })
    }

    #[test]
    fn matmul_chain_gradients() {
        check_gradients(
            &[seeded(3, 4, 1), seeded(4, 2, 2)],
            |tape, vars| {
                let product = tape.matmul(vars[0], vars[1]);
                tape.mean_all(product)
            },
            1e-7,
        );
    }

    #[test]
    fn elementwise_and_scale_gradients() {
        check_gradients(
            &[seeded(3, 3, 3), seeded(3, 3, 4)],
            |tape, vars| {
                let sum = tape.add(vars[0], vars[1]);
                let diff = tape.sub(sum, vars[1]);
                let product = tape.mul(diff, vars[0]);
                let scaled = tape.scale(product, -1.7);
                tape.mean_all(scaled)
            },
            1e-7,
        );
    }

    #[test]
    fn transpose_and_addrow_gradients() {
        check_gradients(
            &[seeded(2, 5, 5), seeded(1, 2, 6)],
            |tape, vars| {
                let t = tape.transpose(vars[0]);
                let shifted = tape.add_row(t, vars[1]);
                tape.mean_all(shifted)
            },
            1e-7,
        );
    }

    #[test]
    fn slice_and_concat_gradients() {
        check_gradients(
            &[seeded(3, 6, 7)],
            |tape, vars| {
                let left = tape.slice_cols(vars[0], 0, 3);
                let right = tape.slice_cols(vars[0], 3, 6);
                let swapped = tape.concat_cols(&[right, left]);
                let squared = tape.mul(swapped, swapped);
                tape.mean_all(squared)
            },
            1e-7,
        );
    }

    #[test]
    fn softmax_gradients() {
        check_gradients(
            &[seeded(4, 5, 8), seeded(4, 5, 9)],
            |tape, vars| {
                let probs = tape.softmax_rows(vars[0]);
                let weighted = tape.mul(probs, vars[1]);
                tape.mean_all(weighted)
            },
            1e-7,
        );
    }

    #[test]
    fn sigmoid_and_gelu_gradients() {
        check_gradients(
            &[seeded(3, 4, 10)],
            |tape, vars| {
                let s = tape.sigmoid(vars[0]);
                let g = tape.gelu(s);
                tape.mean_all(g)
            },
            1e-7,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        check_gradients(
            &[seeded(3, 6, 11), seeded(1, 6, 12), seeded(1, 6, 13)],
            |tape, vars| {
                let normed = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5);
                let squared = tape.mul(normed, normed);
                tape.mean_all(squared)
            },
            1e-6,
        );
    }

    #[test]
    fn select_rows_gradients() {
        check_gradients(
            &[seeded(5, 3, 14)],
            |tape, vars| {
                let picked = tape.select_rows(vars[0], &[0, 2, 2, 4]);
                let squared = tape.mul(picked, picked);
                tape.mean_all(squared)
            },
            1e-7,
        );
    }

    #[test]
    fn fused_loss_gradients() {
        let targets = Array2::from_shape_fn((3, 4), |(r, c)| f64::from((r + c) % 2 == 0));
        let target_scores = seeded(3, 1, 15).mapv(f64::abs);
        check_gradients(
            &[seeded(3, 4, 16), seeded(3, 1, 17)],
            |tape, vars| {
                let bce = tape.bce_with_logits(vars[0], targets.clone());
                let dice = tape.dice_with_logits(vars[0], targets.clone(), 1.0);
                let mse = tape.mse_against(vars[1], target_scores.clone());
                let partial = tape.add(bce, dice);
                let half_mse = tape.scale(mse, 0.5);
                tape.add(partial, half_mse)
            },
            1e-7,
        );
    }

    #[test]
    fn unused_inputs_get_zero_gradients() {
        let mut tape = Tape::new();
        let used = tape.input(seeded(2, 2, 18));
        let unused = tape.input(seeded(2, 2, 19));
        let root = tape.mean_all(used);
        let grads = tape.backward(root);
        assert_eq!(grads.get(unused, (2, 2)), Array2::<f64>::zeros((2, 2)));
        assert_eq!(grads.get(used, (2, 2)), Array2::from_elem((2, 2), 0.25));
    }

    #[test]
    fn reused_nodes_accumulate_gradients() {
        let mut tape = Tape::new();
        let x = tape.input(Array2::from_elem((1, 1), 3.0));
        let doubled = tape.add(x, x);
        let root = tape.mean_all(doubled);
        let grads = tape.backward(root);
        assert_eq!(grads.get(x, (1, 1))[(0, 0)], 2.0);
    }
}
