//! A small matrix-valued reverse-mode gradient tape.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological order for backpropagation.

use ndarray::{concatenate, s, Array2, Axis};

use crate::sample::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + row`, broadcasting a `1 x n` row over the rows of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    /// `a * s` with `s` a `1 x 1` node.
    MulScalar(Var, Var),
    Silu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Sum of squared differences against a constant target, `1 x 1`.
    SquaredError(Var, Mat),
    /// Sum of `1 x 1` nodes.
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros of the right shape when `v` does not
    /// influence the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.as_standard_layout().into_owned(),
            None => Array2::zeros(tape.value(v).dim()),
        }
    }
}

/// `x * sigmoid(x)`.
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Derivative of `silu`: `sigmoid(x) * (1 + x * (1 - sigmoid(x)))`.
pub fn silu_grad(x: f64) -> f64 {
    let sg = 1.0 / (1.0 + (-x).exp());
    sg * (1.0 + x * (1.0 - sg))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x n row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).dim(), (1, 1), "mul_scalar expects a 1 x 1 factor");
        let v = self.value(a) * self.scalar(s);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu);
        self.push(v, Op::Silu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn squared_error(&mut self, a: Var, target: Mat) -> Var {
        assert_eq!(self.value(a).dim(), target.dim(), "squared_error shape");
        let sse = ndarray::Zip::from(self.value(a))
            .and(&target)
            .fold(0.0, |acc, &p, &q| acc + (p - q) * (p - q));
        self.push(Array2::from_elem((1, 1), sse), Op::SquaredError(a, target))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|&p| self.scalar(p)).sum::<f64>();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(parts.to_vec()))
    }

    /// Reverse sweep from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // y = a b^T: da = g b, db = g^T a
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *row, gr);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::MulScalar(a, s) => {
                    let gs = (&g * self.value(*a)).sum();
                    acc(&mut grads, *a, &g * self.scalar(*s));
                    acc(&mut grads, *s, Array2::from_elem((1, 1), gs));
                }
                Op::Silu(a) => {
                    let ga = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&gi, &x| gi * silu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y * (g - <g, y>) row-wise
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for ((mut out, yr), gr) in
                        ga.rows_mut().into_iter().zip(y.rows()).zip(g.rows())
                    {
                        let dot = yr.dot(&gr);
                        ndarray::Zip::from(&mut out)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|o, &yi, &gi| *o = yi * (gi - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().as_standard_layout().into_owned()),
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![offset..offset + n, ..]).to_owned());
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., offset..offset + n]).to_owned());
                        offset += n;
                    }
                }
                Op::SquaredError(a, target) => {
                    let scale = 2.0 * g[[0, 0]];
                    let ga = ndarray::Zip::from(self.value(*a))
                        .and(target)
                        .map_collect(|&p, &q| scale * (p - q));
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        acc(&mut grads, *p, g.clone());
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_toy_net_by_hand() {
        // f(x) = w x with x = 2, target 0: loss = (2w)^2, dloss/dw = 8w
        for w in [-1.5, 0.0, 0.75, 3.0] {
            let mut tape = Tape::new();
            let wv = tape.leaf(arr2(&[[w]]));
            let x = tape.leaf(arr2(&[[2.0]]));
            let y = tape.mul_scalar(x, wv);
            let loss = tape.squared_error(y, arr2(&[[0.0]]));
            assert_eq!(tape.scalar(loss), (2.0 * w) * (2.0 * w));
            let grads = tape.backward(loss);
            assert_eq!(grads.wrt(&tape, wv)[[0, 0]], 8.0 * w);
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    /// Builds a graph touching every op and returns (tape, inputs, loss).
    fn graph(inputs: &[Mat], target: &Mat) -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let (x, w, b, s) = (vars[0], vars[1], vars[2], vars[3]);
        let h = tape.matmul(x, w); // 4x3
        let h = tape.add_row(h, b);
        let h = tape.silu(h);
        let scores = tape.matmul_t(h, h); // 4x4
        let scores = tape.scale(scores, 0.7);
        let top = tape.slice_rows(scores, 0, 2);
        let bottom = tape.slice_rows(scores, 2, 2);
        let a_top = tape.softmax_rows(top);
        let a_bot = tape.softmax_rows(bottom);
        let attn = tape.concat_rows(&[a_top, a_bot]);
        let mixed = tape.matmul(attn, h);
        let both = tape.concat_cols(&[mixed, h]); // 4x6
        let t = tape.transpose(both); // 6x4
        let t = tape.mul_scalar(t, s);
        let xt = tape.transpose(x); // 5x4 -> need 6x4: pad via concat
        let pad = tape.slice_rows(xt, 0, 1);
        let xt6 = tape.concat_rows(&[xt, pad]);
        let out = tape.add(t, xt6);
        let l1 = tape.squared_error(out, target.clone());
        let l2 = tape.squared_error(h, Array2::zeros((4, 3)));
        let loss = tape.sum(&[l1, l2]);
        (tape, vars, loss)
    }

    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let inputs = vec![
                random(&mut rng, 4, 5),
                random(&mut rng, 5, 3),
                random(&mut rng, 1, 3),
                random(&mut rng, 1, 1),
            ];
            let target = random(&mut rng, 6, 4);
            let (tape, vars, loss) = graph(&inputs, &target);
            let grads = tape.backward(loss);
            let h = 1e-5;
            for (k, var) in vars.iter().enumerate() {
                let analytic = grads.wrt(&tape, *var);
                for idx in 0..inputs[k].len() {
                    let mut plus = inputs.clone();
                    let mut minus = inputs.clone();
                    plus[k].as_slice_mut().unwrap()[idx] += h;
                    minus[k].as_slice_mut().unwrap()[idx] -= h;
                    let (tp, _, lp) = graph(&plus, &target);
                    let (tm, _, lm) = graph(&minus, &target);
                    let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
                    let an = analytic.as_slice().unwrap()[idx];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(rel <= 1e-4 || (fd - an).abs() < 1e-8, "input {k}[{idx}]: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut tape = Tape::new();
        let a = tape.leaf(arr2(&[[1000.0, 1.0, -3.0], [0.0, 0.0, 0.0]]));
        let y = tape.softmax_rows(a);
        for row in tape.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
