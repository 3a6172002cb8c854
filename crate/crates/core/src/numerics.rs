//! Toy-scale gradient checks for AllReduce and recomputation elision.
//!
//! Workers are simulated in one process; AllReduce is a literal sum of the
//! per-worker matrices. Gradients come from a minimal reverse-mode tape.

use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Tanh(usize),
    Sum(usize),
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].dot(&self.values[b.0]);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    /// Sum of all entries as a 1x1 matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.values[a.0].sum());
        self.push(v, Op::Sum(a.0))
    }

    /// Literal AllReduce: the elementwise sum of the worker inputs.
    pub fn allreduce(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Vec<Array2<f64>> {
        self.backward_from(&[(output, Array2::ones((1, 1)))])
    }

    /// Reverse pass seeded with explicit output gradients.
    pub fn backward_from(&self, seeds: &[(Var, Array2<f64>)]) -> Vec<Array2<f64>> {
        let mut grads: Vec<Array2<f64>> = self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        for (v, g) in seeds {
            grads[v.0] += g;
        }
        for n in (0..self.values.len()).rev() {
            let g = grads[n].clone();
            match self.ops[n] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[a] += &g;
                    grads[b] += &g;
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.values[b];
                    let gb = &g * &self.values[a];
                    grads[a] += &ga;
                    grads[b] += &gb;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.values[b].t());
                    let gb = self.values[a].t().dot(&g);
                    grads[a] += &ga;
                    grads[b] += &gb;
                }
                Op::Tanh(a) => {
                    let ga = &g * &self.values[n].mapv(|y| 1.0 - y * y);
                    grads[a] += &ga;
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    grads[a] += s;
                }
            }
        }
        grads
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0) * scale)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Scalar loss applied to the AllReduce output.
#[derive(Debug, Clone)]
pub enum Loss {
    /// `sum(y)`.
    Sum,
    /// `sum(a * tanh(y)) + 0.5 * sum(b * y * y)`.
    Mixed { a: Array2<f64>, b: Array2<f64> },
}

impl Loss {
    pub fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Self {
        Loss::Mixed { a: random_matrix(rng, shape, 1.0), b: random_matrix(rng, shape, 1.0) }
    }

    fn record(&self, tape: &mut Tape, y: Var) -> Var {
        match self {
            Loss::Sum => tape.sum(y),
            Loss::Mixed { a, b } => {
                let a = tape.leaf(a.clone());
                let half_b = tape.leaf(b * 0.5);
                let t = tape.tanh(y);
                let at = tape.mul(a, t);
                let yy = tape.mul(y, y);
                let byy = tape.mul(half_b, yy);
                let s = tape.add(at, byy);
                tape.sum(s)
            }
        }
    }

    /// Direct evaluation, independent of the tape.
    fn eval(&self, y: &Array2<f64>) -> f64 {
        match self {
            Loss::Sum => y.sum(),
            Loss::Mixed { a, b } => ndarray::Zip::from(a)
                .and(b)
                .and(y)
                .fold(0.0, |acc, &a, &b, &y| acc + a * y.tanh() + 0.5 * b * y * y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AllReduceGrads {
    pub inputs: Vec<Array2<f64>>,
    pub loss: Loss,
    /// Gradient of the loss with respect to each worker input.
    pub input_grads: Vec<Array2<f64>>,
    /// Gradient with respect to the reduced output.
    pub output_grad: Array2<f64>,
}

pub fn allreduce_grads(inputs: Vec<Array2<f64>>, loss: Loss) -> AllReduceGrads {
    let mut tape = Tape::new();
    let xs: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = tape.allreduce(&xs);
    let out = loss.record(&mut tape, y);
    let grads = tape.backward(out);
    AllReduceGrads {
        input_grads: xs.iter().map(|v| grads[v.0].clone()).collect(),
        output_grad: grads[y.0].clone(),
        inputs,
        loss,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradIdentityReport {
    /// max over workers of |dphi/dx_i - dphi/dy| from the tape.
    pub autodiff_deviation: f64,
    /// max over workers and entries of |central difference - dphi/dy|.
    pub fd_deviation: f64,
}

pub const FD_STEP: f64 = 1e-5;

/// Builds `y = sum_i x_i` over `workers` random inputs with a random smooth
/// loss and compares every input gradient with the output gradient.
pub fn allreduce_grad_identity(workers: usize, shape: (usize, usize), seed: u64) -> GradIdentityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep y of unit scale whatever the worker count
    let scale = 1.0 / (workers.max(1) as f64).sqrt();
    let inputs: Vec<Array2<f64>> = (0..workers.max(1)).map(|_| random_matrix(&mut rng, shape, scale)).collect();
    let loss = Loss::random(&mut rng, shape);
    let r = allreduce_grads(inputs, loss);

    let autodiff_deviation = r
        .input_grads
        .iter()
        .map(|g| max_abs_diff(g, &r.output_grad))
        .fold(0.0, f64::max);

    let reduce = |xs: &[Array2<f64>]| xs.iter().skip(1).fold(xs[0].clone(), |acc, x| acc + x);
    let mut fd_deviation: f64 = 0.0;
    let mut xs = r.inputs.clone();
    for i in 0..xs.len() {
        for idx in ndarray::indices(shape) {
            let x0 = xs[i][idx];
            xs[i][idx] = x0 + FD_STEP;
            let plus = r.loss.eval(&reduce(&xs));
            xs[i][idx] = x0 - FD_STEP;
            let minus = r.loss.eval(&reduce(&xs));
            xs[i][idx] = x0;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            fd_deviation = fd_deviation.max((fd - r.output_grad[idx]).abs());
        }
    }
    GradIdentityReport { autodiff_deviation, fd_deviation }
}

/// One Megatron FFN block sharded over `w` workers: column-parallel `a[i]`,
/// tanh, row-parallel `b[i]`, then AllReduce.
#[derive(Debug, Clone)]
pub struct ShardedFfn {
    pub a: Vec<Array2<f64>>,
    pub b: Vec<Array2<f64>>,
}

impl ShardedFfn {
    fn random(rng: &mut ChaCha8Rng, workers: usize, hidden: usize, ffn: usize) -> Self {
        let shard = ffn / workers;
        let scale = 1.0 / (hidden as f64).sqrt();
        ShardedFfn {
            a: (0..workers).map(|_| random_matrix(rng, (hidden, shard), scale)).collect(),
            b: (0..workers).map(|_| random_matrix(rng, (shard, hidden), scale)).collect(),
        }
    }

    /// Records the per-worker partial outputs, before the AllReduce.
    fn partials(&self, tape: &mut Tape, x: Var) -> (Vec<Var>, Vec<Var>, Vec<Var>) {
        let mut wa = Vec::new();
        let mut wb = Vec::new();
        let mut parts = Vec::new();
        for (a, b) in self.a.iter().zip(&self.b) {
            let va = tape.leaf(a.clone());
            let vb = tape.leaf(b.clone());
            let z = tape.matmul(x, va);
            let h = tape.tanh(z);
            parts.push(tape.matmul(h, vb));
            wa.push(va);
            wb.push(vb);
        }
        (wa, wb, parts)
    }

    fn unsharded(&self, x: &Array2<f64>) -> Array2<f64> {
        let a_views: Vec<_> = self.a.iter().map(|m| m.view()).collect();
        let b_views: Vec<_> = self.b.iter().map(|m| m.view()).collect();
        let a = concatenate(Axis(1), &a_views).expect("shards share row count");
        let b = concatenate(Axis(0), &b_views).expect("shards share column count");
        x.dot(&a).mapv(f64::tanh).dot(&b)
    }
}

/// Two sharded FFN blocks applied to one input; loss is the sum of squared
/// outputs.
#[derive(Debug, Clone)]
pub struct ToyShardedModel {
    pub workers: usize,
    pub input: Array2<f64>,
    pub blocks: [ShardedFfn; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrads {
    pub loss: f64,
    /// `[block][worker]` gradients of the column- and row-parallel weights.
    pub a: Vec<Vec<Array2<f64>>>,
    pub b: Vec<Vec<Array2<f64>>>,
}

impl WeightGrads {
    fn max_deviation(&self, other: &WeightGrads) -> f64 {
        let pairs = self.a.iter().flatten().zip(other.a.iter().flatten());
        let pairs = pairs.chain(self.b.iter().flatten().zip(other.b.iter().flatten()));
        pairs.map(|(x, y)| max_abs_diff(x, y)).fold(0.0, f64::max)
    }
}

impl ToyShardedModel {
    /// `ffn` must be divisible by `workers`.
    pub fn random(workers: usize, tokens: usize, hidden: usize, ffn: usize, seed: u64) -> Self {
        assert!(workers >= 1 && ffn.is_multiple_of(workers), "ffn width must split evenly across workers");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = random_matrix(&mut rng, (tokens, hidden), 1.0);
        let blocks = [
            ShardedFfn::random(&mut rng, workers, hidden, ffn),
            ShardedFfn::random(&mut rng, workers, hidden, ffn),
        ];
        ToyShardedModel { workers, input, blocks }
    }

    pub fn forward(&self) -> Array2<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(self.input.clone());
        let (_, _, p1) = self.blocks[0].partials(&mut tape, x);
        let y1 = tape.allreduce(&p1);
        let (_, _, p2) = self.blocks[1].partials(&mut tape, y1);
        let y2 = tape.allreduce(&p2);
        tape.value(y2).clone()
    }

    pub fn unsharded_forward(&self) -> Array2<f64> {
        self.blocks[1].unsharded(&self.blocks[0].unsharded(&self.input))
    }

    fn loss(tape: &mut Tape, y: Var) -> Var {
        let sq = tape.mul(y, y);
        tape.sum(sq)
    }

    /// Replays both blocks from the input checkpoint, AllReduces included.
    pub fn grads_full_recompute(&self) -> WeightGrads {
        let mut tape = Tape::new();
        let x = tape.leaf(self.input.clone());
        let (a1, b1, p1) = self.blocks[0].partials(&mut tape, x);
        let y1 = tape.allreduce(&p1);
        let (a2, b2, p2) = self.blocks[1].partials(&mut tape, y1);
        let y2 = tape.allreduce(&p2);
        let out = Self::loss(&mut tape, y2);
        let g = tape.backward(out);
        let pick = |vs: &[Var]| vs.iter().map(|v| g[v.0].clone()).collect::<Vec<_>>();
        WeightGrads {
            loss: tape.value(out)[[0, 0]],
            a: vec![pick(&a1), pick(&a2)],
            b: vec![pick(&b1), pick(&b2)],
        }
    }

    /// Checkpoints the first block's AllReduce output during forward and
    /// replays each block separately; the first block's AllReduce is never
    /// replayed, and its partial outputs receive the output gradient as is.
    pub fn grads_elided_recompute(&self) -> WeightGrads {
        let stored_y1 = {
            let mut tape = Tape::new();
            let x = tape.leaf(self.input.clone());
            let (_, _, p1) = self.blocks[0].partials(&mut tape, x);
            let y1 = tape.allreduce(&p1);
            tape.value(y1).clone()
        };

        let mut second = Tape::new();
        let y1 = second.leaf(stored_y1);
        let (a2, b2, p2) = self.blocks[1].partials(&mut second, y1);
        let y2 = second.allreduce(&p2);
        let out = Self::loss(&mut second, y2);
        let g2 = second.backward(out);

        let mut first = Tape::new();
        let x = first.leaf(self.input.clone());
        let (a1, b1, p1) = self.blocks[0].partials(&mut first, x);
        let seeds: Vec<(Var, Array2<f64>)> = p1.iter().map(|&p| (p, g2[y1.0].clone())).collect();
        let g1 = first.backward_from(&seeds);

        let pick = |g: &[Array2<f64>], vs: &[Var]| vs.iter().map(|v| g[v.0].clone()).collect::<Vec<_>>();
        WeightGrads {
            loss: second.value(out)[[0, 0]],
            a: vec![pick(&g1, &a1), pick(&g2, &a2)],
            b: vec![pick(&g1, &b1), pick(&g2, &b2)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElisionReport {
    pub max_grad_deviation: f64,
    pub loss_full: f64,
    pub loss_elided: f64,
}

pub fn recompute_elision_equivalence(model: &ToyShardedModel) -> ElisionReport {
    let full = model.grads_full_recompute();
    let elided = model.grads_elided_recompute();
    ElisionReport {
        max_grad_deviation: full.max_deviation(&elided),
        loss_full: full.loss,
        loss_elided: elided.loss,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tape_matches_hand_derivatives() {
        // f = sum(tanh(x w)), df/dw = x^T (1 - tanh^2)
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_shape_vec((1, 2), vec![0.5, -1.0]).unwrap());
        let w = tape.leaf(Array2::from_shape_vec((2, 1), vec![2.0, 0.25]).unwrap());
        let z = tape.matmul(x, w);
        let t = tape.tanh(z);
        let f = tape.sum(t);
        let g = tape.backward(f);
        let s = 1.0 - (0.5f64 * 2.0 - 0.25).tanh().powi(2);
        assert!((g[w.0][[0, 0]] - 0.5 * s).abs() < 1e-15);
        assert!((g[w.0][[1, 0]] + s).abs() < 1e-15);
        assert!((g[x.0][[0, 0]] - 2.0 * s).abs() < 1e-15);
    }

    #[test]
    fn single_worker_identity_is_exact() {
        let r = allreduce_grad_identity(1, (3, 3), 0);
        assert_eq!(r.autodiff_deviation, 0.0);
        assert!(r.fd_deviation < 1e-8);
    }

    #[test]
    fn four_workers_match_finite_differences() {
        let r = allreduce_grad_identity(4, (8, 8), 42);
        assert_eq!(r.autodiff_deviation, 0.0);
        assert!(r.fd_deviation < 1e-8, "{}", r.fd_deviation);
    }

    #[test]
    fn linear_loss_gives_unit_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = (0..5).map(|_| random_matrix(&mut rng, (2, 3), 1.0)).collect();
        let r = allreduce_grads(inputs, Loss::Sum);
        for g in &r.input_grads {
            assert!(g.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn sharded_model_matches_unsharded() {
        for w in [1, 2, 4] {
            let m = ToyShardedModel::random(w, 3, 4, 8, 5);
            assert!(max_abs_diff(&m.forward(), &m.unsharded_forward()) < 1e-10);
        }
    }

    #[test]
    fn elision_examples() {
        let r = recompute_elision_equivalence(&ToyShardedModel::random(1, 4, 4, 4, 1));
        assert_eq!(r.max_grad_deviation, 0.0);
        let r = recompute_elision_equivalence(&ToyShardedModel::random(2, 4, 4, 4, 2));
        assert!(r.max_grad_deviation < 1e-10);
        assert_eq!(r.loss_full.to_bits(), r.loss_elided.to_bits());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn elision_holds_for_random_seeds(seed: u64) {
            let r = recompute_elision_equivalence(&ToyShardedModel::random(4, 4, 4, 8, seed));
            prop_assert!(r.max_grad_deviation < 1e-10);
            prop_assert_eq!(r.loss_full.to_bits(), r.loss_elided.to_bits());
        }

        #[test]
        fn input_grads_agree_across_workers(seed: u64, w in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (0..w).map(|_| random_matrix(&mut rng, (2, 2), 1.0)).collect();
            let loss = Loss::random(&mut rng, (2, 2));
            let r = allreduce_grads(inputs, loss);
            for g in &r.input_grads {
                prop_assert_eq!(g, &r.input_grads[0]);
            }
        }
    }
}
