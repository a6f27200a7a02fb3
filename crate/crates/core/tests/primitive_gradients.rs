//! Every tape primitive against central finite differences on random
//! shapes and values.

use popgraph_core::graphgen::DistanceMetric;
use popgraph_core::numerics::{grad_check, GradCheckOptions, Tape, Tensor, Var};
use popgraph_core::Result;
use proptest::prelude::*;

#[derive(Debug, Clone, Copy)]
enum Prim {
    Matmul,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    MulRow,
    Scale,
    Offset,
    Neg,
    ConcatCols,
    GatherRows,
    MaskedSelect,
    Relu,
    Sigmoid,
    Log,
    Exp,
    Square,
    Sqrt,
    Sum,
    Mean,
    MeanRows,
    SumCols,
    Max,
    Min,
    Huber,
    LogSoftmaxRows,
    PickCols,
    PairDist(DistanceMetric),
}

const PRIMS: [Prim; 31] = [
    Prim::Matmul,
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::Div,
    Prim::AddRow,
    Prim::MulRow,
    Prim::Scale,
    Prim::Offset,
    Prim::Neg,
    Prim::ConcatCols,
    Prim::GatherRows,
    Prim::MaskedSelect,
    Prim::Relu,
    Prim::Sigmoid,
    Prim::Log,
    Prim::Exp,
    Prim::Square,
    Prim::Sqrt,
    Prim::Sum,
    Prim::Mean,
    Prim::MeanRows,
    Prim::SumCols,
    Prim::Max,
    Prim::Min,
    Prim::Huber,
    Prim::LogSoftmaxRows,
    Prim::PickCols,
    Prim::PairDist(DistanceMetric::Euclidean),
    Prim::PairDist(DistanceMetric::Cosine),
    Prim::PairDist(DistanceMetric::Hyperbolic),
];

/// Magnitudes in [0.2, 1.2) with random sign: away from the relu kink and,
/// once shifted, safely positive for log/sqrt/div.
fn entries(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0.2f64..1.2, any::<bool>()), n)
        .prop_map(|v| v.into_iter().map(|(m, s)| if s { m } else { -m }).collect())
}

fn positive(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|v| v.abs() + 0.1).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Contract to a scalar with fixed uneven weights so that no output
/// element's gradient can hide behind a symmetric sum.
fn contract(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.37 * ((i * 7 % 11) as f64)).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn build(prim: Prim, r: usize, c: usize, tape: &mut Tape, p: &[Var]) -> Result<Var> {
    let (a, b, row) = (p[0], p[1], p[2]);
    let out = match prim {
        Prim::Matmul => tape.matmul(a, p[3])?,
        Prim::Add => tape.add(a, b)?,
        Prim::Sub => tape.sub(a, b)?,
        Prim::Mul => tape.mul(a, b)?,
        Prim::Div => tape.div(a, p[4])?,
        Prim::AddRow => tape.add_row(a, row)?,
        Prim::MulRow => tape.mul_row(a, row)?,
        Prim::Scale => tape.scale(a, -1.7)?,
        Prim::Offset => {
            let o = tape.offset(a, 0.4)?;
            tape.square(o)?
        }
        Prim::Neg => tape.neg(a)?,
        Prim::ConcatCols => tape.concat_cols(a, b)?,
        Prim::GatherRows => {
            let rows: Vec<usize> = (0..r + 1).map(|i| (i * 3) % r).collect();
            tape.gather_rows(a, &rows)?
        }
        Prim::MaskedSelect => {
            let mask: Vec<bool> = (0..r * c).map(|i| i % 3 != 1).collect();
            tape.masked_select(a, &mask)?
        }
        Prim::Relu => tape.relu(a)?,
        Prim::Sigmoid => tape.sigmoid(a)?,
        Prim::Log => tape.log(p[4])?,
        Prim::Exp => tape.exp(a)?,
        Prim::Square => tape.square(a)?,
        Prim::Sqrt => tape.sqrt(p[4])?,
        Prim::Sum => tape.sum(a)?,
        Prim::Mean => tape.mean(a)?,
        Prim::MeanRows => tape.mean_rows(a)?,
        Prim::SumCols => tape.sum_cols(a)?,
        Prim::Max => tape.max(a)?,
        Prim::Min => tape.min(a)?,
        Prim::Huber => tape.huber(a, 0.5)?,
        Prim::LogSoftmaxRows => tape.log_softmax_rows(a)?,
        Prim::PickCols => {
            let cols: Vec<usize> = (0..r).map(|i| (i * 5 + 1) % c).collect();
            tape.pick_cols(a, &cols)?
        }
        Prim::PairDist(metric) => {
            let (u, v) = match metric {
                // keep both operands inside the unit ball
                DistanceMetric::Hyperbolic => {
                    let s = 0.9 / (c as f64 * 1.2);
                    (tape.scale(a, s)?, tape.scale(b, s)?)
                }
                _ => (a, b),
            };
            tape.pair_dist_sq(u, v, metric)?
        }
    };
    contract(tape, out)
}

/// Distinct extreme values so max/min are differentiable at the sample.
fn unique_extremes(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    n < 2 || (s[1] - s[0] > 1e-3 && s[n - 1] - s[n - 2] > 1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn primitive_gradients_match_finite_differences(
        which in 0..PRIMS.len(),
        (r, c, a, b, row, bt) in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
            (Just(r), Just(c), entries(r * c), entries(r * c), entries(c), entries(c * r))
        }),
    ) {
        let prim = PRIMS[which];
        if matches!(prim, Prim::Max | Prim::Min) {
            prop_assume!(unique_extremes(&a));
        }
        let a = Tensor::matrix(r, c, a).unwrap();
        let params = vec![
            a.clone(),
            Tensor::matrix(r, c, b).unwrap(),
            Tensor::matrix(1, c, row).unwrap(),
            Tensor::matrix(c, r, bt).unwrap(),
            positive(&a),
        ];
        let report = grad_check(&params, |tape, p| build(prim, r, c, tape, p), GradCheckOptions::default())
            .unwrap();
        prop_assert!(report.passed(), "{prim:?} at {r}x{c}: {report:?}");
    }
}
