//! Finite-difference cases covering every primitive op.
//!
//! Each case reduces its op output to a scalar through a fixed random
//! weighting so that no gradient entry is trivially uniform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Pointwise, Var};
use crate::tensor::Tensor;

pub type CaseBuilder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: Vec<(String, Tensor)>,
    pub build: CaseBuilder,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Uniform values whose magnitude stays in `[gap, hi]` with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    let mut t = random(rng, shape, gap, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

fn case(
    name: &'static str,
    seed: u64,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> PrimitiveCase {
    let inputs = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("{name}.in{i}"), t))
        .collect();
    PrimitiveCase {
        name,
        inputs,
        build: Box::new(move |g, v| {
            let out = f(g, v)?;
            weighted_sum(g, out, seed)
        }),
    }
}

/// One case per primitive op, with inputs drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        case("matmul", seed, vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)], |g, v| g.matmul(v[0], v[1])),
        case("bmm", seed, vec![random(r, &[2, 3, 4], -1.0, 1.0), random(r, &[2, 4, 2], -1.0, 1.0)], |g, v| g.bmm(v[0], v[1], false)),
        case("bmm_transposed", seed, vec![random(r, &[2, 3, 4], -1.0, 1.0), random(r, &[2, 5, 4], -1.0, 1.0)], |g, v| g.bmm(v[0], v[1], true)),
        case("add", seed, vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)], |g, v| g.add(v[0], v[1])),
        case("sub", seed, vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)], |g, v| g.sub(v[0], v[1])),
        case("mul", seed, vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)], |g, v| g.mul(v[0], v[1])),
        case("add_bias", seed, vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4], -1.0, 1.0)], |g, v| g.add_bias(v[0], v[1])),
        case("scale", seed, vec![random(r, &[5], -1.0, 1.0)], |g, v| Ok(g.scale(v[0], -1.7))),
        case("tanh", seed, vec![random(r, &[6], -2.0, 2.0)], |g, v| Ok(g.tanh(v[0]))),
        case("softplus", seed, vec![random(r, &[6], -3.0, 3.0)], |g, v| Ok(g.softplus(v[0]))),
        case("exp", seed, vec![random(r, &[6], -2.0, 2.0)], |g, v| Ok(g.exp(v[0]))),
        case("neg_exp", seed, vec![random(r, &[6], -2.0, 2.0)], |g, v| Ok(g.neg_exp(v[0]))),
        case("relu", seed, vec![away_from_zero(r, &[6], 0.05, 2.0)], |g, v| Ok(g.relu(v[0]))),
        case("square", seed, vec![random(r, &[6], -2.0, 2.0)], |g, v| Ok(g.square(v[0]))),
        case("layer_norm", seed, vec![random(r, &[3, 5], -2.0, 2.0), random(r, &[5], 0.5, 1.5), random(r, &[5], -0.5, 0.5)], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("softmax_lastdim", seed, vec![random(r, &[3, 4], -2.0, 2.0)], |g, v| g.softmax_lastdim(v[0])),
        case("concat_axis0", seed, vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[1, 3], -1.0, 1.0)], |g, v| g.concat(&[v[0], v[1]], 0)),
        case("concat_axis1", seed, vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 2], -1.0, 1.0)], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("narrow", seed, vec![random(r, &[3, 5], -1.0, 1.0)], |g, v| g.narrow(v[0], 1, 1, 3)),
        case("gather", seed, vec![random(r, &[4], -1.0, 1.0)], |g, v| g.gather(v[0], vec![Some(3), None, Some(0), Some(3), Some(1)], vec![5])),
        case("reshape", seed, vec![random(r, &[2, 6], -1.0, 1.0)], |g, v| g.reshape(v[0], &[3, 4])),
        case("permute", seed, vec![random(r, &[2, 3, 4], -1.0, 1.0)], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("conv2d", seed, vec![random(r, &[2, 2, 5, 5], -1.0, 1.0), random(r, &[3, 2, 3, 3], -1.0, 1.0), random(r, &[3], -1.0, 1.0)], |g, v| g.conv2d(v[0], v[1], v[2], 2, 1)),
        case("sum_lastdim", seed, vec![random(r, &[3, 4], -1.0, 1.0)], |g, v| Ok(g.sum_lastdim(v[0]))),
        case("mean_all", seed, vec![random(r, &[3, 4], -1.0, 1.0)], |g, v| Ok(g.mean_all(v[0]))),
    ];
    let huber_in = away_from_zero(r, &[8], 0.0, 2.0);
    // keep probes clear of the |x| = δ seam
    let huber_in = Tensor::new(
        vec![8],
        huber_in
            .data()
            .iter()
            .map(|x| if (x.abs() - 0.5).abs() < 0.05 { x * 1.3 } else { *x })
            .collect(),
    )
    .expect("shape");
    cases.push(case("huber", seed, vec![huber_in], |g, v| Ok(g.pointwise(v[0], Pointwise::Huber(0.5)))));
    cases
}
