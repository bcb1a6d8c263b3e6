//! Central finite-difference check of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamSet, Var};
use crate::error::Result;
use crate::model::{crf_loss, encode, BatchInput, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares the analytic gradient of parameter `param` against central
/// differences and returns the largest elementwise relative error.
///
/// `build` must construct the scalar loss from a fresh graph and the bound
/// parameter vars; it is re-run for every perturbed evaluation, so any
/// randomness it uses must be seeded identically on every call.
pub fn finite_diff_check<F>(params: &ParamSet, param: usize, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(params, param, Graph::eval, build)
}

/// [`finite_diff_check`] on graphs made by `new_graph`, e.g. a training
/// graph with a fixed dropout seed.
pub fn finite_diff_check_with<F>(
    params: &ParamSet,
    param: usize,
    new_graph: impl Fn() -> Graph,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<(Graph, Var)> {
        let mut g = new_graph();
        let vars = g.bind(p)?;
        let loss = build(&mut g, &vars)?;
        Ok((g, loss))
    };
    let (graph, loss) = eval(params)?;
    let analytic = graph.backward(loss, params)?;
    let analytic = analytic[param].data();

    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for (i, &exact) in analytic.iter().enumerate() {
        let orig = work.get(param).data()[i];
        work.get_mut(param).data_mut()[i] = orig + FD_STEP;
        let (g, l) = eval(&work)?;
        let plus = g.value(l).item();
        work.get_mut(param).data_mut()[i] = orig - FD_STEP;
        let (g, l) = eval(&work)?;
        let minus = g.value(l).item();
        work.get_mut(param).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(exact, numeric));
    }
    Ok(worst)
}

/// [`finite_diff_check`] over every parameter; returns the worst error and
/// the name of the parameter where it occurred.
pub fn check_all<F>(params: &ParamSet, build: F) -> Result<(f64, String)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut worst = (0.0, String::new());
    for id in 0..params.len() {
        let err = finite_diff_check(params, id, &build)?;
        if err >= worst.0 {
            worst = (err, params.name(id).to_owned());
        }
    }
    Ok(worst)
}

/// Entries drawn from `±[0.1, 1)` so that no input sits near a relu kink.
fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized by shape")
}

/// Reduces `y` to a scalar through a random fixed projection so that every
/// output element carries a distinct upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let w = g.constant(w)?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

fn params_of(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> ParamSet {
    let mut set = ParamSet::new();
    for (i, s) in shapes.iter().enumerate() {
        set.push(format!("p{i}"), random_tensor(rng, s));
    }
    set
}

fn worst_over(
    set: &ParamSet,
    new_graph: impl Fn() -> Graph + Copy,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for id in 0..set.len() {
        worst = worst.max(finite_diff_check_with(set, id, new_graph, &build)?);
    }
    Ok(worst)
}

/// Names of the ops covered by [`primitive_suite`], in order.
pub const PRIMITIVES: [&str; 20] = [
    "matmul",
    "batch_matmul",
    "transpose",
    "permute",
    "reshape",
    "add",
    "add_broadcast",
    "mul",
    "scale",
    "relu",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "concat",
    "dropout",
    "logsumexp",
    "gather_rows",
    "embedding_bag",
    "take_last",
    "crf_nll",
];

/// Finite-difference check of every primitive op on random inputs drawn
/// from `seed`; returns the worst relative error per op.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = seed.wrapping_mul(31).wrapping_add(1);
    let eval = Graph::eval;
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for name in PRIMITIVES {
        let err = match name {
            "matmul" => worst_over(
                &params_of(&mut rng, &[&[2, 3, 4], &[4, 2]]),
                eval,
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    project(g, y, ps)
                },
            )?,
            "batch_matmul" => worst_over(
                &params_of(&mut rng, &[&[2, 3, 4], &[2, 4, 2]]),
                eval,
                |g, v| {
                    let y = g.batch_matmul(v[0], v[1])?;
                    project(g, y, ps)
                },
            )?,
            "transpose" => worst_over(&params_of(&mut rng, &[&[2, 3, 4]]), eval, |g, v| {
                let y = g.transpose(v[0])?;
                project(g, y, ps)
            })?,
            "permute" => worst_over(&params_of(&mut rng, &[&[2, 3, 4]]), eval, |g, v| {
                let y = g.permute(v[0], &[2, 0, 1])?;
                project(g, y, ps)
            })?,
            "reshape" => worst_over(&params_of(&mut rng, &[&[2, 6]]), eval, |g, v| {
                let y = g.reshape(v[0], &[3, 4])?;
                project(g, y, ps)
            })?,
            "add" => worst_over(&params_of(&mut rng, &[&[3, 4], &[3, 4]]), eval, |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, ps)
            })?,
            "add_broadcast" => {
                worst_over(&params_of(&mut rng, &[&[2, 3, 4], &[4]]), eval, |g, v| {
                    let y = g.add(v[0], v[1])?;
                    project(g, y, ps)
                })?
            }
            "mul" => worst_over(&params_of(&mut rng, &[&[3, 4], &[3, 4]]), eval, |g, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, ps)
            })?,
            "scale" => worst_over(&params_of(&mut rng, &[&[3, 4]]), eval, |g, v| {
                let y = g.scale(v[0], -1.7)?;
                project(g, y, ps)
            })?,
            "relu" => worst_over(&params_of(&mut rng, &[&[4, 5]]), eval, |g, v| {
                let y = g.relu(v[0])?;
                project(g, y, ps)
            })?,
            "softmax" => worst_over(&params_of(&mut rng, &[&[3, 5]]), eval, |g, v| {
                let y = g.softmax(v[0])?;
                project(g, y, ps)
            })?,
            "masked_softmax" => {
                let keep = [true, true, false, true, true, false, true, false];
                worst_over(&params_of(&mut rng, &[&[2, 3, 4]]), eval, |g, v| {
                    let y = g.masked_softmax(v[0], &keep, 3)?;
                    project(g, y, ps)
                })?
            }
            "layer_norm" => worst_over(
                &params_of(&mut rng, &[&[3, 5], &[5], &[5]]),
                eval,
                |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2])?;
                    project(g, y, ps)
                },
            )?,
            "concat" => worst_over(
                &params_of(&mut rng, &[&[2, 3, 2], &[2, 3, 4]]),
                eval,
                |g, v| {
                    let y = g.concat(&[v[0], v[1]])?;
                    project(g, y, ps)
                },
            )?,
            "dropout" => worst_over(
                &params_of(&mut rng, &[&[4, 6]]),
                || Graph::train(seed),
                |g, v| {
                    let y = g.dropout(v[0], 0.4)?;
                    project(g, y, ps)
                },
            )?,
            "logsumexp" => worst_over(&params_of(&mut rng, &[&[3, 5]]), eval, |g, v| {
                let y = g.logsumexp(v[0])?;
                project(g, y, ps)
            })?,
            "gather_rows" => worst_over(&params_of(&mut rng, &[&[4, 3]]), eval, |g, v| {
                let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
                project(g, y, ps)
            })?,
            "embedding_bag" => worst_over(&params_of(&mut rng, &[&[5, 3]]), eval, |g, v| {
                let bags = vec![
                    vec![(0, 1.0), (3, 0.5)],
                    vec![],
                    vec![(4, -2.0), (4, 1.0), (1, 1.0)],
                ];
                let y = g.embedding_bag(v[0], bags)?;
                project(g, y, ps)
            })?,
            "take_last" => worst_over(&params_of(&mut rng, &[&[2, 3, 4]]), eval, |g, v| {
                let y = g.take_last(v[0], &[0, 3, 3, 1, 2, 2], 2)?;
                project(g, y, ps)
            })?,
            "crf_nll" => {
                let k = 5;
                let gold: Vec<usize> = (0..8).map(|_| rng.gen_range(0..k)).collect();
                worst_over(
                    &params_of(&mut rng, &[&[2, 4, k], &[k, k], &[k], &[k]]),
                    eval,
                    |g, v| g.crf_nll(v[0], v[1], v[2], v[3], &gold, &[4, 2]),
                )?
            }
            other => unreachable!("{other} is listed in PRIMITIVES"),
        };
        out.push((name, err));
    }
    Ok(out)
}

/// Random padded batch of `lengths.len()` sequences for `config`.
pub fn random_batch(config: &ModelConfig, lengths: &[usize], seed: u64) -> BatchInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = lengths.iter().copied().max().unwrap_or(0);
    let mut input = BatchInput {
        batch: lengths.len(),
        width,
        bags: Vec::new(),
        dense: Vec::new(),
        keep: Vec::new(),
    };
    for &len in lengths {
        for t in 0..width {
            let real = t < len;
            let mut bag: Vec<(usize, f64)> = if real {
                (0..3)
                    .map(|_| (rng.gen_range(0..config.sparse_input_dim), 1.0))
                    .collect()
            } else {
                Vec::new()
            };
            bag.sort_unstable_by_key(|p| p.0);
            bag.dedup_by_key(|p| p.0);
            input.bags.push(bag);
            input.keep.push(real);
            for _ in 0..config.dense_dim {
                input
                    .dense
                    .push(if real { rng.gen_range(-1.0..1.0) } else { 0.0 });
            }
        }
    }
    input
}

/// Finite-difference check of the full model loss for every parameter,
/// with all parameters perturbed away from their initial values.
pub fn model_suite(config: &ModelConfig, seed: u64) -> Result<(f64, String)> {
    let mut params = ModelParams::init(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in params.set.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let lengths = [4, 2, 3];
    let input = random_batch(config, &lengths, seed.wrapping_add(1));
    let gold: Vec<usize> = (0..lengths.len() * input.width)
        .map(|_| rng.gen_range(0..config.n_tags))
        .collect();
    check_all(&params.set, |g, vars| {
        let enc = encode(g, &params, vars, &input)?;
        crf_loss(g, &params, vars, enc.emissions, &gold, &lengths)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_is_exact() {
        let mut params = ParamSet::new();
        params.push(
            "w",
            Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, -0.3]).unwrap(),
        );
        let x = Tensor::new(vec![1, 2], vec![1.5, -2.5]).unwrap();
        let err = finite_diff_check(&params, 0, |g, v| {
            let xv = g.constant(x.clone())?;
            let y = g.matmul(xv, v[0])?;
            g.sum(y)
        })
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 2.1).abs() < 1e-15);
    }

    #[test]
    fn every_primitive_passes() {
        for seed in 0..3 {
            for (name, err) in primitive_suite(seed).unwrap() {
                assert!(err <= 1e-4, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn tiny_model_passes() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            ff_units: 8,
            n_layers: 1,
            sparse_proj_dim: 4,
            sparse_input_dim: 12,
            dense_dim: 3,
            rel_clip: 2,
            dropout: 0.0,
            n_tags: 5,
        };
        let (worst, name) = model_suite(&cfg, 5).unwrap();
        assert!(worst <= 1e-4, "{name}: {worst}");
    }
}
