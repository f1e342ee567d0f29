//! Finite-difference gradient checks over every differentiable op and over
//! the gates of both architectures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GateAxis, ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::models::{ArchId, ArchSpec, Model};
use crate::tensor::Tensor;
use crate::wf::{wf_wrap, LayerSelection};

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub op: String,
    /// Number of input configurations checked.
    pub cases: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Check `build` on random inputs of `shapes`, reducing its output with a
/// fixed random weighting so every element contributes.
fn check_op(
    seed: u64,
    shapes: &[Vec<usize>],
    range: (f64, f64),
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("in{i}"), random(s, range.0, range.1, &mut rng), true))
        .collect();
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        let out = build(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let weights = random(&out_shape, -1.0, 1.0, &mut rng);
    let report = grad_check(&mut store, &ids, 1e-6, 40, seed, |tape, store| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let out = build(tape, &vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    })?;
    Ok((report.max_rel_error, report.coords_checked))
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One op kind: input ranges and a list of (input shapes, build) cases.
struct OpCases {
    name: &'static str,
    range: (f64, f64),
    cases: Vec<(Vec<Vec<usize>>, Build)>,
}

fn unary(name: &'static str, range: (f64, f64), f: fn(&mut Tape, Var) -> Result<Var>) -> OpCases {
    let shapes = [vec![5], vec![2, 3], vec![2, 2, 3]];
    OpCases {
        name,
        range,
        cases: shapes.into_iter().map(|s| (vec![s], Box::new(move |t: &mut Tape, v: &[Var]| f(t, v[0])) as Build)).collect(),
    }
}

fn binary(name: &'static str, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> OpCases {
    let shapes = [vec![5], vec![2, 3], vec![2, 2, 3]];
    OpCases {
        name,
        range: (-1.0, 1.0),
        cases: shapes
            .into_iter()
            .map(|s| (vec![s.clone(), s], Box::new(move |t: &mut Tape, v: &[Var]| f(t, v[0], v[1])) as Build))
            .collect(),
    }
}

fn cases(name: &'static str, range: (f64, f64), cases: Vec<(Vec<Vec<usize>>, Build)>) -> OpCases {
    OpCases { name, range, cases }
}

fn op_table() -> Vec<OpCases> {
    let shape3 = [vec![2, 3, 4], vec![3, 2, 2], vec![1, 4, 5]];
    let dense = [(2, 3, 4), (5, 2, 3), (3, 6, 1)];
    let conv = [
        (vec![2, 1, 5, 5], vec![3, 1, 3, 3], 1, 1),
        (vec![1, 2, 6, 6], vec![2, 2, 2, 2], 2, 0),
        (vec![2, 3, 4, 4], vec![4, 3, 3, 3], 1, 1),
    ];
    let on3 = |f: fn(&mut Tape, Var, &[usize]) -> Result<Var>| -> Vec<(Vec<Vec<usize>>, Build)> {
        shape3
            .iter()
            .map(|s| {
                let dims = s.clone();
                (vec![s.clone()], Box::new(move |t: &mut Tape, v: &[Var]| f(t, v[0], &dims)) as Build)
            })
            .collect()
    };
    vec![
        binary("add", |t, a, b| t.add(a, b)),
        binary("sub", |t, a, b| t.sub(a, b)),
        binary("mul", |t, a, b| t.mul(a, b)),
        unary("scale", (-1.0, 1.0), |t, x| Ok(t.scale(x, -2.5))),
        unary("add_scalar", (-1.0, 1.0), |t, x| Ok(t.add_scalar(x, 0.3))),
        unary("reciprocal", (0.5, 2.0), |t, x| Ok(t.reciprocal(x))),
        unary("relu", (-1.0, 1.0), |t, x| Ok(t.relu(x))),
        unary("gelu", (-3.0, 3.0), |t, x| Ok(t.gelu(x))),
        unary("sigmoid", (-4.0, 4.0), |t, x| Ok(t.sigmoid(x))),
        unary("sum", (-1.0, 1.0), |t, x| Ok(t.sum(x))),
        unary("mean", (-1.0, 1.0), |t, x| t.mean(x)),
        unary("softmax", (-2.0, 2.0), |t, x| t.softmax(x)),
        cases("reshape", (-1.0, 1.0), on3(|t, x, s| t.reshape(x, &[s.iter().product()]))),
        cases("permute", (-1.0, 1.0), on3(|t, x, _| t.permute(x, &[2, 0, 1]))),
        cases("select", (-1.0, 1.0), on3(|t, x, _| t.select(x, 1, 1))),
        cases("narrow", (-1.0, 1.0), on3(|t, x, _| t.narrow(x, 2, 1, 1))),
        cases(
            "gather_rows",
            (-1.0, 1.0),
            shape3
                .iter()
                .map(|s| (vec![vec![s[0] + 1, s[2]]], Box::new(|t: &mut Tape, v: &[Var]| t.gather_rows(v[0], &[0, 1, 0, 1])) as Build))
                .collect(),
        ),
        cases(
            "prepend_token",
            (-1.0, 1.0),
            shape3
                .iter()
                .map(|s| (vec![s.clone(), vec![s[2]]], Box::new(|t: &mut Tape, v: &[Var]| t.prepend_token(v[0], v[1])) as Build))
                .collect(),
        ),
        cases(
            "add_broadcast",
            (-1.0, 1.0),
            shape3
                .iter()
                .map(|s| (vec![s.clone(), s[1..].to_vec()], Box::new(|t: &mut Tape, v: &[Var]| t.add_broadcast(v[0], v[1])) as Build))
                .collect(),
        ),
        cases(
            "add_channel_bias",
            (-1.0, 1.0),
            shape3
                .iter()
                .map(|s| (vec![s.clone(), vec![s[1]]], Box::new(|t: &mut Tape, v: &[Var]| t.add_channel_bias(v[0], v[1])) as Build))
                .collect(),
        ),
        cases(
            "linear",
            (-1.0, 1.0),
            dense
                .iter()
                .flat_map(|&(n, fin, fout)| {
                    [
                        (vec![vec![n, fin], vec![fin, fout], vec![fout]], Box::new(|t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], Some(v[2]))) as Build),
                        (vec![vec![2, n, fin], vec![fin, fout]], Box::new(|t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], None)) as Build),
                    ]
                })
                .collect(),
        ),
        cases(
            "bmm",
            (-1.0, 1.0),
            dense
                .iter()
                .flat_map(|&(n, fin, fout)| {
                    [
                        (vec![vec![2, n, fin], vec![2, fin, fout]], Box::new(|t: &mut Tape, v: &[Var]| t.bmm(v[0], v[1], false)) as Build),
                        (vec![vec![2, n, fin], vec![2, fout, fin]], Box::new(|t: &mut Tape, v: &[Var]| t.bmm(v[0], v[1], true)) as Build),
                    ]
                })
                .collect(),
        ),
        cases(
            "layer_norm",
            (-1.0, 1.0),
            dense
                .iter()
                .map(|&(n, fin, _)| {
                    (vec![vec![n, fin + 1], vec![fin + 1], vec![fin + 1]], Box::new(|t: &mut Tape, v: &[Var]| t.layer_norm(v[0], v[1], v[2])) as Build)
                })
                .collect(),
        ),
        cases(
            "conv2d",
            (-1.0, 1.0),
            conv.iter()
                .map(|(xs, ks, stride, pad)| {
                    let (stride, pad) = (*stride, *pad);
                    (vec![xs.clone(), ks.clone()], Box::new(move |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], stride, pad)) as Build)
                })
                .collect(),
        ),
        cases(
            "maxpool2d",
            (-1.0, 1.0),
            conv.iter().map(|(xs, ..)| (vec![xs.clone()], Box::new(|t: &mut Tape, v: &[Var]| t.maxpool2d(v[0], 2)) as Build)).collect(),
        ),
        cases(
            "cross_entropy",
            (-2.0, 2.0),
            (0..3)
                .map(|i| {
                    let n = i + 2;
                    let labels: Vec<usize> = (0..n).map(|j| (j * 3 + i) % 4).collect();
                    (vec![vec![n, 4]], Box::new(move |t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &labels)) as Build)
                })
                .collect(),
        ),
        cases(
            "gate",
            (-1.0, 1.0),
            [vec![2, 3, 4, 4], vec![3, 5, 6], vec![2, 4]]
                .into_iter()
                .map(|ys| {
                    let (b, c, axis) = if ys.len() == 4 {
                        (ys[0], ys[1], GateAxis::Channels)
                    } else {
                        (ys[0], *ys.last().expect("nonempty"), GateAxis::Features)
                    };
                    (
                        vec![ys, vec![b, c], vec![c], vec![b, c]],
                        Box::new(move |t: &mut Tape, v: &[Var]| t.gate(v[0], axis, v[1], Some((v[2], v[3])))) as Build,
                    )
                })
                .collect(),
        ),
    ]
}

/// Raw gate gradients through a whole gated model, against a cross-entropy loss.
fn check_gates(arch: ArchId, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = Model::new(ArchSpec::new(arch, 4, 16)?, seed)?;
    // Nonzero biases so the bias gates have an effect.
    let biases: Vec<_> = base.layers().iter().map(|l| l.bias).collect();
    for b in biases {
        base.store_mut().value_mut(b).iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let mut m = wf_wrap(base, &LayerSelection::Default)?;
    let params: Vec<_> = m.alphas().map(|a| a.param).collect();
    for &p in &params {
        m.store_mut().value_mut(p).iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
    }
    let x = random(&[4, 1, 16, 16], 0.0, 1.0, &mut rng);
    let (rows, labels) = (vec![0, 1, 2, 3], vec![1, 2, 3, 0]);
    let mut store = m.store().clone();
    let report = grad_check(&mut store, &params, 1e-5, 12, seed, |tape, store| {
        let xv = tape.constant(x.clone());
        let logits = m.forward_with(store, tape, xv, &rows)?;
        tape.softmax_cross_entropy(logits, &labels)
    })?;
    Ok((report.max_rel_error, report.coords_checked))
}

/// One row per op kind, plus one per architecture for the gates.
pub fn gradcheck_suite() -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for (k, op) in op_table().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut coords = 0;
        for (i, (shapes, build)) in op.cases.iter().enumerate() {
            let (err, n) = check_op(100 * k as u64 + i as u64, shapes, op.range, build.as_ref())?;
            worst = worst.max(err);
            coords += n;
        }
        rows.push(GradCheckRow {
            op: op.name.to_string(),
            cases: op.cases.len(),
            coords_checked: coords,
            max_rel_error: worst,
            pass: worst < GRADCHECK_TOLERANCE,
        });
    }
    for (arch, seed) in [(ArchId::SmallCnn, 13), (ArchId::TinyVit, 14)] {
        let (err, coords) = check_gates(arch, seed)?;
        rows.push(GradCheckRow {
            op: format!("wf_gates_{arch}"),
            cases: 1,
            coords_checked: coords,
            max_rel_error: err,
            pass: err < GRADCHECK_TOLERANCE,
        });
    }
    Ok(rows)
}

/// Fixed-width pass/fail table.
pub fn write_gradcheck_table(mut w: impl std::io::Write, rows: &[GradCheckRow]) -> Result<()> {
    writeln!(w, "{:<20} {:>5} {:>7} {:>13}  result", "op", "cases", "coords", "max_rel_err")?;
    for r in rows {
        let verdict = if r.pass { "pass" } else { "FAIL" };
        writeln!(w, "{:<20} {:>5} {:>7} {:>13.3e}  {verdict}", r.op, r.cases, r.coords_checked, r.max_rel_error)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_and_gate_passes() {
        let rows = gradcheck_suite().unwrap();
        let mut table = Vec::new();
        write_gradcheck_table(&mut table, &rows).unwrap();
        let table = String::from_utf8(table).unwrap();
        assert!(rows.iter().all(|r| r.pass), "{table}");
        assert_eq!(table.lines().count(), rows.len() + 1);
        assert!(rows.iter().any(|r| r.op == "wf_gates_tiny_vit"));
        assert!(rows.iter().all(|r| r.coords_checked > 0));
    }
}
