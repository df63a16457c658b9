//! Finite-difference checks of every loss term and the assembled objective.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, Tape, Tensor, Var};
use crate::loss::{
    instance_loss, inter_view_loss, intra_view_loss, total_loss, BatchOutputs, ClusterCenters, ClusterContext,
    LossConfig,
};
use crate::rng::{seeded, Rng};

const INPUT: [usize; 2] = [4, 5];

fn normal(shape: [usize; 2], rng: &mut Rng) -> Tensor {
    let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let data = (0..n * m)
        .map(|ij| (0..k).map(|l| a.row(ij / m)[l] * b.row(l)[ij % m]).sum())
        .collect();
    Tensor::new(vec![n, m], data).unwrap()
}

/// A scalar loss of one input matrix, given the base point of the check.
pub type LossFn = Box<dyn Fn(&mut Tape, Var, &Tensor) -> crate::Result<Var>>;

pub struct Family {
    pub name: &'static str,
    pub loss: LossFn,
    /// Same value with detached targets frozen at the base point. When set,
    /// finite differences run on it and its tape gradient must match `loss`'s.
    pub frozen: Option<LossFn>,
}

fn family(name: &'static str, loss: LossFn) -> Family {
    Family {
        name,
        loss,
        frozen: None,
    }
}

/// Fresh random centers, mixing matrices and targets on every call.
pub fn gradient_families(rng: &mut Rng) -> Vec<Family> {
    const B: usize = 4;
    const D: usize = 5;
    const K: usize = 3;
    let target = normal([B, D], rng);
    let centers = ClusterCenters::new(normal([K, D], rng));
    let centers2 = ClusterCenters::new(normal([K, D], rng));
    let mix: Vec<Tensor> = (0..3).map(|_| normal([D, D], rng)).collect();
    let second = normal([B, D], rng);
    let labels = [0usize, 2, 1, 2];
    let row_labels = [Some(0), None, Some(2), Some(1)];

    let mut out = Vec::new();
    {
        let target = target.clone();
        out.push(family(
            "instance",
            Box::new(move |t, z, _| {
                let x2 = t.constant(target.clone());
                instance_loss(t, z, x2, true)
            }),
        ));
    }
    {
        // Without stop-gradient both arguments depend on the input.
        let m = mix[0].clone();
        out.push(family(
            "instance, no stop-grad",
            Box::new(move |t, z, _| {
                let m = t.constant(m.clone());
                let x2 = t.matmul(z, m)?;
                instance_loss(t, z, x2, false)
            }),
        ));
    }
    {
        let c = centers2.clone();
        out.push(family(
            "inter",
            Box::new(move |t, z, _| inter_view_loss(t, z, &c, &labels)),
        ));
    }
    {
        let (c, c2, s) = (centers.clone(), centers2.clone(), second.clone());
        out.push(family(
            "intra, first branch",
            Box::new(move |t, x, _| {
                let x2 = t.constant(s.clone());
                intra_view_loss(t, x, x2, &c, &c2, &labels, 0.1)
            }),
        ));
    }
    {
        let (c, c2, s) = (centers.clone(), centers2.clone(), second.clone());
        out.push(family(
            "intra, second branch",
            Box::new(move |t, x2, _| {
                let x = t.constant(s.clone());
                intra_view_loss(t, x, x2, &c, &c2, &labels, 0.1)
            }),
        ));
    }
    // Total loss: x = p, z = p M0, and the second branch x2 = p M1, z2 = x2 M2
    // unless stop-gradient makes it a constant.
    let branches = move |t: &mut Tape, p: Var, m: &[Tensor], s: &Tensor, stop_grad: bool| {
        let m: Vec<Var> = m.iter().map(|m| t.constant(m.clone())).collect();
        let z = t.matmul(p, m[0])?;
        let x2 = if stop_grad {
            t.constant(s.clone())
        } else {
            t.matmul(p, m[1])?
        };
        let z2 = t.matmul(x2, m[2])?;
        crate::Result::Ok((z, x2, z2))
    };
    for (name, cfg) in [
        ("total, asymmetric", LossConfig::cacl(0.1)),
        (
            "total, symmetric without stop-grad",
            LossConfig {
                symmetric: true,
                stop_grad: false,
                ..LossConfig::cacl(0.1)
            },
        ),
    ] {
        let (c, c2, m, s) = (centers.clone(), centers2.clone(), mix.clone(), second.clone());
        out.push(family(
            name,
            Box::new(move |t, p, _| {
                let (z, x2, z2) = branches(t, p, &m, &s, cfg.stop_grad)?;
                let ctx = ClusterContext {
                    centers: &c,
                    centers2: &c2,
                    labels: &row_labels,
                };
                let out = BatchOutputs {
                    x: p,
                    z: Some(z),
                    x2: Some(x2),
                    z2: cfg.symmetric.then_some(z2),
                };
                Ok(total_loss(t, &out, Some(ctx), &cfg)?.total_var.expect("total"))
            }),
        ));
    }
    {
        // Symmetric with stop-gradient: each branch is the other's detached
        // target, so the check runs on the same sum with targets frozen.
        let cfg = LossConfig {
            symmetric: true,
            ..LossConfig::cacl(0.1)
        };
        let all = [Some(0), Some(2), Some(1), Some(2)];
        let (c, c2, m) = (centers.clone(), centers2.clone(), mix.clone());
        let (fc, fc2, fm) = (centers.clone(), centers2.clone(), mix.clone());
        out.push(Family {
            name: "total, symmetric",
            loss: Box::new(move |t, p, _| {
                let (z, x2, z2) = branches(t, p, &m, &Tensor::zeros(&[0]), false)?;
                let ctx = ClusterContext {
                    centers: &c,
                    centers2: &c2,
                    labels: &all,
                };
                let out = BatchOutputs {
                    x: p,
                    z: Some(z),
                    x2: Some(x2),
                    z2: Some(z2),
                };
                Ok(total_loss(t, &out, Some(ctx), &cfg)?.total_var.expect("total"))
            }),
            frozen: Some(Box::new(move |t, p, p0| {
                let (z, x2, z2) = branches(t, p, &fm, &Tensor::zeros(&[0]), false)?;
                let x2_0 = t.constant(matmul(p0, &fm[1]));
                let x_0 = t.constant(p0.clone());
                let terms = [
                    instance_loss(t, z, x2_0, false)?,
                    instance_loss(t, z2, x_0, false)?,
                    inter_view_loss(t, z, &fc2, &labels)?,
                    inter_view_loss(t, z2, &fc, &labels)?,
                    intra_view_loss(t, p, x2, &fc, &fc2, &labels, 0.1)?,
                ];
                terms[1..].iter().try_fold(terms[0], |acc, &v| t.add(acc, v))
            })),
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyCheck {
    pub name: String,
    pub points: usize,
    pub worst_error: f64,
    pub failures: usize,
}

/// Checks `points` random inputs, cycling through the families and drawing
/// fresh families after each cycle. Families with a frozen-target form are
/// checked on that form, and their tape gradient must equal the real one to
/// 1e-12.
pub fn gradient_suite(points: usize, seed: u64, h: f64, tol: f64) -> crate::Result<Vec<FamilyCheck>> {
    let mut rng = seeded(seed);
    let mut rows: Vec<FamilyCheck> = Vec::new();
    let mut done = 0;
    while done < points {
        for fam in gradient_families(&mut rng) {
            if done == points {
                break;
            }
            let p = normal(INPUT, &mut rng);
            let checked = fam.frozen.as_ref().unwrap_or(&fam.loss);
            let r = finite_diff_check(|t, v| checked(t, v, &p), &p, h, tol)?;
            let mut err = r.max_rel_error;
            let mut ok = r.passed;
            if fam.frozen.is_some() {
                let tape_grad = |f: &LossFn| -> crate::Result<Tensor> {
                    let mut t = Tape::new();
                    let v = t.leaf(p.clone(), true);
                    let y = f(&mut t, v, &p)?;
                    Ok(t.backward(y)?.wrt(v).expect("leaf is on the path"))
                };
                let (a, b) = (tape_grad(&fam.loss)?, tape_grad(checked)?);
                let gap = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                ok &= gap < 1e-12;
                err = err.max(gap);
            }
            let row = match rows.iter_mut().position(|r| r.name == fam.name) {
                Some(i) => &mut rows[i],
                None => {
                    rows.push(FamilyCheck {
                        name: fam.name.to_string(),
                        points: 0,
                        worst_error: 0.0,
                        failures: 0,
                    });
                    rows.last_mut().unwrap()
                }
            };
            row.points += 1;
            row.worst_error = row.worst_error.max(err);
            row.failures += usize::from(!ok);
            done += 1;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_passes() {
        let rows = gradient_suite(24, 3, 1e-5, 1e-4).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows.iter().map(|r| r.points).sum::<usize>(), 24);
        for r in &rows {
            assert_eq!(r.failures, 0, "{} worst {:.2e}", r.name, r.worst_error);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // s + detach(s): the tape sees gradient 2x, finite differences 4x.
        let mut rng = seeded(0);
        let p = normal(INPUT, &mut rng);
        let r = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                let s = t.sum(sq)?;
                let half = t.detach(s)?;
                t.add(s, half)
            },
            &p,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
