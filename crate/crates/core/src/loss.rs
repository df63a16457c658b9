//! Memory banks, cluster centers and the contrastive loss terms.
//!
//! Losses are batch means built from tape primitives. Bank rows and centers
//! only ever enter the tape as constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::clustering::PseudoLabels;
use crate::error::{Error, Result};

/// Floor applied to `q` before its logarithm.
pub const Q_FLOOR: f64 = 1e-12;

/// Per-instance feature store updated by exponential moving average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    features: Tensor,
    momentum: f64,
}

impl MemoryBank {
    pub fn new(features: Tensor, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bank momentum {momentum} not in (0, 1)"
            )));
        }
        if !features.is_finite() || features.shape().len() != 2 {
            return Err(Error::InvalidArgument("bank features must be a finite matrix".into()));
        }
        Ok(MemoryBank { features, momentum })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `v_i <- a v_i + (1 - a) x_i` for every batch row; other rows are untouched.
    pub fn update(&mut self, indices: &[usize], batch: &Tensor) -> Result<()> {
        if batch.rows() != indices.len() || batch.cols() != self.features.cols() {
            return Err(Error::ShapeMismatch {
                op: "bank_update",
                lhs: self.features.shape().to_vec(),
                rhs: batch.shape().to_vec(),
            });
        }
        let n = self.len();
        if let Some(&index) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index, len: n });
        }
        let a = self.momentum;
        for (r, &i) in indices.iter().enumerate() {
            for (v, &x) in self.features.row_mut(i).iter_mut().zip(batch.row(r)) {
                *v = a * *v + (1.0 - a) * x;
            }
        }
        Ok(())
    }
}

/// Updates both banks with the detached batch features of their branch.
pub fn update_banks(
    bank: &mut MemoryBank,
    bank2: &mut MemoryBank,
    indices: &[usize],
    x: &Tensor,
    x2: &Tensor,
) -> Result<()> {
    // Validate both before touching either.
    let n = bank.len().min(bank2.len());
    if let Some(&index) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index, len: n });
    }
    bank.update(indices, x)?;
    bank2.update(indices, x2)
}

/// One center per pseudo-label cluster, the mean of its members' bank rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterCenters {
    centers: Tensor,
}

impl ClusterCenters {
    pub fn new(centers: Tensor) -> Self {
        ClusterCenters { centers }
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.centers
    }

    pub fn num_clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }
}

pub fn compute_centers(bank: &MemoryBank, labels: &PseudoLabels) -> Result<ClusterCenters> {
    let m = labels.num_clusters();
    let d = bank.features.cols();
    let mut sums = Tensor::zeros(&[m, d]);
    let mut counts = vec![0usize; m];
    for (i, l) in labels.iter() {
        if i >= bank.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: bank.len(),
            });
        }
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(bank.features.row(i)) {
            *s += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyCluster(empty));
    }
    for (l, &c) in counts.iter().enumerate() {
        sums.row_mut(l).iter_mut().for_each(|s| *s /= c as f64);
    }
    Ok(ClusterCenters { centers: sums })
}

/// Mean over rows of `-cos(a_i, b_i)`.
fn neg_cosine_mean(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let na = tape.l2_normalize_rows(a)?;
    let nb = tape.l2_normalize_rows(b)?;
    let prod = tape.mul(na, nb)?;
    let dots = tape.row_sums(prod)?;
    let m = tape.mean(dots)?;
    tape.scale(m, -1.0)
}

/// Instance-level loss `-cos(z_i, x̃_i)`, averaged over the batch. With
/// `stop_grad` the target is detached.
pub fn instance_loss(tape: &mut Tape, z: Var, target: Var, stop_grad: bool) -> Result<Var> {
    let t = if stop_grad { tape.detach(target)? } else { target };
    neg_cosine_mean(tape, z, t)
}

fn gather_centers(centers: &ClusterCenters, labels: &[usize]) -> Result<Tensor> {
    centers.centers.select_rows(labels)
}

/// Inter-view cluster loss `-cos(z_i, ũ_{ω(i)})`, averaged over the batch.
pub fn inter_view_loss(tape: &mut Tape, z: Var, centers: &ClusterCenters, labels: &[usize]) -> Result<Var> {
    let targets = gather_centers(centers, labels)?;
    let t = tape.constant(targets);
    neg_cosine_mean(tape, z, t)
}

/// Softmax over cosine logits `cos(u_k, x_i) / tau`, one row per sample.
pub fn cluster_softmax(x: &Tensor, centers: &ClusterCenters, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let nx = x.l2_normalized_rows()?;
    let nc = centers.centers.l2_normalized_rows()?;
    let m = nc.rows();
    let mut out = Tensor::zeros(&[nx.rows(), m]);
    for i in 0..nx.rows() {
        let logits: Vec<f64> = (0..m)
            .map(|k| nx.row(i).iter().zip(nc.row(k)).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for (o, v) in out.row_mut(i).iter_mut().zip(e) {
            *o = v / s;
        }
    }
    Ok(out)
}

/// Focal-weighted softmax term `-(1 - q_i)^2 ln q_i`, averaged over the batch,
/// where `q_i` is the softmax probability of the sample's own cluster.
pub fn intra_view_term(tape: &mut Tape, x: Var, centers: &ClusterCenters, labels: &[usize], tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let b = tape.value(x).rows();
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!("{} labels for {b} rows", labels.len())));
    }
    let m = centers.num_clusters();
    if let Some(&l) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::IndexOutOfRange { index: l, len: m });
    }

    let nx = tape.l2_normalize_rows(x)?;
    let ct = tape.constant(centers.centers.l2_normalized_rows()?.transpose());
    let cos = tape.matmul(nx, ct)?;
    let logits = tape.scale(cos, 1.0 / tau)?;

    // Subtracting each row's max leaves the softmax unchanged.
    let lv = tape.value(logits);
    let mut maxes = Tensor::zeros(&[b, m]);
    let mut onehot = Tensor::zeros(&[b, m]);
    for i in 0..b {
        let mx = lv.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        maxes.row_mut(i).fill(mx);
        onehot.row_mut(i)[labels[i]] = 1.0;
    }
    let maxes = tape.constant(maxes);
    let onehot = tape.constant(onehot);
    let shifted = tape.sub(logits, maxes)?;
    let e = tape.exp(shifted)?;
    let denom = tape.row_sums(e)?;
    let log_denom = tape.ln(denom)?;
    let picked = tape.mul(shifted, onehot)?;
    let target = tape.row_sums(picked)?;
    let log_q = tape.sub(target, log_denom)?;

    // Clamp q at Q_FLOOR: clamped rows become constants.
    let floor = Q_FLOOR.ln();
    let lq = tape.value(log_q);
    let mut keep = Tensor::zeros(&[b, 1]);
    let mut fill = Tensor::zeros(&[b, 1]);
    for i in 0..b {
        if lq.data()[i] >= floor {
            keep.data_mut()[i] = 1.0;
        } else {
            fill.data_mut()[i] = floor;
        }
    }
    let keep = tape.constant(keep);
    let fill = tape.constant(fill);
    let kept = tape.mul(log_q, keep)?;
    let log_q = tape.add(kept, fill)?;

    let q = tape.exp(log_q)?;
    let ones = tape.constant(Tensor::filled(&[b, 1], 1.0));
    let one_minus = tape.sub(ones, q)?;
    let weight = tape.mul(one_minus, one_minus)?;
    let per_row = tape.mul(weight, log_q)?;
    let m = tape.mean(per_row)?;
    tape.scale(m, -1.0)
}

/// Intra-view cluster loss: the focal softmax term of each branch against its
/// own bank's centers, with the shared pseudo labels.
pub fn intra_view_loss(
    tape: &mut Tape,
    x: Var,
    x2: Var,
    centers: &ClusterCenters,
    centers2: &ClusterCenters,
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    let a = intra_view_term(tape, x, centers, labels, tau)?;
    let b = intra_view_term(tape, x2, centers2, labels, tau)?;
    tape.add(a, b)
}

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// `-cos(z, x̃)`.
    pub instance: bool,
    /// `-cos(z, ũ)`.
    pub inter: bool,
    /// Focal softmax term of the first branch.
    pub intra_first: bool,
    /// Focal softmax term of the second branch.
    pub intra_second: bool,
    /// Mirrored terms through a second predictor on the second branch.
    pub symmetric: bool,
    pub stop_grad: bool,
    pub tau: f64,
}

impl LossConfig {
    pub fn cacl(tau: f64) -> Self {
        LossConfig {
            instance: true,
            inter: true,
            intra_first: true,
            intra_second: true,
            symmetric: false,
            stop_grad: true,
            tau,
        }
    }

    pub fn uses_clusters(&self) -> bool {
        self.inter || self.intra_first || self.intra_second || self.symmetric
    }
}

/// Branch outputs for one batch. `z` is `G(x)` and `z2` is `G'(x̃)`.
#[derive(Clone, Copy, Debug)]
pub struct BatchOutputs {
    pub x: Var,
    pub z: Option<Var>,
    pub x2: Option<Var>,
    pub z2: Option<Var>,
}

/// Cluster structure visible to one batch: centers of both banks and the
/// pseudo label of each batch row.
#[derive(Clone, Copy, Debug)]
pub struct ClusterContext<'a> {
    pub centers: &'a ClusterCenters,
    pub centers2: &'a ClusterCenters,
    pub labels: &'a [Option<usize>],
}

/// Values of each term for one batch, plus the tape handle of the total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub instance: f64,
    pub inter: f64,
    pub intra: f64,
    pub instance_sym: f64,
    pub inter_sym: f64,
    pub total: f64,
    pub grad_norm_first: f64,
    pub grad_norm_second: f64,
    #[serde(skip)]
    pub total_var: Option<Var>,
}

impl LossBreakdown {
    /// Sum of the individual terms, in the order `total` accumulates them.
    pub fn sum_of_terms(&self) -> f64 {
        self.instance + self.instance_sym + self.inter + self.inter_sym + self.intra
    }
}

fn select_rows_var(tape: &mut Tape, x: Var, rows: &[usize]) -> Result<Var> {
    let b = tape.value(x).rows();
    if rows.len() == b && rows.iter().enumerate().all(|(i, &r)| i == r) {
        return Ok(x);
    }
    let mut sel = Tensor::zeros(&[rows.len(), b]);
    for (k, &r) in rows.iter().enumerate() {
        sel.row_mut(k)[r] = 1.0;
    }
    let s = tape.constant(sel);
    tape.matmul(s, x)
}

/// Sum of the enabled terms. Instance terms average over the whole batch;
/// cluster terms average over the batch rows that carry a pseudo label.
pub fn total_loss(
    tape: &mut Tape,
    out: &BatchOutputs,
    clusters: Option<ClusterContext<'_>>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut br = LossBreakdown::default();
    let mut total: Option<Var> = None;
    let mut acc = |tape: &mut Tape, term: Var| -> Result<f64> {
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        Ok(tape.value(term).item())
    };
    let need =
        |v: Option<Var>, what: &str| v.ok_or_else(|| Error::InvalidArgument(format!("loss config needs {what}")));

    if cfg.instance {
        let z = need(out.z, "predictor output z")?;
        let x2 = need(out.x2, "second-branch features")?;
        let t = instance_loss(tape, z, x2, cfg.stop_grad)?;
        br.instance = acc(tape, t)?;
    }
    if cfg.symmetric {
        let z2 = need(out.z2, "second predictor output")?;
        let t = instance_loss(tape, z2, out.x, cfg.stop_grad)?;
        br.instance_sym = acc(tape, t)?;
    }

    let labeled: Vec<(usize, usize)> = clusters
        .map(|c| {
            c.labels
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.map(|l| (i, l)))
                .collect()
        })
        .unwrap_or_default();
    if let (Some(ctx), false) = (clusters, labeled.is_empty()) {
        let rows: Vec<usize> = labeled.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = labeled.iter().map(|p| p.1).collect();
        if cfg.inter {
            let z = need(out.z, "predictor output z")?;
            let zs = select_rows_var(tape, z, &rows)?;
            let t = inter_view_loss(tape, zs, ctx.centers2, &labels)?;
            br.inter = acc(tape, t)?;
        }
        if cfg.symmetric {
            let z2 = need(out.z2, "second predictor output")?;
            let zs = select_rows_var(tape, z2, &rows)?;
            let t = inter_view_loss(tape, zs, ctx.centers, &labels)?;
            br.inter_sym = acc(tape, t)?;
        }
        let mut intra: Option<Var> = None;
        if cfg.intra_first {
            let xs = select_rows_var(tape, out.x, &rows)?;
            intra = Some(intra_view_term(tape, xs, ctx.centers, &labels, cfg.tau)?);
        }
        if cfg.intra_second {
            let x2 = need(out.x2, "second-branch features")?;
            let xs = select_rows_var(tape, x2, &rows)?;
            let t = intra_view_term(tape, xs, ctx.centers2, &labels, cfg.tau)?;
            intra = Some(match intra {
                Some(a) => tape.add(a, t)?,
                None => t,
            });
        }
        if let Some(t) = intra {
            br.intra = acc(tape, t)?;
        }
    }

    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    br.total = tape.value(total).item();
    br.total_var = Some(total);
    Ok(br)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    fn random(shape: [usize; 2], seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::new(
            shape.to_vec(),
            (0..shape[0] * shape[1]).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn scalar_loss(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn center_of_two_rows() {
        let bank = MemoryBank::new(rows(&[&[1.0, 0.0], &[0.0, 1.0], &[3.0, 3.0]]), 0.2).unwrap();
        let labels = PseudoLabels::from_labels(vec![Some(0), Some(0), Some(1)], 0);
        let c = compute_centers(&bank, &labels).unwrap();
        assert_eq!(c.as_tensor().row(0), &[0.5, 0.5]);
        assert_eq!(c.as_tensor().row(1), &[3.0, 3.0]);
    }

    #[test]
    fn empty_cluster_id_is_an_error() {
        let bank = MemoryBank::new(rows(&[&[1.0, 0.0], &[0.0, 1.0]]), 0.2).unwrap();
        let labels = PseudoLabels::from_labels(vec![Some(0), Some(2)], 0);
        assert!(matches!(compute_centers(&bank, &labels), Err(Error::EmptyCluster(1))));
    }

    #[test]
    fn instance_loss_values() {
        let v = |a: &[f64], b: &[f64]| {
            scalar_loss(|t| {
                let z = t.constant(rows(&[a]));
                let x = t.constant(rows(&[b]));
                instance_loss(t, z, x, true)
            })
        };
        assert!((v(&[1.0, 2.0], &[1.0, 2.0]) + 1.0).abs() < 1e-15);
        assert!(v(&[1.0, 0.0], &[0.0, 5.0]).abs() < 1e-15);
        assert!((v(&[1.0, 0.0], &[1.0, 1.0]) + 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn instance_loss_rejects_zero_vector() {
        let mut t = Tape::new();
        let z = t.constant(rows(&[&[0.0, 0.0]]));
        let x = t.constant(rows(&[&[1.0, 0.0]]));
        assert!(matches!(instance_loss(&mut t, z, x, true), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn inter_view_values_and_errors() {
        let c = ClusterCenters::new(rows(&[&[2.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]));
        let v = scalar_loss(|t| {
            let z = t.constant(rows(&[&[3.0, 0.0], &[1.0, 0.0]]));
            inter_view_loss(t, z, &c, &[0, 1])
        });
        // Mean of -1 and 0.
        assert!((v + 0.5).abs() < 1e-15);
        let mut t = Tape::new();
        let z = t.constant(rows(&[&[1.0, 0.0]]));
        assert!(inter_view_loss(&mut t, z, &c, &[2]).is_err());
    }

    #[test]
    fn intra_single_cluster_is_zero() {
        let c = ClusterCenters::new(rows(&[&[1.0, 1.0]]));
        let v = scalar_loss(|t| {
            let x = t.constant(random([4, 2], 1));
            let x2 = t.constant(random([4, 2], 2));
            intra_view_loss(t, x, x2, &c, &c, &[0, 0, 0, 0], 0.05)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn intra_saturated_softmax() {
        let c = ClusterCenters::new(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let v = scalar_loss(|t| {
            let x = t.constant(rows(&[&[1.0, 0.0]]));
            intra_view_term(t, x, &c, &[0], 0.05)
        });
        // q = 1 / (1 + e^-20), so (1 - q)^2 ln q is about 4e-18 * 2e-9.
        assert!(v.abs() < 1e-15);
        let q = cluster_softmax(&rows(&[&[1.0, 0.0]]), &c, 0.05).unwrap();
        assert!((1.0 - q.data()[0] - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn intra_symmetric_half() {
        let c = ClusterCenters::new(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let v = scalar_loss(|t| {
            let x = t.constant(rows(&[&[1.0, 1.0]]));
            let x2 = t.constant(rows(&[&[2.0, 2.0]]));
            intra_view_loss(t, x, x2, &c, &c, &[1], 0.05)
        });
        let expected = -2.0 * 0.25 * 0.5f64.ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn intra_rejects_bad_tau() {
        let c = ClusterCenters::new(rows(&[&[1.0, 0.0]]));
        let mut t = Tape::new();
        let x = t.constant(rows(&[&[1.0, 0.0]]));
        assert!(intra_view_term(&mut t, x, &c, &[0], 0.0).is_err());
    }

    #[test]
    fn clamped_rows_contribute_the_floor_without_gradient() {
        // q is about e^-80 here, far below the floor.
        let c = ClusterCenters::new(rows(&[&[1.0, 0.0], &[-1.0, 0.0]]));
        let mut t = Tape::new();
        let x = t.leaf(rows(&[&[1.0, 0.0]]), true);
        let l = intra_view_term(&mut t, x, &c, &[1], 0.025).unwrap();
        let expected = -(1.0 - Q_FLOOR).powi(2) * Q_FLOOR.ln();
        assert!((t.value(l).item() - expected).abs() < 1e-12);
        let g = t.backward(l).unwrap().wrt(x).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn intra_gradient_matches_finite_differences() {
        let c = ClusterCenters::new(random([3, 4], 10));
        let labels = [0, 2, 1, 2];
        let r = finite_diff_check(
            |t, x| intra_view_term(t, x, &c, &labels, 0.05),
            &random([4, 4], 11),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_error);
    }

    #[test]
    fn inter_gradient_matches_finite_differences() {
        let c = ClusterCenters::new(random([3, 4], 12));
        let r = finite_diff_check(
            |t, z| inter_view_loss(t, z, &c, &[1, 0]),
            &random([2, 4], 13),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_error);
    }

    #[test]
    fn bank_update_example_and_errors() {
        let mut bank = MemoryBank::new(rows(&[&[1.0, 0.0], &[5.0, 5.0]]), 0.2).unwrap();
        bank.update(&[0], &rows(&[&[0.0, 1.0]])).unwrap();
        let r = bank.features().row(0);
        assert!((r[0] - 0.2).abs() < 1e-15 && (r[1] - 0.8).abs() < 1e-15);
        assert_eq!(bank.features().row(1), &[5.0, 5.0]);
        assert!(matches!(
            bank.update(&[2], &rows(&[&[0.0, 1.0]])),
            Err(Error::IndexOutOfRange { index: 2, .. })
        ));
        assert!(MemoryBank::new(rows(&[&[1.0]]), 1.0).is_err());
    }

    #[test]
    fn bank_near_one_momentum_is_fixed() {
        let mut bank = MemoryBank::new(rows(&[&[1.0, -2.0]]), 1.0 - 1e-12).unwrap();
        bank.update(&[0], &rows(&[&[100.0, 100.0]])).unwrap();
        let r = bank.features().row(0);
        assert!((r[0] - 1.0).abs() < 1e-9 && (r[1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn update_banks_is_atomic_on_bad_index() {
        let mut a = MemoryBank::new(rows(&[&[1.0, 0.0]]), 0.2).unwrap();
        let mut b = MemoryBank::new(rows(&[&[1.0, 0.0]]), 0.2).unwrap();
        let x = rows(&[&[0.0, 1.0], &[0.0, 1.0]]);
        assert!(update_banks(&mut a, &mut b, &[0, 1], &x, &x).is_err());
        assert_eq!(a.features().row(0), &[1.0, 0.0]);
    }

    fn breakdown(cfg: LossConfig) -> LossBreakdown {
        let c = ClusterCenters::new(random([3, 4], 20));
        let c2 = ClusterCenters::new(random([3, 4], 21));
        let labels = [Some(0), None, Some(2), Some(1)];
        let mut t = Tape::new();
        let x = t.leaf(random([4, 4], 22), true);
        let x2 = t.leaf(random([4, 4], 23), true);
        let z = t.leaf(random([4, 4], 24), true);
        let z2 = t.leaf(random([4, 4], 25), true);
        let out = BatchOutputs {
            x,
            z: Some(z),
            x2: Some(x2),
            z2: Some(z2),
        };
        let ctx = ClusterContext {
            centers: &c,
            centers2: &c2,
            labels: &labels,
        };
        total_loss(&mut t, &out, Some(ctx), &cfg).unwrap()
    }

    #[test]
    fn total_is_sum_of_enabled_terms() {
        let full = breakdown(LossConfig::cacl(0.05));
        assert_eq!(full.total, full.sum_of_terms());
        let no_inter = breakdown(LossConfig {
            inter: false,
            ..LossConfig::cacl(0.05)
        });
        assert_eq!(no_inter.inter, 0.0);
        assert_eq!(no_inter.total, no_inter.instance + no_inter.intra);
        assert_eq!(no_inter.instance, full.instance);
        assert_eq!(no_inter.intra, full.intra);
    }

    #[test]
    fn additivity_of_half_terms() {
        let br = LossBreakdown {
            instance: 0.5,
            inter: 0.5,
            intra: 0.5,
            ..Default::default()
        };
        assert_eq!(br.sum_of_terms(), 1.5);
    }

    #[test]
    fn second_branch_gets_gradient_only_from_its_softmax_term() {
        let c = ClusterCenters::new(random([3, 4], 30));
        let c2 = ClusterCenters::new(random([3, 4], 31));
        let labels = [Some(0), Some(1), Some(2)];
        let run = |cfg: LossConfig| {
            let mut t = Tape::new();
            let x = t.leaf(random([3, 4], 32), true);
            let x2 = t.leaf(random([3, 4], 33), true);
            let z = t.leaf(random([3, 4], 34), true);
            let out = BatchOutputs {
                x,
                z: Some(z),
                x2: Some(x2),
                z2: None,
            };
            let ctx = ClusterContext {
                centers: &c,
                centers2: &c2,
                labels: &labels,
            };
            let br = total_loss(&mut t, &out, Some(ctx), &cfg).unwrap();
            let g = t.backward(br.total_var.unwrap()).unwrap();
            (g.reached(x2).is_some(), g.wrt(x2).unwrap())
        };
        let (reached, g) = run(LossConfig::cacl(0.05));
        assert!(reached && g.norm() > 0.0);
        let (reached, g) = run(LossConfig {
            intra_second: false,
            ..LossConfig::cacl(0.05)
        });
        assert!(!reached);
        assert!(g.data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn missing_clusters_leave_instance_only() {
        let mut t = Tape::new();
        let x = t.leaf(random([2, 3], 40), true);
        let x2 = t.leaf(random([2, 3], 41), true);
        let z = t.leaf(random([2, 3], 42), true);
        let out = BatchOutputs {
            x,
            z: Some(z),
            x2: Some(x2),
            z2: None,
        };
        let br = total_loss(&mut t, &out, None, &LossConfig::cacl(0.05)).unwrap();
        assert_eq!(br.total, br.instance);
        assert_eq!((br.inter, br.intra), (0.0, 0.0));
    }
}
