//! Operation records, forward kernels, and backward accumulation rules.

use super::{DiffError, Graph, NodeId, Tensor};

/// Recorded operation of one graph node.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElementwise(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    L2Norm(NodeId),
    Concat(NodeId, NodeId),
    SoftmaxCe(NodeId, CeTarget),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::MulElementwise(..) => "mul_elementwise",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::L2Norm(..) => "l2_norm",
            Op::Concat(..) => "concat",
            Op::SoftmaxCe(..) => "softmax_logsumexp_ce",
        }
    }
}

/// Cross-entropy target: one class index per logit row, or one probability
/// vector per logit row (non-negative entries summing to 1 within 1e-9).
#[derive(Debug, Clone)]
pub enum CeTarget {
    Labels(Vec<usize>),
    Soft(Tensor),
}

/// Mean per-row cross-entropy with a max-shifted log-sum-exp.
pub(crate) fn ce_forward(logits: &Tensor, target: &CeTarget) -> Result<f64, DiffError> {
    let (rows, k) = logits.dims2().ok_or(DiffError::BadShape {
        op: "softmax_logsumexp_ce",
        expected: "rank-2 logits",
        shape: logits.shape().to_vec(),
    })?;
    validate_target(target, rows, k)?;
    let mut total = 0.0;
    for r in 0..rows {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // Working in shifted coordinates u = ℓ − m keeps both the
        // log-sum-exp and the target term invariant under ℓ → ℓ + c.
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let picked = match target {
            CeTarget::Labels(ys) => row[ys[r]] - m,
            CeTarget::Soft(q) => q.row(r).iter().zip(row).map(|(qi, v)| qi * (v - m)).sum(),
        };
        total += lse - picked;
    }
    Ok(total / rows as f64)
}

fn validate_target(target: &CeTarget, rows: usize, k: usize) -> Result<(), DiffError> {
    match target {
        CeTarget::Labels(ys) => {
            if ys.len() != rows {
                return Err(DiffError::TargetCount { targets: ys.len(), rows });
            }
            for &y in ys {
                if y >= k {
                    return Err(DiffError::LabelOutOfRange { label: y, classes: k });
                }
            }
        }
        CeTarget::Soft(q) => {
            if q.shape() != [rows, k] {
                return Err(DiffError::ShapeMismatch {
                    op: "softmax_logsumexp_ce",
                    lhs: vec![rows, k],
                    rhs: q.shape().to_vec(),
                });
            }
            for r in 0..rows {
                let row = q.row(r);
                let sum: f64 = row.iter().sum();
                if row.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(DiffError::InvalidTarget { row: r });
                }
            }
        }
    }
    Ok(())
}

/// Reverse rule dispatch: add `grad · ∂node/∂input` into each gradient-enabled
/// input's accumulator.
pub(crate) fn accumulate(g: &Graph, index: usize, grad: &[f64], bufs: &mut [Option<Vec<f64>>]) {
    let rg = |id: NodeId| g.node_requires_grad(id.index());
    match g.node_op(index) {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (av, bv) = (g.node_value(a.index()), g.node_value(b.index()));
            let (m, kk) = av.dims2().expect("matmul lhs is rank-2");
            let (_, n) = bv.dims2().expect("matmul rhs is rank-2");
            if rg(*a) {
                // ∂L/∂a = grad · bᵀ
                let ga = slot(bufs, a.index(), av.len());
                for i in 0..m {
                    for x in 0..kk {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grad[i * n + j] * bv.data()[x * n + j];
                        }
                        ga[i * kk + x] += acc;
                    }
                }
            }
            if rg(*b) {
                // ∂L/∂b = aᵀ · grad
                let gb = slot(bufs, b.index(), bv.len());
                for x in 0..kk {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += av.data()[i * kk + x] * grad[i * n + j];
                        }
                        gb[x * n + j] += acc;
                    }
                }
            }
        }
        Op::Add(a, b) => {
            let (av, bv) = (g.node_value(a.index()), g.node_value(b.index()));
            if rg(*a) {
                let ga = slot(bufs, a.index(), av.len());
                for (gi, gr) in ga.iter_mut().zip(grad) {
                    *gi += gr;
                }
            }
            if rg(*b) {
                let gb = slot(bufs, b.index(), bv.len());
                if bv.len() == grad.len() {
                    for (gi, gr) in gb.iter_mut().zip(grad) {
                        *gi += gr;
                    }
                } else {
                    // Row-broadcast bias: gradient is the column sum.
                    let c = bv.len();
                    for (j, gr) in grad.iter().enumerate() {
                        gb[j % c] += gr;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                let ga = slot(bufs, a.index(), grad.len());
                for (gi, gr) in ga.iter_mut().zip(grad) {
                    *gi += gr;
                }
            }
            if rg(*b) {
                let gb = slot(bufs, b.index(), grad.len());
                for (gi, gr) in gb.iter_mut().zip(grad) {
                    *gi -= gr;
                }
            }
        }
        Op::MulElementwise(a, b) => {
            let (av, bv) = (g.node_value(a.index()), g.node_value(b.index()));
            if rg(*a) {
                let ga = slot(bufs, a.index(), av.len());
                for i in 0..grad.len() {
                    ga[i] += grad[i] * bv.data()[i];
                }
            }
            if rg(*b) {
                let gb = slot(bufs, b.index(), bv.len());
                for i in 0..grad.len() {
                    gb[i] += grad[i] * av.data()[i];
                }
            }
        }
        Op::ScalarMul(x, c) => {
            if rg(*x) {
                let gx = slot(bufs, x.index(), grad.len());
                for (gi, gr) in gx.iter_mut().zip(grad) {
                    *gi += c * gr;
                }
            }
        }
        Op::Relu(x) => {
            if rg(*x) {
                let xv = g.node_value(x.index());
                let gx = slot(bufs, x.index(), grad.len());
                for i in 0..grad.len() {
                    if xv.data()[i] > 0.0 {
                        gx[i] += grad[i];
                    }
                }
            }
        }
        Op::Tanh(x) => {
            if rg(*x) {
                let y = g.node_value(index);
                let gx = slot(bufs, x.index(), grad.len());
                for i in 0..grad.len() {
                    gx[i] += grad[i] * (1.0 - y.data()[i] * y.data()[i]);
                }
            }
        }
        Op::Exp(x) => {
            if rg(*x) {
                let y = g.node_value(index);
                let gx = slot(bufs, x.index(), grad.len());
                for i in 0..grad.len() {
                    gx[i] += grad[i] * y.data()[i];
                }
            }
        }
        Op::Log(x) => {
            if rg(*x) {
                let xv = g.node_value(x.index());
                let gx = slot(bufs, x.index(), grad.len());
                for i in 0..grad.len() {
                    gx[i] += grad[i] / xv.data()[i];
                }
            }
        }
        Op::Square(x) => {
            if rg(*x) {
                let xv = g.node_value(x.index());
                let gx = slot(bufs, x.index(), grad.len());
                for i in 0..grad.len() {
                    gx[i] += 2.0 * xv.data()[i] * grad[i];
                }
            }
        }
        Op::Mean(x) => {
            if rg(*x) {
                let n = g.node_value(x.index()).len();
                let gx = slot(bufs, x.index(), n);
                let c = grad[0] / n as f64;
                for gi in gx.iter_mut() {
                    *gi += c;
                }
            }
        }
        Op::Sum(x) => {
            if rg(*x) {
                let n = g.node_value(x.index()).len();
                let gx = slot(bufs, x.index(), n);
                for gi in gx.iter_mut() {
                    *gi += grad[0];
                }
            }
        }
        Op::L2Norm(x) => {
            if rg(*x) {
                let xv = g.node_value(x.index());
                let norms = g.node_value(index);
                let cols = xv.len() / norms.len();
                let gx = slot(bufs, x.index(), xv.len());
                // ∂‖row‖/∂row = row / ‖row‖, zero at the origin.
                for r in 0..norms.len() {
                    let n = norms.data()[r];
                    if n > 0.0 {
                        for j in 0..cols {
                            gx[r * cols + j] += grad[r] * xv.data()[r * cols + j] / n;
                        }
                    }
                }
            }
        }
        Op::Concat(a, b) => {
            let (av, bv) = (g.node_value(a.index()), g.node_value(b.index()));
            match (av.dims2(), bv.dims2()) {
                (Some((r, ca)), Some((_, cb))) => {
                    let cols = ca + cb;
                    if rg(*a) {
                        let ga = slot(bufs, a.index(), av.len());
                        for i in 0..r {
                            for j in 0..ca {
                                ga[i * ca + j] += grad[i * cols + j];
                            }
                        }
                    }
                    if rg(*b) {
                        let gb = slot(bufs, b.index(), bv.len());
                        for i in 0..r {
                            for j in 0..cb {
                                gb[i * cb + j] += grad[i * cols + ca + j];
                            }
                        }
                    }
                }
                _ => {
                    let na = av.len();
                    if rg(*a) {
                        let ga = slot(bufs, a.index(), na);
                        for i in 0..na {
                            ga[i] += grad[i];
                        }
                    }
                    if rg(*b) {
                        let gb = slot(bufs, b.index(), bv.len());
                        for i in 0..bv.len() {
                            gb[i] += grad[na + i];
                        }
                    }
                }
            }
        }
        Op::SoftmaxCe(logits, target) => {
            if rg(*logits) {
                let lv = g.node_value(logits.index());
                let (rows, k) = lv.dims2().expect("ce logits are rank-2");
                let gl = slot(bufs, logits.index(), lv.len());
                let scale = grad[0] / rows as f64;
                // ∂(mean ce)/∂ℓ_row = (softmax(ℓ_row) − q_row) / rows
                for r in 0..rows {
                    let probs = kernels::softmax_row(lv.row(r));
                    for i in 0..k {
                        let q = match target {
                            CeTarget::Labels(ys) => (ys[r] == i) as usize as f64,
                            CeTarget::Soft(qm) => qm.row(r)[i],
                        };
                        gl[r * k + i] += scale * (probs[i] - q);
                    }
                }
            }
        }
    }
}

fn slot<'a>(bufs: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut [f64] {
    bufs[idx].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

/// Shape-checked forward kernels, shared between the tape and the plain
/// (no-gradient) evaluation paths so both compute bit-identical values.
pub(crate) mod kernels {
    use super::{CeTarget, DiffError, Tensor};

    pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
        let (m, k) = a.dims2().ok_or_else(|| bad_rank("matmul", a))?;
        let (k2, n) = b.dims2().ok_or_else(|| bad_rank("matmul", b))?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for x in 0..k {
                let av = a.data()[i * k + x];
                let brow = &b.data()[x * n..(x + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Same-shape sum, or rank-2 plus rank-1 row bias.
    pub(crate) fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
        if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            return Ok(Tensor::from_parts(a.shape().to_vec(), data));
        }
        if let (Some((r, c)), 1) = (a.dims2(), b.rank()) {
            if b.len() == c {
                let mut data = a.data().to_vec();
                for i in 0..r {
                    for j in 0..c {
                        data[i * c + j] += b.data()[j];
                    }
                }
                return Ok(Tensor::from_parts(vec![r, c], data));
            }
        }
        Err(DiffError::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }

    pub(crate) fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
        if a.shape() != b.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "sub",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub(crate) fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
        if a.shape() != b.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "mul_elementwise",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub(crate) fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
    }

    /// Row-wise Euclidean norms: [r×c] → [r]; a rank-1 input yields [1].
    pub(crate) fn l2_norm_rows(t: &Tensor) -> Tensor {
        match t.dims2() {
            Some((r, c)) => {
                let data = (0..r)
                    .map(|i| t.data()[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                Tensor::from_parts(vec![r], data)
            }
            None => {
                let n = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                Tensor::from_parts(vec![1], vec![n])
            }
        }
    }

    pub(crate) fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
        match (a.dims2(), b.dims2()) {
            (Some((ra, ca)), Some((rb, cb))) if ra == rb => {
                let mut data = Vec::with_capacity(ra * (ca + cb));
                for i in 0..ra {
                    data.extend_from_slice(a.row(i));
                    data.extend_from_slice(b.row(i));
                }
                Ok(Tensor::from_parts(vec![ra, ca + cb], data))
            }
            (None, None) if a.rank() == 1 && b.rank() == 1 => {
                let mut data = a.data().to_vec();
                data.extend_from_slice(b.data());
                let n = data.len();
                Ok(Tensor::from_parts(vec![n], data))
            }
            _ => Err(DiffError::ShapeMismatch {
                op: "concat",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            }),
        }
    }

    /// Max-shifted softmax of one logit row.
    pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Per-row cross-entropy against hard labels (no averaging); used by the
    /// membership-inference attacker, which needs per-sample losses.
    pub(crate) fn per_row_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>, DiffError> {
        let (rows, k) = logits.dims2().ok_or_else(|| bad_rank("per_row_cross_entropy", logits))?;
        super::validate_target(&CeTarget::Labels(labels.to_vec()), rows, k)?;
        Ok((0..rows)
            .map(|r| {
                let row = logits.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - (row[labels[r]] - m)
            })
            .collect())
    }

    fn bad_rank(op: &'static str, t: &Tensor) -> DiffError {
        DiffError::BadShape { op, expected: "rank-2 tensor", shape: t.shape().to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::kernels;
    use super::*;

    #[test]
    fn per_row_ce_matches_fused_mean() {
        let logits = Tensor::matrix(2, 3, vec![0.2, -1.0, 0.7, 1.5, 0.0, -0.3]).unwrap();
        let labels = [2usize, 0];
        let rows = kernels::per_row_cross_entropy(&logits, &labels).unwrap();
        let fused = ce_forward(&logits, &CeTarget::Labels(labels.to_vec())).unwrap();
        let mean = rows.iter().sum::<f64>() / rows.len() as f64;
        assert!((fused - mean).abs() < 1e-15);
    }

    #[test]
    fn softmax_row_sums_to_one() {
        let p = kernels::softmax_row(&[3.0, -2.0, 900.0, 0.1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
