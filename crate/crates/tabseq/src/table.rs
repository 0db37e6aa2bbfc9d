//! Table encoder: an N×N grid of pair representations contextualized by
//! multidimensional GRUs that recur along the layer, row and column
//! dimensions, traversed in up to four directions.
//!
//! Two execution paths produce identical values: a tape-recorded naive
//! traversal used for training, and a tape-free path (naive or antidiagonal
//! wavefront schedule) used for inference. Cells on one antidiagonal have no
//! mutual dependencies, so the wavefront schedule may evaluate them
//! concurrently.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::params::{ParamBinding, ParamId, ParamStore};
use crate::tensor::{matmul_acc, Tape, Tensor, TensorId};

/// Traversal direction of the grid recurrence. The layer dimension always
/// flows forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Direction {
    pub row_fwd: bool,
    pub col_fwd: bool,
}

/// The four cases: (a) row⁺col⁺, (b) row⁺col⁻, (c) row⁻col⁻, (d) row⁻col⁺.
pub const DIR_A: Direction = Direction { row_fwd: true, col_fwd: true };
pub const DIR_B: Direction = Direction { row_fwd: true, col_fwd: false };
pub const DIR_C: Direction = Direction { row_fwd: false, col_fwd: false };
pub const DIR_D: Direction = Direction { row_fwd: false, col_fwd: true };

impl Direction {
    pub fn label(&self) -> &'static str {
        match (self.row_fwd, self.col_fwd) {
            (true, true) => "row+col+",
            (true, false) => "row+col-",
            (false, false) => "row-col-",
            (false, true) => "row-col+",
        }
    }

    fn row_pred(&self, i: usize, n: usize) -> Option<usize> {
        if self.row_fwd {
            i.checked_sub(1)
        } else if i + 1 < n {
            Some(i + 1)
        } else {
            None
        }
    }

    fn col_pred(&self, j: usize, n: usize) -> Option<usize> {
        if self.col_fwd {
            j.checked_sub(1)
        } else if j + 1 < n {
            Some(j + 1)
        } else {
            None
        }
    }

    /// Cell evaluation order for the naive two-loop schedule.
    fn naive_order(&self, n: usize) -> Vec<(usize, usize)> {
        let rows: Vec<usize> =
            if self.row_fwd { (0..n).collect() } else { (0..n).rev().collect() };
        let cols: Vec<usize> =
            if self.col_fwd { (0..n).collect() } else { (0..n).rev().collect() };
        let mut order = Vec::with_capacity(n * n);
        for &i in &rows {
            for &j in &cols {
                order.push((i, j));
            }
        }
        order
    }

    /// Antidiagonal groups in dependency order: cells within one group are
    /// mutually independent. Equal row/col signs group by `i+j`; mixed
    /// signs group by `i-j`.
    pub fn wavefront_groups(&self, n: usize) -> Vec<Vec<(usize, usize)>> {
        let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 2 * n - 1];
        let same_sign = self.row_fwd == self.col_fwd;
        for i in 0..n {
            for j in 0..n {
                let g = if same_sign { i + j } else { i + (n - 1) - j };
                groups[g].push((i, j));
            }
        }
        // reverse traversal when the recurrence flows from high row indices down
        if !self.row_fwd {
            groups.reverse();
        }
        groups
    }
}

/// Whether each predecessor dimension participates; ablations zero the
/// disabled ones out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DimUse {
    pub layer: bool,
    pub row: bool,
    pub col: bool,
}

impl Default for DimUse {
    fn default() -> Self {
        DimUse { layer: true, row: true, col: true }
    }
}

/// Execution schedule for the tape-free path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Naive,
    Wavefront,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Schedule::Naive),
            "wavefront" => Ok(Schedule::Wavefront),
            other => Err(Error::Config(format!("unknown schedule '{}'", other))),
        }
    }
}

/// The multidimensional GRU cell. Gates read the concatenation
/// `[X; T_layer; T_row; T_col]`; a softmax-normalized lambda gate mixes the
/// three predecessor states before the update gate blends them with the
/// candidate.
pub struct GruCell {
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub w_lambda: [ParamId; 3],
    pub b_lambda: [ParamId; 3],
    pub w_x: ParamId,
    pub w_p: ParamId,
    pub b_h: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let gate_in = input_dim + 3 * hidden;
        GruCell {
            w_r: store.add_xavier(format!("{}.w_r", prefix), gate_in, hidden, rng),
            b_r: store.add_zeros(format!("{}.b_r", prefix), &[hidden]),
            w_z: store.add_xavier(format!("{}.w_z", prefix), gate_in, hidden, rng),
            b_z: store.add_zeros(format!("{}.b_z", prefix), &[hidden]),
            w_lambda: [
                store.add_xavier(format!("{}.w_lambda0", prefix), gate_in, hidden, rng),
                store.add_xavier(format!("{}.w_lambda1", prefix), gate_in, hidden, rng),
                store.add_xavier(format!("{}.w_lambda2", prefix), gate_in, hidden, rng),
            ],
            b_lambda: [
                store.add_zeros(format!("{}.b_lambda0", prefix), &[hidden]),
                store.add_zeros(format!("{}.b_lambda1", prefix), &[hidden]),
                store.add_zeros(format!("{}.b_lambda2", prefix), &[hidden]),
            ],
            w_x: store.add_xavier(format!("{}.w_x", prefix), input_dim, hidden, rng),
            w_p: store.add_xavier(format!("{}.w_p", prefix), 3 * hidden, hidden, rng),
            b_h: store.add_zeros(format!("{}.b_h", prefix), &[hidden]),
            input_dim,
            hidden,
        }
    }

    /// One recurrence step on the tape. All states are `[1, hidden]`,
    /// `x` is `[1, input_dim]`; out-of-range predecessors are zeros.
    pub fn step(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        x: TensorId,
        t_layer: TensorId,
        t_row: TensorId,
        t_col: TensorId,
    ) -> Result<TensorId> {
        let tprev = tape.concat(1, &[t_layer, t_row, t_col])?;
        let xcat = tape.concat(1, &[x, tprev])?;

        let r_lin = tape.matmul(xcat, bind[self.w_r])?;
        let r_pre = tape.add(r_lin, bind[self.b_r])?;
        let r = tape.sigmoid(r_pre);

        let z_lin = tape.matmul(xcat, bind[self.w_z])?;
        let z_pre = tape.add(z_lin, bind[self.b_z])?;
        let z = tape.sigmoid(z_pre);

        let mut lam_pre = Vec::with_capacity(3);
        for m in 0..3 {
            let lin = tape.matmul(xcat, bind[self.w_lambda[m]])?;
            lam_pre.push(tape.add(lin, bind[self.b_lambda[m]])?);
        }
        let lam_cat = tape.concat(0, &lam_pre)?; // [3, hidden]
        let lam = tape.softmax(lam_cat, 0)?;
        let lam0 = tape.row(lam, 0)?;
        let lam1 = tape.row(lam, 1)?;
        let lam2 = tape.row(lam, 2)?;

        let xw = tape.matmul(x, bind[self.w_x])?;
        let pw = tape.matmul(tprev, bind[self.w_p])?;
        let rp = tape.mul(r, pw)?;
        let cand_lin = tape.add(xw, rp)?;
        let cand_pre = tape.add(cand_lin, bind[self.b_h])?;
        let cand = tape.tanh(cand_pre);

        let m0 = tape.mul(lam0, t_layer)?;
        let m1 = tape.mul(lam1, t_row)?;
        let m2 = tape.mul(lam2, t_col)?;
        let mix01 = tape.add(m0, m1)?;
        let mix = tape.add(mix01, m2)?;

        let zc = tape.mul(z, cand)?;
        let omz = tape.one_minus(z);
        let zm = tape.mul(omz, mix)?;
        tape.add(zc, zm)
    }

    /// Resolve current weight values for the tape-free path.
    pub fn weights<'a>(&self, store: &'a ParamStore) -> CellWeights<'a> {
        CellWeights {
            w_r: store.value(self.w_r).data(),
            b_r: store.value(self.b_r).data(),
            w_z: store.value(self.w_z).data(),
            b_z: store.value(self.b_z).data(),
            w_lambda: [
                store.value(self.w_lambda[0]).data(),
                store.value(self.w_lambda[1]).data(),
                store.value(self.w_lambda[2]).data(),
            ],
            b_lambda: [
                store.value(self.b_lambda[0]).data(),
                store.value(self.b_lambda[1]).data(),
                store.value(self.b_lambda[2]).data(),
            ],
            w_x: store.value(self.w_x).data(),
            w_p: store.value(self.w_p).data(),
            b_h: store.value(self.b_h).data(),
            input_dim: self.input_dim,
            hidden: self.hidden,
        }
    }
}

/// Borrowed weight views for tape-free evaluation; safe to share across
/// threads.
#[derive(Clone, Copy)]
pub struct CellWeights<'a> {
    w_r: &'a [f64],
    b_r: &'a [f64],
    w_z: &'a [f64],
    b_z: &'a [f64],
    w_lambda: [&'a [f64]; 3],
    b_lambda: [&'a [f64]; 3],
    w_x: &'a [f64],
    w_p: &'a [f64],
    b_h: &'a [f64],
    pub input_dim: usize,
    pub hidden: usize,
}

impl CellWeights<'_> {
    /// Tape-free recurrence step; operation order mirrors [`GruCell::step`]
    /// exactly so both paths agree bitwise.
    pub fn step_raw(
        &self,
        x: &[f64],
        t_layer: &[f64],
        t_row: &[f64],
        t_col: &[f64],
        out: &mut [f64],
    ) {
        let h = self.hidden;
        let d = self.input_dim;
        let gate_in = d + 3 * h;

        let mut xcat = vec![0.0; gate_in];
        xcat[..d].copy_from_slice(x);
        xcat[d..d + h].copy_from_slice(t_layer);
        xcat[d + h..d + 2 * h].copy_from_slice(t_row);
        xcat[d + 2 * h..].copy_from_slice(t_col);
        let tprev = &xcat[d..];

        let mut r = vec![0.0; h];
        matmul_acc(&xcat, self.w_r, 1, gate_in, h, &mut r);
        for (v, b) in r.iter_mut().zip(self.b_r) {
            *v = sigmoid(*v + b);
        }
        let mut z = vec![0.0; h];
        matmul_acc(&xcat, self.w_z, 1, gate_in, h, &mut z);
        for (v, b) in z.iter_mut().zip(self.b_z) {
            *v = sigmoid(*v + b);
        }

        let mut lam = [vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        for m in 0..3 {
            matmul_acc(&xcat, self.w_lambda[m], 1, gate_in, h, &mut lam[m]);
            for (v, b) in lam[m].iter_mut().zip(self.b_lambda[m]) {
                *v += b;
            }
        }
        // elementwise softmax over the three pre-activations
        for k in 0..h {
            let m = lam[0][k].max(lam[1][k]).max(lam[2][k]);
            let e0 = (lam[0][k] - m).exp();
            let e1 = (lam[1][k] - m).exp();
            let e2 = (lam[2][k] - m).exp();
            let s = e0 + e1 + e2;
            lam[0][k] = e0 / s;
            lam[1][k] = e1 / s;
            lam[2][k] = e2 / s;
        }

        let mut cand = vec![0.0; h];
        matmul_acc(x, self.w_x, 1, d, h, &mut cand);
        let mut pw = vec![0.0; h];
        matmul_acc(tprev, self.w_p, 1, 3 * h, h, &mut pw);
        for k in 0..h {
            cand[k] = (cand[k] + r[k] * pw[k] + self.b_h[k]).tanh();
        }

        for k in 0..h {
            let mix = lam[0][k] * t_layer[k] + lam[1][k] * t_row[k] + lam[2][k] * t_col[k];
            out[k] = z[k] * cand[k] + (1.0 - z[k]) * mix;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Tape-free directional recurrence over the full grid.
///
/// `x` is `[N, N, input_dim]`, `t_prev_layer` the same direction's output
/// from the previous encoder layer (`None` at the first layer), and the
/// result is `[N, N, hidden]`. Both schedules produce identical values; the
/// wavefront schedule evaluates each antidiagonal group in parallel.
pub fn run_direction(
    cell: &CellWeights,
    x: &Tensor,
    t_prev_layer: Option<&Tensor>,
    dir: Direction,
    schedule: Schedule,
    dims: DimUse,
) -> Result<Tensor> {
    let n = x.shape()[0];
    if x.shape().len() != 3 || x.shape()[1] != n || x.shape()[2] != cell.input_dim {
        return Err(Error::Shape(format!(
            "run_direction input must be [N,N,{}], got {:?}",
            cell.input_dim,
            x.shape()
        )));
    }
    let h = cell.hidden;
    if let Some(t) = t_prev_layer {
        if t.shape() != [n, n, h] {
            return Err(Error::Shape(format!(
                "previous-layer table must be [{},{},{}], got {:?}",
                n,
                n,
                h,
                t.shape()
            )));
        }
    }

    let zeros = vec![0.0; h];
    let mut t = vec![0.0; n * n * h];
    let cell_of = |buf: &[f64], i: usize, j: usize| -> Vec<f64> {
        buf[(i * n + j) * h..(i * n + j + 1) * h].to_vec()
    };

    let compute = |t_buf: &[f64], i: usize, j: usize| -> Vec<f64> {
        let x_cell = &x.data()[(i * n + j) * cell.input_dim..(i * n + j + 1) * cell.input_dim];
        let t_layer = if dims.layer {
            t_prev_layer.map(|p| cell_of(p.data(), i, j)).unwrap_or_else(|| zeros.clone())
        } else {
            zeros.clone()
        };
        let t_row = if dims.row {
            dir.row_pred(i, n).map(|pi| cell_of(t_buf, pi, j)).unwrap_or_else(|| zeros.clone())
        } else {
            zeros.clone()
        };
        let t_col = if dims.col {
            dir.col_pred(j, n).map(|pj| cell_of(t_buf, i, pj)).unwrap_or_else(|| zeros.clone())
        } else {
            zeros.clone()
        };
        let mut out = vec![0.0; h];
        cell.step_raw(x_cell, &t_layer, &t_row, &t_col, &mut out);
        out
    };

    match schedule {
        Schedule::Naive => {
            for (i, j) in dir.naive_order(n) {
                let out = compute(&t, i, j);
                t[(i * n + j) * h..(i * n + j + 1) * h].copy_from_slice(&out);
            }
        }
        Schedule::Wavefront => {
            for group in dir.wavefront_groups(n) {
                let results: Vec<((usize, usize), Vec<f64>)> = group
                    .par_iter()
                    .map(|&(i, j)| ((i, j), compute(&t, i, j)))
                    .collect();
                for ((i, j), out) in results {
                    t[(i * n + j) * h..(i * n + j + 1) * h].copy_from_slice(&out);
                }
            }
        }
    }

    Tensor::new(vec![n, n, h], t)
}

/// Tape-recorded directional recurrence in naive order, for training.
/// `x_flat` is `[N*N, input_dim]`, `t_prev_layer` `[N*N, hidden]`; returns
/// `[N*N, hidden]`.
pub fn run_direction_on_tape(
    tape: &mut Tape,
    bind: &ParamBinding,
    cell: &GruCell,
    x_flat: TensorId,
    t_prev_layer: Option<TensorId>,
    dir: Direction,
    n: usize,
    dims: DimUse,
) -> Result<TensorId> {
    let zero = tape.zeros(&[1, cell.hidden]);
    let mut grid: Vec<Option<TensorId>> = vec![None; n * n];
    for (i, j) in dir.naive_order(n) {
        let x_cell = tape.row(x_flat, i * n + j)?;
        let t_layer = match (dims.layer, t_prev_layer) {
            (true, Some(prev)) => tape.row(prev, i * n + j)?,
            _ => zero,
        };
        let t_row = if dims.row {
            dir.row_pred(i, n).and_then(|pi| grid[pi * n + j]).unwrap_or(zero)
        } else {
            zero
        };
        let t_col = if dims.col {
            dir.col_pred(j, n).and_then(|pj| grid[i * n + pj]).unwrap_or(zero)
        } else {
            zero
        };
        grid[i * n + j] = Some(cell.step(tape, bind, x_cell, t_layer, t_row, t_col)?);
    }
    let rows: Vec<TensorId> = grid.into_iter().map(|c| c.unwrap()).collect();
    tape.concat(0, &rows)
}

/// One table-encoder layer: the input projection of Eq-style pair
/// concatenation plus one GRU per direction.
pub struct TableEncoderLayer {
    pub input_w: ParamId,
    pub input_b: ParamId,
    pub cells: Vec<GruCell>,
    pub directions: Vec<Direction>,
    pub hidden: usize,
    pub dir_hidden: usize,
    pub feat_width: usize,
}

impl TableEncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        directions: &[Direction],
        feat_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if hidden % directions.len() != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by direction count {}",
                hidden,
                directions.len()
            )));
        }
        let dir_hidden = hidden / directions.len();
        let input_w =
            store.add_xavier(format!("{}.input_w", prefix), 2 * hidden + feat_width, hidden, rng);
        let input_b = store.add_zeros(format!("{}.input_b", prefix), &[hidden]);
        let cells = directions
            .iter()
            .map(|d| {
                GruCell::new(
                    store,
                    &format!("{}.gru_{}", prefix, d.label()),
                    hidden,
                    dir_hidden,
                    rng,
                )
            })
            .collect();
        Ok(TableEncoderLayer {
            input_w,
            input_b,
            cells,
            directions: directions.to_vec(),
            hidden,
            dir_hidden,
            feat_width,
        })
    }

    /// Non-contextualized pair table: `X[i,j] = relu(W·[S_i; S_j(; F_ij)] + b)`
    /// as `[N*N, hidden]` on the tape.
    pub fn build_input_table(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        s_prev: TensorId,
        feat: Option<&Tensor>,
        n: usize,
    ) -> Result<TensorId> {
        let mut row_i = Vec::with_capacity(n * n);
        let mut row_j = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                row_i.push(i);
                row_j.push(j);
            }
        }
        let si = tape.gather(s_prev, &row_i)?;
        let sj = tape.gather(s_prev, &row_j)?;
        let cat = match feat {
            None => {
                if self.feat_width != 0 {
                    return Err(Error::Alignment(format!(
                        "layer expects attention features of width {}, none given",
                        self.feat_width
                    )));
                }
                tape.concat(1, &[si, sj])?
            }
            Some(f) => {
                if f.shape() != [n, n, self.feat_width] {
                    return Err(Error::Alignment(format!(
                        "attention features must be [{},{},{}], got {:?}",
                        n,
                        n,
                        self.feat_width,
                        f.shape()
                    )));
                }
                let mut flat = f.clone();
                flat = Tensor::new(vec![n * n, self.feat_width], flat.data().to_vec())?;
                let fid = tape.constant(flat);
                tape.concat(1, &[si, sj, fid])?
            }
        };
        let lin = tape.matmul(cat, bind[self.input_w])?;
        let pre = tape.add(lin, bind[self.input_b])?;
        Ok(tape.relu(pre))
    }

    /// Training path: full layer on the tape. `t_prev` holds one
    /// `[N*N, dir_hidden]` tensor per direction from layer l-1.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        s_prev: TensorId,
        t_prev: Option<&[TensorId]>,
        feat: Option<&Tensor>,
        n: usize,
        dims: DimUse,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let x_flat = self.build_input_table(tape, bind, s_prev, feat, n)?;
        let mut per_dir = Vec::with_capacity(self.directions.len());
        for (d, (cell, dir)) in self.cells.iter().zip(&self.directions).enumerate() {
            let prev = t_prev.map(|p| p[d]);
            per_dir.push(run_direction_on_tape(tape, bind, cell, x_flat, prev, *dir, n, dims)?);
        }
        let t_flat = tape.concat(1, &per_dir)?;
        Ok((t_flat, per_dir))
    }

    /// Inference path: tape-free, with selectable schedule. `s_prev` is
    /// `[N, hidden]` values; returns the concatenated table `[N,N,hidden]`
    /// plus per-direction states for the next layer.
    pub fn encode_raw(
        &self,
        store: &ParamStore,
        s_prev: &Tensor,
        t_prev: Option<&[Tensor]>,
        feat: Option<&Tensor>,
        schedule: Schedule,
        dims: DimUse,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let n = s_prev.shape()[0];
        let h = self.hidden;
        let in_w = store.value(self.input_w);
        let in_b = store.value(self.input_b);
        let fw = self.feat_width;
        let cat_w = 2 * h + fw;

        // X[i,j] = relu(W·[S_i; S_j(; F_ij)] + b), same op order as the tape
        let mut x = vec![0.0; n * n * h];
        let mut cat = vec![0.0; cat_w];
        for i in 0..n {
            for j in 0..n {
                cat[..h].copy_from_slice(s_prev.row(i));
                cat[h..2 * h].copy_from_slice(s_prev.row(j));
                if let Some(f) = feat {
                    let src = &f.data()[(i * n + j) * fw..(i * n + j + 1) * fw];
                    cat[2 * h..].copy_from_slice(src);
                }
                let out = &mut x[(i * n + j) * h..(i * n + j + 1) * h];
                matmul_acc(&cat, in_w.data(), 1, cat_w, h, out);
                for (v, b) in out.iter_mut().zip(in_b.data()) {
                    *v = (*v + b).max(0.0);
                }
            }
        }
        let x = Tensor::new(vec![n, n, h], x)?;

        let mut per_dir = Vec::with_capacity(self.directions.len());
        for (d, (cell, dir)) in self.cells.iter().zip(&self.directions).enumerate() {
            let weights = cell.weights(store);
            let prev = t_prev.map(|p| &p[d]);
            per_dir.push(run_direction(&weights, &x, prev, *dir, schedule, dims)?);
        }

        // concatenate per-direction hidden states along the feature axis
        let hd = self.dir_hidden;
        let mut t = vec![0.0; n * n * h];
        for (d, td) in per_dir.iter().enumerate() {
            for c in 0..n * n {
                t[c * h + d * hd..c * h + (d + 1) * hd]
                    .copy_from_slice(&td.data()[c * hd..(c + 1) * hd]);
            }
        }
        Ok((Tensor::new(vec![n, n, h], t)?, per_dir))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn zero_cell_maps_zero_to_zero() {
        let mut store = ParamStore::new();
        let mut r = rng(0);
        let cell = GruCell::new(&mut store, "c", 4, 3, &mut r);
        // zero out every weight
        for id in [
            cell.w_r, cell.w_z, cell.w_lambda[0], cell.w_lambda[1], cell.w_lambda[2], cell.w_x,
            cell.w_p,
        ] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape));
        }
        let w = cell.weights(&store);
        let mut out = vec![9.0; 3];
        w.step_raw(&[0.0; 4], &[0.0; 3], &[0.0; 3], &[0.0; 3], &mut out);
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn lambda_gates_sum_to_one() {
        // probe the lambda normalization through the cell identity:
        // with z forced to 0 (w_z = 0, b_z large negative) and w_x = w_p = 0,
        // output = lambda-mix of predecessors; feeding identical predecessor
        // state v gives output v iff the gates sum to 1
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let cell = GruCell::new(&mut store, "c", 2, 3, &mut r);
        store.set_value(cell.w_z, Tensor::zeros(&[2 + 9, 3]));
        store.set_value(
            cell.b_z,
            Tensor::new(vec![3], vec![-40.0; 3]).unwrap(),
        );
        let w = cell.weights(&store);
        for trial in 0..200 {
            let mut rr = rng(100 + trial);
            let x: Vec<f64> = (0..2).map(|_| rr.gen_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..3).map(|_| rr.gen_range(-2.0..2.0)).collect();
            let mut out = vec![0.0; 3];
            w.step_raw(&x, &v, &v, &v, &mut out);
            for (o, vv) in out.iter().zip(&v) {
                assert!((o - vv).abs() < 1e-9, "lambda gates must sum to 1: {} vs {}", o, vv);
            }
        }
    }

    #[test]
    fn cell_gradients_match_finite_differences() {
        let mut r = rng(5);
        let hd = 3;
        let input_dim = 2;

        let build = |vals: &[Vec<f64>]| -> f64 {
            let mut store = ParamStore::new();
            let mut r2 = rng(5);
            let cell = GruCell::new(&mut store, "c", input_dim, hd, &mut r2);
            let all: Vec<ParamId> = [
                cell.w_r, cell.b_r, cell.w_z, cell.b_z, cell.w_lambda[0], cell.w_lambda[1],
                cell.w_lambda[2], cell.b_lambda[0], cell.b_lambda[1], cell.b_lambda[2], cell.w_x,
                cell.w_p, cell.b_h,
            ]
            .to_vec();
            for (id, v) in all.iter().zip(vals) {
                let shape = store.value(*id).shape().to_vec();
                store.set_value(*id, Tensor::new(shape, v.clone()).unwrap());
            }
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let x = tape.constant(Tensor::new(vec![1, input_dim], vec![0.3, -0.8]).unwrap());
            let tl = tape.constant(Tensor::new(vec![1, hd], vec![0.2, -0.1, 0.5]).unwrap());
            let tr = tape.constant(Tensor::new(vec![1, hd], vec![-0.4, 0.9, 0.1]).unwrap());
            let tc = tape.constant(Tensor::new(vec![1, hd], vec![0.7, 0.0, -0.3]).unwrap());
            let out = cell.step(&mut tape, &bind, x, tl, tr, tc).unwrap();
            let s = tape.sum(out);
            tape.data(s)[0]
        };

        // materialize the analytic gradients
        let mut store = ParamStore::new();
        let mut r2 = rng(5);
        let cell = GruCell::new(&mut store, "c", input_dim, hd, &mut r2);
        let all: Vec<ParamId> = [
            cell.w_r, cell.b_r, cell.w_z, cell.b_z, cell.w_lambda[0], cell.w_lambda[1],
            cell.w_lambda[2], cell.b_lambda[0], cell.b_lambda[1], cell.b_lambda[2], cell.w_x,
            cell.w_p, cell.b_h,
        ]
        .to_vec();
        // randomize biases too so their gradients are generic
        for id in &all {
            let shape = store.value(*id).shape().to_vec();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| r.gen_range(-0.5..0.5)).collect();
            store.set_value(*id, Tensor::new(shape, data).unwrap());
        }
        let vals: Vec<Vec<f64>> = all.iter().map(|id| store.value(*id).data().to_vec()).collect();

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, input_dim], vec![0.3, -0.8]).unwrap());
        let tl = tape.constant(Tensor::new(vec![1, hd], vec![0.2, -0.1, 0.5]).unwrap());
        let tr = tape.constant(Tensor::new(vec![1, hd], vec![-0.4, 0.9, 0.1]).unwrap());
        let tc = tape.constant(Tensor::new(vec![1, hd], vec![0.7, 0.0, -0.3]).unwrap());
        let out = cell.step(&mut tape, &bind, x, tl, tr, tc).unwrap();
        let s = tape.sum(out);
        tape.backward(s).unwrap();

        let h = 1e-6;
        for (p, id) in all.iter().enumerate() {
            let analytic = tape.grad(bind[*id]).unwrap().to_vec();
            for k in 0..vals[p].len() {
                let mut plus = vals.clone();
                plus[p][k] += h;
                let mut minus = vals.clone();
                minus[p][k] -= h;
                let num = (build(&plus) - build(&minus)) / (2.0 * h);
                let a = analytic[k];
                let denom = a.abs().max(num.abs());
                assert!(
                    (a - num).abs() <= 1e-6 * denom + 1e-8,
                    "param {} [{}]: analytic {} vs numeric {}",
                    store.name(*id),
                    k,
                    a,
                    num
                );
            }
        }
    }

    #[test]
    fn wavefront_groups_match_expected_layout() {
        // N=3, row+col+: antidiagonals in 0-based coordinates
        let groups = DIR_A.wavefront_groups(3);
        assert_eq!(groups.len(), 5);
        assert_eq!(groups[0], vec![(0, 0)]);
        assert_eq!(groups[1], vec![(0, 1), (1, 0)]);
        assert_eq!(groups[2], vec![(0, 2), (1, 1), (2, 0)]);
        assert_eq!(groups[3], vec![(1, 2), (2, 1)]);
        assert_eq!(groups[4], vec![(2, 2)]);
    }

    fn make_layer(
        hidden: usize,
        dirs: &[Direction],
        seed: u64,
    ) -> (ParamStore, TableEncoderLayer) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let layer = TableEncoderLayer::new(&mut store, "t", hidden, dirs, 0, &mut r).unwrap();
        (store, layer)
    }

    #[test]
    fn naive_and_wavefront_schedules_agree() {
        for &dir in &[DIR_A, DIR_B, DIR_C, DIR_D] {
            let mut store = ParamStore::new();
            let mut r = rng(11);
            let cell = GruCell::new(&mut store, "c", 5, 4, &mut r);
            let x = random_tensor(&mut r, &[7, 7, 5]);
            let prev = random_tensor(&mut r, &[7, 7, 4]);
            let w = cell.weights(&store);
            let a =
                run_direction(&w, &x, Some(&prev), dir, Schedule::Naive, DimUse::default())
                    .unwrap();
            let b =
                run_direction(&w, &x, Some(&prev), dir, Schedule::Wavefront, DimUse::default())
                    .unwrap();
            let max_diff = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-12, "{}: max diff {}", dir.label(), max_diff);
        }
    }

    #[test]
    fn tape_and_raw_paths_agree() {
        let (store, layer) = make_layer(6, &[DIR_A, DIR_C], 13);
        let mut r = rng(17);
        let s_prev_t = random_tensor(&mut r, &[4, 6]);

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let s_prev = tape.constant(s_prev_t.clone());
        let (t_flat, _) = layer
            .encode_on_tape(&mut tape, &bind, s_prev, None, None, 4, DimUse::default())
            .unwrap();

        let (t_raw, _) = layer
            .encode_raw(&store, &s_prev_t, None, None, Schedule::Naive, DimUse::default())
            .unwrap();

        let max_diff = tape
            .data(t_flat)
            .iter()
            .zip(t_raw.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "max diff {}", max_diff);
    }

    #[test]
    fn causality_outside_dependency_cone() {
        // perturbing X at (2,2) must not change outputs at cells that are
        // not downstream of it
        for &dir in &[DIR_A, DIR_B, DIR_C, DIR_D] {
            let mut store = ParamStore::new();
            let mut r = rng(23);
            let cell = GruCell::new(&mut store, "c", 3, 3, &mut r);
            let n = 4;
            let x = random_tensor(&mut r, &[n, n, 3]);
            let w = cell.weights(&store);
            let base = run_direction(&w, &x, None, dir, Schedule::Naive, DimUse::default())
                .unwrap();

            let mut bumped = x.data().to_vec();
            let (pi, pj) = (2usize, 2usize);
            for k in 0..3 {
                bumped[(pi * n + pj) * 3 + k] += 1.0;
            }
            let x2 = Tensor::new(vec![n, n, 3], bumped).unwrap();
            let got = run_direction(&w, &x2, None, dir, Schedule::Naive, DimUse::default())
                .unwrap();

            for i in 0..n {
                for j in 0..n {
                    let row_dep = if dir.row_fwd { i >= pi } else { i <= pi };
                    let col_dep = if dir.col_fwd { j >= pj } else { j <= pj };
                    let in_cone = row_dep && col_dep;
                    if !in_cone {
                        for k in 0..3 {
                            let a = base.at(&[i, j, k]);
                            let b = got.at(&[i, j, k]);
                            assert_eq!(a, b, "{} cell ({},{})", dir.label(), i, j);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn layer_ablation_ignores_previous_layer() {
        let mut store = ParamStore::new();
        let mut r = rng(29);
        let cell = GruCell::new(&mut store, "c", 3, 3, &mut r);
        let x = random_tensor(&mut r, &[3, 3, 3]);
        let p1 = random_tensor(&mut r, &[3, 3, 3]);
        let p2 = random_tensor(&mut r, &[3, 3, 3]);
        let dims = DimUse { layer: false, row: true, col: true };
        let w = cell.weights(&store);
        let a = run_direction(&w, &x, Some(&p1), DIR_A, Schedule::Naive, dims).unwrap();
        let b = run_direction(&w, &x, Some(&p2), DIR_A, Schedule::Naive, dims).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn hidden_not_divisible_by_directions_is_config_error() {
        let mut store = ParamStore::new();
        let mut r = rng(31);
        let err = TableEncoderLayer::new(&mut store, "t", 7, &[DIR_A, DIR_C], 0, &mut r);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn input_table_is_ordered_concatenation() {
        let (store, layer) = make_layer(4, &[DIR_A, DIR_C], 37);
        let mut r = rng(41);
        let s = random_tensor(&mut r, &[3, 4]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let sid = tape.constant(s);
        let x = layer.build_input_table(&mut tape, &bind, sid, None, 3).unwrap();
        assert_eq!(tape.shape(x), &[9, 4]);
        // X(0,1) != X(1,0) in general
        let a = tape.data(x)[4..8].to_vec();
        let b = tape.data(x)[12..16].to_vec();
        assert_ne!(a, b);
    }
}
