//! CPU kernels for the UNet hot paths, registered with candle as custom ops
//! so they take part in autograd. Each op has a closed-form backward; the
//! generic op-by-op graphs they replace spend most of their time in
//! broadcast reductions and strided copies.
//!
//! Only `f32` and `f64` are supported, and inputs must be contiguous.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

type CResult<T> = candle_core::Result<T>;

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> CResult<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("kernel input must be contiguous".into()))?;
    Ok(&v[start..end])
}

fn to_vec<T: WithDType>(t: &Tensor) -> CResult<Vec<T>> {
    t.detach().flatten_all()?.to_vec1::<T>()
}

fn zero<T: WithDType>() -> T {
    T::from_f64(0.0)
}

/// Dot product with eight independent accumulators so it vectorizes.
fn dot<T: WithDType>(a: &[T], b: &[T]) -> T {
    let mut acc = [zero::<T>(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = zero::<T>();
    for v in acc {
        s += v;
    }
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

fn sum<T: WithDType>(a: &[T]) -> T {
    let mut acc = [zero::<T>(); 8];
    let ca = a.chunks_exact(8);
    let rest = ca.remainder();
    for x in ca {
        for i in 0..8 {
            acc[i] += x[i];
        }
    }
    let mut s = zero::<T>();
    for v in acc {
        s += v;
    }
    for x in rest {
        s += *x;
    }
    s
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

impl<'a, T> Mat<'a, T> {
    fn row_major(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    fn transposed_of(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `dst (m×n, row-major) = [dst +] lhs (m×k) · rhs (k×n)`.
fn matmul<T: WithDType>(dst: &mut [T], m: usize, n: usize, k: usize, lhs: Mat<T>, rhs: Mat<T>, accumulate: bool) {
    assert!(dst.len() >= m * n, "destination too small");
    lhs.check(m, k);
    rhs.check(k, n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the views were bounds-checked for the requested shapes above,
    // `dst` is an exclusive row-major m×n buffer, and T is f32 or f64.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.data.as_ptr(),
            lhs.cs as isize,
            lhs.rs as isize,
            rhs.data.as_ptr(),
            rhs.cs as isize,
            rhs.rs as isize,
            T::from_f64(1.0),
            T::from_f64(1.0),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

// ---------------------------------------------------------------------------
// convolution

/// Square-kernel 2-D convolution with bias, `x: B×C×H×W`, `w: O×C×k×k`,
/// `bias: O`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dOp {
    pub stride: usize,
    pub padding: usize,
}

struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.c * self.k * self.k
    }

    fn n(&self) -> usize {
        self.ho * self.wo
    }
}

impl Conv2dOp {
    fn geom(&self, x: &Shape, w: &Shape) -> CResult<ConvGeom> {
        let (b, c, h, wd) = x.dims4()?;
        let (o, cw, k, k2) = w.dims4()?;
        if cw != c || k != k2 {
            candle_core::bail!("conv kernel {:?} does not fit input {:?}", w.dims(), x.dims());
        }
        let p = self.padding;
        if h + 2 * p < k || wd + 2 * p < k || self.stride == 0 {
            candle_core::bail!("{h}x{wd} input is smaller than the {k}x{k} kernel");
        }
        Ok(ConvGeom {
            b,
            c,
            h,
            w: wd,
            o,
            k,
            ho: (h + 2 * p - k) / self.stride + 1,
            wo: (wd + 2 * p - k) / self.stride + 1,
        })
    }

    /// Calls `f(col_start, input_start, len)` for every run of in-bounds taps
    /// of sample `bi`. Column indices are relative to that sample's
    /// `cols × n` block; consecutive taps in a run are `stride` apart in the
    /// input and adjacent in the columns.
    fn for_each_run(&self, g: &ConvGeom, bi: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (g.k, self.stride, self.padding);
        for ci in 0..g.c {
            let plane = (bi * g.c + ci) * g.h * g.w;
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    // valid ox satisfy 0 <= ox·s + kj − p < w
                    let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
                    let hi = if g.w + p > kj { ((g.w + p - kj - 1) / s + 1).min(g.wo) } else { 0 };
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..g.ho {
                        let iy = oy * s + ki;
                        if iy < p || iy - p >= g.h {
                            continue;
                        }
                        let out = (row * g.ho + oy) * g.wo + lo;
                        let inp = plane + (iy - p) * g.w + lo * s + kj - p;
                        f(out, inp, hi - lo);
                    }
                }
            }
        }
    }

    fn unfold<T: WithDType>(&self, g: &ConvGeom, x: &[T], bi: usize, cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = zero());
        let s = self.stride;
        self.for_each_run(g, bi, |o, i, len| {
            if s == 1 {
                cols[o..o + len].copy_from_slice(&x[i..i + len]);
            } else {
                for (t, c) in cols[o..o + len].iter_mut().enumerate() {
                    *c = x[i + t * s];
                }
            }
        });
    }

    fn fold<T: WithDType>(&self, g: &ConvGeom, cols: &[T], bi: usize, dx: &mut [T]) {
        let s = self.stride;
        self.for_each_run(g, bi, |o, i, len| {
            if s == 1 {
                for (d, c) in dx[i..i + len].iter_mut().zip(&cols[o..o + len]) {
                    *d += *c;
                }
            } else {
                for (t, c) in cols[o..o + len].iter().enumerate() {
                    dx[i + t * s] += *c;
                }
            }
        });
    }

    fn forward<T: WithDType>(&self, g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
        let (kc, n) = (g.cols(), g.n());
        let mut y = vec![zero::<T>(); g.b * g.o * n];
        let mut cols = vec![zero::<T>(); kc * n];
        for bi in 0..g.b {
            self.unfold(g, x, bi, &mut cols);
            let yb = &mut y[bi * g.o * n..(bi + 1) * g.o * n];
            for (row, &bv) in yb.chunks_exact_mut(n).zip(bias) {
                row.iter_mut().for_each(|v| *v = bv);
            }
            matmul(yb, g.o, n, kc, Mat::row_major(w, kc), Mat::row_major(&cols, n), true);
        }
        y
    }

    fn backward<T: WithDType>(&self, g: &ConvGeom, x: &[T], w: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (kc, n) = (g.cols(), g.n());
        let mut dx = vec![zero::<T>(); g.b * g.c * g.h * g.w];
        let mut dw = vec![zero::<T>(); g.o * kc];
        let mut db = vec![zero::<T>(); g.o];
        let mut cols = vec![zero::<T>(); kc * n];
        let mut dcols = vec![zero::<T>(); kc * n];
        for bi in 0..g.b {
            self.unfold(g, x, bi, &mut cols);
            let dyb = &dy[bi * g.o * n..(bi + 1) * g.o * n];
            for (d, row) in db.iter_mut().zip(dyb.chunks_exact(n)) {
                *d += sum(row);
            }
            // dW += dY · colsᵀ, dcols = Wᵀ · dY
            matmul(&mut dw, g.o, kc, n, Mat::row_major(dyb, n), Mat::transposed_of(&cols, n), true);
            matmul(&mut dcols, kc, n, g.o, Mat::transposed_of(w, kc), Mat::row_major(dyb, n), false);
            self.fold(g, &dcols, bi, &mut dx);
        }
        (dx, dw, db)
    }
}

impl CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "samda-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let g = self.geom(l1.shape(), l2.shape())?;
        if l3.shape().dims() != [g.o] {
            candle_core::bail!("conv bias {:?} does not match {} output channels", l3.shape().dims(), g.o);
        }
        let shape = Shape::from((g.b, g.o, g.ho, g.wo));
        let y = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(self.forward(
                &g,
                contiguous(x, l1)?,
                contiguous(w, l2)?,
                contiguous(b, l3)?,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(self.forward(
                &g,
                contiguous(x, l1)?,
                contiguous(w, l2)?,
                contiguous(b, l3)?,
            )),
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands only"),
        };
        Ok((y, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = self.geom(x.shape(), w.shape())?;
        let (dx, dw, db) = match x.dtype() {
            DType::F32 => {
                let (dx, dw, db) = self.backward(&g, &to_vec::<f32>(x)?, &to_vec::<f32>(w)?, &to_vec::<f32>(dy)?);
                (
                    Tensor::from_vec(dx, x.shape(), x.device())?,
                    Tensor::from_vec(dw, w.shape(), w.device())?,
                    Tensor::from_vec(db, b.shape(), b.device())?,
                )
            }
            DType::F64 => {
                let (dx, dw, db) = self.backward(&g, &to_vec::<f64>(x)?, &to_vec::<f64>(w)?, &to_vec::<f64>(dy)?);
                (
                    Tensor::from_vec(dx, x.shape(), x.device())?,
                    Tensor::from_vec(dw, w.shape(), w.device())?,
                    Tensor::from_vec(db, b.shape(), b.device())?,
                )
            }
            other => candle_core::bail!("conv2d does not support {other:?}"),
        };
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

// ---------------------------------------------------------------------------
// instance norm

/// `γ_c·(x − μ)/√(σ² + ε) + β_c` over the spatial axes of each `(b, c)`
/// plane, with `x: B×C×H×W`, `γ, β: C`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct InstanceNormOp {
    pub eps: f64,
}

impl InstanceNormOp {
    /// Mean and `1/√(var + ε)` of one plane, accumulated in `f64`.
    fn stats<T: WithDType>(&self, plane: &[T]) -> (f64, f64) {
        let n = plane.len() as f64;
        let mean = sum(plane).to_f64() / n;
        let mut var = 0.0;
        for v in plane {
            let d = v.to_f64() - mean;
            var += d * d;
        }
        (mean, 1.0 / (var / n + self.eps).sqrt())
    }

    fn forward<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], c: usize, hw: usize) -> Vec<T> {
        let mut y = vec![zero::<T>(); x.len()];
        for (p, (xp, yp)) in x.chunks_exact(hw).zip(y.chunks_exact_mut(hw)).enumerate() {
            let (mean, inv) = self.stats(xp);
            let scale = gamma[p % c].to_f64() * inv;
            let a = T::from_f64(scale);
            let b = T::from_f64(beta[p % c].to_f64() - mean * scale);
            for (o, v) in yp.iter_mut().zip(xp) {
                *o = a * *v + b;
            }
        }
        y
    }

    fn backward<T: WithDType>(
        &self,
        x: &[T],
        gamma: &[T],
        dy: &[T],
        c: usize,
        hw: usize,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let mut dx = vec![zero::<T>(); x.len()];
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        let n = hw as f64;
        for (p, ((xp, dyp), dxp)) in x
            .chunks_exact(hw)
            .zip(dy.chunks_exact(hw))
            .zip(dx.chunks_exact_mut(hw))
            .enumerate()
        {
            let ch = p % c;
            let (mean, inv) = self.stats(xp);
            let sum_dy = sum(dyp).to_f64();
            let sum_dy_x = dot(dyp, xp).to_f64();
            // Σ dy·x̂ with x̂ = (x − μ)·inv
            let sum_dy_xhat = (sum_dy_x - mean * sum_dy) * inv;
            dbeta[ch] += sum_dy;
            dgamma[ch] += sum_dy_xhat;
            let g = gamma[ch].to_f64() * inv;
            // dx = g·(dy − mean(dy) − x̂·mean(dy·x̂)), expanded to a·dy + b·x + c0
            let k = sum_dy_xhat / n * inv;
            let a = T::from_f64(g);
            let bx = T::from_f64(-g * k);
            let c0 = T::from_f64(g * (-sum_dy / n + k * mean));
            for ((o, d), v) in dxp.iter_mut().zip(dyp).zip(xp) {
                *o = a * *d + bx * *v + c0;
            }
        }
        let conv = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
        (dx, conv(dgamma), conv(dbeta))
    }
}

impl CustomOp3 for InstanceNormOp {
    fn name(&self) -> &'static str {
        "samda-instance-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (_, c, h, w) = l1.shape().dims4()?;
        if l2.shape().dims() != [c] || l3.shape().dims() != [c] {
            candle_core::bail!("instance norm affine parameters must have {c} entries");
        }
        let y = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(self.forward(
                contiguous(x, l1)?,
                contiguous(g, l2)?,
                contiguous(b, l3)?,
                c,
                h * w,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(self.forward(
                contiguous(x, l1)?,
                contiguous(g, l2)?,
                contiguous(b, l3)?,
                c,
                h * w,
            )),
            _ => candle_core::bail!("instance norm supports matching f32 or f64 operands only"),
        };
        Ok((y, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (_, c, h, w) = x.dims4()?;
        macro_rules! run {
            ($t:ty) => {{
                let (dx, dg, db) = self.backward(&to_vec::<$t>(x)?, &to_vec::<$t>(gamma)?, &to_vec::<$t>(dy)?, c, h * w);
                (
                    Tensor::from_vec(dx, x.shape(), x.device())?,
                    Tensor::from_vec(dg, gamma.shape(), gamma.device())?,
                    Tensor::from_vec(db, beta.shape(), beta.device())?,
                )
            }};
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            other => candle_core::bail!("instance norm does not support {other:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

// ---------------------------------------------------------------------------
// leaky ReLU

#[derive(Debug, Clone, Copy)]
pub(crate) struct LeakyReluOp {
    pub slope: f64,
}

impl LeakyReluOp {
    fn forward<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let s = T::from_f64(self.slope);
        let z = zero::<T>();
        x.iter().map(|&v| if v > z { v } else { v * s }).collect()
    }

    fn backward<T: WithDType>(&self, x: &[T], dy: &[T]) -> Vec<T> {
        let s = T::from_f64(self.slope);
        let z = zero::<T>();
        x.iter().zip(dy).map(|(&v, &d)| if v > z { d } else { d * s }).collect()
    }
}

impl CustomOp1 for LeakyReluOp {
    fn name(&self) -> &'static str {
        "samda-leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let y = match s {
            CpuStorage::F32(x) => CpuStorage::F32(self.forward(contiguous(x, l)?)),
            CpuStorage::F64(x) => CpuStorage::F64(self.forward(contiguous(x, l)?)),
            _ => candle_core::bail!("leaky relu supports f32 and f64 only"),
        };
        Ok((y, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, dy: &Tensor) -> CResult<Option<Tensor>> {
        let dx = match x.dtype() {
            DType::F32 => Tensor::from_vec(self.backward(&to_vec::<f32>(x)?, &to_vec::<f32>(dy)?), x.shape(), x.device())?,
            DType::F64 => Tensor::from_vec(self.backward(&to_vec::<f64>(x)?, &to_vec::<f64>(dy)?), x.shape(), x.device())?,
            other => candle_core::bail!("leaky relu does not support {other:?}"),
        };
        Ok(Some(dx))
    }
}
