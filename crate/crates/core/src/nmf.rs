//! Non-negative matrix factorization by multiplicative updates.
//!
//! Matrices are batched as `(N, 1, rows, cols)` tensors. Each update is built
//! from tape ops, so gradients flow through the unrolled iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tensor::{Real, Shape, Tape, Tensor, Var};

/// Added to every update denominator.
pub const NMF_EPS: f64 = 1e-6;

/// Seeded uniform `(0, 1]` initial factors for every batch item.
fn init_factors<T: Real>(n: usize, rows: usize, cols: usize, rank: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut bases = Vec::with_capacity(n * rows * rank);
    let mut codes = Vec::with_capacity(n * rank * cols);
    for item in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(item as u64);
        bases.extend((0..rows * rank).map(|_| T::from_f64_lossy(1.0 - rng.random::<f64>())));
        codes.extend((0..rank * cols).map(|_| T::from_f64_lossy(1.0 - rng.random::<f64>())));
    }
    (
        Tensor::from_vec([n, 1, rows, rank], bases).expect("bases length"),
        Tensor::from_vec([n, 1, rank, cols], codes).expect("codes length"),
    )
}

fn check_input<T: Real>(x: &Tensor<T>, rank: usize, iters: usize) -> Result<(), TensorError> {
    let s = x.shape();
    if s.c != 1 {
        return Err(TensorError::shape("nmf", "channel (must be 1)", 1, s.c));
    }
    if rank == 0 || rank > s.h.min(s.w) {
        return Err(TensorError::invalid("nmf", format!("rank {rank} must be in 1..={} for a {}x{} matrix", s.h.min(s.w), s.h, s.w)));
    }
    if iters == 0 {
        return Err(TensorError::invalid("nmf", "at least one iteration is required"));
    }
    if let Some(v) = x.data().iter().find(|v| !(**v >= T::zero())) {
        return Err(TensorError::invalid("nmf", format!("input entries must be non-negative, found {v}")));
    }
    Ok(())
}

/// `codes <- codes * (B^T X) / (B^T B codes + eps)`.
fn update_codes<T: Real>(tape: &mut Tape<T>, x: &Var<T>, bases: &Var<T>, codes: &Var<T>) -> Result<Var<T>, TensorError> {
    let num = tape.matmul(bases, x, true, false)?;
    let btb = tape.matmul(bases, bases, true, false)?;
    let den = tape.matmul(&btb, codes, false, false)?;
    let den = tape.add_scalar(&den, T::from_f64_lossy(NMF_EPS))?;
    let ratio = tape.div(&num, &den)?;
    tape.mul(codes, &ratio)
}

/// `bases <- bases * (X codes^T) / (B codes codes^T + eps)`.
fn update_bases<T: Real>(tape: &mut Tape<T>, x: &Var<T>, bases: &Var<T>, codes: &Var<T>) -> Result<Var<T>, TensorError> {
    let num = tape.matmul(x, codes, false, true)?;
    let cct = tape.matmul(codes, codes, false, true)?;
    let den = tape.matmul(bases, &cct, false, false)?;
    let den = tape.add_scalar(&den, T::from_f64_lossy(NMF_EPS))?;
    let ratio = tape.div(&num, &den)?;
    tape.mul(bases, &ratio)
}

/// Low-rank reconstruction `bases * codes` of each non-negative matrix in `x`
/// after `iters` rounds of (codes, bases) updates from a seeded start.
pub fn nmf_on_tape<T: Real>(tape: &mut Tape<T>, x: &Var<T>, rank: usize, iters: usize, seed: u64) -> Result<Var<T>, TensorError> {
    check_input(x.value(), rank, iters)?;
    let s = x.shape();
    let (b0, c0) = init_factors::<T>(s.n, s.h, s.w, rank, seed);
    let mut bases = tape.constant(b0);
    let mut codes = tape.constant(c0);
    for _ in 0..iters {
        codes = update_codes(tape, x, &bases, &codes)?;
        bases = update_bases(tape, x, &bases, &codes)?;
    }
    tape.matmul(&bases, &codes, false, false)
}

/// Factors and residual history of a standalone factorization.
#[derive(Clone, Debug)]
pub struct NmfState<T> {
    pub bases: Tensor<T>,
    pub codes: Tensor<T>,
    /// Frobenius residual `||X - B C||` at the start and after every single
    /// multiplicative update (two per iteration).
    pub residuals: Vec<f64>,
}

fn frobenius_residual<T: Real>(x: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>) -> Result<f64, TensorError> {
    let recon = crate::tensor::matmul(b, c, false, false)?;
    Ok(x.data()
        .iter()
        .zip(recon.data())
        .map(|(&a, &r)| {
            let d = a.as_f64() - r.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Factorizes a single `rows x cols` matrix (shape `(1, 1, rows, cols)`),
/// recording the residual after every update.
pub fn nmf_factorize<T: Real>(x: &Tensor<T>, rank: usize, iters: usize, seed: u64) -> Result<NmfState<T>, TensorError> {
    check_input(x, rank, iters)?;
    let s = x.shape();
    let mut tape = Tape::no_grad();
    let (b0, c0) = init_factors::<T>(s.n, s.h, s.w, rank, seed);
    let xv = tape.constant(x.clone());
    let mut bases = tape.constant(b0);
    let mut codes = tape.constant(c0);
    let mut residuals = vec![frobenius_residual(x, bases.value(), codes.value())?];
    for _ in 0..iters {
        codes = update_codes(&mut tape, &xv, &bases, &codes)?;
        residuals.push(frobenius_residual(x, bases.value(), codes.value())?);
        bases = update_bases(&mut tape, &xv, &bases, &codes)?;
        residuals.push(frobenius_residual(x, bases.value(), codes.value())?);
    }
    Ok(NmfState { bases: bases.into_value(), codes: codes.into_value(), residuals })
}

/// Reconstruction of a non-negative `rows x cols` matrix from a rank-`rank`
/// factorization.
pub fn nmf_reconstruct<T: Real>(x: &Tensor<T>, rank: usize, iters: usize, seed: u64) -> Result<Tensor<T>, TensorError> {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    Ok(nmf_on_tape(&mut tape, &xv, rank, iters, seed)?.into_value())
}

/// `(1, 1, rows, cols)` shape for a single matrix.
pub fn matrix_shape(rows: usize, cols: usize) -> Shape {
    Shape::new(1, 1, rows, cols)
}
