//! Dense and matrix layers with hand-derived backward passes.
//!
//! Each layer comes in two flavours: a `Tensor` API that validates shapes, and
//! slice kernels (`pub(crate)`) that the VAE and hyper-network call on views
//! into a flat parameter vector.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Identity => T::one(),
        }
    }
}

/// Gradients of a layer's parameters (keyed by name) and of its input.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub input: Tensor<T>,
}

// ---------------------------------------------------------------------------
// slice kernels

/// `out = act(W x + b)` with `W` m×n.
pub(crate) fn dense_apply<T: Scalar>(
    w: &[T],
    b: &[T],
    x: &[T],
    act: Activation,
    out: &mut [T],
) {
    let (m, n) = (b.len(), x.len());
    debug_assert_eq!(w.len(), m * n);
    for i in 0..m {
        let row = &w[i * n..(i + 1) * n];
        let mut acc = b[i];
        for (&wij, &xj) in row.iter().zip(x) {
            acc += wij * xj;
        }
        out[i] = act.apply(acc);
    }
}

/// Backward of [`dense_apply`] given the recorded output `y` and upstream
/// `dy`. Gradients are *added* into `dw`, `db`, and `dx` (when provided).
#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward_into<T: Scalar>(
    w: &[T],
    x: &[T],
    y: &[T],
    dy: &[T],
    act: Activation,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let (m, n) = (y.len(), x.len());
    let mut dpre = vec![T::zero(); m];
    for i in 0..m {
        dpre[i] = dy[i] * act.derivative_from_output(y[i]);
    }
    for i in 0..m {
        let g = dpre[i];
        if g == T::zero() {
            continue;
        }
        db[i] += g;
        let row = &mut dw[i * n..(i + 1) * n];
        for (d, &xj) in row.iter_mut().zip(x) {
            *d += g * xj;
        }
    }
    if let Some(dx) = dx {
        for i in 0..m {
            let g = dpre[i];
            if g == T::zero() {
                continue;
            }
            let row = &w[i * n..(i + 1) * n];
            for (d, &wij) in dx.iter_mut().zip(row) {
                *d += g * wij;
            }
        }
    }
}

/// Dimensions of a matrix layer `W = act(U H V + B)`: `H` p×q, `U` m×p,
/// `V` q×n, `B` and `W` m×n.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatrixDims {
    pub p: usize,
    pub q: usize,
    pub m: usize,
    pub n: usize,
}

/// Forward of the matrix layer. `hv` receives the intermediate `H V` (p×n),
/// which the backward pass reuses.
pub(crate) fn matrix_apply<T: Scalar>(
    dims: MatrixDims,
    u: &[T],
    h: &[T],
    v: &[T],
    b: &[T],
    act: Activation,
    hv: &mut [T],
    out: &mut [T],
) {
    let MatrixDims { p, q, m, n } = dims;
    hv.iter_mut().for_each(|x| *x = T::zero());
    gemm(h, v, hv, p, q, n);
    out.copy_from_slice(b);
    gemm(u, hv, out, m, p, n);
    if act != Activation::Identity {
        out.iter_mut().for_each(|x| *x = act.apply(*x));
    }
}

/// Backward of [`matrix_apply`]; accumulates into `du`, `dv`, `db`, `dh`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matrix_backward_into<T: Scalar>(
    dims: MatrixDims,
    u: &[T],
    h: &[T],
    v: &[T],
    hv: &[T],
    out: &[T],
    dout: &[T],
    act: Activation,
    du: &mut [T],
    dv: &mut [T],
    db: &mut [T],
    dh: &mut [T],
) {
    let MatrixDims { p, q, m, n } = dims;
    let dpre: Vec<T> = if act == Activation::Identity {
        dout.to_vec()
    } else {
        dout.iter().zip(out).map(|(&g, &y)| g * act.derivative_from_output(y)).collect()
    };
    for (d, &g) in db.iter_mut().zip(&dpre) {
        *d += g;
    }
    // dU = dW (HV)ᵀ
    gemm_nt(&dpre, hv, du, m, n, p);
    // d(HV) = Uᵀ dW
    let mut dhv = vec![T::zero(); p * n];
    gemm_tn(u, &dpre, &mut dhv, m, p, n);
    // dV = Hᵀ d(HV)
    gemm_tn(h, &dhv, dv, p, q, n);
    // dH = d(HV) Vᵀ
    gemm_nt(&dhv, v, dh, p, n, q);
}

// ---------------------------------------------------------------------------
// tensor API

fn check_vector<T: Scalar>(t: &Tensor<T>, len: usize, what: &str) -> Result<()> {
    if t.rank() != 1 || t.len() != len {
        return Err(Error::Shape(format!("{what}: expected [{len}], got {:?}", t.shape())));
    }
    Ok(())
}

fn check_matrix<T: Scalar>(t: &Tensor<T>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if t.rank() != 2 || t.rows() != rows || t.cols() != cols {
        return Err(Error::Shape(format!(
            "{what}: expected [{rows}, {cols}], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `activation(weight · input + bias)`.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    activation: Activation,
) -> Result<Tensor<T>> {
    if weight.rank() != 2 {
        return Err(Error::Shape(format!("dense weight must be a matrix, got {:?}", weight.shape())));
    }
    let (m, n) = (weight.rows(), weight.cols());
    check_vector(input, n, "dense input")?;
    check_vector(bias, m, "dense bias")?;
    input.check_finite("dense input")?;
    let mut out = vec![T::zero(); m];
    dense_apply(weight.data(), bias.data(), input.data(), activation, &mut out);
    let out = Tensor::vector(out);
    out.check_finite("dense output")?;
    Ok(out)
}

/// Gradients of a dense layer given its recorded input and output.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    output: &Tensor<T>,
    upstream: &Tensor<T>,
    activation: Activation,
) -> Result<LayerGrads<T>> {
    let (m, n) = (weight.rows(), weight.cols());
    check_vector(input, n, "dense input")?;
    check_vector(output, m, "dense output")?;
    check_vector(upstream, m, "dense upstream")?;
    let mut dw = vec![T::zero(); m * n];
    let mut db = vec![T::zero(); m];
    let mut dx = vec![T::zero(); n];
    dense_backward_into(
        weight.data(),
        input.data(),
        output.data(),
        upstream.data(),
        activation,
        &mut dw,
        &mut db,
        Some(&mut dx),
    );
    let mut params = BTreeMap::new();
    params.insert("weight".to_string(), Tensor::matrix(m, n, dw)?);
    params.insert("bias".to_string(), Tensor::vector(db));
    Ok(LayerGrads { params, input: Tensor::vector(dx) })
}

fn matrix_dims<T: Scalar>(
    h: &Tensor<T>,
    u: &Tensor<T>,
    v: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<MatrixDims> {
    if h.rank() != 2 || u.rank() != 2 || v.rank() != 2 {
        return Err(Error::Shape("matrix layer operands must be matrices".into()));
    }
    let dims = MatrixDims { p: h.rows(), q: h.cols(), m: u.rows(), n: v.cols() };
    check_matrix(u, dims.m, dims.p, "matrix layer U")?;
    check_matrix(v, dims.q, dims.n, "matrix layer V")?;
    if b.len() != dims.m * dims.n || (b.rank() == 2 && (b.rows() != dims.m || b.cols() != dims.n)) {
        return Err(Error::Shape(format!(
            "matrix layer B: expected [{}, {}], got {:?}",
            dims.m,
            dims.n,
            b.shape()
        )));
    }
    Ok(dims)
}

/// `activation(U · H · V + B)`.
pub fn matrix_layer_forward<T: Scalar>(
    h: &Tensor<T>,
    u: &Tensor<T>,
    v: &Tensor<T>,
    b: &Tensor<T>,
    activation: Activation,
) -> Result<Tensor<T>> {
    let dims = matrix_dims(h, u, v, b)?;
    let mut hv = vec![T::zero(); dims.p * dims.n];
    let mut out = vec![T::zero(); dims.m * dims.n];
    matrix_apply(dims, u.data(), h.data(), v.data(), b.data(), activation, &mut hv, &mut out);
    let out = Tensor::matrix(dims.m, dims.n, out)?;
    out.check_finite("matrix layer output")?;
    Ok(out)
}

/// Gradients of a matrix layer with respect to `U`, `V`, `B` and the input `H`.
pub fn matrix_layer_backward<T: Scalar>(
    h: &Tensor<T>,
    u: &Tensor<T>,
    v: &Tensor<T>,
    b: &Tensor<T>,
    output: &Tensor<T>,
    upstream: &Tensor<T>,
    activation: Activation,
) -> Result<LayerGrads<T>> {
    let dims = matrix_dims(h, u, v, b)?;
    let MatrixDims { p, q, m, n } = dims;
    if output.len() != m * n || upstream.len() != m * n {
        return Err(Error::Shape("matrix layer upstream/output size".into()));
    }
    let mut hv = vec![T::zero(); p * n];
    gemm(h.data(), v.data(), &mut hv, p, q, n);
    let (mut du, mut dv, mut db, mut dh) =
        (vec![T::zero(); m * p], vec![T::zero(); q * n], vec![T::zero(); m * n], vec![T::zero(); p * q]);
    matrix_backward_into(
        dims,
        u.data(),
        h.data(),
        v.data(),
        &hv,
        output.data(),
        upstream.data(),
        activation,
        &mut du,
        &mut dv,
        &mut db,
        &mut dh,
    );
    let mut params = BTreeMap::new();
    params.insert("U".to_string(), Tensor::matrix(m, p, du)?);
    params.insert("V".to_string(), Tensor::matrix(q, n, dv)?);
    params.insert("B".to_string(), Tensor::matrix(m, n, db)?);
    Ok(LayerGrads { params, input: Tensor::matrix(p, q, dh)? })
}

/// Parameters of a matrix layer: `|U| + |V| + |B| = m·p + q·n + m·n`.
pub fn matrix_layer_param_count(p: usize, q: usize, m: usize, n: usize) -> usize {
    m * p + q * n + m * n
}

/// Parameters of a fully connected layer mapping the flattened p×q input to the
/// flattened m×n output: weights plus biases.
pub fn dense_equivalent_param_count(p: usize, q: usize, m: usize, n: usize) -> usize {
    (p * q) * (m * n) + m * n
}
