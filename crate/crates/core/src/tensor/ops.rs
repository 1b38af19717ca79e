//! Elementwise and reduction primitives recorded on the tape.

use crate::error::{Error, Result};

use super::{numel, record, Scalar, Tensor};

fn check_same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| *x + *y)
        .collect();
    Ok(record("add", &[a, b], a.shape().to_vec(), data, |g| {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("sub", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| *x - *y)
        .collect();
    Ok(record("sub", &[a, b], a.shape().to_vec(), data, |g| {
        vec![
            Some(g.to_vec()),
            Some(g.iter().map(|v| -*v).collect()),
        ]
    }))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| *x * *y)
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(record("mul", &[a, b], a.shape().to_vec(), data, move |g| {
        let da = g.iter().zip(bc.data()).map(|(g, y)| *g * *y).collect();
        let db = g.iter().zip(ac.data()).map(|(g, x)| *g * *x).collect();
        vec![Some(da), Some(db)]
    }))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data = a.data().iter().map(|x| *x * c).collect();
    record("scale", &[a], a.shape().to_vec(), data, move |g| {
        vec![Some(g.iter().map(|v| *v * c).collect())]
    })
}

pub fn add_scalar<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data = a.data().iter().map(|x| *x + c).collect();
    record("add_scalar", &[a], a.shape().to_vec(), data, |g| {
        vec![Some(g.to_vec())]
    })
}

/// Full reduction to a scalar tensor.
pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let total: T = a.data().iter().copied().sum();
    let n = a.len();
    record("sum", &[a], vec![], vec![total], move |g| {
        vec![Some(vec![g[0]; n])]
    })
}

pub fn mean<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.is_empty() {
        return Err(Error::shape("mean of an empty tensor"));
    }
    let n = a.len();
    let inv = T::from_float(1.0 / n as f64);
    let total: T = a.data().iter().copied().sum();
    Ok(record("mean", &[a], vec![], vec![total * inv], move |g| {
        vec![Some(vec![g[0] * inv; n])]
    }))
}

/// Same data, new shape with an equal element count.
pub fn reshape<T: Scalar>(a: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
    if numel(&shape) != a.len() {
        return Err(Error::shape(format!(
            "reshape: {:?} ({} elements) incompatible with {:?}",
            a.shape(),
            a.len(),
            shape
        )));
    }
    Ok(record(
        "reshape",
        &[a],
        shape,
        a.data().to_vec(),
        |g| vec![Some(g.to_vec())],
    ))
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().map(|x| stable_sigmoid(*x)).collect();
    let out = data.clone();
    record("sigmoid", &[a], a.shape().to_vec(), data, move |g| {
        let dx = g
            .iter()
            .zip(&out)
            .map(|(g, y)| *g * *y * (T::one() - *y))
            .collect();
        vec![Some(dx)]
    })
}

pub(crate) fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise L2 normalization of a rank-2 tensor. Rows with norm below 1e-12
/// pass through unchanged (a warning is logged); their backward rule is the
/// identity.
pub fn l2_normalize_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    if m.shape().len() != 2 {
        return Err(Error::shape(format!(
            "l2_normalize_rows expects rank-2 input, got {:?}",
            m.shape()
        )));
    }
    let (n, d) = (m.shape()[0], m.shape()[1]);
    if n == 0 || d == 0 {
        return Err(Error::shape("l2_normalize_rows: empty matrix"));
    }
    let tiny = T::from_float(1e-12);
    let mut data = vec![T::zero(); n * d];
    let mut norms = vec![T::zero(); n];
    let mut degenerate = 0usize;
    for i in 0..n {
        let row = &m.data()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
        norms[i] = norm;
        let out = &mut data[i * d..(i + 1) * d];
        if norm < tiny {
            degenerate += 1;
            out.copy_from_slice(row);
        } else {
            for (o, v) in out.iter_mut().zip(row) {
                *o = *v / norm;
            }
        }
    }
    if degenerate > 0 {
        log::warn!("l2_normalize_rows: {degenerate} degenerate zero-norm row(s) passed through");
    }
    let out_data = data.clone();
    Ok(record(
        "l2_normalize_rows",
        &[m],
        vec![n, d],
        data,
        move |g| {
            // d(v/|v|) = (g - y (y.g)) / |v|
            let mut dx = vec![T::zero(); n * d];
            for i in 0..n {
                let gi = &g[i * d..(i + 1) * d];
                let yi = &out_data[i * d..(i + 1) * d];
                let slot = &mut dx[i * d..(i + 1) * d];
                if norms[i] < tiny {
                    slot.copy_from_slice(gi);
                } else {
                    let dot: T = gi.iter().zip(yi).map(|(a, b)| *a * *b).sum();
                    for ((s, g), y) in slot.iter_mut().zip(gi).zip(yi) {
                        *s = (*g - *y * dot) / norms[i];
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}
