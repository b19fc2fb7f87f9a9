//! Central finite-difference gradient checking.
//!
//! The numeric side re-evaluates the forward closure at perturbed inputs
//! and never touches the adjoint code, so it stays an independent oracle
//! for the backward pass. Run it on an `f64` graph: the same generic
//! operator code executes, without the f32 rounding floor that would
//! drown the difference quotient.

use crate::error::GraphError;
use crate::graph::{Graph, Tid};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Compare analytic gradients of `build` against central finite differences
/// over every element of `values`. The builder creates the scalar loss from
/// the supplied input leaves.
///
/// Passes when `|ad - fd| <= rtol * max(|ad|, |fd|, floor)` for every
/// element; returns a description of the worst offender otherwise.
pub fn check_gradients<T, F>(values: &[Tensor<T>], build: F, h: f64, rtol: f64) -> Result<(), String>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Tid]) -> Result<Tid, GraphError>,
{
    let floor = 1e-4;
    let eval = |vals: &[Tensor<T>]| -> Result<f64, String> {
        let store = ParamStore::<T>::new();
        let mut g = Graph::new(store);
        let leaves: Vec<Tid> = vals.iter().map(|v| g.input(v.clone())).collect();
        let loss = build(&mut g, &leaves).map_err(|e| e.to_string())?;
        Ok(g.value(loss).item().to_f64_())
    };

    // Analytic gradients.
    let store = ParamStore::<T>::new();
    let mut g = Graph::new(store);
    let leaves: Vec<Tid> = values.iter().map(|v| g.input(v.clone())).collect();
    let loss = build(&mut g, &leaves).map_err(|e| e.to_string())?;
    g.backward(loss).map_err(|e| e.to_string())?;
    let analytic: Vec<Tensor<T>> = leaves
        .iter()
        .zip(values.iter())
        .map(|(&l, v)| g.grad_of(l).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let mut worst: Option<(usize, usize, f64, f64, f64)> = None;
    for (vi, v) in values.iter().enumerate() {
        for ei in 0..v.len() {
            let mut plus = values.to_vec();
            let mut minus = values.to_vec();
            let base = v.data()[ei].to_f64_();
            plus[vi].data_mut()[ei] = T::from_f64(base + h);
            minus[vi].data_mut()[ei] = T::from_f64(base - h);
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let ad = analytic[vi].data()[ei].to_f64_();
            let err = (ad - fd).abs();
            let tol = rtol * ad.abs().max(fd.abs()).max(floor);
            if err > tol && worst.map_or(true, |w| err > w.2) {
                worst = Some((vi, ei, err, ad, fd));
            }
        }
    }
    match worst {
        None => Ok(()),
        Some((vi, ei, err, ad, fd)) => Err(format!(
            "gradient mismatch at input {vi} element {ei}: analytic {ad:.6e} vs finite-difference {fd:.6e} (|diff| {err:.3e})"
        )),
    }
}

/// Convenience wrapper with the house defaults (h = 1e-3, rtol = 1e-3).
pub fn check<T, F>(values: &[Tensor<T>], build: F) -> Result<(), String>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Tid]) -> Result<Tid, GraphError>,
{
    check_gradients(values, build, 1e-3, 1e-3)
}
