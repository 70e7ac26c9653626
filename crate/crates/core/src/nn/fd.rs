use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamStore, Tensor};

/// Central-difference gradient estimate for every unfrozen parameter.
///
/// `loss` is evaluated twice at the unperturbed point first; differing
/// results mean the function is not deterministic and the estimate would be
/// meaningless.
pub fn finite_difference_gradient<F>(mut loss: F, params: &ParamStore, eps: f64) -> Result<Gradients>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Oracle(format!("eps must be positive, got {eps}")));
    }
    let a = loss(params)?;
    let b = loss(params)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::Oracle(format!(
            "loss is not deterministic: {a} vs {b} at the same point"
        )));
    }

    let mut work = params.clone();
    let mut out = Gradients::new();
    let names: Vec<String> = params.trainable_names().map(str::to_string).collect();
    for name in names {
        let n = params.require(&name)?.len();
        let mut g = vec![0.0; n];
        for i in 0..n {
            let orig = work.get(&name).expect("cloned").data()[i];
            work.get_mut(&name).expect("cloned").data_mut()[i] = orig + eps;
            let plus = loss(&work)?;
            work.get_mut(&name).expect("cloned").data_mut()[i] = orig - eps;
            let minus = loss(&work)?;
            work.get_mut(&name).expect("cloned").data_mut()[i] = orig;
            g[i] = (plus - minus) / (2.0 * eps);
        }
        let shape = params.require(&name)?.shape().to_vec();
        out.insert(name, Tensor::new(shape, g)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn scalar(v: f64) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert("x", Tensor::scalar(v)).unwrap();
        ps
    }

    fn x(ps: &ParamStore) -> f64 {
        ps.get("x").unwrap().data()[0]
    }

    #[test]
    fn square() {
        let g = finite_difference_gradient(|p| Ok(x(p) * x(p)), &scalar(3.0), 1e-5).unwrap();
        assert!((g["x"].data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant() {
        let g = finite_difference_gradient(|_| Ok(4.2), &scalar(3.0), 1e-5).unwrap();
        assert_eq!(g["x"].data()[0], 0.0);
    }

    #[test]
    fn sine_at_zero() {
        let g = finite_difference_gradient(|p| Ok(x(p).sin()), &scalar(0.0), 1e-5).unwrap();
        assert!((g["x"].data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn detects_nondeterminism() {
        let calls = Cell::new(0.0);
        let r = finite_difference_gradient(
            |_| {
                calls.set(calls.get() + 1.0);
                Ok(calls.get())
            },
            &scalar(0.0),
            1e-5,
        );
        assert!(matches!(r, Err(Error::Oracle(_))));
    }

    #[test]
    fn rejects_bad_eps() {
        assert!(finite_difference_gradient(|_| Ok(0.0), &scalar(0.0), 0.0).is_err());
    }
}
