use super::{Bound, ParamSet, Tape, Var};
use crate::error::Result;

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences over every parameter coordinate. Returns the worst relative
/// error.
pub fn grad_check<F>(mut f: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let mut g = tape.backward(loss)?;
    let analytic = bound.grads(&tape, &mut g);

    let mut eval = |ps: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let loss = f(&mut tape, &bound)?;
        Ok(tape.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.get(name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(name).expect("listed name").data()[i];
            probe.get_mut(name).expect("listed name").data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("listed name").data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("listed name").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[name].data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::new([3, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let x = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.5, 0.5, 0.25]).unwrap();
        let err = grad_check(
            |tape, p| {
                let xv = tape.constant(x.clone());
                let y = tape.matmul(xv, p.var("w")?)?;
                Ok(tape.sum(y))
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
