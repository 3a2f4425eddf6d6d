use super::{forward_backward, NumericsError, Tape, Tensor, Var};

fn eval<F>(f: &F, point: &[Tensor]) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|p| tape.constant_ref(p)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Central-difference gradient of a scalar tape function, one tensor per parameter.
pub fn central_difference<F>(f: &F, point: &[Tensor], step: f64) -> Result<Vec<Vec<f64>>, NumericsError>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var, NumericsError>,
{
    let mut work: Vec<Tensor> = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for p in 0..point.len() {
        let mut g = vec![0.0; point[p].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = point[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = eval(f, &work)?;
            work[p].data_mut()[i] = orig - step;
            let down = eval(f, &work)?;
            work[p].data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest `|analytic − numeric| / max(1e-8, |numeric|)` over every coordinate.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var, NumericsError>,
{
    let (_, analytic) = forward_backward(|t, p, _| Ok(vec![f(t, p)?]), point, &[])?;
    let numeric = central_difference(&f, point, step)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n) {
            worst = worst.max((av - nv).abs() / nv.abs().max(1e-8));
        }
    }
    Ok(worst)
}
