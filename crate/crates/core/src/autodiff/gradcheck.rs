use super::{NodeId, ParamStore, Tape};
use crate::error::Result;

/// Magnitude below which a gradient counts as zero. Central differences in
/// f64 carry absolute noise around 1e-11, so smaller scales would turn noise
/// into large relative errors.
pub const GRAD_SCALE_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, GRAD_SCALE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_SCALE_FLOOR)
}

/// Compares tape gradients of the scalar `f` at `point` against central
/// differences with step `epsilon`, over every parameter element. Returns
/// the largest relative error.
pub fn finite_diff_check<F>(f: F, point: &ParamStore<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = f(point, &mut tape)?;
    let analytic = tape.backward(loss)?.params();
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(p, &mut t)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for (name, value) in point.iter() {
        let grad = analytic.get(name).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; value.len()]);
        for i in 0..value.len() {
            let orig = value.data()[i];
            probe.get_mut(name).expect("present").data_mut()[i] = orig + epsilon;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig - epsilon;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad[i], numeric));
        }
    }
    Ok(worst)
}
