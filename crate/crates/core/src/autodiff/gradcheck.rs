use super::{Result, Tape, Tensor, Var};

pub const DEFAULT_GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences. Returns the largest `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)`
/// over all parameter entries.
///
/// `f` receives one trainable leaf per entry of `params`, in order.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?
    };
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        for j in 0..params[i].len() {
            let x = params[i].data()[j];
            let (xp, xm) = (x + h, x - h);
            work[i].data_mut()[j] = xp;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = xm;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x;
            let fd = (fp - fm) / (xp - xm);
            let ga = analytic[i][j];
            let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
