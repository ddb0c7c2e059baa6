use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Max over checked scalars of `|analytic - fd| / max(1, |fd|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Scalars whose ±h perturbation flipped a ReLU input sign; central
    /// differences are meaningless across a kink, so they are excluded.
    pub skipped_kinks: usize,
    pub worst: Option<(String, usize)>,
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new().with_kink_tracking();
    let loss = f(&mut g, store)?;
    let t = g.value(loss);
    if !t.is_scalar() {
        return Err(Error::contract("gradient check needs a scalar function"));
    }
    Ok((t.item(), g.relu_signs().to_vec()))
}

/// Compares reverse-mode gradients of `f` against central differences
/// with step `h`, over every trainable scalar of `store`. Frozen entries
/// are excluded.
pub fn check_gradients<F>(f: F, store: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new().with_kink_tracking();
    let loss = f(&mut g, &work)?;
    g.backward_into(loss, &mut work)?;
    let base_signs = g.relu_signs().to_vec();
    drop(g);

    let mut report = GradCheckReport::default();
    for name in work.trainable_names() {
        let analytic = work.get(&name).and_then(|p| p.grad.clone());
        let numel = work.value(&name)?.numel();
        for idx in 0..numel {
            let orig = work.value(&name)?.data()[idx];
            work.value_mut(&name)?.data_mut()[idx] = orig + h;
            let (fp, sp) = eval(&f, &work)?;
            work.value_mut(&name)?.data_mut()[idx] = orig - h;
            let (fm, sm) = eval(&f, &work)?;
            work.value_mut(&name)?.data_mut()[idx] = orig;
            if sp != base_signs || sm != base_signs {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.as_ref().map_or(0.0, |t| t.data()[idx]);
            let err = (an - fd).abs() / fd.abs().max(1.0);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
