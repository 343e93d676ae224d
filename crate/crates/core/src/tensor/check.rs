use super::{Graph, ParamStore, Result, Tensor, Var};

/// Relative error with a `max(1, |a|, |n|)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input (or parameter) and flat coordinate of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compare the tape gradient of the scalar function `f` with central
/// differences of step `h` at every coordinate of `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "grad_check step must be positive");
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((format!("input{k}"), i));
            }
        }
    }
    Ok(report)
}

/// Same as [`grad_check`] but over every parameter of `store`. `f` builds the
/// scalar loss from the store's parameters via [`Graph::param`].
pub fn grad_check_store<F>(f: F, store: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    assert!(h > 0.0, "grad_check step must be positive");
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut g = Graph::new();
    let root = f(&mut g, &analytic)?;
    g.backward_into(root, &mut analytic)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };

    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for name in &names {
        let n = store.get(name).map(Tensor::numel).unwrap_or(0);
        for i in 0..n {
            let orig = store.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic.grad(name).unwrap().data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let a = Tensor::from_fn(&[3, 2], |i| 0.5 * i as f64 - 1.0);
        let w = Tensor::from_fn(&[2, 1], |i| 1.0 + i as f64);
        let r = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                Ok(g.sum(y))
            },
            &[a, w],
            1e-3,
        )
        .unwrap();
        // bilinear, so central differences are exact up to rounding
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
        assert_eq!(r.checked, 8);
    }

    #[test]
    fn dead_input_has_zero_gradient_both_ways() {
        let r = grad_check(|g, v| Ok(g.sum(v[0])), &[Tensor::full(&[2], 1.0), Tensor::full(&[3], 7.0)], 0.5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn softmax_cross_entropy_toy() {
        let logits = Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.7).sin());
        let r = grad_check(|g, v| g.cross_entropy(v[0], &[1, 3]), &[logits], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
