use crate::error::Result;

use super::{Graph, Tape, Tensor, Var};

/// Outcome of comparing tape gradients against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(param index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements whose stencil straddled a ReLU kink, where the difference
    /// quotient does not estimate a derivative.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Fourth-order stencil `f(x±2h), f(x±h)` instead of the central pair.
    pub fourth_order: bool,
}

impl GradCheckOptions {
    pub fn central(eps: f64) -> Self {
        GradCheckOptions {
            eps,
            floor: 1e-8,
            fourth_order: false,
        }
    }
}

/// Relative error with a floor on the denominator.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, 1e-8)
}

/// Checks every element of every parameter with central differences.
/// `f` must build a scalar from the given leaves and be a pure function of
/// their values.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, params, GradCheckOptions::central(eps))
}

pub fn grad_check_with<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_kink_tracking();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &leaves)?;
    let base_kinks = tape.kink_pattern().unwrap_or(&[]).to_vec();
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<(f64, bool)> {
        let mut tape = Tape::with_kink_tracking();
        let leaves: Vec<Var> = values.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let out = f(&mut tape, &leaves)?;
        let smooth = tape.kink_pattern().unwrap_or(&[]) == base_kinks.as_slice();
        Ok((tape.value(&out).item()?, smooth))
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let h = opts.eps;
    // (step multiple, weight) of each antisymmetric difference f(x+kh) - f(x-kh);
    // differencing pairs first keeps a flat objective at exactly zero
    let pairs: &[(f64, f64)] = if opts.fourth_order {
        &[(1.0, 8.0), (2.0, -1.0)]
    } else {
        &[(1.0, 1.0)]
    };
    let scale = if opts.fourth_order { 12.0 * h } else { 2.0 * h };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf, &params[pi]);
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            let mut acc = 0.0;
            let mut smooth = true;
            for &(k, c) in pairs {
                work[pi].data_mut()[ei] = orig + k * h;
                let (up, s_up) = eval(&work)?;
                work[pi].data_mut()[ei] = orig - k * h;
                let (down, s_down) = eval(&work)?;
                acc += c * (up - down);
                smooth &= s_up && s_down;
            }
            work[pi].data_mut()[ei] = orig;
            if !smooth {
                report.skipped += 1;
                continue;
            }
            let numeric = acc / scale;
            let a = analytic.data()[ei];
            let err = relative_error_with_floor(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_on_scalar() {
        let r = grad_check(|_, leaves| Ok(leaves[0]), &[Tensor::scalar(0.7)], 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn stencil_straddling_a_kink_is_skipped() {
        let f = |g: &mut Tape, leaves: &[Var]| {
            let r = g.relu(&leaves[0])?;
            g.sum(&r, None)
        };
        let x = Tensor::new(vec![3], vec![1e-7, 0.5, -0.5]).unwrap();
        let r = grad_check_with(
            f,
            &[x],
            GradCheckOptions {
                eps: 1e-4,
                floor: 1e-8,
                fourth_order: true,
            },
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn fourth_order_beats_central_on_a_cubic() {
        let f = |g: &mut Tape, leaves: &[Var]| {
            let sq = g.mul(&leaves[0], &leaves[0])?;
            let cube = g.mul(&sq, &leaves[0])?;
            g.sum(&cube, None)
        };
        let x = [Tensor::scalar(1.3)];
        let c = grad_check(f, &x, 1e-2).unwrap();
        let q = grad_check_with(
            f,
            &x,
            GradCheckOptions {
                eps: 1e-2,
                floor: 1e-8,
                fourth_order: true,
            },
        )
        .unwrap();
        assert!(q.max_rel_error < c.max_rel_error * 1e-3, "{c:?} {q:?}");
    }
}
