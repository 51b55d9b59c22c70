//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, Kernel};
use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries adjacent to a max-reduction tie, where the derivative is not
    /// defined.
    pub skipped: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(REL_FLOOR)
}

/// Checks a scalar function of several tensors: `f` builds the graph on the
/// tape from the leaf handles and returns the scalar output. `coords`
/// optionally restricts the numerically checked entries to `(input, index)`
/// pairs.
pub fn check_fn<F>(
    point: &[Tensor],
    coords: Option<&[(usize, usize)]>,
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[super::tape::Var]) -> Result<super::tape::Var>,
{
    let mut tape = Tape::new();
    let leaves = point
        .iter()
        .map(|t| tape.leaf(t.clone_value()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &leaves)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|v| tape.grad(*v).unwrap().to_vec()).collect();

    let eval = |pt: &[Tensor]| -> Result<f64> {
        let mut t = Tape::untracked();
        let ls = pt.iter().map(|x| t.leaf(x.clone_value())).collect::<Result<Vec<_>>>()?;
        let o = f(&mut t, &ls)?;
        Ok(t.value(o).item())
    };

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = point
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut work: Vec<Tensor> = point.iter().map(Tensor::clone_value).collect();
    let mut max_err = 0.0f64;
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + step;
        let fp = eval(&work)?;
        work[i].data_mut()[j] = orig - step;
        let fm = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        max_err = max_err.max(rel_error(analytic[i][j], numeric));
    }
    Ok(GradCheckReport { max_rel_error: max_err, checked: coords.len(), skipped: 0 })
}

/// Checks one kernel at `point`. The kernel output is reduced to a scalar
/// with a fixed pseudo-random weighting so that every output entry
/// contributes a distinct cotangent.
pub fn grad_check(kernel: &Kernel, point: &[Tensor]) -> Result<GradCheckReport> {
    grad_check_with_step(kernel, point, DEFAULT_STEP)
}

pub fn grad_check_with_step(kernel: &Kernel, point: &[Tensor], step: f64) -> Result<GradCheckReport> {
    let refs: Vec<&Tensor> = point.iter().collect();
    let (out, _) = kernels::forward(kernel, &refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let weights = Tensor::new(
        out.shape().to_vec(),
        (0..out.len()).map(|_| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect(),
    )?;

    // Entries whose perturbation can flip a max-reduction are not
    // differentiable there; leave them out.
    let skip = tie_entries(kernel, point, step);
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .filter(|c| !skip.contains(c))
        .collect();

    let k = kernel.clone();
    let w = weights.clone_value();
    let mut tape = Tape::new();
    let leaves = point
        .iter()
        .map(|t| tape.leaf(t.clone_value()))
        .collect::<Result<Vec<_>>>()?;
    let y = tape.run(k.clone(), &leaves)?;
    let wv = tape.constant(w)?;
    let yw = tape.mul(y, wv)?;
    let loss = tape.sum_all(yw)?;
    tape.backward(loss)?;

    // Each output entry's difference is divided by the realized step before
    // weighting, so kernels that copy their input come out exact.
    let mut work: Vec<Tensor> = point.iter().map(Tensor::clone_value).collect();
    let mut max_err = 0.0f64;
    for &(i, j) in &coords {
        let orig = work[i].data()[j];
        let hi = orig + step;
        let lo = orig - step;
        work[i].data_mut()[j] = hi;
        let yp = kernels::forward(&k, &work.iter().collect::<Vec<_>>())?.0;
        work[i].data_mut()[j] = lo;
        let ym = kernels::forward(&k, &work.iter().collect::<Vec<_>>())?.0;
        work[i].data_mut()[j] = orig;
        let numeric = yp
            .data()
            .iter()
            .zip(ym.data())
            .zip(weights.data())
            .map(|((a, b), w)| w * ((a - b) / (hi - lo)))
            .sum::<f64>();
        let analytic = tape.grad(leaves[i]).unwrap()[j];
        max_err = max_err.max(rel_error(analytic, numeric));
    }
    Ok(GradCheckReport { max_rel_error: max_err, checked: coords.len(), skipped: skip.len() })
}

fn tie_entries(kernel: &Kernel, point: &[Tensor], step: f64) -> Vec<(usize, usize)> {
    let near = |row: &[f64]| -> bool {
        let mut v: Vec<f64> = row.to_vec();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        v.len() > 1 && (v[0] - v[1]).abs() <= 2.0 * step
    };
    match kernel {
        Kernel::MaxAll if near(point[0].data()) => (0..point[0].len()).map(|j| (0, j)).collect(),
        Kernel::MaxRows => {
            let c = point[0].cols();
            (0..point[0].rows())
                .filter(|&i| near(point[0].row(i)))
                .flat_map(|i| (0..c).map(move |j| (0, i * c + j)))
                .collect()
        }
        _ => Vec::new(),
    }
}
