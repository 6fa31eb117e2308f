use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NnError;

/// Inputs with more entries than this are checked along random directions.
pub const COORDINATE_LIMIT: usize = 10_000;
const PROBES: usize = 12;
const SHARED_PROBES: usize = 4;
const KINK_RETRIES: usize = 8;
/// Relative errors are measured against at least this magnitude.
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub worst_rel_error: f64,
    pub checked: usize,
    /// Random probes that met a kink on every retry; nonzero means the
    /// base point itself is not differentiable.
    pub kinked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<Fun>(f: &Fun, x: &Tensor<f64>) -> Result<f64, NnError>
where
    Fun: Fn(&mut Tape<f64>, Var) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv)?;
    Ok(tape.value(out).data[0])
}

/// Compares reverse-mode gradients of scalar `f` at `x` with central differences.
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport, NnError>
where
    Fun: Fn(&mut Tape<f64>, Var) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(&x.shape));

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    if x.len() <= COORDINATE_LIMIT {
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data[i] += eps;
            let mut minus = x.clone();
            minus.data[i] -= eps;
            let numeric = (eval(&f, &plus)? - eval(&f, &minus)?) / (2.0 * eps);
            worst = worst.max(rel_error(analytic.data[i], numeric));
            checked += 1;
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
        for _ in 0..PROBES {
            let scale = 1.0 / (x.len() as f64).sqrt();
            let dir: Vec<f64> = (0..x.len()).map(|_| if rng.gen::<bool>() { scale } else { -scale }).collect();
            let mut plus = x.clone();
            let mut minus = x.clone();
            for ((p, m), d) in plus.data.iter_mut().zip(minus.data.iter_mut()).zip(&dir) {
                *p += eps * d;
                *m -= eps * d;
            }
            let numeric = (eval(&f, &plus)? - eval(&f, &minus)?) / (2.0 * eps);
            let a: f64 = analytic.data.iter().zip(&dir).map(|(g, d)| g * d).sum();
            worst = worst.max(rel_error(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport { passed: worst <= tol, worst_rel_error: worst, checked, kinked: 0 })
}

fn eval_params<Fun>(f: &Fun, store: &ParamStore<f64>) -> Result<f64, NnError>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let out = f(&mut tape, &bound)?;
    Ok(tape.value(out).data[0])
}

/// Gradient check with respect to every trainable parameter of `store`.
///
/// Small stores are checked coordinate-wise; larger ones along one random
/// unit direction per parameter tensor plus shared directions across all of
/// them. A random probe whose one-sided slopes disagree straddles a relu or
/// max-pool kink and is redrawn, up to `KINK_RETRIES` times.
pub fn grad_check_params<Fun>(
    f: Fun,
    store: &ParamStore<f64>,
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport, NnError>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let out = f(&mut tape, &bound)?;
    let f0 = tape.value(out).data[0];
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = store
        .iter()
        .zip(&bound)
        .map(|(p, &v)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&p.value.shape)))
        .collect();
    let trainable: Vec<usize> = (0..store.len()).filter(|&i| store.get(i).trainable).collect();
    let total: usize = trainable.iter().map(|&i| store.get(i).value.len()).sum();

    // (analytic, central, forward, backward) slopes along `dirs`
    let slopes = |dirs: &[(usize, Vec<f64>)]| -> Result<(f64, f64, f64, f64), NnError> {
        let mut plus = store.clone();
        let mut minus = store.clone();
        let mut a = 0.0;
        for (id, d) in dirs {
            for (k, &dk) in d.iter().enumerate() {
                plus.get_mut(*id).value.data[k] += eps * dk;
                minus.get_mut(*id).value.data[k] -= eps * dk;
                a += analytic[*id].data[k] * dk;
            }
        }
        let fp = eval_params(&f, &plus)?;
        let fm = eval_params(&f, &minus)?;
        Ok((a, (fp - fm) / (2.0 * eps), (fp - f0) / eps, (f0 - fm) / eps))
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut kinked = 0;
    if total <= COORDINATE_LIMIT {
        for &id in &trainable {
            let n = store.get(id).value.len();
            for k in 0..n {
                let mut d = vec![0.0; n];
                d[k] = 1.0;
                let (a, numeric, _, _) = slopes(&[(id, d)])?;
                worst = worst.max(rel_error(a, numeric));
                checked += 1;
            }
        }
        return Ok(GradCheckReport { passed: worst <= tol, worst_rel_error: worst, checked, kinked });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // unit-norm directions, so every probe moves the parameters by eps
    let mut rademacher = |ids: &[usize]| -> Vec<(usize, Vec<f64>)> {
        let n: usize = ids.iter().map(|&i| store.get(i).value.len()).sum();
        let scale = 1.0 / (n as f64).sqrt();
        ids.iter()
            .map(|&id| {
                let len = store.get(id).value.len();
                (id, (0..len).map(|_| if rng.gen::<bool>() { scale } else { -scale }).collect())
            })
            .collect()
    };
    let mut groups: Vec<Vec<usize>> = trainable.iter().map(|&id| vec![id]).collect();
    groups.extend((0..SHARED_PROBES).map(|_| trainable.clone()));
    for ids in &groups {
        let mut err = f64::INFINITY;
        let mut smooth = false;
        for _ in 0..KINK_RETRIES {
            let (a, numeric, fwd, bwd) = slopes(&rademacher(ids))?;
            err = rel_error(a, numeric);
            smooth = rel_error(fwd, bwd) <= tol;
            if smooth {
                break;
            }
        }
        kinked += usize::from(!smooth);
        worst = worst.max(err);
        checked += 1;
    }
    Ok(GradCheckReport { passed: worst <= tol, worst_rel_error: worst, checked, kinked })
}
