//! Central finite-difference audit of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Eager, Graph, ParamStore, Tape, Tensor};

/// A differentiable function of a parameter store and input tensors,
/// written once against [`Graph`].
pub trait GraphFn {
    fn eval<G: Graph>(&self, g: &mut G, inputs: &[G::V]) -> G::V;
}

/// Maps the tensor produced by a [`GraphFn`] to the scalar being checked.
pub trait Reduction {
    /// Returns `(value, d value / d output)`.
    fn reduce(&self, out: &Tensor) -> (f64, Tensor);
}

/// `Σ wᵢ·outᵢ` with fixed pseudo-random weights in `[0.5, 1.5)`; avoids
/// the cancellations a plain sum suffers under normalisation layers.
pub struct WeightedSum {
    pub seed: u64,
}

impl Reduction for WeightedSum {
    fn reduce(&self, out: &Tensor) -> (f64, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let w = Tensor::from_shape_fn(out.raw_dim(), |_| rng.gen_range(0.5..1.5));
        ((&w * out).sum(), w)
    }
}

/// Mean absolute error against a fixed target.
pub struct L1Target(pub Tensor);

impl Reduction for L1Target {
    fn reduce(&self, out: &Tensor) -> (f64, Tensor) {
        let n = out.len() as f64;
        let d = out - &self.0;
        (d.mapv(f64::abs).sum() / n, d.mapv(|v| v.signum() / n))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute differences at or below this count as agreement; covers
    /// coordinates whose true gradient is numerically zero.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples: 200,
            step: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    /// Parameter name, or `input{i}`.
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// `max(|analytic|, |numeric|)` exceeds the absolute floor.
    pub significant: bool,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.coordinates.len()
    }

    pub fn passed(&self) -> usize {
        self.coordinates.iter().filter(|c| c.passed).count()
    }

    pub fn pass_rate(&self) -> f64 {
        if self.coordinates.is_empty() {
            return 1.0;
        }
        self.passed() as f64 / self.checked() as f64
    }

    /// Largest relative error among coordinates whose gradient magnitude
    /// exceeds the absolute floor.
    pub fn max_rel_error(&self) -> f64 {
        self.coordinates
            .iter()
            .filter(|c| c.significant)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        format!(
            "{}/{} coordinates within tolerance ({:.1}%), {} non-zero, max relative error {:.2e}",
            self.passed(),
            self.checked(),
            100.0 * self.pass_rate(),
            self.coordinates.iter().filter(|c| c.significant).count(),
            self.max_rel_error()
        )
    }
}

fn eval_eager<F: GraphFn, R: Reduction>(f: &F, red: &R, params: &ParamStore, inputs: &[Tensor]) -> f64 {
    let mut g = Eager::new(params);
    let vs: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f.eval(&mut g, &vs);
    red.reduce(&out).0
}

/// Compares tape gradients with central differences at `samples`
/// coordinates drawn uniformly without replacement from every parameter
/// and input scalar.
pub fn check_gradients<F: GraphFn, R: Reduction>(
    f: &F,
    red: &R,
    params: &ParamStore,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let mut tape = Tape::new(params);
    let in_vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let param_vars: Vec<_> = params.ids().map(|id| (id, tape.param(id))).collect();
    let out = f.eval(&mut tape, &in_vars);
    let (value, grad) = red.reduce(tape.value(&out));
    let root = tape.scalar_loss(&out, value, grad);
    let grads = tape.backward(&root);

    // (owner, flat index); owner < inputs.len() is an input.
    let mut slots: Vec<(usize, usize)> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        slots.extend((0..t.len()).map(|j| (i, j)));
    }
    for (k, (id, _)) in param_vars.iter().enumerate() {
        slots.extend((0..params.get(*id).len()).map(|j| (inputs.len() + k, j)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picks = sample(&mut rng, slots.len(), opts.samples.min(slots.len()));

    let analytic_at = |owner: usize, j: usize| -> f64 {
        let g = if owner < inputs.len() {
            grads.of(&in_vars[owner])
        } else {
            grads.of(&param_vars[owner - inputs.len()].1)
        };
        g.map_or(0.0, |t| t.iter().nth(j).copied().unwrap_or(0.0))
    };

    let mut coordinates = Vec::with_capacity(picks.len());
    for p in picks.iter() {
        let (owner, j) = slots[p];
        let analytic = analytic_at(owner, j);
        let h = opts.step;
        let (fp, fm, name) = if owner < inputs.len() {
            let mut xp = inputs.to_vec();
            bump(&mut xp[owner], j, h);
            let mut xm = inputs.to_vec();
            bump(&mut xm[owner], j, -h);
            (
                eval_eager(f, red, params, &xp),
                eval_eager(f, red, params, &xm),
                format!("input{owner}"),
            )
        } else {
            let id = param_vars[owner - inputs.len()].0;
            let mut pp = params.clone();
            bump(pp.get_mut(id), j, h);
            let mut pm = params.clone();
            bump(pm.get_mut(id), j, -h);
            (
                eval_eager(f, red, &pp, inputs),
                eval_eager(f, red, &pm, inputs),
                params.name(id).to_string(),
            )
        };
        let numeric = (fp - fm) / (2.0 * h);
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel_error = if scale > 0.0 { diff / scale } else { 0.0 };
        coordinates.push(CoordinateCheck {
            tensor: name,
            index: j,
            analytic,
            numeric,
            rel_error,
            significant: scale > opts.abs_floor,
            passed: rel_error <= opts.rel_tol || diff <= opts.abs_floor,
        });
    }
    GradCheckReport { coordinates }
}

fn bump(t: &mut Tensor, j: usize, h: f64) {
    *t.iter_mut().nth(j).expect("index in range") += h;
}
