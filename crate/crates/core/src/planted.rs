//! Teacher-student problems whose nearby local minimum is differentiable.
//!
//! Plain descent from a random start on a piecewise-linear net usually
//! stalls on an activation kink. Here the targets come from a teacher of the
//! same architecture plus small noise, and inputs are kept only when every
//! teacher preactivation clears a margin, so the noisy fit next to the
//! teacher sits strictly inside one activation region.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::network::{activation_patterns, forward, init_params, ForwardTrace, NetworkArch, NetworkParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherSpec {
    pub samples: usize,
    /// Smallest |preactivation| the teacher may show on a kinked layer,
    /// ignoring rows pinned at zero behind switched-off units.
    pub margin: f64,
    /// Standard deviation of both the target noise and the start offset.
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TeacherProblem {
    pub x: DenseMatrix,
    pub y: DMatrix<f64>,
    pub teacher: NetworkParams,
    pub start: NetworkParams,
}

/// Extra requirements on a teacher, for nets with a planted structure.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Plant {
    /// `(layer, unit)` pairs whose preactivation must be at least `margin`
    /// on every sample.
    pub active_units: Vec<(usize, usize)>,
    /// `(layer, unit)` pairs that must reach `−margin` or below on at least
    /// one sample, so they do not act linearly on the data.
    pub bent_units: Vec<(usize, usize)>,
    /// Per-layer 0/1 masks; zero entries are held at zero in the teacher and
    /// the start point.
    pub mask: Option<Vec<DMatrix<f64>>>,
}

const MAX_DRAWS_PER_SAMPLE: usize = 10_000;

fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Inputs are drawn one row at a time from a ChaCha8 stream keyed by the
/// seed; the teacher is `init_params(arch, seed, 1)`.
pub fn teacher_problem(arch: &NetworkArch, spec: TeacherSpec) -> Result<TeacherProblem> {
    teacher_problem_with(init_params(arch, spec.seed, 1.0)?, spec, &Plant::default())
}

/// As [`teacher_problem`] around a given teacher. The plant's mask is
/// applied to the teacher first.
pub fn teacher_problem_with(teacher: NetworkParams, spec: TeacherSpec, plant: &Plant) -> Result<TeacherProblem> {
    if spec.samples == 0 {
        return Err(Error::InvalidArgument("teacher problem needs at least one sample".into()));
    }
    if !(spec.margin >= 0.0 && spec.noise >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin and noise must be nonnegative, got {} and {}",
            spec.margin, spec.noise
        )));
    }
    let arch = teacher.arch().clone();
    for &(l, k) in plant.active_units.iter().chain(&plant.bent_units) {
        if l == 0 || l > arch.depth() || k >= arch.hidden_widths[l - 1] {
            return Err(Error::InvalidArgument(format!("no hidden unit {k} in layer {l}")));
        }
    }
    let masked = |p: &NetworkParams, noise: Option<(&mut ChaCha8Rng, f64)>| -> Result<NetworkParams> {
        let mut noise = noise;
        p.map_weights(|l, w| {
            let mut w = match noise.as_mut() {
                Some((rng, s)) => w + standard_normal(rng, w.nrows(), w.ncols()) * *s,
                None => w.clone(),
            };
            if let Some(mask) = &plant.mask {
                w.component_mul_assign(&mask[l - 1]);
            }
            w
        })
    };
    if let Some(mask) = &plant.mask {
        let ok = mask.len() == teacher.weights().len()
            && mask.iter().zip(teacher.weights()).all(|(m, w)| m.shape() == w.shape());
        if !ok {
            return Err(Error::shape("plant mask", teacher.weights().len(), mask.len()));
        }
    }
    let teacher = masked(&teacher, None)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7465_6163_6865_7200);
    let dx = arch.input_dim;
    let mut rows = Vec::with_capacity(spec.samples * dx);
    let mut unseen: Vec<(usize, usize)> = plant.bent_units.clone();
    let mut draws = 0;
    while rows.len() < spec.samples * dx {
        if draws == MAX_DRAWS_PER_SAMPLE * spec.samples {
            return Err(Error::Numerical(format!(
                "no inputs clear margin {} for this teacher after {draws} draws",
                spec.margin
            )));
        }
        draws += 1;
        let row = standard_normal(&mut rng, 1, dx);
        let trace = forward(&teacher, &DenseMatrix::new(row.clone())?)?;
        if !clears_margin(&trace, spec.margin)? {
            continue;
        }
        let pre = |l: usize, k: usize| trace.preactivation(l)[(0, k)];
        if plant.active_units.iter().any(|&(l, k)| pre(l, k) < spec.margin) {
            continue;
        }
        let witnessed: Vec<bool> = unseen.iter().map(|&(l, k)| pre(l, k) <= -spec.margin).collect();
        // The last free slots are reserved for rows that bend a unit not yet seen bending.
        let slots = spec.samples - rows.len() / dx;
        if slots <= unseen.len() && !witnessed.iter().any(|&w| w) {
            continue;
        }
        let mut it = witnessed.iter();
        unseen.retain(|_| !*it.next().unwrap());
        rows.extend(row.iter());
    }
    let x = DenseMatrix::new(DMatrix::from_row_slice(spec.samples, dx, &rows))?;
    let out = forward(&teacher, &x)?.output().inner().clone();
    let y = &out + standard_normal(&mut rng, out.nrows(), out.ncols()) * spec.noise;
    let start = masked(&teacher, Some((&mut rng, spec.noise)))?;
    Ok(TeacherProblem { x, y, teacher, start })
}

fn clears_margin(trace: &ForwardTrace, margin: f64) -> Result<bool> {
    let patterns = activation_patterns(trace, 0.0)?;
    Ok(patterns.is_differentiable() && patterns.min_abs_preactivation() >= margin)
}
