//! Seeded random test vectors shared by the monitors, the CLI and the tests.

use rand::Rng;

use crate::radial::{Field, RadialGrid};

/// Independent uniform values in `[-1, 1]` at every node.
pub fn rough_field<R: Rng>(n: usize, rng: &mut R) -> Field {
    Field((0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect())
}

/// Sum of a few Gaussian bumps with random sign, centre and width.
pub fn smooth_field<R: Rng>(grid: &RadialGrid, rng: &mut R) -> Field {
    let r_max = grid.r_max();
    let bumps: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(0.0..0.6 * r_max),
                rng.gen_range(0.03 * r_max..0.25 * r_max),
            )
        })
        .collect();
    grid.sample(|r| {
        bumps
            .iter()
            .map(|(c, m, s)| c * (-((r - m) / s).powi(2)).exp())
            .sum()
    })
}

/// Nonnegative, not identically zero load: alternately rough (sparse
/// uniform values) and smooth (positive bumps).
pub fn nonnegative_load<R: Rng>(grid: &RadialGrid, rng: &mut R) -> Field {
    let n = grid.n_nodes();
    loop {
        let h = if rng.gen_bool(0.5) {
            let density = rng.gen_range(0.05..1.0);
            Field(
                (0..n)
                    .map(|_| {
                        if rng.gen_bool(density) {
                            rng.gen_range(0.0..1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )
        } else {
            let mut f = smooth_field(grid, rng);
            for x in f.iter_mut() {
                *x = x.abs();
            }
            f
        };
        if h.iter().any(|&x| x > 0.0) {
            return h;
        }
    }
}
