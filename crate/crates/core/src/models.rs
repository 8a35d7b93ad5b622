//! Reference models used by the tests, the validation suite and the demo.

use std::f64::consts::PI;

use crate::config::*;

fn base(lengths: &[f64], b0: f64, potential: PotentialSpec, nx: usize, nk: usize) -> ModelSpec {
    let lattice = LatticeSpec::new(lengths).expect("valid lattice");
    let flux_index = check_flux_admissibility(&lattice, b0).expect("admissible flux");
    let tol = Tolerances::defaults(&lattice);
    ModelSpec {
        lattice,
        magnetic: MagneticSpec { b0, flux_index },
        potential,
        slow: SlowFieldSpec::default(),
        band: 1,
        disc: Discretization {
            nx,
            nk,
            stencil_order: 4,
        },
        tol,
        epsilons: [8, 16, 32, 64]
            .iter()
            .map(|&d| Epsilon::inverse_of(d))
            .collect(),
        twist: GaugeTwist::default(),
    }
}

fn cos_mode(index: [i32; 2], amp: f64) -> FourierMode {
    FourierMode {
        index,
        cos: amp,
        sin: 0.0,
    }
}

/// Free particle on the lattice `2 pi Z`.
pub fn free_1d(nx: usize) -> ModelSpec {
    base(&[2.0 * PI], 0.0, PotentialSpec::default(), nx, 32)
}

/// Mathieu crystal: `a = 2 pi`, `V = 2 cos x`.
pub fn mathieu(nx: usize) -> ModelSpec {
    let v = PotentialSpec {
        constant: 0.0,
        modes: vec![cos_mode([1, 0], 2.0)],
    };
    base(&[2.0 * PI], 0.0, v, nx, 32)
}

/// Mathieu crystal driven by `W = 0.3 cos y` and `A = 0.2 + 0.1 cos y`.
pub fn mathieu_driven(nx: usize) -> ModelSpec {
    let mut s = mathieu(nx);
    s.slow.a[0] = SlowScalar::cosine(0.2, 0.1, [1, 0]);
    s.slow.w = SlowScalar::cosine(0.0, 0.3, [1, 0]);
    s
}

/// Driven Mathieu crystal with the extra gauge phase `0.4 sin(2 pi k)`, so that
/// the Berry connection varies over the zone.
pub fn mathieu_twisted(nx: usize) -> ModelSpec {
    let mut s = mathieu_driven(nx);
    s.twist = GaugeTwist {
        modes: vec![FourierMode {
            index: [1, 0],
            cos: 0.0,
            sin: 0.4,
        }],
    };
    s
}

/// Mathieu crystal with only `W = 0.3 cos y`.
pub fn mathieu_w(nx: usize) -> ModelSpec {
    let mut s = mathieu(nx);
    s.slow.w = SlowScalar::cosine(0.0, 0.3, [1, 0]);
    s
}

/// Unit square cell, `B0 = 4 pi` (one flux quantum pair), no potential.
pub fn landau(nx: usize) -> ModelSpec {
    base(&[1.0, 1.0], 4.0 * PI, PotentialSpec::default(), nx, 8)
}

/// Unit square cell, `B0 = 4 pi`, `V = v (cos 2 pi x1 + cos 2 pi x2)`.
pub fn magnetic_lattice(nx: usize, v: f64) -> ModelSpec {
    let pot = PotentialSpec {
        constant: 0.0,
        modes: vec![cos_mode([1, 0], v), cos_mode([0, 1], v)],
    };
    base(&[1.0, 1.0], 4.0 * PI, pot, nx, 8)
}

/// Unit square cell without field, `V = -v (cos 2 pi x1 + cos 2 pi x2)`.
pub fn square_well(nx: usize, v: f64) -> ModelSpec {
    let pot = PotentialSpec {
        constant: 0.0,
        modes: vec![cos_mode([1, 0], -v), cos_mode([0, 1], -v)],
    };
    base(&[1.0, 1.0], 0.0, pot, nx, 8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for s in [
            free_1d(16),
            mathieu(32),
            mathieu_driven(32),
            mathieu_twisted(32),
            landau(12),
            magnetic_lattice(12, 2.0),
            square_well(12, 20.0),
        ] {
            s.validate().unwrap();
            let back = load_spec(&s.to_toml()).unwrap();
            assert_eq!(back, s);
        }
    }
}
