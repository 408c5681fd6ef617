//! Reference designs used by the acceptance suite, the examples, and the CLI
//! (`--bundled <name>`).

use super::{
    AdditiveDGP, AdditiveSpec, DgpSpec, DiscreteQuantileDGP, LateDGP, LateSpec, ShockSpec,
    DEFAULT_U_GRID,
};
use crate::normal;
use crate::pwl::unit_grid;

pub const NAMES: &[&str] = &[
    "quantile-2x2x3",
    "quantile-no-interaction",
    "quantile-vanishing-interaction",
    "linear-additive",
    "late-chain",
    "late-mte",
    "late-mte-homogeneous",
];

pub fn by_name(name: &str) -> Option<DgpSpec> {
    Some(match name {
        "quantile-2x2x3" => DgpSpec::Quantile(quantile_2x2x3().to_spec()),
        "quantile-no-interaction" => DgpSpec::Quantile(quantile_no_interaction().to_spec()),
        "quantile-vanishing-interaction" => {
            DgpSpec::Quantile(quantile_vanishing_interaction().to_spec())
        }
        "linear-additive" => DgpSpec::Additive(linear_additive().spec().clone()),
        "late-chain" => DgpSpec::Late(late_chain().spec().clone()),
        "late-mte" => DgpSpec::Late(late_mte(true).spec().clone()),
        "late-mte-homogeneous" => DgpSpec::Late(late_mte(false).spec().clone()),
        _ => return None,
    })
}

const Z_MARGINAL_3: [f64; 3] = [0.3, 0.4, 0.3];
// sum_z P(z) kappa_z = 0 keeps sum_z F(u|z) P(z) = u
const KAPPA: [f64; 3] = [0.5, 0.0, -0.5];

/// `P(D = 1 | u, w, z) = a_u + b 1(w=2) + c 1(z=2) + d_u 1(z=3) + e_u 1(w=1, z=2)`.
///
/// For binary D and W with three Z values the relevance determinant equals
/// `e_u * d_u`, so the interaction term controls identification.
fn quantile_design(interaction: impl Fn(f64) -> f64) -> DiscreteQuantileDGP {
    let grid = unit_grid(DEFAULT_U_GRID);
    DiscreteQuantileDGP::from_fns(
        2,
        2,
        3,
        &grid,
        |d, w, u| d as f64 + 0.5 * w as f64 + (1.0 + 0.5 * (d + 1) as f64) * u + 0.3 * u * u,
        |z, u| u + KAPPA[z] * u * (1.0 - u),
        Z_MARGINAL_3.to_vec(),
        vec![vec![0.5, 0.5], vec![0.4, 0.6], vec![0.6, 0.4]],
        |u, w, z| {
            let a = 0.3 + 0.2 * u;
            let b = if w == 1 { 0.15 } else { 0.0 };
            let c = if z == 1 { 0.1 } else { 0.0 };
            let d = if z == 2 { 0.25 - 0.05 * u } else { 0.0 };
            let e = if w == 0 && z == 1 {
                interaction(u)
            } else {
                0.0
            };
            let p1 = a + b + c + d + e;
            vec![p1, 1.0 - p1]
        },
    )
    .expect("bundled quantile design is valid")
}

/// Identified 2x2x3 design: the W x Z interaction is active at every u.
pub fn quantile_2x2x3() -> DiscreteQuantileDGP {
    quantile_design(|_| 0.2)
}

/// Additive selection without any W x Z interaction: M(u) is singular for all u.
pub fn quantile_no_interaction() -> DiscreteQuantileDGP {
    quantile_design(|_| 0.0)
}

/// Interaction `0.4 (u - 1/2)` that vanishes exactly at u = 0.5.
pub fn quantile_vanishing_interaction() -> DiscreteQuantileDGP {
    quantile_design(|u| 0.4 * (u - 0.5))
}

/// Linear additive design `Y = 1 + 2D + 0.5W + 0.3 (Z - E[Z]) + V` with an
/// endogenous binary treatment (codes 1, 2) whose take-up depends on the
/// noise rank and on the W x Z interaction.
pub fn linear_additive() -> AdditiveDGP {
    let r_grid = unit_grid(11);
    let z_marginal = Z_MARGINAL_3.to_vec();
    let mean_z: f64 = z_marginal
        .iter()
        .enumerate()
        .map(|(z, p)| (z + 1) as f64 * p)
        .sum();
    let selection = (0..2)
        .map(|w| {
            (0..3)
                .map(|z| {
                    r_grid
                        .iter()
                        .map(|&r| {
                            let (wf, zf) = (w as f64, z as f64);
                            let p2 = 0.05 + 0.5 * r + 0.05 * wf + 0.05 * zf + 0.1 * wf * zf;
                            vec![1.0 - p2, p2]
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let spec = AdditiveSpec {
        d_card: 2,
        w_card: 2,
        z_card: 3,
        h: (1..=2)
            .map(|d| {
                (1..=2)
                    .map(|w| 1.0 + 2.0 * d as f64 + 0.5 * w as f64)
                    .collect()
            })
            .collect(),
        g: (1..=3).map(|z| 0.3 * (z as f64 - mean_z)).collect(),
        noise_scale: vec![1.0; 3],
        r_grid,
        selection,
        z_marginal,
        w_given_z: vec![vec![0.5, 0.5], vec![0.4, 0.6], vec![0.6, 0.4]],
    };
    AdditiveDGP::from_spec(spec).expect("bundled additive design is valid")
}

/// Three W values and three Z values with exact local-irrelevance links
/// `P(1, z=1) = P(2, z=1)` and `P(2, z=2) = P(3, z=2)` but no direct 1-3 link.
/// At z = 3 the propensities are (0.30, 0.45, 0.60), and the complier effect of
/// moving W from 1 to 2 at z = 3 equals 1.5.
pub fn late_chain() -> LateDGP {
    let g_index = vec![
        vec![0.40, 0.20, 0.30],
        vec![0.40, 0.50, 0.45],
        vec![0.70, 0.50, 0.60],
    ];
    let h1 = vec![1.0, 1.7, 2.1];
    let h0 = vec![0.0, 0.2, 0.6];
    let (rho0, rho1) = (0.5, -0.3);
    let mu0 = vec![0.0, 0.3, -0.2];
    let (p, p2) = (0.30, 0.45);
    let selection_term =
        (rho1 - rho0) * (normal::pdf_at_quantile(p) - normal::pdf_at_quantile(p2)) / (p2 - p);
    let mu1_z3 = 1.5 - (h1[1] - h0[1]) + mu0[2] - selection_term;
    let spec = LateSpec {
        w_values: vec![1.0, 2.0, 3.0],
        z_card: 3,
        z_marginal: vec![1.0 / 3.0; 3],
        w_given_z: vec![vec![1.0 / 3.0; 3]; 3],
        g_index,
        h_levels: vec![h0, h1],
        shock: ShockSpec {
            mu0,
            mu1: vec![0.4, 0.1, mu1_z3],
            rho0,
            rho1,
            sigma0: 1.0,
            sigma1: 1.0,
        },
    };
    LateDGP::from_spec(spec).expect("bundled chain design is valid")
}

/// Twenty-one W knots on [0, 1] and three Z values.
///
/// At z = 1 the propensity `0.1 + 0.8 w` is strictly increasing; at z = 2 and
/// z = 3 it is symmetric about w = 0.5 and w = 0.475, so the two reflections
/// link every knot to every other knot. Direct effects are linear in w.
/// With `heterogeneous`, `E[Y_1 - Y_0 | V = p]` moves with `Phi^{-1}(p)`.
pub fn late_mte(heterogeneous: bool) -> LateDGP {
    let n = 21;
    let w_values: Vec<f64> = (0..n).map(|k| k as f64 / 20.0).collect();
    let g_index = (0..n)
        .map(|k| {
            let kf = k as f64;
            vec![
                0.1 + 0.8 * w_values[k],
                0.3 + 0.4 * (1.0 - (kf - 10.0).abs() / 10.0),
                0.25 + 0.5 * (1.0 - (kf - 9.5).abs() / 10.5),
            ]
        })
        .collect();
    let (rho0, rho1) = if heterogeneous {
        (0.2, -0.6)
    } else {
        (0.2, 0.2)
    };
    let spec = LateSpec {
        w_values: w_values.clone(),
        z_card: 3,
        z_marginal: vec![0.4, 0.3, 0.3],
        w_given_z: vec![vec![1.0 / n as f64; n]; 3],
        g_index,
        h_levels: vec![
            w_values.iter().map(|w| 0.5 * w).collect(),
            w_values.iter().map(|w| 1.0 + 0.8 * w).collect(),
        ],
        shock: ShockSpec {
            mu0: vec![0.0, 0.2, 0.4],
            mu1: vec![0.5, 0.6, 0.9],
            rho0,
            rho1,
            sigma0: 1.0,
            sigma1: 1.0,
        },
    };
    LateDGP::from_spec(spec).expect("bundled MTE design is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_name_resolves() {
        for name in NAMES {
            let spec = by_name(name).unwrap();
            let text = spec.to_json().unwrap();
            assert!(DgpSpec::from_json(&text).is_ok(), "{name}");
        }
        assert!(by_name("nope").is_none());
    }

    #[test]
    fn quantile_designs_satisfy_total_probability() {
        let grid = unit_grid(101);
        for dgp in [
            quantile_2x2x3(),
            quantile_no_interaction(),
            quantile_vanishing_interaction(),
        ] {
            assert!(dgp.total_probability_gap(&grid) <= 1e-8);
        }
    }
}
