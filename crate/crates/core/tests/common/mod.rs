/// Small experiment config: 12×12 uniform polar grid, 6×6 fiber, four custom steps.
pub fn small_json(alpha: f64, q: f64, eps: [f64; 4]) -> String {
    format!(
        r#"{{
  "name": "small",
  "cone": {{ "alpha": {alpha}, "beta": 0.5, "r0": 2.0, "q_amplitude": {q} }},
  "base_grid": {{ "spacing": {{ "kind": "uniform", "n_r": 12 }}, "n_theta": 12, "r_min": 0.02 }},
  "fiber": {{ "basis": [[1.0, 0.0], [0.0, 1.0]], "n_f": 6 }},
  "schedule": {{ "kind": "custom", "steps": [
    {{ "s": 0.4, "epsilon": {} }}, {{ "s": 0.3, "epsilon": {} }},
    {{ "s": 0.2, "epsilon": {} }}, {{ "s": 0.15, "epsilon": {} }} ] }},
  "perturbation": {{ "seed": 3 }},
  "taus": [0.1, 0.2],
  "rhos": [0.5, 0.25, 0.125, 0.0625],
  "renorm_rhos": [0.5, 0.25, 0.125, 0.0625],
  "phi": {{ "family": "radial_bump", "width": 1.5, "power": 3 }},
  "psi": {{ "family": "angular_bump", "width": 1.2, "power": 3, "mode": 1, "amplitude": 0.5 }},
  "chi_radius": 0.5,
  "bc": "dirichlet",
  "refinement_floor": false
}}"#,
        eps[0], eps[1], eps[2], eps[3]
    )
}
