use qpot::charflow::{init_ring, integrate, launch_exit, FlowOptions, Termination};
use qpot::exit::exit_direction;
use qpot::localqp::{analyze_ep, freidlin_residual, qp_gradient_field};
use qpot::model::{find_equilibria, EpKind, KramersModel};
use qpot::numkit::Vector;

fn kramers() -> qpot::model::SystemModel {
    KramersModel::parse("x1^4/4 - x1^2", 2.0).unwrap().system()
}

fn seeds() -> Vec<Vector> {
    [-1.5, 0.1, 1.5].iter().map(|&x| Vector::from_vec(vec![x, 0.0])).collect()
}

#[test]
fn double_well_end_to_end() {
    let model = kramers();
    let search = find_equilibria(&model, &seeds(), 1e-12).unwrap();
    let kinds: Vec<EpKind> = search.points.iter().map(|p| p.kind).collect();
    assert_eq!(kinds, [EpKind::Attractor, EpKind::Saddle, EpKind::Attractor]);

    for ep in &search.points {
        let ea = analyze_ep(&model, ep).unwrap();
        assert!((ea.chi.unwrap() - 1.0).abs() < 1e-12);
        // the quadratic approximation solves the Freidlin equation to second order
        let x: Vec<f64> = ep.x.iter().map(|c| c + 1e-4).collect();
        let g = qp_gradient_field(&ea, &model, &x).unwrap();
        assert!(freidlin_residual(&model, &g, &x).unwrap() < 1e-10);
    }

    let well = analyze_ep(&model, &search.points[0]).unwrap();
    let opts = FlowOptions::for_equilibrium(&well, 4.0);
    for start in init_ring(&well, 1e-5, 4).unwrap() {
        let ch = integrate(&model, &start, &opts).unwrap();
        assert_eq!(ch.termination, Termination::TimeLimit);
        for s in &ch.samples {
            let (x, v) = (s.x[0], s.x[1]);
            let energy = x.powi(4) / 4.0 - x * x + v * v / 2.0 + 1.0;
            assert!((s.phi - energy).abs() < 1e-8);
        }
    }

    let saddle = analyze_ep(&model, &search.points[1]).unwrap();
    let exit = exit_direction(&saddle, None).unwrap();
    let [a, b] = launch_exit(&saddle, &exit, 1e-6);
    assert!((a.x[0] + b.x[0]).abs() < 1e-15 && a.x[0] != 0.0);
}
