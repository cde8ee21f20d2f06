use proptest::prelude::*;

use narrowforge::coupling::{build_ridge_add, RidgeTerm};
use narrowforge::netcore::{ActivationTag, AffineMap, Box, Layer, Network};
use narrowforge::pipeline::{include, project};
use narrowforge::verify::sup_error;

fn term(dim: usize) -> impl Strategy<Value = RidgeTerm> {
    (-3.0..3.0f64, prop::collection::vec(-3.0..3.0f64, dim), -2.0..2.0f64, 0.05..4.0f64)
        .prop_map(|(a, b, c, beta)| RidgeTerm { a, b, c, beta })
}

fn leaky_net() -> impl Strategy<Value = Network> {
    let layer = (prop::collection::vec(-0.4..0.4f64, 4), prop::collection::vec(-1.0..1.0f64, 2), 0.2..5.0f64);
    prop::collection::vec(layer, 1..6).prop_map(|layers| {
        let layers = layers
            .into_iter()
            .map(|(w, b, beta)| {
                let weight = vec![vec![1.0 + w[0], w[1]], vec![w[2], 1.0 + w[3]]];
                Layer::new(AffineMap::new(weight, b).unwrap(), ActivationTag::LeakyRelu(beta))
            })
            .collect();
        Network::new(2, layers, AffineMap::identity(2)).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ridge_add_passes_other_channels_through(t in term(2), x in prop::collection::vec(-1.0..1.0f64, 3)) {
        let domain = Box::cube(3, -1.0, 1.0);
        let net = build_ridge_add(3, &t, &domain).unwrap();
        let y = net.evaluate(&x).unwrap();
        prop_assert!((y[0] - x[0]).abs() <= 1e-12);
        prop_assert!((y[1] - x[1]).abs() <= 1e-12);
        prop_assert!((y[2] - x[2] - t.eval(&x[..2])).abs() <= 1e-9);
    }

    #[test]
    fn refined_grid_never_lowers_sup_error(net in leaky_net(), r in 2usize..8) {
        let domain = Box::unit(2);
        let oracle = |x: &[f64]| vec![x[0].sin(), x[1] * x[0]];
        let coarse = sup_error(&net, &oracle, &domain, r).unwrap().sup_error;
        let fine = sup_error(&net, &oracle, &domain, 2 * r - 1).unwrap().sup_error;
        prop_assert!(fine >= coarse);
    }

    #[test]
    fn project_after_include_is_identity(n in 1usize..4, extra in 0usize..4, x in prop::collection::vec(-5.0..5.0f64, 3)) {
        let d = n + extra;
        let round = Network::compose(&project(d, n).unwrap(), &include(n, d).unwrap()).unwrap();
        prop_assert_eq!(round.evaluate(&x[..n]).unwrap(), x[..n].to_vec());
    }

    #[test]
    fn leaky_networks_invert(net in leaky_net(), x in prop::collection::vec(-1.0..1.0f64, 2)) {
        let y = net.evaluate(&x).unwrap();
        let back = net.invert_evaluate(&y).unwrap();
        prop_assert!((back[0] - x[0]).abs() < 1e-8 && (back[1] - x[1]).abs() < 1e-8);
    }
}
