use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rsfr_net::backbone::{parameter_count, Backbone, BackboneConfig, ForwardOptions};
use rsfr_net::fusion::SfiConfig;
use rsfr_net::graph::Graph;
use rsfr_net::params::{Init, ParamStore};
use rsfr_net::Tensor;

const TOY_PARAMS: usize = 305_424;
const TOY_PARAMS_WITH_SFI: usize = 356_776;

#[test]
fn toy_parameter_counts_are_pinned() {
    let cfg = BackboneConfig::toy();
    let plain = parameter_count(&cfg, None).unwrap();
    let fused = parameter_count(&cfg, Some(&SfiConfig::default())).unwrap();
    assert_eq!((plain, fused), (TOY_PARAMS, TOY_PARAMS_WITH_SFI));
}

#[test]
fn parameter_naming_is_deterministic() {
    let build = |seed| {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Backbone::new(&mut Init::new(&mut store, &mut rng), "fr", &BackboneConfig::toy(), Some(&SfiConfig::default())).unwrap();
        store.names().to_vec()
    };
    let a = build(1);
    assert_eq!(a, build(2));
    assert!(a.iter().all(|n| n.starts_with("fr.")));
    assert!(a.contains(&"fr.enc0.sfi.conv.weight".to_string()));
    assert!(a.contains(&"fr.enc1.sfi.fc2.bias".to_string()));
}

#[test]
fn removing_the_bottleneck_changes_a_trained_like_network() {
    let cfg = BackboneConfig::toy();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Backbone::new(&mut Init::new(&mut store, &mut rng), "hr", &cfg, None).unwrap();
    for name in ["hr.head.weight", "hr.head.bias"] {
        let id = store.id(name).unwrap();
        let (r, c) = store.get(id).shape();
        *store.get_mut(id) = Tensor::uniform(r, c, 0.1, &mut rng);
    }
    let x = Tensor::uniform(96 * 96, 1, 0.5, &mut rng).map(|v| v + 0.5);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = net.forward(&mut g, &store, xv, None, ForwardOptions::default());
    let y0 = net.forward(&mut g, &store, xv, None, ForwardOptions { zero_bottleneck: true });
    assert_ne!(g.value(y), g.value(y0));
}

#[test]
fn paper_widths_and_depths_forward_pass() {
    let paper = BackboneConfig::paper();
    assert_eq!(paper.stage_size(3), 6);
    let cfg = BackboneConfig {
        input_size: 32,
        ..paper.clone()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = Backbone::new(&mut Init::new(&mut store, &mut rng), "hr", &cfg, None).unwrap();
    assert_eq!(store.num_scalars(), parameter_count(&paper, None).unwrap());
    let x = Tensor::from_fn(32 * 32, 1, |i, _| ((i / 32) as f64 / 5.0).sin().abs());
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = net.forward(&mut g, &store, xv, None, ForwardOptions::default());
    assert_eq!(g.value(y), &x);
}
