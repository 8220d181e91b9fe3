use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rsfr_net::backbone::{BackboneConfig, ForwardOptions};
use rsfr_net::fusion::{Sfi, SfiConfig};
use rsfr_net::gradcheck::{check_gradients, check_model};
use rsfr_net::loss::{hybrid_loss, LossWeights};
use rsfr_net::model::{ModelConfig, Rsfr};
use rsfr_net::params::{Init, ParamStore};
use rsfr_net::perceptual::RandomConvExtractor;
use rsfr_net::vss::{VssBlock, VssDims};
use rsfr_net::Tensor;

fn tiny_model() -> Rsfr {
    let mut m = Rsfr::new(&ModelConfig {
        backbone: BackboneConfig {
            n_res_blocks: 2,
            embed_dim: 4,
            scale_factors: vec![1, 2],
            patch_size: 2,
            state_dim: 2,
            input_size: 8,
            expand: 1,
            attn_heads: 2,
            mlp_ratio: 1,
        },
        sfi: SfiConfig {
            attention_reduction: 2,
            ..SfiConfig::default()
        },
        seed: 5,
    })
    .unwrap();
    // move the zero heads off zero so every parameter carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for name in ["hr.head.weight", "hr.head.bias", "fr.head.weight", "fr.head.bias"] {
        let id = m.store.id(name).unwrap();
        let t = m.store.get(id);
        let (r, c) = t.shape();
        *m.store.get_mut(id) = Tensor::uniform(r, c, 0.3, &mut rng);
    }
    m
}

#[test]
fn whole_objective_gradient_matches_finite_differences() {
    let m = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let zf = Tensor::uniform(64, 1, 0.5, &mut rng).map(|v| v + 0.5);
    let gt = Tensor::uniform(64, 1, 0.5, &mut rng).map(|v| v + 0.5);
    let prior = Tensor::uniform(64, 3, 0.5, &mut rng).map(|v| v + 0.5);
    let ex = RandomConvExtractor::with_channels(3, &[2, 2]);
    let r = check_model(&m.store, &[zf], 1e-5, Some(2), 8, |g, s, v| {
        let coarse = m.hr.forward(g, s, v[0], None, ForwardOptions::default());
        let p = g.constant(prior.clone());
        let refined = m.fr.forward(g, s, coarse, Some(p), ForwardOptions::default());
        let t = g.constant(gt.clone());
        hybrid_loss(g, refined, t, &LossWeights::new(1.0, 1.0, 0.1), Some(&ex), 8, 8)
            .unwrap()
            .total
    });
    assert!(r.tensors > 100);
    assert!(r.passed(1e-4), "{r:?}");
}

#[test]
fn vss_block_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let block = VssBlock::new(&mut Init::new(&mut store, &mut rng), "vss", VssDims::new(4, 2, 3));
    let x = Tensor::uniform(12, 4, 1.0, &mut rng);
    let proj = Tensor::uniform(12, 4, 1.0, &mut rng);
    let r = check_model(&store, &[x], 1e-4, None, 0, |g, s, v| {
        let y = block.forward(g, s, v[0], 3, 4);
        let p = g.constant(proj.clone());
        let prod = g.mul(y, p);
        g.sum_all(prod)
    });
    assert!(r.passed(1e-4), "{r:?}");
}

#[test]
fn sfi_gradient_wrt_features_and_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let sfi = Sfi::new(&mut Init::new(&mut store, &mut rng), "sfi", 8, &SfiConfig::default());
    let f = Tensor::uniform(16, 8, 1.0, &mut rng);
    let pr = Tensor::uniform(16, 3, 0.5, &mut rng).map(|v| v + 0.5);
    let proj = Tensor::uniform(16, 8, 1.0, &mut rng);
    let r = check_model(&store, &[f, pr], 1e-6, None, 0, |g, s, v| {
        let (o, _) = sfi.forward(g, s, v[0], v[1], 4, 4);
        let p = g.constant(proj.clone());
        let prod = g.mul(o, p);
        g.sum_all(prod)
    });
    assert!(r.passed(1e-4), "{r:?}");
}

#[test]
fn scan_gradient_longer_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (l, d, n) = (16, 4, 3);
    let inputs = vec![
        Tensor::uniform(l, d, 1.0, &mut rng),
        Tensor::uniform(l, d, 0.4, &mut rng).map(|v| v + 0.5),
        Tensor::uniform(d, n, 0.5, &mut rng),
        Tensor::uniform(l, n, 1.0, &mut rng),
        Tensor::uniform(l, n, 1.0, &mut rng),
        Tensor::uniform(1, d, 1.0, &mut rng),
    ];
    let w = Tensor::uniform(l, d, 1.0, &mut rng);
    let r = check_gradients(&inputs, 1e-6, |g, v| {
        let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]);
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv);
        g.sum_all(prod)
    });
    assert!(r.passed(1e-4), "{r:?}");
}
