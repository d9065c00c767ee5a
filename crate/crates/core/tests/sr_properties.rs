mod common;

use common::{random_input, sr_gradient_check};
use gazesr::sr::{SrBackboneConfig, SrInit, SrModel};
use gazesr_tensor::Graph;

#[test]
fn gradients_match_finite_differences() {
    let tiny = SrBackboneConfig {
        embed_dim: 8,
        num_groups: 1,
        blocks_per_group: 1,
        num_heads: 2,
        window_size: 4,
        init: SrInit::Random,
        ..Default::default()
    };
    let (n, worst) = sr_gradient_check(tiny.clone(), 8);
    assert!(n > 30 && worst < 1e-3, "{n} entries, worst relative error {worst:e}");
    // second block is shifted and masked; 6 px pads to 8
    let (n, worst) = sr_gradient_check(SrBackboneConfig { blocks_per_group: 2, scale: 4, ..tiny }, 6);
    assert!(n > 30 && worst < 1e-3, "{n} entries, worst relative error {worst:e}");
}

#[test]
fn shallow_tap_ignores_group_parameters() {
    let cfg = SrBackboneConfig { embed_dim: 8, num_heads: 2, window_size: 4, init: SrInit::Random, ..Default::default() };
    let mut model = SrModel::<f64>::new(&cfg, 3).unwrap();
    let x = random_input(2, 8, 8, 4);
    let taps = |m: &SrModel<f64>| {
        let g = Graph::new(&m.store);
        let o = m.net.forward(&g, g.input(x.clone(), &[2, 3, 8, 8]));
        (g.to_vec(o.shallow), g.to_vec(o.deep))
    };
    let (s0, d0) = taps(&model);
    let prefix = model.net.group_prefix();
    let mut touched = 0;
    for (_, p) in model.store.iter_mut() {
        if p.name.starts_with(&prefix) {
            p.value.iter_mut().for_each(|v| *v = *v * 1.5 + 0.01);
            touched += 1;
        }
    }
    assert!(touched > 0);
    let (s1, d1) = taps(&model);
    assert_eq!(s0, s1);
    assert_ne!(d0, d1);

    let id = model.store.id("conv_first.weight").unwrap();
    model.store.get_mut(id).value[0] += 0.5;
    let (s2, _) = taps(&model);
    assert_ne!(s1, s2);
}
