use std::path::PathBuf;

use sceneflow::geometry::{ego_flow, FlowEstimate};
use sceneflow::harness::{render_bev_image, RenderConfig};
use sceneflow::synthdata::{generate_scene, SceneConfig};

/// Set `SCENEFLOW_BLESS=1` to rewrite the reference image.
#[test]
fn gt_flow_render_matches_reference() {
    let scene = generate_scene(&SceneConfig::default(), 11).unwrap();
    let pair = scene.pair.quantized();
    let ego = ego_flow(&pair.ego, &pair.cloud_t.positions);
    let residual = pair.gt_residual().unwrap();
    let flow = FlowEstimate::new(ego, residual).unwrap();
    let cfg = RenderConfig { image_size: 128, ..RenderConfig::default() };
    let img = render_bev_image(&pair, &flow, &cfg).unwrap();

    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/bev_gt_seed11.png");
    if std::env::var_os("SCENEFLOW_BLESS").is_some() {
        img.save(&path).unwrap();
    }
    let reference = image::open(&path).expect("reference image present").to_rgb8();
    assert_eq!(reference.dimensions(), img.dimensions());
    let differing = reference.pixels().zip(img.pixels()).filter(|(a, b)| a != b).count();
    assert_eq!(differing, 0, "{differing} pixels differ from the reference");
}
