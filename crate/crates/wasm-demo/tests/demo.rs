use revdeblur_wasm::{exit_policy, tile_origins, BlurPair};

const TABLE: &str = "class\tdec1\tdec2\tdec3\tdec4\tcount
1\t11.134\t0.642\t0.351\t0.178\t1
2\t10.959\t0.406\t0.211\t0.100\t1
3\t9.184\t0.214\t0.105\t0.047\t1
4\t6.215\t0.121\t0.050\t0.021\t1
5\t3.468\t0.079\t0.024\t0.011\t1
6\t2.380\t0.047\t0.016\t0.009\t1
";

#[test]
fn blur_pair_gives_rgba_buffers() {
    let pair = BlurPair::new(24, 32, 3, 7.0, 0.5, 0.0).unwrap();
    assert_eq!(pair.sharp_rgba().len(), 24 * 32 * 4);
    assert_eq!(pair.blur_rgba().len(), 24 * 32 * 4);
    assert!(pair.blur_rgba().chunks(4).all(|p| p[3] == 255));
    assert!(pair.psnr() > 10.0 && pair.psnr() < 100.0);
    let identity = BlurPair::new(24, 32, 3, 1.0, 0.0, 0.0).unwrap();
    assert_eq!(identity.sharp_rgba(), identity.blur_rgba());
    assert!(BlurPair::new(4, 4, 0, 9.0, 0.0, 0.0).is_err());
}

#[test]
fn exit_policy_explorer() {
    assert_eq!(exit_policy(TABLE, 0.05, false).unwrap(), format!("4,4,3,3,2,1;{}", 17.0 / 24.0));
    assert!(exit_policy(TABLE, 0.05, true).unwrap().starts_with("4,4,3,2,2,1;"));
    assert!(exit_policy("nonsense", 0.05, false).is_err());
}

#[test]
fn tile_origins_cover_the_image() {
    assert_eq!(tile_origins(384, 800, 384, 352).unwrap(), "0,0 0,352 0,416");
    assert!(tile_origins(100, 100, 32, 64).is_err());
}
