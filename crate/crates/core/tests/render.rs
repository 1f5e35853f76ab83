use proptest::prelude::*;

use tessera::operators::{build_lod, constant, from_array, single_level_lod, LodPyramid};
use tessera::render::{
    entry_exit_points, frame_metadata, grey_ramp, image_view, raycast, ray_segment, slice_view,
    view_level, CameraState, Compositing, PanZoom, RaycasterConfig, TransferFunction,
};
use tessera::{
    DataState, ElementType, EmbeddingData, EngineConfig, Error, Location, Node, Runtime,
    ScalarType, TensorMetaData,
};

fn md(size: &[u64], chunk: &[u64], t: ElementType) -> TensorMetaData {
    TensorMetaData::new(size.to_vec(), chunk.to_vec(), t).unwrap()
}

fn rt() -> Runtime {
    Runtime::new(EngineConfig::default()).unwrap()
}

fn f32s(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect()
}

/// Dense 3-D volume of size n^3 with value f(distance from center).
fn ball_values(n: u64, f: impl Fn(f64) -> f64) -> Vec<f32> {
    let c = n as f64 / 2.0;
    let mut v = Vec::with_capacity((n * n * n) as usize);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let d = [z, y, x].map(|g| g as f64 + 0.5 - c);
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                v.push(f(r) as f32);
            }
        }
    }
    v
}

fn volume(values: &[f32], n: u64, brick: u64) -> Node {
    let bytes = values.iter().flat_map(|x| x.to_le_bytes()).collect();
    from_array(bytes, md(&[n; 3], &[brick; 3], ScalarType::F32.into()), None).unwrap()
}

fn smooth_ball(n: u64) -> Vec<f32> {
    let r0 = n as f64 * 0.4;
    ball_values(n, |r| (1.0 - r / r0).clamp(0.0, 1.0))
}

struct Frame {
    w: u64,
    h: u64,
    tw: u64,
    th: u64,
    float: bool,
}

impl Frame {
    fn md(&self) -> TensorMetaData {
        let m = frame_metadata(self.w, self.h, self.tw, self.th).unwrap();
        if self.float {
            m.with_element_type(ElementType::vec(ScalarType::F32, 4).unwrap())
        } else {
            m
        }
    }
}

fn render(
    rt: &Runtime,
    lod: &LodPyramid,
    cam: &CameraState,
    cfg: &RaycasterConfig,
    tf: &TransferFunction,
    frame: &Frame,
) -> Vec<u8> {
    let fmd = frame.md();
    let eep = entry_exit_points(lod.finest().metadata(), lod.embedding(0), &fmd, cam).unwrap();
    let node = raycast(lod, &eep, cfg, tf, &fmd).unwrap();
    rt.resolve_dense(&node).unwrap()
}

fn eep_dense(lod: &LodPyramid, cam: &CameraState, frame: &Frame) -> Vec<f64> {
    let eep = entry_exit_points(lod.finest().metadata(), lod.embedding(0), &frame.md(), cam).unwrap();
    f32s(&rt().resolve_dense(&eep).unwrap())
}

/// Straightforward single-level raymarcher over a dense unit-spacing volume,
/// sampling at the same positions as the raycaster.
fn reference(vol: &[f32], n: u64, eep: &[f64], frame: &Frame, tf: (f64, f64), comp: Compositing, factor: f64) -> Vec<[f64; 4]> {
    let mut out = Vec::new();
    let ramp = |v: f64| ((v - tf.0) / (tf.1 - tf.0)).clamp(0.0, 1.0);
    for p in 0..(frame.w * frame.h) as usize {
        let e = &eep[p * 8..p * 8 + 4];
        let x = &eep[p * 8 + 4..p * 8 + 8];
        let mut acc = [0.0; 4];
        if x[3] > e[3] {
            let a: Vec<f64> = (0..3).map(|i| e[i] * n as f64).collect();
            let b: Vec<f64> = (0..3).map(|i| x[i] * n as f64).collect();
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
            let step = factor;
            let mut u = 0.0;
            while len > 0.0 && u < len {
                let g: Vec<usize> = (0..3)
                    .map(|i| {
                        let q = a[i] + (b[i] - a[i]) / len * u;
                        (q.floor().max(0.0) as usize).min(n as usize - 1)
                    })
                    .collect();
                let v = vol[(g[0] * n as usize + g[1]) * n as usize + g[2]] as f64;
                let t = ramp(v);
                match comp {
                    Compositing::Dvr => {
                        let alpha = 1.0 - (1.0 - t).powf(step);
                        if alpha > 0.0 {
                            let w = (1.0 - acc[3]) * alpha;
                            for k in 0..3 {
                                acc[k] += w * t;
                            }
                            acc[3] += w;
                            if acc[3] >= 0.99 {
                                break;
                            }
                        }
                    }
                    Compositing::Mop => {
                        if t > acc[3] {
                            acc = [t * t, t * t, t * t, t];
                        }
                    }
                }
                u += step;
            }
        }
        out.push(acc);
    }
    out
}

fn cfg(comp: Compositing, es: bool) -> RaycasterConfig {
    RaycasterConfig {
        compositing: comp,
        use_const_table: es,
        ..RaycasterConfig::default()
    }
}

#[test]
fn camera_for_unit_cube_at_fov_90() {
    let m = md(&[1, 1, 1], &[1, 1, 1], ScalarType::F32.into());
    let cam = CameraState::for_volume(&m, &EmbeddingData::unit(3), 90.0).unwrap();
    let d: f64 = (0..3).map(|i| (cam.eye[i] - 0.5).powi(2)).sum::<f64>().sqrt();
    assert!((d - 3f64.sqrt() / 2.0).abs() < 1e-12);
    assert_eq!(cam.look_at, [0.5, 0.5, 0.5]);
    assert!(cam.eye.iter().all(|e| *e > 0.5));
}

#[test]
fn doubling_spacing_doubles_eye_distance() {
    let m = md(&[8, 8, 8], &[8, 8, 8], ScalarType::F32.into());
    let a = CameraState::for_volume(&m, &EmbeddingData::unit(3), 40.0).unwrap();
    let b = CameraState::for_volume(&m, &EmbeddingData::new(vec![2.0; 3]).unwrap(), 40.0).unwrap();
    let dist = |c: &CameraState| (0..3).map(|i| (c.eye[i] - c.look_at[i]).powi(2)).sum::<f64>().sqrt();
    assert!((dist(&b) - 2.0 * dist(&a)).abs() < 1e-9);
}

#[test]
fn box_center_projects_to_frame_center() {
    let m = md(&[10, 20, 30], &[10, 10, 10], ScalarType::F32.into());
    let cam = CameraState::for_volume(&m, &EmbeddingData::unit(3), 50.0).unwrap();
    let (r, c) = cam.project(cam.look_at, 640, 480).unwrap();
    assert!((r - 240.0).abs() < 1e-9 && (c - 320.0).abs() < 1e-9);
}

#[test]
fn invalid_cameras_are_rejected() {
    assert!(CameraState::new([0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], 60.0, 0.1, 10.0).is_err());
    assert!(CameraState::new([0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], 180.0, 0.1, 10.0).is_err());
    assert!(CameraState::new([0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], 60.0, 1.0, 0.5).is_err());
    assert!(CameraState::new([0.0; 3], [0.0; 3], [0.0, 1.0, 0.0], 60.0, 0.1, 1.0).is_err());
    let flat = md(&[8, 8], &[8, 8], ScalarType::F32.into());
    assert!(CameraState::for_volume(&flat, &EmbeddingData::unit(2), 60.0).is_err());
}

#[test]
fn grey_ramp_examples() {
    let tf = grey_ramp(0.0, 1.0).unwrap();
    assert_eq!(tf.eval(0.0), [0.0; 4]);
    assert_eq!(tf.eval(1.0), [1.0; 4]);
    assert_eq!(tf.eval(0.5), [0.5; 4]);
    assert_eq!(tf.eval(-3.0), [0.0; 4]);
    assert_eq!(tf.eval(7.0), [1.0; 4]);
    assert!(grey_ramp(1.0, 1.0).is_err());
}

#[test]
fn center_ray_crosses_the_box_along_its_diagonal() {
    let m = md(&[1, 1, 1], &[1, 1, 1], ScalarType::F32.into());
    let cam = CameraState::for_volume(&m, &EmbeddingData::unit(3), 60.0).unwrap();
    let (e, x) = ray_segment(&cam, [1.0; 3], 16, 16, 33, 33).unwrap();
    let r = 3f64.sqrt() / 2.0;
    let dist = r / 30f64.to_radians().tan();
    for i in 0..3 {
        assert!((e[i] - 1.0).abs() < 1e-9 && x[i].abs() < 1e-9);
    }
    assert!((e[3] - (dist - r)).abs() < 1e-9);
    assert!((x[3] - (dist + r)).abs() < 1e-9);
    assert!(e[3] < x[3]);
    assert!(ray_segment(&cam, [1.0; 3], 0, 0, 33, 33).is_none());
}

#[test]
fn eep_tensor_marks_misses_with_zeros() {
    let lod = single_level_lod(&volume(&smooth_ball(8), 8, 8));
    let cam = CameraState::for_volume(lod.finest().metadata(), lod.embedding(0), 60.0).unwrap();
    let f = Frame { w: 33, h: 33, tw: 16, th: 16, float: true };
    let e = eep_dense(&lod, &cam, &f);
    assert!(e[..8].iter().all(|v| *v == 0.0));
    let c = (16 * 33 + 16) * 8;
    assert!(e[c + 3] < e[c + 7]);
}

#[test]
fn eye_inside_volume_starts_at_near_plane() {
    let cam = CameraState::new([0.5, 0.5, 0.5], [0.5, 0.5, 1.0], [0.0, 1.0, 0.0], 60.0, 0.1, 10.0).unwrap();
    let (e, x) = ray_segment(&cam, [1.0; 3], 8, 8, 17, 17).unwrap();
    assert!((e[3] - 0.1).abs() < 1e-12);
    assert!((e[2] - 0.6).abs() < 1e-12 && (e[0] - 0.5).abs() < 1e-12);
    assert!((x[2] - 1.0).abs() < 1e-12 && (x[3] - 0.5).abs() < 1e-12);
}

proptest! {
    #[test]
    fn ray_segments_match_brute_force_scan(
        ex in -3.0f64..4.0, ey in -3.0f64..4.0, ez in -3.0f64..4.0,
        row in 0u64..9, col in 0u64..9,
    ) {
        let size = [1.0, 2.0, 1.5];
        let cam = CameraState::new([ez, ey, ex], [0.5, 1.0, 0.75], [0.0, 1.0, 0.0], 70.0, 0.05, 20.0);
        prop_assume!(cam.is_ok());
        let cam = cam.unwrap();
        let dir = cam.ray_dir(row, col, 9, 9);
        let (f, _, _) = cam.basis();
        let cos: f64 = (0..3).map(|i| dir[i] * f[i]).sum();
        let inside = |t: f64| {
            let p: Vec<f64> = (0..3).map(|i| cam.eye[i] + dir[i] * t).collect();
            t * cos >= cam.near && t * cos <= cam.far && (0..3).all(|i| p[i] >= 0.0 && p[i] <= size[i])
        };
        let steps = 200_000;
        let dt = 30.0 / steps as f64;
        let hits: Vec<f64> = (0..steps).map(|k| k as f64 * dt).filter(|t| inside(*t)).collect();
        match ray_segment(&cam, size, row, col, 9, 9) {
            None => prop_assert!(hits.len() <= 1),
            Some((e, x)) => {
                prop_assert!(!hits.is_empty() || x[3] - e[3] < 2.0 * dt);
                if let (Some(a), Some(b)) = (hits.first(), hits.last()) {
                    prop_assert!((a - e[3]).abs() <= 2.0 * dt);
                    prop_assert!((b - x[3]).abs() <= 2.0 * dt);
                }
            }
        }
    }
}

#[test]
fn dvr_and_mop_match_scalar_reference() {
    let n = 32;
    let vol = smooth_ball(n);
    let lod = single_level_lod(&volume(&vol, n, 8));
    let cam = CameraState::for_volume(lod.finest().metadata(), lod.embedding(0), 40.0).unwrap();
    let frame = Frame { w: 40, h: 30, tw: 16, th: 16, float: true };
    let tf = grey_ramp(0.0, 1.0).unwrap();
    let eep = eep_dense(&lod, &cam, &frame);
    for comp in [Compositing::Dvr, Compositing::Mop] {
        let got = f32s(&render(&rt(), &lod, &cam, &cfg(comp, true), &tf, &frame));
        let want = reference(&vol, n, &eep, &frame, (0.0, 1.0), comp, 0.5);
        let mut lit = 0;
        for (p, w) in want.iter().enumerate() {
            for k in 0..4 {
                assert!((got[p * 4 + k] - w[k]).abs() <= 1e-5, "{comp:?} pixel {p} lane {k}");
            }
            lit += (w[3] > 0.0) as usize;
        }
        assert!(lit > 100);
    }
}

#[test]
fn uniform_zero_volume_renders_final_without_brick_fetches() {
    let m = md(&[64; 3], &[16; 3], ScalarType::F32.into());
    let src = constant(0.0, m, None).unwrap();
    let lod = single_level_lod(&src);
    let cam = CameraState::for_volume(lod.finest().metadata(), lod.embedding(0), 45.0).unwrap();
    let frame = Frame { w: 32, h: 32, tw: 16, th: 16, float: false };
    let fmd = frame.md();
    let eep = entry_exit_points(lod.finest().metadata(), lod.embedding(0), &fmd, &cam).unwrap();
    let node = raycast(&lod, &eep, &cfg(Compositing::Dvr, true), &grey_ramp(0.0, 1.0).unwrap(), &fmd).unwrap();
    let r = rt();
    let out = r.resolve_dense(&node).unwrap();
    assert!(out.iter().all(|b| *b == 0));
    let s = r.stats();
    assert_eq!(s.published(&src), 0);
    // every tile was published exactly once, as final
    assert_eq!(s.published(&node), 4);
}

#[test]
fn opaque_ball_mop_center_pixel() {
    let n = 32;
    let vol = ball_values(n, |r| if r <= 10.0 { 0.8 } else { 0.0 });
    let lod = single_level_lod(&volume(&vol, n, 8));
    let cam = CameraState::for_volume(lod.finest().metadata(), lod.embedding(0), 60.0).unwrap();
    let frame = Frame { w: 33, h: 33, tw: 33, th: 33, float: true };
    let out = f32s(&render(&rt(), &lod, &cam, &cfg(Compositing::Mop, true), &grey_ramp(0.0, 1.0).unwrap(), &frame));
    let c = (16 * 33 + 16) * 4;
    assert!((out[c + 3] - 0.8).abs() < 1e-6);
    assert!((out[c] - 0.64).abs() < 1e-6);
    assert!(out[..4].iter().all(|v| *v == 0.0));
}

#[test]
fn tiles_equal_whole_frame_and_es_is_transparent() {
    let n = 48;
    let vol = smooth_ball(n);
    let lod = single_level_lod(&volume(&vol, n, 8));
    let cam = CameraState::for_volume(lod.finest().metadata(), lod.embedding(0), 35.0).unwrap();
    let tf = grey_ramp(0.1, 0.9).unwrap();
    for comp in [Compositing::Dvr, Compositing::Mop] {
        let whole = render(&rt(), &lod, &cam, &cfg(comp, true), &tf, &Frame { w: 50, h: 40, tw: 50, th: 40, float: false });
        let tiled = render(&rt(), &lod, &cam, &cfg(comp, true), &tf, &Frame { w: 50, h: 40, tw: 13, th: 7, float: false });
        let no_es = render(&rt(), &lod, &cam, &cfg(comp, false), &tf, &Frame { w: 50, h: 40, tw: 16, th: 16, float: false });
        assert_eq!(whole, tiled);
        assert_eq!(whole, no_es);
        assert!(whole.iter().any(|b| *b > 0));
    }
}

#[test]
fn progressive_runs_under_small_capacity_match_single_pass() {
    let n = 64;
    let vol = smooth_ball(n);
    let tf = grey_ramp(0.0, 1.0).unwrap();
    let frame = Frame { w: 64, h: 64, tw: 8, th: 8, float: false };
    let make = || single_level_lod(&volume(&vol, n, 8));
    let big = rt();
    let lod = make();
    let cam = CameraState::for_volume(lod.finest().metadata(), lod.embedding(0), 40.0).unwrap();
    for es in [false, true] {
        let c = RaycasterConfig {
            rounds_per_pass: 1,
            ..cfg(Compositing::Dvr, es)
        };
        let want = render(&big, &lod, &cam, &c, &tf, &frame);
        let volume_bytes = n * n * n * 4;
        let small = Runtime::new(EngineConfig::default().with_ram_capacity(volume_bytes / 4)).unwrap();
        let got = render(&small, &make(), &cam, &c, &tf, &frame);
        assert_eq!(got, want);
        let (used, cap, _) = small.store_usage(Location::Ram).unwrap();
        assert!(used <= cap);
    }
}

#[test]
fn preview_request_returns_before_final() {
    let n = 64;
    let vol = smooth_ball(n);
    let lod = build_lod(&volume(&vol, n, 16), None).unwrap();
    assert_eq!(lod.num_levels(), 3);
    let cam = CameraState::for_volume(lod.finest().metadata(), lod.embedding(0), 40.0).unwrap();
    let frame = Frame { w: 32, h: 32, tw: 32, th: 32, float: false };
    let fmd = frame.md();
    let eep = entry_exit_points(lod.finest().metadata(), lod.embedding(0), &fmd, &cam).unwrap();
    let c = RaycasterConfig {
        rounds_per_pass: 1,
        ..RaycasterConfig::default()
    };
    let node = raycast(&lod, &eep, &c, &grey_ramp(0.0, 1.0).unwrap(), &fmd).unwrap();
    let r = rt();
    let mut states = Vec::new();
    for _ in 0..20 {
        let t = r.resolve_at(&node, &[vec![0, 0]], Location::Ram, DataState::Preview).unwrap();
        states.push(t[0].state());
        if t[0].state() == DataState::Final {
            break;
        }
    }
    assert_eq!(states[0], DataState::Preview);
    assert_eq!(*states.last().unwrap(), DataState::Final);
    let fin = r.resolve(&node, &[vec![0, 0]]).unwrap();
    assert_eq!(fin[0].bytes(), rt().resolve(&node, &[vec![0, 0]]).unwrap()[0].bytes());
}

#[test]
fn single_level_equals_pyramid_forced_to_level_zero() {
    let n = 64;
    let src = volume(&smooth_ball(n), n, 16);
    let tf = grey_ramp(0.0, 1.0).unwrap();
    let single = single_level_lod(&src);
    let pyramid = build_lod(&src, None).unwrap();
    let cam = CameraState::for_volume(src.metadata(), &EmbeddingData::unit(3), 40.0).unwrap();
    let frame = Frame { w: 24, h: 24, tw: 12, th: 12, float: false };
    let c = RaycasterConfig {
        lod_bias: -100.0,
        ..RaycasterConfig::default()
    };
    assert_eq!(render(&rt(), &single, &cam, &c, &tf, &frame), render(&rt(), &pyramid, &cam, &c, &tf, &frame));
}

#[test]
fn far_views_sample_coarse_levels() {
    let n = 64;
    let levels: Vec<Node> = (0..3)
        .map(|l| {
            let k = n >> l;
            let bytes = smooth_ball(k).iter().flat_map(|x| x.to_le_bytes()).collect();
            let e = EmbeddingData::new(vec![(1u64 << l) as f64; 3]).unwrap();
            from_array(bytes, md(&[k; 3], &[16; 3], ScalarType::F32.into()), Some(e)).unwrap()
        })
        .collect();
    let src = levels[0].clone();
    let pyramid = LodPyramid::new(levels).unwrap();
    let m = src.metadata();
    let mut cam = CameraState::for_volume(m, &EmbeddingData::unit(3), 40.0).unwrap();
    for i in 0..3 {
        cam.eye[i] = 32.0 + (cam.eye[i] - 32.0) * 8.0;
    }
    cam.far *= 8.0;
    let frame = Frame { w: 32, h: 32, tw: 32, th: 32, float: false };
    let r = rt();
    let out = render(&r, &pyramid, &cam, &cfg(Compositing::Mop, false), &grey_ramp(0.0, 1.0).unwrap(), &frame);
    assert!(out.iter().any(|b| *b > 0));
    assert!(r.stats().published(pyramid.level(2)) > 0);
    assert_eq!(r.stats().published(&src), 0);
}

#[test]
fn raycast_rejects_mismatched_inputs() {
    let lod = single_level_lod(&volume(&smooth_ball(8), 8, 8));
    let cam = CameraState::for_volume(lod.finest().metadata(), lod.embedding(0), 40.0).unwrap();
    let f = frame_metadata(16, 16, 8, 8).unwrap();
    let eep = entry_exit_points(lod.finest().metadata(), lod.embedding(0), &f, &cam).unwrap();
    let other = frame_metadata(16, 16, 4, 4).unwrap();
    let tf = grey_ramp(0.0, 1.0).unwrap();
    assert!(raycast(&lod, &eep, &RaycasterConfig::default(), &tf, &other).is_err());
    let bad = RaycasterConfig {
        sample_distance_factor: 0.0,
        ..RaycasterConfig::default()
    };
    assert!(raycast(&lod, &eep, &bad, &tf, &f).is_err());
    assert!(raycast(&lod, &lod.levels()[0], &RaycasterConfig::default(), &tf, &f).is_err());
}

fn u8_volume(size: &[u64], chunk: &[u64]) -> (Vec<u8>, Node) {
    let n: u64 = size.iter().product();
    let data: Vec<u8> = (0..n).map(|i| (i * 7 % 251) as u8).collect();
    let node = from_array(data.clone(), md(size, chunk, ScalarType::U8.into()), None).unwrap();
    (data, node)
}

#[test]
fn slice_view_identity_shows_source_values() {
    let (data, vol) = u8_volume(&[4, 16, 16], &[2, 8, 8]);
    let lod = single_level_lod(&vol);
    let f = frame_metadata(16, 16, 8, 8).unwrap();
    let tf = grey_ramp(0.0, 255.0).unwrap();
    let node = slice_view(&lod, 0, 3, None, &PanZoom::default(), &tf, [0; 4], &f).unwrap();
    let out = rt().resolve_dense(&node).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let v = data[(3 * 16 + y) * 16 + x];
            assert_eq!(out[(y * 16 + x) * 4 + 3], v);
        }
    }
}

#[test]
fn slice_view_zoom_half_uses_level_one() {
    let (_, vol) = u8_volume(&[16, 16, 16], &[8, 8, 8]);
    let lod = build_lod(&vol, None).unwrap();
    assert_eq!(lod.num_levels(), 2);
    assert_eq!(view_level(&lod, [1, 2], 0.5), 1);
    assert_eq!(view_level(&lod, [1, 2], 1.0), 0);
    let f = frame_metadata(8, 8, 8, 8).unwrap();
    let tf = grey_ramp(0.0, 255.0).unwrap();
    let view = PanZoom { zoom: 0.5, pan: [0.0, 0.0] };
    let node = slice_view(&lod, 0, 5, None, &view, &tf, [0; 4], &f).unwrap();
    let out = rt().resolve_dense(&node).unwrap();
    let l1 = rt().resolve_dense(lod.level(1)).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            assert_eq!(out[(y * 8 + x) * 4 + 3], l1[(2 * 8 + y) * 8 + x]);
        }
    }
}

#[test]
fn slice_view_background_and_validation() {
    let (_, vol) = u8_volume(&[4, 8, 8], &[4, 8, 8]);
    let lod = single_level_lod(&vol);
    let f = frame_metadata(8, 8, 4, 4).unwrap();
    let tf = grey_ramp(0.0, 255.0).unwrap();
    let view = PanZoom { zoom: 1.0, pan: [100.0, 0.0] };
    let bg = [10, 20, 30, 255];
    let out = rt().resolve_dense(&slice_view(&lod, 0, 1, None, &view, &tf, bg, &f).unwrap()).unwrap();
    assert!(out.chunks(4).all(|p| p == bg));
    assert!(matches!(
        slice_view(&lod, 0, 4, None, &PanZoom::default(), &tf, bg, &f),
        Err(Error::InvalidCoordinate(_))
    ));
    assert!(slice_view(&lod, 3, 0, None, &PanZoom::default(), &tf, bg, &f).is_err());
}

#[test]
fn slice_view_of_4d_tensor_uses_time_index() {
    let (data, vol) = u8_volume(&[3, 2, 4, 4], &[1, 2, 4, 4]);
    let lod = single_level_lod(&vol);
    let f = frame_metadata(4, 4, 4, 4).unwrap();
    let tf = grey_ramp(0.0, 255.0).unwrap();
    let node = slice_view(&lod, 1, 1, Some(vec![2, 0, 0, 0]), &PanZoom::default(), &tf, [0; 4], &f).unwrap();
    let out = rt().resolve_dense(&node).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(out[(y * 4 + x) * 4 + 3], data[((2 * 2 + 1) * 4 + y) * 4 + x]);
        }
    }
}

fn rgb_pyramid(levels: usize, n: u64, chunk: u64) -> LodPyramid {
    let mut nodes = Vec::new();
    let mut size = n;
    let mut spacing = 1.0;
    for l in 0..levels {
        let t = ElementType::vec(ScalarType::U8, 3).unwrap();
        let data: Vec<u8> = (0..size * size * 3).map(|i| ((i + l as u64 * 50) % 256) as u8).collect();
        let m = md(&[size, size], &[chunk, chunk], t);
        let e = EmbeddingData::new(vec![spacing; 2]).unwrap();
        nodes.push(from_array(data, m, Some(e)).unwrap());
        size /= 2;
        spacing *= 2.0;
    }
    LodPyramid::new(nodes).unwrap()
}

#[test]
fn image_view_level_thresholds() {
    let lod = rgb_pyramid(4, 64, 16);
    assert_eq!(view_level(&lod, [0, 1], 1.0), 0);
    assert_eq!(view_level(&lod, [0, 1], 2.0), 0);
    assert_eq!(view_level(&lod, [0, 1], 0.6), 0);
    assert_eq!(view_level(&lod, [0, 1], 0.5), 1);
    assert_eq!(view_level(&lod, [0, 1], 0.25), 2);
    assert_eq!(view_level(&lod, [0, 1], 0.01), 3);
}

#[test]
fn image_view_tiles_have_no_seams() {
    let lod = rgb_pyramid(3, 64, 16);
    let view = PanZoom { zoom: 0.7, pan: [-3.0, 5.5] };
    let whole = frame_metadata(60, 50, 60, 50).unwrap();
    let tiled = frame_metadata(60, 50, 17, 9).unwrap();
    let a = rt().resolve_dense(&image_view(&lod, &view, None, [0; 4], &whole).unwrap()).unwrap();
    let b = rt().resolve_dense(&image_view(&lod, &view, None, [0; 4], &tiled).unwrap()).unwrap();
    assert_eq!(a, b);
    // level 0 at zoom 1 shows source pixels opaque
    let f = frame_metadata(64, 64, 32, 32).unwrap();
    let out = rt().resolve_dense(&image_view(&lod, &PanZoom::default(), None, [0; 4], &f).unwrap()).unwrap();
    let src = rt().resolve_dense(lod.level(0)).unwrap();
    for p in 0..64 * 64 {
        assert_eq!(&out[p * 4..p * 4 + 3], &src[p * 3..p * 3 + 3]);
        assert_eq!(out[p * 4 + 3], 255);
    }
}

#[test]
fn image_view_premultiplies_rgba() {
    let t = ElementType::vec(ScalarType::U8, 4).unwrap();
    let img = from_array(vec![200, 100, 50, 128], md(&[1, 1], &[1, 1], t), None).unwrap();
    let lod = single_level_lod(&img);
    let f = frame_metadata(1, 1, 1, 1).unwrap();
    let out = rt().resolve_dense(&image_view(&lod, &PanZoom::default(), None, [0; 4], &f).unwrap()).unwrap();
    assert_eq!(out, vec![100, 50, 25, 128]);
    let vol = volume(&[0.0; 8], 2, 2);
    assert!(image_view(&single_level_lod(&vol), &PanZoom::default(), None, [0; 4], &f).is_err());
}
