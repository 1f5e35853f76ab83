use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tessera::io::{
    build_lod_offline, import_raw, open_chunked, open_pyramid, save_tensor, ChunkedFileHeader,
    ChunkedWriter, PyramidManifest,
};
use tessera::operators::{build_lod, from_array, procedural_lod, single_level_lod, Generator};
use tessera::render::{entry_exit_points, frame_metadata, grey_ramp, raycast, CameraState, RaycasterConfig};
use tessera::{ElementType, EmbeddingData, EngineConfig, Error, Location, Runtime, ScalarType, TensorMetaData};

fn md(size: &[u64], chunk: &[u64], t: ElementType) -> TensorMetaData {
    TensorMetaData::new(size.to_vec(), chunk.to_vec(), t).unwrap()
}

fn rt() -> Runtime {
    Runtime::new(EngineConfig::default()).unwrap()
}

fn u64_at(b: &[u8], o: usize) -> u64 {
    u64::from_le_bytes(b[o..o + 8].try_into().unwrap())
}

#[test]
fn header_layout_is_little_endian_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("ramp.raw");
    let out = dir.path().join("ramp.plct");
    let data: Vec<u8> = (0..16).collect();
    std::fs::write(&raw, &data).unwrap();
    let m = md(&[4, 4], &[2, 2], ScalarType::U8.into());
    let e = EmbeddingData::new(vec![0.5, 2.0]).unwrap();
    import_raw(&raw, &m, Some(&e), &out).unwrap();
    let b = std::fs::read(&out).unwrap();
    assert_eq!(&b[..4], b"PLCT");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    assert_eq!(b[8], ScalarType::U8.code());
    assert_eq!(b[9], 1);
    assert_eq!(b[10], 2);
    assert_eq!([u64_at(&b, 11), u64_at(&b, 19)], [4, 4]);
    assert_eq!([u64_at(&b, 27), u64_at(&b, 35)], [2, 2]);
    assert_eq!(f64::from_le_bytes(b[43..51].try_into().unwrap()), 0.5);
    assert_eq!(f64::from_le_bytes(b[51..59].try_into().unwrap()), 2.0);
    let header_end = 59 + 4 * 8;
    let offsets: Vec<usize> = (0..4).map(|i| u64_at(&b, 59 + 8 * i) as usize).collect();
    assert_eq!(offsets[0], header_end);
    // chunk (0,1) holds rows 0..2, columns 2..4 of the ramp
    let c = offsets[1];
    assert_eq!(&b[c..c + 4], &[2, 3, 6, 7]);
    let c = offsets[3];
    assert_eq!(&b[c..c + 4], &[10, 11, 14, 15]);
    assert_eq!(b.len(), header_end + 16);
}

#[test]
fn import_4x4_ramp_into_four_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("ramp.raw");
    let out = dir.path().join("ramp.plct");
    let data: Vec<u8> = (0..16).collect();
    std::fs::write(&raw, &data).unwrap();
    let h = import_raw(&raw, &md(&[4, 4], &[2, 2], ScalarType::U8.into()), None, &out).unwrap();
    assert_eq!(h.present_chunks(), 4);
    assert_eq!(rt().resolve_dense(&open_chunked(&out).unwrap()).unwrap(), data);
}

#[test]
fn zero_length_input_is_a_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("empty.raw");
    std::fs::write(&raw, []).unwrap();
    let r = import_raw(&raw, &md(&[2, 2], &[2, 2], ScalarType::U8.into()), None, &dir.path().join("o"));
    assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    std::fs::write(&raw, [0u8; 5]).unwrap();
    let r = import_raw(&raw, &md(&[2, 2], &[2, 2], ScalarType::U8.into()), None, &dir.path().join("o"));
    assert!(matches!(r, Err(Error::ShapeMismatch(_))));
}

#[test]
fn single_chunk_file_holds_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("a.raw");
    let out = dir.path().join("a.plct");
    let data: Vec<u8> = (0..30u16).flat_map(|v| (v * 1000).to_le_bytes()).collect();
    std::fs::write(&raw, &data).unwrap();
    let h = import_raw(&raw, &md(&[5, 6], &[5, 6], ScalarType::U16.into()), None, &out).unwrap();
    assert_eq!(h.offsets.len(), 1);
    let b = std::fs::read(&out).unwrap();
    assert_eq!(&b[h.offsets[0] as usize..], &data[..]);
}

#[test]
fn border_chunks_are_zero_padded() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("a.raw");
    let out = dir.path().join("a.plct");
    std::fs::write(&raw, [9u8; 25]).unwrap();
    let h = import_raw(&raw, &md(&[5, 5], &[4, 4], ScalarType::U8.into()), None, &out).unwrap();
    assert_eq!(h.present_chunks(), 4);
    let b = std::fs::read(&out).unwrap();
    let last = h.offsets[3] as usize;
    let mut want = [0u8; 16];
    want[0] = 9;
    assert_eq!(&b[last..last + 16], &want);
}

#[test]
fn corrupt_magic_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("a.raw");
    let out = dir.path().join("corrupt.plct");
    std::fs::write(&raw, [1u8; 16]).unwrap();
    import_raw(&raw, &md(&[4, 4], &[2, 2], ScalarType::U8.into()), None, &out).unwrap();
    let mut b = std::fs::read(&out).unwrap();
    b[0] = b'X';
    std::fs::write(&out, &b).unwrap();
    let e = open_chunked(&out).unwrap_err();
    assert!(matches!(e, Error::Format { .. }));
    assert!(e.to_string().contains("corrupt.plct"), "{e}");
}

#[test]
fn truncated_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("a.raw");
    let out = dir.path().join("t.plct");
    std::fs::write(&raw, [1u8; 64]).unwrap();
    import_raw(&raw, &md(&[8, 8], &[4, 4], ScalarType::U8.into()), None, &out).unwrap();
    let b = std::fs::read(&out).unwrap();
    for cut in [3, 20, 70, b.len() - 1] {
        std::fs::write(&out, &b[..cut]).unwrap();
        assert!(open_chunked(&out).is_err(), "cut at {cut}");
    }
    assert!(matches!(open_chunked(&dir.path().join("missing.plct")), Err(Error::Io { .. })));
}

#[test]
fn absent_chunks_read_as_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sparse.plct");
    let m = md(&[4, 4], &[2, 2], ScalarType::F32.into());
    let mut w = ChunkedWriter::create(&out, &m, &EmbeddingData::unit(2)).unwrap();
    let payload: Vec<u8> = [1.5f32; 4].iter().flat_map(|v| v.to_le_bytes()).collect();
    w.write_chunk(&[1, 0], &payload).unwrap();
    let h = w.finish().unwrap();
    assert_eq!(h.offsets.iter().filter(|o| **o == 0).count(), 3);
    let r = rt();
    let node = open_chunked(&out).unwrap();
    let c = r.resolve(&node, &[vec![0, 1], vec![1, 0]]).unwrap();
    assert!(c[0].bytes().iter().all(|b| *b == 0));
    assert_eq!(c[1].bytes(), &payload[..]);
    assert_eq!(r.stats().bytes_read, 16);
}

#[test]
fn save_of_open_reproduces_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("a.raw");
    let a = dir.path().join("a.plct");
    let b = dir.path().join("b.plct");
    let data: Vec<u8> = (0..7 * 9 * 3).map(|i| (i * 13 % 256) as u8).collect();
    std::fs::write(&raw, &data).unwrap();
    let m = md(&[7, 9, 3], &[3, 4, 2], ScalarType::U8.into());
    import_raw(&raw, &m, Some(&EmbeddingData::new(vec![1.0, 2.0, 3.0]).unwrap()), &a).unwrap();
    save_tensor(&rt(), &open_chunked(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn save_of_pointwise_chain_matches_dense_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.plct");
    let vals: Vec<f32> = (0..100).map(|i| i as f32 * 0.25).collect();
    let bytes = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
    let src = from_array(bytes, md(&[10, 10], &[4, 4], ScalarType::F32.into()), None).unwrap();
    let node = src.mul_scalar(2.0).unwrap().add_scalar(1.0).unwrap();
    save_tensor(&rt(), &node, &out).unwrap();
    let got = rt().resolve_dense(&open_chunked(&out).unwrap()).unwrap();
    let want: Vec<u8> = vals.iter().flat_map(|v| (v * 2.0 + 1.0).to_le_bytes()).collect();
    assert_eq!(got, want);
}

#[test]
fn save_of_progressive_raycast_stores_final_frame() {
    struct Ball;
    impl Generator for Ball {
        fn name(&self) -> &str {
            "ball"
        }
        fn value(&self, p: &[f64]) -> f64 {
            let r: f64 = p.iter().map(|x| (x - 0.5).powi(2)).sum::<f64>().sqrt();
            (1.0 - 2.5 * r).max(0.0)
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("frame.plct");
    let lod = procedural_lod(
        std::sync::Arc::new(Ball),
        md(&[64; 3], &[16; 3], ScalarType::F32.into()),
        None,
    )
    .unwrap();
    let cam = CameraState::for_volume(lod.finest().metadata(), lod.embedding(0), 40.0).unwrap();
    let f = frame_metadata(32, 32, 16, 16).unwrap();
    let eep = entry_exit_points(lod.finest().metadata(), lod.embedding(0), &f, &cam).unwrap();
    let cfg = RaycasterConfig {
        rounds_per_pass: 1,
        ..RaycasterConfig::default()
    };
    let node = raycast(&lod, &eep, &cfg, &grey_ramp(0.0, 1.0).unwrap(), &f).unwrap();
    save_tensor(&rt(), &node, &out).unwrap();
    let saved = rt().resolve_dense(&open_chunked(&out).unwrap()).unwrap();
    assert_eq!(saved, rt().resolve_dense(&node).unwrap());
    assert!(saved.iter().any(|b| *b > 0));
}

fn random_file(rng: &mut ChaCha8Rng, dir: &Path, i: usize) -> (Vec<u8>, TensorMetaData, std::path::PathBuf) {
    let d = rng.gen_range(1..=4);
    let size: Vec<u64> = (0..d).map(|_| rng.gen_range(1..=9)).collect();
    let chunk: Vec<u64> = size.iter().map(|s| rng.gen_range(1..=*s + 2)).collect();
    let scalar = ScalarType::ALL[rng.gen_range(0..5)];
    let t = ElementType::vec(scalar, rng.gen_range(1..=4)).unwrap();
    let m = md(&size, &chunk, t);
    let data: Vec<u8> = (0..m.num_elements() as usize * t.size()).map(|_| rng.gen()).collect();
    let raw = dir.join(format!("r{i}.raw"));
    std::fs::write(&raw, &data).unwrap();
    (data, m, raw)
}

#[test]
fn roundtrip_of_random_tensors_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..20 {
        let (data, m, raw) = random_file(&mut rng, dir.path(), i);
        let a = dir.path().join(format!("a{i}.plct"));
        let b = dir.path().join(format!("b{i}.plct"));
        import_raw(&raw, &m, None, &a).unwrap();
        let r = rt();
        save_tensor(&r, &open_chunked(&a).unwrap(), &b).unwrap();
        assert_eq!(r.resolve_dense(&open_chunked(&b).unwrap()).unwrap(), data, "tensor {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn header_roundtrips(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, m, raw) = random_file(&mut rng, dir.path(), 0);
        let out = dir.path().join("h.plct");
        let spacing: Vec<f64> = (0..m.num_dims()).map(|_| rng.gen_range(0.1..4.0)).collect();
        let written = import_raw(&raw, &m, Some(&EmbeddingData::new(spacing.clone()).unwrap()), &out).unwrap();
        let read = ChunkedFileHeader::read(&out).unwrap();
        prop_assert_eq!(&read, &written);
        prop_assert_eq!(read.metadata, m);
        prop_assert_eq!(read.spacing, spacing);
    }
}

fn u8_volume_file(dir: &Path, n: u64, chunk: u64) -> std::path::PathBuf {
    let raw = dir.join("vol.raw");
    let data: Vec<u8> = (0..n * n * n)
        .map(|i| {
            let (z, y, x) = (i / (n * n), i / n % n, i % n);
            ((x * 3 + y * 5 + z * 7) % 256) as u8
        })
        .collect();
    std::fs::write(&raw, data).unwrap();
    let out = dir.join("vol.plct");
    import_raw(&raw, &md(&[n; 3], &[chunk; 3], ScalarType::U8.into()), None, &out).unwrap();
    out
}

#[test]
fn offline_lod_of_256_cubed_has_three_levels_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let input = u8_volume_file(dir.path(), 256, 64);
    let manifest = dir.path().join("pyr.json");
    // smaller than the 16 MiB input volume
    let budget = 12 << 20;
    let cfg = EngineConfig {
        max_requests_per_task: 4,
        max_active_tasks_per_operator: 4,
        ..EngineConfig::default().with_ram_capacity(budget)
    };
    let r = Runtime::new(cfg).unwrap();
    let m = build_lod_offline(&r, &input, &manifest, false).unwrap();
    assert_eq!(m.levels.len(), 3);
    for (i, l) in m.levels.iter().enumerate() {
        let h = ChunkedFileHeader::read(&dir.path().join(&l.path)).unwrap();
        assert_eq!(h.metadata.size(), &[256 >> i; 3]);
        assert_eq!(l.spacing, vec![(1u64 << i) as f64; 3]);
    }
    let (_, high, cap) = r.store_usage(Location::Ram).unwrap();
    assert!(high <= cap && cap == budget);
    assert_eq!(PyramidManifest::load(&manifest).unwrap(), m);
}

#[test]
fn offline_lod_matches_in_memory_build_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = u8_volume_file(dir.path(), 48, 16);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let ma = build_lod_offline(&rt(), &input, &a, true).unwrap();
    let mb = build_lod_offline(&rt(), &input, &b, true).unwrap();
    assert_eq!(ma.levels.len(), 3);
    let r = rt();
    let lod = build_lod(&open_chunked(&input).unwrap(), None).unwrap();
    let opened = open_pyramid(&a).unwrap();
    for i in 0..3 {
        let fa = std::fs::read(dir.path().join(&ma.levels[i].path)).unwrap();
        let fb = std::fs::read(dir.path().join(&mb.levels[i].path)).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(r.resolve_dense(opened.level(i)).unwrap(), r.resolve_dense(lod.level(i)).unwrap());
        assert!(opened.const_table(i).is_some());
    }
}

#[test]
fn manifest_const_tables_render_like_built_tables() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("v.raw");
    let n = 32u64;
    let vals: Vec<u8> = (0..n * n * n)
        .map(|i| if i % n < 16 && (i / n) % n < 16 { 200 } else { 0 })
        .collect();
    std::fs::write(&raw, &vals).unwrap();
    let input = dir.path().join("v.plct");
    import_raw(&raw, &md(&[n; 3], &[8; 3], ScalarType::U8.into()), None, &input).unwrap();
    let manifest = dir.path().join("v.json");
    build_lod_offline(&rt(), &input, &manifest, true).unwrap();
    let from_files = open_pyramid(&manifest).unwrap();
    let plain = single_level_lod(&open_chunked(&input).unwrap());
    let cam = CameraState::for_volume(plain.finest().metadata(), plain.embedding(0), 40.0).unwrap();
    let f = frame_metadata(24, 24, 12, 12).unwrap();
    let tf = grey_ramp(0.0, 255.0).unwrap();
    let cfg = RaycasterConfig {
        lod_bias: -10.0,
        ..RaycasterConfig::default()
    };
    let render = |lod| {
        let eep = entry_exit_points(plain.finest().metadata(), plain.embedding(0), &f, &cam).unwrap();
        rt().resolve_dense(&raycast(lod, &eep, &cfg, &tf, &f).unwrap()).unwrap()
    };
    assert_eq!(render(&from_files), render(&plain));
}

#[test]
fn manifest_errors_name_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{\"levels\": 3}").unwrap();
    let e = open_pyramid(&p).unwrap_err();
    assert!(e.to_string().contains("bad.json"));
    std::fs::write(&p, "{\"levels\": []}").unwrap();
    assert!(open_pyramid(&p).is_err());
}
