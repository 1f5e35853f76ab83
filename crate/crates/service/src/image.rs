use tessera::{Error, Result, TensorMetaData};

/// Encodes premultiplied RGBA8 pixels as a straight-alpha RGBA8 PNG.
pub fn encode_png(width: u32, height: u32, premultiplied: &[u8]) -> Result<Vec<u8>> {
    assert_eq!(premultiplied.len(), width as usize * height as usize * 4);
    let straight: Vec<u8> = premultiplied
        .chunks_exact(4)
        .flat_map(|p| {
            let a = p[3];
            if a == 0 {
                [0, 0, 0, 0]
            } else {
                let un = |c: u8| ((c as u32 * 255 + a as u32 / 2) / a as u32).min(255) as u8;
                [un(p[0]), un(p[1]), un(p[2]), a]
            }
        })
        .collect();
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width, height);
    enc.set_color(png::ColorType::Rgba);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
    w.write_image_data(&straight)
        .map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
    w.finish().map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
    Ok(out)
}

/// The logical pixels of frame tile `pos` (row, column) as tightly packed
/// RGBA8 rows: `(width, height, pixels)`.
pub fn tile_pixels(frame: &TensorMetaData, pos: &[u64], chunk: &[u8]) -> Result<(u32, u32, Vec<u8>)> {
    let (begin, end) = frame.chunk_logical_region(pos)?;
    let h = (end[0] - begin[0]) as usize;
    let w = (end[1] - begin[1]) as usize;
    let stride = frame.chunk_size()[1] as usize * 4;
    let mut px = Vec::with_capacity(w * h * 4);
    for r in 0..h {
        px.extend_from_slice(&chunk[r * stride..r * stride + w * 4]);
    }
    Ok((w as u32, h as u32, px))
}
