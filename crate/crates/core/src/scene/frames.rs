//! Frame files: `<base>.ppm` holds the 8-bit RGB raster (binary P6) and
//! `<base>.pgm` the depth raster as 16-bit binary PGM (P5, maxval 65535) in
//! whole millimeters, `0` meaning invalid.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use super::{RgbdFrame, SceneError};

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}

pub fn write_frame(base: impl AsRef<Path>, frame: &RgbdFrame) -> Result<(), SceneError> {
    let base = base.as_ref();
    let (w, h) = (frame.width as u32, frame.height as u32);

    let rgb = BufWriter::new(File::create(with_ext(base, "ppm"))?);
    PnmEncoder::new(rgb)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&frame.rgb, w, h, ExtendedColorType::Rgb8)?;

    // The PNM encoder has no 16-bit graymap path; the format is simple enough to write directly.
    let mut depth = BufWriter::new(File::create(with_ext(base, "pgm"))?);
    write!(depth, "P5\n{w} {h}\n65535\n")?;
    for d in &frame.depth {
        let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
        depth.write_all(&mm.to_be_bytes())?;
    }
    depth.flush()?;
    Ok(())
}

pub fn read_frame(base: impl AsRef<Path>) -> Result<RgbdFrame, SceneError> {
    let base = base.as_ref();
    let mut rgb_reader = ImageReader::open(with_ext(base, "ppm"))?;
    rgb_reader.set_format(ImageFormat::Pnm);
    let rgb = rgb_reader.decode()?.to_rgb8();

    let mut depth_reader = ImageReader::open(with_ext(base, "pgm"))?;
    depth_reader.set_format(ImageFormat::Pnm);
    let depth = depth_reader.decode()?.to_luma16();

    if rgb.dimensions() != depth.dimensions() {
        return Err(SceneError::FrameMismatch(format!(
            "rgb {:?} vs depth {:?}",
            rgb.dimensions(),
            depth.dimensions()
        )));
    }
    let (w, h) = rgb.dimensions();
    Ok(RgbdFrame {
        width: w as usize,
        height: h as usize,
        rgb: rgb.into_raw(),
        depth: depth.into_raw().into_iter().map(|mm| mm as f64 / 1000.0).collect(),
        timestamp_us: 0,
    })
}
