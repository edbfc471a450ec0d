//! Ingestion of the public PGM-style record format: one record per
//! compressed archive entry, each record an .npz with a 16-frame image
//! stack (8 context then 8 choices), a scalar correct-choice index and a
//! 12-element meta target. Frames are rescaled to the model resolution
//! and normalized to [0,1] on load.

use image::imageops::FilterType;
use image::{ImageBuffer, Luma};
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{Image, ProblemSource, RPMProblem, NUM_CHOICES, NUM_CONTEXT};
use crate::error::{Error, Result};
use crate::nets::{META_BITS, RES};

#[derive(Debug, Clone)]
enum NpyData {
    U8(Vec<u8>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone)]
struct NpyArray {
    shape: Vec<usize>,
    data: NpyData,
}

impl NpyArray {
    fn len(&self) -> usize {
        match &self.data {
            NpyData::U8(v) => v.len(),
            NpyData::I32(v) => v.len(),
            NpyData::I64(v) => v.len(),
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
        }
    }

    fn as_f32_pixels(&self) -> Vec<f32> {
        match &self.data {
            NpyData::U8(v) => v.iter().map(|p| *p as f32 / 255.0).collect(),
            NpyData::I32(v) => v.iter().map(|p| (*p as f32 / 255.0).clamp(0.0, 1.0)).collect(),
            NpyData::I64(v) => v.iter().map(|p| (*p as f32 / 255.0).clamp(0.0, 1.0)).collect(),
            NpyData::F32(v) => v.iter().map(|p| p.clamp(0.0, 1.0)).collect(),
            NpyData::F64(v) => v.iter().map(|p| (*p as f32).clamp(0.0, 1.0)).collect(),
        }
    }

    fn scalar_i64(&self) -> Option<i64> {
        if self.len() != 1 {
            return None;
        }
        Some(match &self.data {
            NpyData::U8(v) => v[0] as i64,
            NpyData::I32(v) => v[0] as i64,
            NpyData::I64(v) => v[0],
            NpyData::F32(v) => v[0] as i64,
            NpyData::F64(v) => v[0] as i64,
        })
    }

    fn as_i64_vec(&self) -> Vec<i64> {
        match &self.data {
            NpyData::U8(v) => v.iter().map(|p| *p as i64).collect(),
            NpyData::I32(v) => v.iter().map(|p| *p as i64).collect(),
            NpyData::I64(v) => v.clone(),
            NpyData::F32(v) => v.iter().map(|p| *p as i64).collect(),
            NpyData::F64(v) => v.iter().map(|p| *p as i64).collect(),
        }
    }
}

fn parse_npy(bytes: &[u8], field: &str) -> Result<NpyArray> {
    let err = |msg: String| Error::record(format!("{field}: {msg}"));
    if bytes.len() < 10 || &bytes[0..6] != b"\x93NUMPY" {
        return Err(err("not an npy payload".into()));
    }
    let major = bytes[6];
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12,
        ),
        v => return Err(err(format!("unsupported npy version {v}"))),
    };
    let header_end = header_start + header_len;
    if bytes.len() < header_end {
        return Err(err("truncated npy header".into()));
    }
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|_| err("npy header is not utf-8".into()))?;

    let descr = extract_quoted(header, "descr").ok_or_else(|| err("missing descr".into()))?;
    if header.contains("'fortran_order': True") {
        return Err(err("fortran-order arrays are not supported".into()));
    }
    let shape = extract_shape(header).ok_or_else(|| err("missing shape".into()))?;
    let count: usize = shape.iter().product::<usize>().max(1);

    let payload = &bytes[header_end..];
    let need = |elem: usize| -> Result<()> {
        if payload.len() < count * elem {
            Err(err(format!(
                "payload too short: need {} bytes, have {}",
                count * elem,
                payload.len()
            )))
        } else {
            Ok(())
        }
    };
    let data = match descr.as_str() {
        "|u1" | "<u1" | "u1" => {
            need(1)?;
            NpyData::U8(payload[..count].to_vec())
        }
        "<i4" => {
            need(4)?;
            NpyData::I32(
                payload[..count * 4]
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        "<i8" => {
            need(8)?;
            NpyData::I64(
                payload[..count * 8]
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        "<f4" => {
            need(4)?;
            NpyData::F32(
                payload[..count * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        "<f8" => {
            need(8)?;
            NpyData::F64(
                payload[..count * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        d => return Err(err(format!("unsupported dtype {d:?}"))),
    };
    Ok(NpyArray { shape, data })
}

fn extract_quoted(header: &str, key: &str) -> Option<String> {
    let at = header.find(&format!("'{key}'"))?;
    let rest = &header[at + key.len() + 2..];
    let open = rest.find('\'')?;
    let rest = &rest[open + 1..];
    let close = rest.find('\'')?;
    Some(rest[..close].to_string())
}

fn extract_shape(header: &str) -> Option<Vec<usize>> {
    let at = header.find("'shape'")?;
    let rest = &header[at..];
    let open = rest.find('(')?;
    let close = rest.find(')')?;
    let inner = &rest[open + 1..close];
    let mut out = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse::<usize>().ok()?);
    }
    Some(out)
}

fn write_npy<W: Write>(w: &mut W, descr: &str, shape: &[usize], payload: &[u8]) -> Result<()> {
    let shape_str = match shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_str}, }}");
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');
    w.write_all(b"\x93NUMPY\x01\x00")?;
    w.write_all(&(header.len() as u16).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

fn bilinear_to_res(frame: Vec<f32>, h: usize, w: usize) -> Vec<f32> {
    if h == RES && w == RES {
        return frame;
    }
    let img: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, frame).expect("frame size checked");
    let resized = image::imageops::resize(&img, RES as u32, RES as u32, FilterType::Triangle);
    resized.into_raw()
}

/// Loads one record from an .npz blob.
pub fn load_record(blob: &[u8]) -> Result<RPMProblem> {
    let mut zip = zip::ZipArchive::new(Cursor::new(blob))
        .map_err(|e| Error::record(format!("record is not an npz archive: {e}")))?;
    let mut arrays = std::collections::HashMap::new();
    for i in 0..zip.len() {
        let mut entry = zip
            .by_index(i)
            .map_err(|e| Error::record(format!("bad archive entry: {e}")))?;
        let name = entry.name().trim_end_matches(".npy").to_string();
        let mut bytes = Vec::new();
        entry
            .read_to_end(&mut bytes)
            .map_err(|e| Error::record(format!("{name}: read failed: {e}")))?;
        arrays.insert(name.clone(), parse_npy(&bytes, &name)?);
    }

    let image = arrays
        .get("image")
        .ok_or_else(|| Error::record("image: missing from record"))?;
    let target = arrays
        .get("target")
        .ok_or_else(|| Error::record("target: missing from record"))?;
    let meta = arrays
        .get("meta_target")
        .ok_or_else(|| Error::record("meta_target: missing from record"))?;

    // Accept (16,H,W), (H,W,16) or a flat stack of 16 square frames.
    let frames = NUM_CONTEXT + NUM_CHOICES;
    let (h, w, frames_first) = match image.shape.as_slice() {
        [n, h, w] if *n == frames => (*h, *w, true),
        [h, w, n] if *n == frames => (*h, *w, false),
        [flat] if flat % frames == 0 => {
            let side = ((*flat / frames) as f64).sqrt() as usize;
            if side * side * frames != *flat {
                return Err(Error::record(format!(
                    "image: flat stack of {flat} values is not 16 square frames"
                )));
            }
            (side, side, true)
        }
        s => {
            return Err(Error::record(format!(
                "image: expected a 16-frame stack, got shape {s:?}"
            )))
        }
    };
    if image.len() != frames * h * w {
        return Err(Error::record("image: payload does not match shape"));
    }

    let pixels = image.as_f32_pixels();
    let mut panels = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut frame = Vec::with_capacity(h * w);
        if frames_first {
            frame.extend_from_slice(&pixels[f * h * w..(f + 1) * h * w]);
        } else {
            for y in 0..h {
                for x in 0..w {
                    frame.push(pixels[(y * w + x) * frames + f]);
                }
            }
        }
        panels.push(Image {
            h: RES,
            w: RES,
            data: bilinear_to_res(frame, h, w),
        });
    }

    let idx = target
        .scalar_i64()
        .ok_or_else(|| Error::record("target: expected a scalar index"))?;
    if !(0..NUM_CHOICES as i64).contains(&idx) {
        return Err(Error::record(format!(
            "target: index {idx} outside [0,{}]",
            NUM_CHOICES - 1
        )));
    }

    let meta_vals = meta.as_i64_vec();
    if meta_vals.len() != META_BITS {
        return Err(Error::record(format!(
            "meta_target: expected {META_BITS} entries, got {}",
            meta_vals.len()
        )));
    }
    let mut meta_bits = [0u8; META_BITS];
    for (i, v) in meta_vals.iter().enumerate() {
        if !(0..=1).contains(v) {
            return Err(Error::record(format!(
                "meta_target: entry {i} is {v}, expected 0 or 1"
            )));
        }
        meta_bits[i] = *v as u8;
    }

    let choices = panels.split_off(NUM_CONTEXT);
    RPMProblem::new(panels, choices, idx as usize, meta_bits, vec![])
}

fn record_to_npz(problem: &RPMProblem) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    {
        let mut zip = zip::ZipWriter::new(&mut buf);
        let opts = zip::write::SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Deflated);

        let mut pixels = Vec::with_capacity(16 * RES * RES);
        for img in problem.context.iter().chain(problem.choices.iter()) {
            pixels.extend(img.data.iter().map(|p| (p * 255.0).round() as u8));
        }
        zip.start_file("image.npy", opts)
            .map_err(|e| Error::record(format!("npz write failed: {e}")))?;
        write_npy(&mut zip, "|u1", &[16, RES, RES], &pixels)?;

        zip.start_file("target.npy", opts)
            .map_err(|e| Error::record(format!("npz write failed: {e}")))?;
        write_npy(
            &mut zip,
            "<i8",
            &[],
            &(problem.target_index as i64).to_le_bytes(),
        )?;

        zip.start_file("meta_target.npy", opts)
            .map_err(|e| Error::record(format!("npz write failed: {e}")))?;
        write_npy(&mut zip, "|u1", &[META_BITS], &problem.meta)?;

        zip.finish()
            .map_err(|e| Error::record(format!("npz write failed: {e}")))?;
    }
    Ok(buf.into_inner())
}

/// Writes problems as a zip archive of .npz records.
pub fn write_archive<'a>(
    problems: impl Iterator<Item = &'a RPMProblem>,
    path: &Path,
) -> Result<usize> {
    let file = std::fs::File::create(path)?;
    let mut zip = zip::ZipWriter::new(file);
    let opts = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Deflated);
    let mut n = 0;
    for problem in problems {
        zip.start_file(format!("{n:06}.npz"), opts)
            .map_err(|e| Error::record(format!("archive write failed: {e}")))?;
        let blob = record_to_npz(problem)?;
        zip.write_all(&blob)?;
        n += 1;
    }
    zip.finish()
        .map_err(|e| Error::record(format!("archive write failed: {e}")))?;
    Ok(n)
}

/// Random access into an archive of records without loading everything.
pub struct PgmArchive {
    path: PathBuf,
    names: Vec<String>,
    zip: Mutex<zip::ZipArchive<std::fs::File>>,
}

pub fn load_archive_index(path: &Path) -> Result<PgmArchive> {
    let file = std::fs::File::open(path)?;
    let zip = zip::ZipArchive::new(file)
        .map_err(|e| Error::record(format!("{}: not a zip archive: {e}", path.display())))?;
    let mut names: Vec<String> = zip.file_names().map(|s| s.to_string()).collect();
    names.sort();
    Ok(PgmArchive {
        path: path.to_path_buf(),
        names,
        zip: Mutex::new(zip),
    })
}

impl PgmArchive {
    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl ProblemSource for PgmArchive {
    fn len(&self) -> usize {
        self.names.len()
    }

    fn get(&self, index: usize) -> Result<RPMProblem> {
        let name = self
            .names
            .get(index)
            .ok_or_else(|| Error::record(format!("record index {index} out of range")))?;
        let mut zip = self.zip.lock().expect("archive lock");
        let mut entry = zip
            .by_name(name)
            .map_err(|e| Error::record(format!("{name}: {e}")))?;
        let mut bytes = Vec::new();
        entry
            .read_to_end(&mut bytes)
            .map_err(|e| Error::record(format!("{name}: read failed: {e}")))?;
        load_record(&bytes)
    }
}
