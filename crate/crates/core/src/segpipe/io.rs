//! Flat binary scene and checkpoint files, CSV traces and PGM score maps.
//!
//! All integers are little-endian `u32` unless noted, reals are
//! little-endian `f64`, matrices are row-major.
//!
//! Scene file:
//!
//! ```text
//! "POTSCENE"  u32 version = 1
//! u32 K, N, D, H, W, H_I, W_I
//! u32 U, then U unseen class ids
//! u64 seed
//! f64 noise, text_gap, domain_shift
//! pixels (H·W x D), text (K·N x D), prototypes (K x D), attributes (K·N x D)
//! labels (H_I·W_I x u32), cell labels (H·W x u32), cell parts (H·W x u32)
//! ```
//!
//! Checkpoint file:
//!
//! ```text
//! "POTCKPT1"  u32 version = 1
//! u32 D, d, layers
//! u64 seed
//! u32 T, then T pairs (rows, cols)
//! T tensors in `ModelParams::tensors` order
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::segpipe::model::ModelParams;
use crate::segpipe::scene::{SceneConfig, ToyScene};
use crate::segpipe::train::TraceRow;

const SCENE_MAGIC: &[u8; 8] = b"POTSCENE";
const CKPT_MAGIC: &[u8; 8] = b"POTCKPT1";
const VERSION: u32 = 1;

/// Largest dimension accepted when reading, to fail fast on garbage headers.
const MAX_DIM: u32 = 1 << 20;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn mat(&mut self, m: &Mat) -> Result<()> {
        m.data().iter().try_for_each(|&v| self.f64(v))
    }

    fn ids(&mut self, ids: &[usize]) -> Result<()> {
        ids.iter().try_for_each(|&v| self.u32(v))
    }
}

struct Reader<R: Read>(R);

fn eof(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("file truncated".into())
    } else {
        Error::Io(e)
    }
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(eof)?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u32()?;
        if v as u64 > MAX_DIM as u64 {
            return Err(Error::Format(format!("{what} = {v} exceeds {MAX_DIM}")));
        }
        Ok(v)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Mat::from_vec(rows, cols, data)
    }

    fn ids(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u32()).collect()
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if &self.bytes::<8>()? != magic {
            return Err(Error::Format(format!("missing {} magic", String::from_utf8_lossy(magic))));
        }
        let v = self.u32()?;
        if v != VERSION as usize {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let mut rest = [0u8; 1];
        match self.0.read(&mut rest)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after payload".into())),
        }
    }
}

pub fn write_scene<W: Write>(out: W, scene: &ToyScene) -> Result<()> {
    let c = &scene.config;
    let mut w = Writer(out);
    w.0.write_all(SCENE_MAGIC)?;
    w.u32(VERSION as usize)?;
    for v in [c.classes, c.prompts, c.dim, c.grid.0, c.grid.1, c.image.0, c.image.1] {
        w.u32(v)?;
    }
    w.u32(c.unseen.len())?;
    w.ids(&c.unseen)?;
    w.u64(scene.seed)?;
    for v in [c.noise, c.text_gap, c.domain_shift] {
        w.f64(v)?;
    }
    for m in [&scene.pixels, &scene.text, &scene.prototypes, &scene.attributes] {
        w.mat(m)?;
    }
    let (labels, cells) = scene.raw_labels();
    w.ids(labels)?;
    w.ids(cells)?;
    w.ids(scene.cell_parts())?;
    Ok(w.0.flush()?)
}

pub fn read_scene<R: Read>(input: R) -> Result<ToyScene> {
    let mut r = Reader(input);
    r.header(SCENE_MAGIC)?;
    let mut dims = [0usize; 7];
    for (i, name) in ["K", "N", "D", "H", "W", "H_I", "W_I"].iter().enumerate() {
        dims[i] = r.dim(name)?;
    }
    let [k, n, d, h, w, hi, wi] = dims;
    let u = r.dim("unseen count")?;
    let unseen = r.ids(u)?;
    let seed = r.u64()?;
    let (noise, text_gap, domain_shift) = (r.f64()?, r.f64()?, r.f64()?);
    let config = SceneConfig {
        classes: k,
        prompts: n,
        dim: d,
        grid: (h, w),
        image: (hi, wi),
        noise,
        text_gap,
        domain_shift,
        unseen,
    };
    config.validate().map_err(|e| Error::Format(format!("scene header: {e}")))?;
    let pixels = r.mat(h * w, d)?;
    let text = r.mat(k * n, d)?;
    let prototypes = r.mat(k, d)?;
    let attributes = r.mat(k * n, d)?;
    let labels = r.ids(hi * wi)?;
    let cell_labels = r.ids(h * w)?;
    let cell_parts = r.ids(h * w)?;
    r.finish()?;
    ToyScene::from_parts(config, seed, pixels, text, prototypes, attributes, labels, cell_labels, cell_parts)
}

pub fn save_scene(path: &Path, scene: &ToyScene) -> Result<()> {
    let mut buf = Vec::new();
    write_scene(&mut buf, scene)?;
    Ok(fs::write(path, buf)?)
}

pub fn load_scene(path: &Path) -> Result<ToyScene> {
    read_scene(io::BufReader::new(fs::File::open(path)?))
}

pub fn write_checkpoint<W: Write>(out: W, params: &ModelParams, seed: u64) -> Result<()> {
    params.check_shapes()?;
    let mut w = Writer(out);
    w.0.write_all(CKPT_MAGIC)?;
    w.u32(VERSION as usize)?;
    w.u32(params.input_dim())?;
    w.u32(params.decoder.w_text.cols())?;
    w.u32(params.decoder.layers.len())?;
    w.u64(seed)?;
    let ts = params.tensors();
    w.u32(ts.len())?;
    for t in &ts {
        w.u32(t.rows())?;
        w.u32(t.cols())?;
    }
    for t in &ts {
        w.mat(t)?;
    }
    Ok(w.0.flush()?)
}

/// Returns the parameters and the seed recorded in the header.
pub fn read_checkpoint<R: Read>(input: R) -> Result<(ModelParams, u64)> {
    let mut r = Reader(input);
    r.header(CKPT_MAGIC)?;
    let dim = r.dim("D")?;
    let d = r.dim("d")?;
    let layers = r.dim("layers")?;
    let seed = r.u64()?;
    let count = r.dim("tensor count")?;
    if count != 10 + 8 * layers {
        return Err(Error::Format(format!("{count} tensors for {layers} layers")));
    }
    let shapes = (0..count).map(|_| Ok((r.dim("rows")?, r.dim("cols")?))).collect::<Result<Vec<_>>>()?;
    let ts = shapes.iter().map(|&(rows, cols)| r.mat(rows, cols)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let params = ModelParams::from_tensors(ts, layers).map_err(|e| Error::Format(format!("checkpoint tensors: {e}")))?;
    if params.input_dim() != dim || params.decoder.w_text.cols() != d {
        return Err(Error::Format("checkpoint header disagrees with tensor shapes".into()));
    }
    Ok((params, seed))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, seed: u64) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, seed)?;
    Ok(fs::write(path, buf)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, u64)> {
    read_checkpoint(io::BufReader::new(fs::File::open(path)?))
}

/// Training trace as CSV with a fixed number of decimals.
pub fn write_trace_csv<W: Write>(mut out: W, trace: &[TraceRow]) -> Result<()> {
    writeln!(out, "step,loss,decoder_loss,scoremap_loss,active_classes,pseudo_pixels")?;
    for t in trace {
        writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{},{}",
            t.step, t.loss, t.decoder_loss, t.scoremap_loss, t.active_classes, t.pseudo_pixels
        )?;
    }
    Ok(out.flush()?)
}

/// Binary 8-bit PGM of an `h x w` map, min-max scaled to 0..=255. A
/// constant map is written as all zeros. Returns `(min, max)`.
pub fn write_pgm<W: Write>(mut out: W, values: &[f64], h: usize, w: usize) -> Result<(f64, f64)> {
    if values.len() != h * w {
        return Err(Error::shape("write_pgm", format!("{} values", h * w), format!("{}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("write_pgm: non-finite value".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    write!(out, "P5\n{w} {h}\n255\n")?;
    let px: Vec<u8> = values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    out.write_all(&px)?;
    out.flush()?;
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segpipe::model::DecoderConfig;
    use crate::segpipe::scene::gen_toy_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> ToyScene {
        let cfg = SceneConfig { domain_shift: 0.2, ..SceneConfig::default() };
        gen_toy_scene(&cfg, 11).unwrap().0
    }

    #[test]
    fn scene_round_trip() {
        let s = scene();
        let mut buf = Vec::new();
        write_scene(&mut buf, &s).unwrap();
        let t = read_scene(buf.as_slice()).unwrap();
        assert_eq!(t.config, s.config);
        assert_eq!(t.seed, 11);
        assert_eq!((&t.pixels, &t.text, &t.prototypes, &t.attributes), (&s.pixels, &s.text, &s.prototypes, &s.attributes));
        assert_eq!(t.raw_labels(), s.raw_labels());
        assert_eq!(t.cell_parts(), s.cell_parts());
        assert_eq!(t.training_targets(), s.training_targets());
        let mut again = Vec::new();
        write_scene(&mut again, &t).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::init(32, &DecoderConfig::default(), &mut ChaCha8Rng::seed_from_u64(2));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, 77).unwrap();
        let (q, seed) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(q, p);
        assert_eq!(seed, 77);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut buf = Vec::new();
        write_scene(&mut buf, &scene()).unwrap();
        assert!(matches!(read_scene(&buf[..buf.len() - 3]), Err(Error::Format(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_scene(extra.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_scene(bad.as_slice()), Err(Error::Format(_))));
        // K = 0 in the header
        let mut zero = buf;
        zero[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_scene(zero.as_slice()), Err(Error::Format(_))));
        let p = ModelParams::init(8, &DecoderConfig { d: 4, ..DecoderConfig::default() }, &mut ChaCha8Rng::seed_from_u64(0));
        let mut ck = Vec::new();
        write_checkpoint(&mut ck, &p, 0).unwrap();
        assert!(matches!(read_checkpoint(&ck[..40]), Err(Error::Format(_))));
        assert!(matches!(read_scene(ck.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn trace_csv_layout() {
        let rows = [TraceRow { step: 0, loss: 1.5, decoder_loss: 1.0, scoremap_loss: 0.5, active_classes: 4, pseudo_pixels: 0 }];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "step,loss,decoder_loss,scoremap_loss,active_classes,pseudo_pixels\n0,1.500000000,1.000000000,0.500000000,4,0\n"
        );
    }

    #[test]
    fn pgm_scaling() {
        let mut buf = Vec::new();
        let (lo, hi) = write_pgm(&mut buf, &[-1.0, 0.0, 1.0, 3.0], 2, 2).unwrap();
        assert_eq!((lo, hi), (-1.0, 3.0));
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(&buf[header.len()..], &[0, 64, 128, 255]);
        let mut flat = Vec::new();
        write_pgm(&mut flat, &[2.0; 3], 1, 3).unwrap();
        assert_eq!(&flat[flat.len() - 3..], &[0, 0, 0]);
        assert!(write_pgm(&mut Vec::new(), &[1.0], 2, 2).is_err());
    }
}
