//! Binary model persistence.
//!
//! Layout (all integers and floats little-endian):
//!   magic "PCDN" | version u16 | seed u64 | leaky_alpha f64 | dropout f64 |
//!   input_dim u32 | encoder widths (u32 count + u32 each) | decoder widths |
//!   encoder/decoder dropout layer (i32, -1 = none) |
//!   scaler means + stds (f64 each) |
//!   layer params, encoder then decoder, weights row-major then bias |
//!   crc32 u32 of everything before it.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::features::{ScalerStats, FEATURE_DIM};

use super::net::{LayerParams, ModelArch, PiDnnModel, PinetError};

pub const MODEL_MAGIC: [u8; 4] = *b"PCDN";
pub const MODEL_VERSION: u16 = 1;

fn put_widths(buf: &mut Vec<u8>, widths: &[usize]) {
    buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for &w in widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
}

fn put_layer(buf: &mut Vec<u8>, layer: &LayerParams) {
    for r in 0..layer.weight.nrows() {
        for c in 0..layer.weight.ncols() {
            buf.extend_from_slice(&layer.weight[(r, c)].to_le_bytes());
        }
    }
    for b in layer.bias.iter() {
        buf.extend_from_slice(&b.to_le_bytes());
    }
}

pub fn save_model(model: &PiDnnModel, path: &Path) -> Result<(), PinetError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&model.rng_seed.to_le_bytes());
    buf.extend_from_slice(&model.leaky_alpha.to_le_bytes());
    buf.extend_from_slice(&model.dropout_rate.to_le_bytes());
    buf.extend_from_slice(&(model.arch.input_dim as u32).to_le_bytes());
    put_widths(&mut buf, &model.arch.encoder_widths);
    put_widths(&mut buf, &model.arch.decoder_widths);
    let drop_idx = |d: Option<usize>| d.map_or(-1i32, |i| i as i32);
    buf.extend_from_slice(&drop_idx(model.arch.encoder_dropout_layer).to_le_bytes());
    buf.extend_from_slice(&drop_idx(model.arch.decoder_dropout_layer).to_le_bytes());
    for v in model.scaler.mean.iter().chain(model.scaler.std.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for layer in model.encoder.iter().chain(model.decoder.iter()) {
        put_layer(&mut buf, layer);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PinetError> {
        if self.pos + n > self.data.len() {
            return Err(PinetError::CorruptFile("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, PinetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PinetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, PinetError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PinetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, PinetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn widths(&mut self) -> Result<Vec<usize>, PinetError> {
        let n = self.u32()? as usize;
        if n > 64 {
            return Err(PinetError::CorruptFile(format!("implausible layer count {n}")));
        }
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn layer(&mut self, out: usize, inp: usize) -> Result<LayerParams, PinetError> {
        let mut weight = DMatrix::zeros(out, inp);
        for r in 0..out {
            for c in 0..inp {
                weight[(r, c)] = self.f64()?;
            }
        }
        let mut bias = DVector::zeros(out);
        for r in 0..out {
            bias[r] = self.f64()?;
        }
        Ok(LayerParams { weight, bias })
    }
}

pub fn load_model(path: &Path) -> Result<PiDnnModel, PinetError> {
    let data = fs::read(path)?;
    if data.len() < MODEL_MAGIC.len() + 2 + 4 {
        return Err(PinetError::CorruptFile("file too short".into()));
    }
    let (body, crc_bytes) = data.split_at(data.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(PinetError::CorruptFile("checksum mismatch".into()));
    }

    let mut r = Reader { data: body, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(PinetError::BadModelFile("bad magic".into()));
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(PinetError::VersionMismatch { found: version, expected: MODEL_VERSION });
    }
    let seed = r.u64()?;
    let leaky_alpha = r.f64()?;
    let dropout_rate = r.f64()?;
    let input_dim = r.u32()? as usize;
    let encoder_widths = r.widths()?;
    let decoder_widths = r.widths()?;
    let drop_idx = |v: i32| if v < 0 { None } else { Some(v as usize) };
    let encoder_dropout_layer = drop_idx(r.i32()?);
    let decoder_dropout_layer = drop_idx(r.i32()?);
    if encoder_widths.is_empty() || decoder_widths.is_empty() {
        return Err(PinetError::CorruptFile("empty layer manifest".into()));
    }

    let mut mean = [0.0; FEATURE_DIM];
    let mut std = [0.0; FEATURE_DIM];
    for v in &mut mean {
        *v = r.f64()?;
    }
    for v in &mut std {
        *v = r.f64()?;
    }

    let arch = ModelArch {
        input_dim,
        encoder_widths,
        decoder_widths,
        encoder_dropout_layer,
        decoder_dropout_layer,
    };
    let mut encoder = Vec::new();
    let mut prev = arch.input_dim;
    for &w in &arch.encoder_widths {
        encoder.push(r.layer(w, prev)?);
        prev = w;
    }
    let mut decoder = Vec::new();
    for &w in &arch.decoder_widths {
        decoder.push(r.layer(w, prev)?);
        prev = w;
    }
    if r.pos != body.len() {
        return Err(PinetError::CorruptFile("trailing bytes after parameters".into()));
    }

    Ok(PiDnnModel {
        arch,
        encoder,
        decoder,
        leaky_alpha,
        dropout_rate,
        scaler: ScalerStats { mean, std },
        rng_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn sample_model() -> PiDnnModel {
        let scaler = ScalerStats {
            mean: [0.5, -1.0, 2.0, 0.0, 3.0, 45.0, 38.0],
            std: [1.0, 0.5, 2.0, 1.5, 0.25, 10.0, 4.0],
        };
        PiDnnModel::standard(3, scaler, 42)
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.pcdn");
        let model = sample_model();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);

        // Saving the loaded model reproduces the bytes exactly.
        let path2 = dir.path().join("model2.pcdn");
        save_model(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn magic_and_version_are_checked() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.pcdn");
        save_model(&sample_model(), &path).unwrap();
        let mut data = fs::read(&path).unwrap();

        // Bump the version and re-seal the checksum.
        data[4] = 99;
        let n = data.len();
        let crc = crc32fast::hash(&data[..n - 4]);
        data[n - 4..].copy_from_slice(&crc.to_le_bytes());
        fs::write(&path, &data).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(PinetError::VersionMismatch { found: 99, expected: MODEL_VERSION })
        ));

        // Break the magic the same way.
        data[0] = b'X';
        data[4] = MODEL_VERSION as u8;
        let crc = crc32fast::hash(&data[..n - 4]);
        data[n - 4..].copy_from_slice(&crc.to_le_bytes());
        fs::write(&path, &data).unwrap();
        assert!(matches!(load_model(&path), Err(PinetError::BadModelFile(_))));
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.pcdn");
        save_model(&sample_model(), &path).unwrap();
        let data = fs::read(&path).unwrap();

        // Flip one parameter byte: checksum must catch it.
        let mut flipped = data.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_model(&path), Err(PinetError::CorruptFile(_))));

        // Truncate the file.
        fs::write(&path, &data[..data.len() / 3]).unwrap();
        assert!(matches!(load_model(&path), Err(PinetError::CorruptFile(_))));

        // Empty file.
        fs::write(&path, b"").unwrap();
        assert!(matches!(load_model(&path), Err(PinetError::CorruptFile(_))));
    }
}
