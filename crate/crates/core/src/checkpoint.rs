//! Binary model checkpoints. All integers are little-endian `u32`, all
//! reals little-endian IEEE-754 `f64`. See `docs/checkpoint.md` for the
//! byte layout.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Family, LayerKind, LayerShape, Model, ModelSpec, SparseLayerState};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"DSTCKPT\0";
pub const VERSION: u32 = 1;

fn family_code(f: Family) -> u32 {
    match f {
        Family::Mlp => 0,
        Family::SmallCnn => 1,
        Family::MiniVgg => 2,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend(u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

/// Packs a 0/1 mask into bytes, least significant bit first.
pub fn pack_mask(mask: &[f64]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m != 0.0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_mask(bytes: &[u8], len: usize) -> Vec<f64> {
    (0..len).map(|i| ((bytes[i / 8] >> (i % 8)) & 1) as f64).collect()
}

pub fn encode(model: &Model) -> Vec<u8> {
    let spec = model.spec();
    let mut out = Vec::new();
    out.extend(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, family_code(spec.family) as usize);
    for d in spec.input {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, spec.classes);
    put_u32(&mut out, spec.fc_width);
    put_u32(&mut out, spec.widths.len());
    for &w in &spec.widths {
        put_u32(&mut out, w);
    }
    put_u32(&mut out, model.layers.len());
    for l in &model.layers {
        let (kind, stride, padding) = match l.kind {
            LayerKind::Linear => (0, 1, 0),
            LayerKind::Conv { stride, padding } => (1, stride, padding),
        };
        for v in [kind, stride, padding, l.shape.n_out, l.shape.n_in, l.shape.kh, l.shape.kw] {
            put_u32(&mut out, v);
        }
    }
    for l in &model.layers {
        for &w in l.weight.data() {
            out.extend(w.to_le_bytes());
        }
        for &b in l.bias.data() {
            out.extend(b.to_le_bytes());
        }
        out.extend(pack_mask(l.mask.data()));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail(format!("truncated: needed {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| self.fail("array too large"))?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let family = match r.u32()? {
        0 => Family::Mlp,
        1 => Family::SmallCnn,
        2 => Family::MiniVgg,
        other => return Err(r.fail(format!("unknown model family code {other}"))),
    };
    let input = [r.u32()?, r.u32()?, r.u32()?];
    let classes = r.u32()?;
    let fc_width = r.u32()?;
    let n_widths = r.u32()?;
    if n_widths > bytes.len() {
        return Err(r.fail("width count exceeds file size"));
    }
    let widths = (0..n_widths).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec {
        family,
        input,
        classes,
        widths,
        fc_width,
    };
    let n_layers = r.u32()?;
    if n_layers > bytes.len() {
        return Err(r.fail("layer count exceeds file size"));
    }
    let mut descriptors = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let at = r.pos;
        let v = (0..7).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let kind = match v[0] {
            0 => LayerKind::Linear,
            1 => LayerKind::Conv {
                stride: v[1],
                padding: v[2],
            },
            other => {
                r.pos = at;
                return Err(r.fail(format!("unknown layer kind {other}")));
            }
        };
        let shape = LayerShape {
            n_out: v[3],
            n_in: v[4],
            kh: v[5],
            kw: v[6],
        };
        if shape.size() == 0 {
            r.pos = at;
            return Err(r.fail("layer with zero extent"));
        }
        descriptors.push((kind, shape));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (kind, shape) in descriptors {
        let dims = match kind {
            LayerKind::Linear => vec![shape.n_out, shape.n_in],
            LayerKind::Conv { .. } => vec![shape.n_out, shape.n_in, shape.kh, shape.kw],
        };
        let weight = Tensor::new(&dims, r.f64s(shape.size())?)?;
        let bias = Tensor::new(&[shape.n_out], r.f64s(shape.n_out)?)?;
        let mask_at = r.pos;
        let mask = unpack_mask(r.take(shape.size().div_ceil(8))?, shape.size());
        let mut layer = SparseLayerState::new(kind, shape, weight, bias)?;
        layer.mask = Tensor::new(&dims, mask)?;
        if !layer.inactive_weights_are_zero() {
            r.pos = mask_at;
            return Err(r.fail("nonzero weight at a masked position"));
        }
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_layers(&spec, layers).map_err(|e| match e {
        Error::Config(m) => r.fail(m),
        other => other,
    })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
