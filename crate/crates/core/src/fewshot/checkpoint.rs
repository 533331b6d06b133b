//! Model file encoding (all integers little-endian).
//!
//! ```text
//! header : magic "CSIM" | version u16 | blocks u16 | filters u16
//!          | input_size u16 | flags u16 (bit 0: standardize input)
//!          | head_layers u16
//! head   : head_layers x (input u32, output u32)
//!          | if head_layers > 0: class id u32 per output unit
//! params : f32, per block: conv weight (filters x in x 3 x 3), conv bias,
//!          bn gamma, bn beta, bn running mean, bn running var;
//!          then per head layer: weight (output x input), bias
//! ```

use std::path::Path;

use super::net::{ArchSpec, ConvBlock, EmbeddingNet, Linear};
use super::FewShotError;

pub const MAGIC: &[u8; 4] = b"CSIM";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

/// A network and, for classifiers, its head and output class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub net: EmbeddingNet,
    pub head: Vec<Linear>,
    pub classes: Vec<usize>,
}

fn err(offset: usize, reason: impl Into<String>) -> FewShotError {
    FewShotError::Checkpoint {
        offset,
        reason: reason.into(),
    }
}

fn u16_of(v: usize, what: &str) -> Result<[u8; 2], FewShotError> {
    u16::try_from(v)
        .map(u16::to_le_bytes)
        .map_err(|_| FewShotError::Config(format!("{what} {v} does not fit in u16")))
}

pub fn encode_model(model: &SavedModel) -> Result<Vec<u8>, FewShotError> {
    let arch = model.net.arch();
    if !model.head.is_empty() && model.classes.len() != model.head.last().map_or(0, |l| l.output) {
        return Err(FewShotError::Config(
            "class list does not match head output".into(),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u16_of(arch.blocks, "block count")?);
    out.extend_from_slice(&u16_of(arch.filters, "filter count")?);
    out.extend_from_slice(&u16_of(arch.input_size, "input size")?);
    out.extend_from_slice(&u16::from(arch.standardize).to_le_bytes());
    out.extend_from_slice(&u16_of(model.head.len(), "head layer count")?);
    for layer in &model.head {
        out.extend_from_slice(&(layer.input as u32).to_le_bytes());
        out.extend_from_slice(&(layer.output as u32).to_le_bytes());
    }
    if !model.head.is_empty() {
        for &c in &model.classes {
            let c = u32::try_from(c)
                .map_err(|_| FewShotError::Config(format!("class id {c} too large")))?;
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    let mut put = |values: &[f64]| {
        for v in values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    };
    for b in &model.net.blocks {
        put(&b.weight);
        put(&b.bias);
        put(&b.gamma);
        put(&b.beta);
        put(&b.running_mean);
        put(&b.running_var);
    }
    for layer in &model.head {
        put(&layer.weight);
        put(&layer.bias);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], FewShotError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(err(self.pos, format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, FewShotError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>, FewShotError> {
        let start = self.pos;
        let b = self.take(
            n.checked_mul(4)
                .ok_or_else(|| err(start, "size overflow"))?,
            what,
        )?;
        let mut out = Vec::with_capacity(n);
        for (i, c) in b.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(err(start + 4 * i, format!("non-finite value in {what}")));
            }
            out.push(f64::from(v));
        }
        Ok(out)
    }
}

/// Decodes a model; if `expected` is given the stored architecture must
/// match it.
pub fn decode_model(bytes: &[u8], expected: Option<&ArchSpec>) -> Result<SavedModel, FewShotError> {
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err(0, "bad magic, expected \"CSIM\""));
    }
    let field = |i: usize| u16::from_le_bytes([bytes[4 + 2 * i], bytes[5 + 2 * i]]) as usize;
    if field(0) != VERSION as usize {
        return Err(err(4, format!("unsupported version {}", field(0))));
    }
    let arch = ArchSpec {
        blocks: field(1),
        filters: field(2),
        input_size: field(3),
        standardize: field(4) & 1 == 1,
    };
    if field(4) > 1 {
        return Err(err(12, format!("unknown flags {:#x}", field(4))));
    }
    arch.validate()?;
    if let Some(exp) = expected {
        if *exp != arch {
            return Err(FewShotError::Config(format!(
                "model architecture {arch:?} does not match the expected {exp:?}"
            )));
        }
    }
    let head_layers = field(5);
    let mut r = Reader {
        bytes,
        pos: HEADER_LEN,
    };
    let mut dims = Vec::with_capacity(head_layers);
    for i in 0..head_layers {
        let at = r.pos;
        let input = r.u32("head dimensions")?;
        let output = r.u32("head dimensions")?;
        let expected_in = if i == 0 {
            arch.filters
        } else {
            dims.last().map_or(0, |d: &(usize, usize)| d.1)
        };
        if input != expected_in || output == 0 {
            return Err(err(
                at,
                format!("head layer {i} is {input}->{output}, expected input {expected_in}"),
            ));
        }
        dims.push((input, output));
    }
    let mut classes = Vec::new();
    if let Some(&(_, k)) = dims.last() {
        for _ in 0..k {
            classes.push(r.u32("class ids")?);
        }
    }
    let mut blocks = Vec::with_capacity(arch.blocks);
    for b in 0..arch.blocks {
        let cin = if b == 0 { 1 } else { arch.filters };
        let cout = arch.filters;
        blocks.push(ConvBlock {
            cin,
            cout,
            weight: r.floats(cout * cin * 9, "conv weight")?,
            bias: r.floats(cout, "conv bias")?,
            gamma: r.floats(cout, "bn gamma")?,
            beta: r.floats(cout, "bn beta")?,
            running_mean: r.floats(cout, "bn running mean")?,
            running_var: r.floats(cout, "bn running var")?,
        });
    }
    let mut head = Vec::with_capacity(head_layers);
    for (input, output) in dims {
        head.push(Linear {
            input,
            output,
            weight: r.floats(input * output, "head weight")?,
            bias: r.floats(output, "head bias")?,
        });
    }
    if r.pos != bytes.len() {
        return Err(err(
            r.pos,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(SavedModel {
        net: EmbeddingNet::from_parts(arch, blocks),
        head,
        classes,
    })
}

pub fn write_model(path: &Path, model: &SavedModel) -> crate::Result<()> {
    let bytes = encode_model(model)?;
    std::fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
}

pub fn read_model(path: &Path, expected: Option<&ArchSpec>) -> crate::Result<SavedModel> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(decode_model(&bytes, expected)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(head: bool) -> SavedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = ArchSpec {
            blocks: 2,
            filters: 3,
            input_size: 8,
            standardize: true,
        };
        let net = EmbeddingNet::new(arch, &mut rng).unwrap();
        let (head, classes) = if head {
            (
                vec![Linear::new(3, 5, &mut rng), Linear::new(5, 2, &mut rng)],
                vec![4, 9],
            )
        } else {
            (Vec::new(), Vec::new())
        };
        SavedModel { net, head, classes }
    }

    /// Rounds every parameter through f32, as storing does.
    fn rounded(mut m: SavedModel) -> SavedModel {
        let r = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = f64::from(*x as f32));
        for b in &mut m.net.blocks {
            r(&mut b.weight);
            r(&mut b.bias);
            r(&mut b.gamma);
            r(&mut b.beta);
            r(&mut b.running_mean);
            r(&mut b.running_var);
        }
        for l in &mut m.head {
            r(&mut l.weight);
            r(&mut l.bias);
        }
        m
    }

    #[test]
    fn round_trip() {
        for head in [false, true] {
            let m = model(head);
            let bytes = encode_model(&m).unwrap();
            let back = decode_model(&bytes, Some(m.net.arch())).unwrap();
            assert_eq!(back, rounded(m.clone()));
            assert_eq!(encode_model(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let m = model(false);
        let bytes = encode_model(&m).unwrap();
        let other = ArchSpec {
            filters: 4,
            ..*m.net.arch()
        };
        assert!(matches!(
            decode_model(&bytes, Some(&other)),
            Err(FewShotError::Config(_))
        ));
    }

    #[test]
    fn truncation_rejected() {
        let bytes = encode_model(&model(true)).unwrap();
        for cut in [3, 16, 30, bytes.len() - 1] {
            assert!(decode_model(&bytes[..cut], None).is_err(), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode_model(&longer, None).is_err());
    }
}
