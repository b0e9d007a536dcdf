//! Export of effective query kernels as images and raw values.

use crate::error::{Error, Result};
use crate::lisa::{extract_query_kernel, split_heads, LiSAConfig, QueryKernel};
use crate::model::{block_forward, patchify, Model, IMAGE_CHANNELS, LN_EPS};
use crate::ndtensor::{l2_normalize, layer_norm, linear, Tensor};
use crate::random::{rng_from_seed, uniform_tensor};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Normalized queries, keys and values one head sees inside one block.
#[derive(Debug, Clone)]
pub struct HeadInputs {
    pub qb: Tensor,
    pub kb: Tensor,
    pub v: Tensor,
}

/// Runs `image` through the patch embedding and blocks, collecting per-head
/// operator inputs of every block (`[layer][head]`).
pub fn collect_head_inputs(m: &Model, image: &Tensor) -> Result<Vec<Vec<HeadInputs>>> {
    let bc = m.cfg.block_config()?;
    let mut x = linear(&patchify(image, m.cfg.patch)?, &m.patch_w, &m.patch_b)?;
    let c = bc.channels;
    let mut out = Vec::with_capacity(m.blocks.len());
    for b in &m.blocks {
        let h = layer_norm(&x, &b.ln1_g, &b.ln1_b, LN_EPS)?;
        let qkv = linear(&h, &b.attn.qkv_w, &b.attn.qkv_b)?;
        let q = split_heads(&qkv.narrow_last(0, c)?, bc.heads)?;
        let k = split_heads(&qkv.narrow_last(c, c)?, bc.heads)?;
        let v = split_heads(&qkv.narrow_last(2 * c, c)?, bc.heads)?;
        let heads = q
            .iter()
            .zip(&k)
            .zip(v)
            .map(|((q, k), v)| {
                Ok(HeadInputs {
                    qb: l2_normalize(q, 1)?,
                    kb: l2_normalize(k, 1)?,
                    v,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(heads);
        x = block_forward(&x, b, &bc)?;
    }
    Ok(out)
}

/// Deterministic input image in `[-1, 1)` used when no image is supplied.
pub fn probe_image(side: usize, seed: u64) -> Tensor {
    uniform_tensor(&[IMAGE_CHANNELS, side, side], -1.0, 1.0, &mut rng_from_seed(seed))
}

/// Min-max scaling to `0..=255`; a constant map becomes all zeros.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return vec![0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8).collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary P5 image into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let fmt = |offset: usize, reason: &str| Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt(pos, "truncated header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).map_err(|_| fmt(start, "non-ascii header"))?));
    }
    if fields[0].1 != "P5" {
        return Err(fmt(0, "not a binary graymap"));
    }
    let num = |(at, s): (usize, &str)| s.parse::<usize>().map_err(|_| fmt(at, "bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(fmt(fields[3].0, "only 8-bit graymaps are supported"));
    }
    pos += 1;
    if bytes.len() < pos || bytes.len() - pos != w * h {
        return Err(fmt(pos.min(bytes.len()), "pixel payload has the wrong size"));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

/// One value per cell; rows of the grid become CSV lines.
pub fn kernel_csv(weights: &Tensor) -> String {
    let w = *weights.shape().last().unwrap_or(&1);
    let mut s = String::new();
    for row in weights.data().chunks(w.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

pub fn parse_kernel_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::arg(format!("bad CSV value '{v}'"))))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct KernelExport {
    pub layer: usize,
    pub head: usize,
    pub kernel: QueryKernel,
    pub pgm: PathBuf,
    pub csv: PathBuf,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `kernel_lLL_hHH.pgm` and `.csv` for every requested (layer, head).
pub fn export_kernel_images(
    m: &Model,
    image: &Tensor,
    layers: &[usize],
    heads: &[usize],
    query: usize,
    out_dir: &Path,
) -> Result<Vec<KernelExport>> {
    let bc = m.cfg.block_config()?;
    if let Some(&l) = layers.iter().find(|&&l| l >= m.blocks.len()) {
        return Err(Error::arg(format!("layer {l} out of range for {} blocks", m.blocks.len())));
    }
    if let Some(&h) = heads.iter().find(|&&h| h >= bc.heads) {
        return Err(Error::arg(format!("head {h} out of range for {} heads", bc.heads)));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let inputs = collect_head_inputs(m, image)?;
    let head_cfg = LiSAConfig::single_head(bc.layout, bc.head_channels(), bc.latent)?;
    let dims = bc.layout.dims();
    let (gh, gw) = (dims[0], dims[dims.len() - 1]);
    let mut out = Vec::new();
    for &layer in layers {
        for &head in heads {
            let hi = &inputs[layer][head];
            let emb = &m.blocks[layer].attn.emb[if m.blocks[layer].attn.emb.len() == 1 { 0 } else { head }];
            let kernel = extract_query_kernel(&hi.qb, &hi.kb, emb, &head_cfg, query)?;
            let stem = format!("kernel_l{layer:02}_h{head:02}");
            let pgm = out_dir.join(format!("{stem}.pgm"));
            let csv = out_dir.join(format!("{stem}.csv"));
            write(&pgm, &encode_pgm(gw, gh, &to_gray(kernel.weights.data())))?;
            write(&csv, kernel_csv(&kernel.weights).as_bytes())?;
            out.push(KernelExport {
                layer,
                head,
                kernel,
                pgm,
                csv,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_scaling() {
        assert_eq!(to_gray(&[2.0, 2.0, 2.0]), vec![0, 0, 0]);
        assert_eq!(to_gray(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
    }

    #[test]
    fn pgm_roundtrip() {
        let px: Vec<u8> = (0..12).collect();
        let (w, h, back) = decode_pgm(&encode_pgm(4, 3, &px)).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, px);
        assert!(decode_pgm(b"P6\n1 1\n255\n\0").is_err());
        assert!(decode_pgm(b"P5\n2 1\n255\n\0").is_err());
    }

    #[test]
    fn csv_is_exact() {
        let t = Tensor::from_vec(&[2, 2], vec![0.1, -1.0 / 3.0, 1e-300, 7.0]).unwrap();
        let rows = parse_kernel_csv(&kernel_csv(&t)).unwrap();
        let flat: Vec<f64> = rows.concat();
        assert_eq!(flat, t.data().to_vec());
    }
}
