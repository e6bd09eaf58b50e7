//! External still-image codec driven through raw YUV444 files, plus the
//! bundled stub codec.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::color::{planar_bytes_to_yuv, quantize_8bit, rgb_to_yuv444, yuv444_to_rgb, yuv_to_planar_bytes};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ENCODE_PLACEHOLDERS: [&str; 5] = ["{input}", "{output}", "{qp}", "{width}", "{height}"];
const DECODE_PLACEHOLDERS: [&str; 2] = ["{input}", "{output}"];

/// Encoder and decoder command templates. Each template is an argv list;
/// `{input}`, `{output}`, `{qp}`, `{width}` and `{height}` are substituted
/// per invocation. No shell is involved.
///
/// A VTM configuration for 8-bit 4:4:4 input looks like:
///
/// ```toml
/// name = "vtm"
/// encode = ["EncoderApp", "-c", "encoder_intra_vtm.cfg", "-i", "{input}", "-b", "{output}",
///           "-q", "{qp}", "-wdt", "{width}", "-hgt", "{height}", "-f", "1",
///           "--InputChromaFormat=444", "--InputBitDepth=8", "--OutputBitDepth=8"]
/// decode = ["DecoderApp", "-b", "{input}", "-o", "{output}", "-d", "8"]
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    pub name: String,
    pub encode: Vec<String>,
    pub decode: Vec<String>,
    /// Whether repeated runs on the same input give identical bitstreams.
    #[serde(default = "yes")]
    pub deterministic: bool,
}

fn yes() -> bool {
    true
}

impl CodecSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: CodecSpec = toml::from_str(text).map_err(|e| Error::parse("codec config", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("codec spec serializes")
    }

    /// The bundled stub codec, run through the given `msgdn` executable.
    pub fn stub(exe: &Path) -> Self {
        let exe = exe.to_string_lossy().into_owned();
        let v = |args: &[&str]| -> Vec<String> {
            std::iter::once(exe.clone()).chain(args.iter().map(|s| s.to_string())).collect()
        };
        CodecSpec {
            name: "msgdn-stub".into(),
            encode: v(&[
                "stub-codec", "encode", "--input", "{input}", "--output", "{output}", "--qp", "{qp}",
                "--width", "{width}", "--height", "{height}",
            ]),
            decode: v(&["stub-codec", "decode", "--input", "{input}", "--output", "{output}"]),
            deterministic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, tpl, required) in [
            ("encode", &self.encode, &ENCODE_PLACEHOLDERS[..]),
            ("decode", &self.decode, &DECODE_PLACEHOLDERS[..]),
        ] {
            if tpl.is_empty() {
                return Err(Error::config(format!("codec `{what}` command is empty")));
            }
            for p in required {
                if !tpl.iter().any(|a| a.contains(p)) {
                    return Err(Error::config(format!("codec `{what}` command lacks placeholder {p}")));
                }
            }
        }
        Ok(())
    }

    /// `name` plus a digest of the templates, recorded in manifests.
    pub fn identity(&self) -> String {
        let mut h = Sha256::new();
        for a in self.encode.iter().chain(std::iter::once(&"\0".to_string())).chain(&self.decode) {
            h.update(a.as_bytes());
            h.update([0u8]);
        }
        format!("{}#{}", self.name, hex::encode(&h.finalize()[..8]))
    }
}

fn substitute(tpl: &[String], input: &Path, output: &Path, qp: i32, width: usize, height: usize) -> Vec<String> {
    tpl.iter()
        .map(|a| {
            a.replace("{input}", &input.to_string_lossy())
                .replace("{output}", &output.to_string_lossy())
                .replace("{qp}", &qp.to_string())
                .replace("{width}", &width.to_string())
                .replace("{height}", &height.to_string())
        })
        .collect()
}

fn run(argv: &[String]) -> Result<()> {
    let out = Command::new(&argv[0])
        .args(&argv[1..])
        .output()
        .map_err(|e| Error::Codec {
            command: argv.join(" "),
            status: None,
            output: e.to_string(),
        })?;
    if !out.status.success() {
        let mut text = String::from_utf8_lossy(&out.stdout).into_owned();
        text.push_str(&String::from_utf8_lossy(&out.stderr));
        return Err(Error::Codec {
            command: argv.join(" "),
            status: out.status.code(),
            output: text,
        });
    }
    Ok(())
}

/// Result of one encode/decode round trip.
#[derive(Clone, Debug)]
pub struct Coded {
    /// Decoded RGB, on the 8-bit grid.
    pub decoded: Tensor,
    /// `8 ×` bitstream size in bytes.
    pub bits: u64,
}

/// Writes `image` as raw YUV444, runs the encoder and decoder, and converts
/// the decoded planes back to RGB. Intermediate files live in `workdir`.
pub fn encode_decode(image: &Tensor, qp: i32, codec: &CodecSpec, workdir: &Path) -> Result<Coded> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("expected one RGB image, got {:?}", image.shape())));
    }
    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let raw = workdir.join("input.yuv");
    let bitstream = workdir.join("bitstream.bin");
    let recon = workdir.join("decoded.yuv");
    for p in [&bitstream, &recon] {
        if p.exists() {
            std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }
    let bytes = yuv_to_planar_bytes(&rgb_to_yuv444(image)?)?;
    std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;

    run(&substitute(&codec.encode, &raw, &bitstream, qp, w, h))?;
    let size = std::fs::metadata(&bitstream)
        .map_err(|_| Error::Codec {
            command: codec.encode.join(" "),
            status: Some(0),
            output: format!("encoder produced no bitstream at {}", bitstream.display()),
        })?
        .len();
    run(&substitute(&codec.decode, &bitstream, &recon, qp, w, h))?;
    let decoded = std::fs::read(&recon).map_err(|e| Error::io(&recon, e))?;
    let yuv = planar_bytes_to_yuv(&decoded, w, h)?;
    Ok(Coded {
        decoded: quantize_8bit(&yuv444_to_rgb(&yuv)?),
        bits: 8 * size,
    })
}

const STUB_MAGIC: &[u8; 8] = b"MSGDNSTB";

/// Quantizer step of the stub codec in 8-bit sample units. QP ≤ 13 is
/// lossless; every 6 QP steps double the step (QP 37 → 16).
pub fn stub_step(qp: i32) -> f64 {
    2f64.powf((qp - 13) as f64 / 6.0).max(1.0)
}

/// Stub encoder: uniform scalar quantization of the planar samples followed
/// by gzip. Header: magic, width, height, qp (little-endian u32/u32/i32).
pub fn stub_encode(raw: &[u8], width: usize, height: usize, qp: i32) -> Result<Vec<u8>> {
    if raw.len() != 3 * width * height {
        return Err(Error::shape(format!(
            "raw YUV444 {width}x{height} needs {} bytes, got {}",
            3 * width * height,
            raw.len()
        )));
    }
    let step = stub_step(qp);
    let levels: Vec<u8> = raw.iter().map(|&s| (s as f64 / step).round() as u8).collect();
    let mut out = Vec::new();
    out.extend_from_slice(STUB_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&qp.to_le_bytes());
    let mut gz = GzEncoder::new(out, Compression::best());
    gz.write_all(&levels).map_err(|e| Error::Other(e.to_string()))?;
    gz.finish().map_err(|e| Error::Other(e.to_string()))
}

/// Stub decoder; returns `(raw planes, width, height)`.
pub fn stub_decode(bitstream: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let bad = |reason: &str| Error::parse("stub bitstream", reason);
    if bitstream.len() < 20 || &bitstream[..8] != STUB_MAGIC {
        return Err(bad("bad header"));
    }
    let word = |i: usize| [bitstream[i], bitstream[i + 1], bitstream[i + 2], bitstream[i + 3]];
    let width = u32::from_le_bytes(word(8)) as usize;
    let height = u32::from_le_bytes(word(12)) as usize;
    let qp = i32::from_le_bytes(word(16));
    let mut levels = Vec::new();
    GzDecoder::new(&bitstream[20..])
        .read_to_end(&mut levels)
        .map_err(|e| bad(&e.to_string()))?;
    if levels.len() != 3 * width * height {
        return Err(bad("payload size does not match dimensions"));
    }
    let step = stub_step(qp);
    let raw = levels
        .iter()
        .map(|&l| (l as f64 * step).round().min(255.0) as u8)
        .collect();
    Ok((raw, width, height))
}

/// File-level stub encoder as invoked by the CLI.
pub fn stub_encode_file(input: &Path, output: &Path, width: usize, height: usize, qp: i32) -> Result<()> {
    let raw = std::fs::read(input).map_err(|e| Error::io(input, e))?;
    let bits = stub_encode(&raw, width, height, qp)?;
    std::fs::write(output, bits).map_err(|e| Error::io(output, e))
}

/// File-level stub decoder as invoked by the CLI.
pub fn stub_decode_file(input: &Path, output: &Path) -> Result<()> {
    let bits = std::fs::read(input).map_err(|e| Error::io(input, e))?;
    let (raw, _, _) = stub_decode(&bits)?;
    std::fs::write(output, raw).map_err(|e| Error::io(output, e))
}

/// Path of a per-task scratch directory under `root`.
pub fn workdir_for(root: &Path, key: &str) -> PathBuf {
    root.join(format!("job-{key}"))
}
