//! Dataset directory: `manifest.txt` plus one `sample_%06d.dmt` file per sample.
//!
//! A sample file is the magic `DMT1`, six little-endian `u32` values
//! (`H`, `W` and the channel count of each plane) and then the planes in
//! order: image `f32`, semseg `u16`, depth `f32`, normal `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{DemtError, Result};
use crate::tensor::Tensor;

use super::synth::Sample;

pub const SAMPLE_MAGIC: &[u8; 4] = b"DMT1";
const PLANE_CHANNELS: [u32; 4] = [3, 1, 1, 3];
const HEADER_LEN: usize = 4 + 6 * 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub split: String,
    pub seed: u64,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "format=DMT1\ncount={}\nheight={}\nwidth={}\nclasses={}\nsplit={}\nseed={}\n",
            self.count, self.height, self.width, self.classes, self.split, self.seed
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |detail: String| DemtError::CorruptHeader {
            path: path.to_path_buf(),
            detail,
        };
        let mut fields = std::collections::BTreeMap::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing {k}")));
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| bad(format!("{k} is not an unsigned integer")))
        };
        if get("format")? != "DMT1" {
            return Err(bad(format!("unsupported format {}", get("format")?)));
        }
        for k in fields.keys() {
            if ![
                "format", "count", "height", "width", "classes", "split", "seed",
            ]
            .contains(&k.as_str())
            {
                return Err(bad(format!("unknown key {k}")));
            }
        }
        Ok(Self {
            count: num("count")? as usize,
            height: num("height")? as usize,
            width: num("width")? as usize,
            classes: num("classes")? as usize,
            split: get("split")?.clone(),
            seed: num("seed")?,
        })
    }
}

pub fn sample_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("sample_{index:06}.dmt"))
}

pub fn encode_sample(s: &Sample) -> Vec<u8> {
    let (h, w) = (s.height(), s.width());
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * 30);
    out.extend_from_slice(SAMPLE_MAGIC);
    for v in [h as u32, w as u32].into_iter().chain(PLANE_CHANNELS) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let f32s = |out: &mut Vec<u8>, data: &[f64]| {
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    f32s(&mut out, s.image.data());
    for &c in &s.semseg {
        out.extend_from_slice(&c.to_le_bytes());
    }
    f32s(&mut out, s.depth.data());
    f32s(&mut out, s.normal.data());
    out
}

/// Decodes one sample file. `expect` gives the manifest's `(H, W)`.
pub fn decode_sample(
    bytes: &[u8],
    index: usize,
    path: &Path,
    expect: (usize, usize),
) -> Result<Sample> {
    let corrupt = |detail: String| DemtError::CorruptHeader {
        path: path.to_path_buf(),
        detail,
    };
    let truncated = || DemtError::Truncated {
        index,
        path: path.to_path_buf(),
    };
    if bytes.len() < 4 {
        return Err(truncated());
    }
    if &bytes[..4] != SAMPLE_MAGIC {
        return Err(corrupt(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated());
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w) = (word(0), word(1));
    if (h, w) != expect {
        return Err(corrupt(format!(
            "size {h}x{w}, manifest says {}x{}",
            expect.0, expect.1
        )));
    }
    for (i, &c) in PLANE_CHANNELS.iter().enumerate() {
        if word(2 + i) != c as usize {
            return Err(corrupt(format!(
                "plane {i} has {} channels, expected {c}",
                word(2 + i)
            )));
        }
    }
    let px = h * w;
    let body = px * (3 * 4 + 2 + 4 + 3 * 4);
    if bytes.len() < HEADER_LEN + body {
        return Err(truncated());
    }
    if bytes.len() > HEADER_LEN + body {
        return Err(corrupt(format!(
            "{} trailing bytes",
            bytes.len() - HEADER_LEN - body
        )));
    }
    let semseg_start = HEADER_LEN + px * 12;
    let semseg = bytes[semseg_start..semseg_start + 2 * px]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let tail = semseg_start + 2 * px;
    let floats = |start: usize, n: usize| -> Vec<f64> {
        bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    let image = floats(HEADER_LEN, 3 * px);
    let depth = floats(tail, px);
    let normal = floats(tail + 4 * px, 3 * px);
    Ok(Sample {
        image: Tensor::new(&[h, w, 3], image)?,
        semseg,
        depth: Tensor::new(&[h, w], depth)?,
        normal: Tensor::new(&[h, w, 3], normal)?,
    })
}

pub fn write_dataset(dir: &Path, manifest: &Manifest, samples: &[Sample]) -> Result<()> {
    if manifest.count != samples.len() {
        return Err(DemtError::ManifestMismatch {
            declared: manifest.count,
            found: samples.len(),
        });
    }
    fs::create_dir_all(dir).map_err(|e| DemtError::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        if (s.height(), s.width()) != (manifest.height, manifest.width) {
            return Err(DemtError::InvalidArgument(format!(
                "sample {i} is {}x{}, manifest says {}x{}",
                s.height(),
                s.width(),
                manifest.height,
                manifest.width
            )));
        }
        let path = sample_path(dir, i);
        fs::write(&path, encode_sample(s)).map_err(|e| DemtError::io(&path, e))?;
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(|e| DemtError::io(&path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: &str) -> Dataset {
        let samples: Vec<Sample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset {
            manifest: Manifest {
                count: samples.len(),
                split: split.to_string(),
                ..self.manifest.clone()
            },
            samples,
        }
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| DemtError::io(&mpath, e))?;
    let manifest = Manifest::parse(&text, &mpath)?;
    let entries = fs::read_dir(dir).map_err(|e| DemtError::io(dir, e))?;
    let mut found = 0;
    for entry in entries {
        let entry = entry.map_err(|e| DemtError::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("sample_") && name.ends_with(".dmt") {
            found += 1;
        }
    }
    if found != manifest.count {
        return Err(DemtError::ManifestMismatch {
            declared: manifest.count,
            found,
        });
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let path = sample_path(dir, i);
        let bytes = fs::read(&path).map_err(|e| DemtError::io(&path, e))?;
        samples.push(decode_sample(
            &bytes,
            i,
            &path,
            (manifest.height, manifest.width),
        )?);
    }
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::generate_scene;

    fn small(n: usize) -> (Manifest, Vec<Sample>) {
        let samples: Vec<_> = (0..n)
            .map(|i| generate_scene(i as u64, 8, 12, 3).unwrap())
            .collect();
        let m = Manifest {
            count: n,
            height: 8,
            width: 12,
            classes: 3,
            split: "train".into(),
            seed: 1,
        };
        (m, samples)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (m, samples) = small(4);
        write_dataset(dir.path(), &m, &samples).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        for (a, b) in ds.samples.iter().zip(&samples) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.image), bits(&b.image));
            assert_eq!(bits(&a.depth), bits(&b.depth));
            assert_eq!(bits(&a.normal), bits(&b.normal));
            assert_eq!(a.semseg, b.semseg);
        }
    }

    #[test]
    fn truncated_file_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let (m, samples) = small(3);
        write_dataset(dir.path(), &m, &samples).unwrap();
        let p = sample_path(dir.path(), 2);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        match load_dataset(dir.path()) {
            Err(DemtError::Truncated { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (m, samples) = small(2);
        write_dataset(dir.path(), &m, &samples).unwrap();
        let p = sample_path(dir.path(), 0);
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DemtError::CorruptHeader { .. })
        ));
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (m, samples) = small(3);
        write_dataset(dir.path(), &m, &samples).unwrap();
        fs::remove_file(sample_path(dir.path(), 1)).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DemtError::ManifestMismatch {
                declared: 3,
                found: 2
            })
        ));
    }
}
