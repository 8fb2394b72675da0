use std::fs;
use std::path::{Path, PathBuf};

use super::formats::{read_flo, read_ppm, write_flo, write_ppm};
use super::{make_scene, MotionParams, ScenePair};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const MANIFEST: &str = "manifest.txt";

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub noise: f64,
    pub labeled: bool,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "seed={}\ncount={}\nwidth={}\nheight={}\nnoise={}\nlabeled={}\n",
            self.seed, self.count, self.width, self.height, self.noise, self.labeled
        )
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut m = Manifest {
            seed: 0,
            count: 0,
            width: 0,
            height: 0,
            noise: 0.0,
            labeled: false,
        };
        let mut seen = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::Dataset(format!("{origin}:{}: {msg}", n + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let invalid = || bad(format!("invalid value {v:?} for {k}"));
            match k {
                "seed" => m.seed = v.parse().map_err(|_| invalid())?,
                "count" => m.count = v.parse().map_err(|_| invalid())?,
                "width" => m.width = v.parse().map_err(|_| invalid())?,
                "height" => m.height = v.parse().map_err(|_| invalid())?,
                "noise" => m.noise = v.parse().map_err(|_| invalid())?,
                "labeled" => m.labeled = v.parse().map_err(|_| invalid())?,
                _ => return Err(bad(format!("unknown key {k:?}"))),
            }
            seen.push(k.to_string());
        }
        for key in ["seed", "count", "width", "height"] {
            if !seen.iter().any(|s| s == key) {
                return Err(Error::Dataset(format!("{origin}: missing key {key}")));
            }
        }
        Ok(m)
    }

    pub fn pair_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, &[index as u64])
    }
}

/// A loaded dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub pairs: Vec<ScenePair>,
}

impl Dataset {
    pub fn is_labeled(&self) -> bool {
        self.pairs.iter().all(|p| p.flow.is_some())
    }

    pub fn require_labels(&self) -> Result<()> {
        if self.pairs.is_empty() || !self.is_labeled() {
            return Err(Error::Dataset(format!(
                "{} has no ground-truth flow (generate it with --labeled)",
                self.root.display()
            )));
        }
        Ok(())
    }
}

pub fn pair_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("pair_{index:05}"))
}

/// In-memory pairs described by a manifest (before 8-bit quantization).
pub fn regenerate(manifest: &Manifest) -> Vec<ScenePair> {
    (0..manifest.count)
        .map(|i| {
            let mut pair = make_scene(
                manifest.pair_seed(i),
                manifest.height,
                manifest.width,
                manifest.noise,
                &MotionParams::default(),
            );
            if !manifest.labeled {
                pair.flow = None;
            }
            pair
        })
        .collect()
}

/// Writes `pair_%05d/{frame1.ppm, frame2.ppm[, flow.flo]}` and `manifest.txt`.
pub fn generate_dataset(root: &Path, manifest: &Manifest) -> Result<()> {
    if manifest.width == 0 || manifest.height == 0 {
        return Err(Error::config("dataset size must be positive"));
    }
    if !(manifest.noise >= 0.0) {
        return Err(Error::config(format!("noise must be ≥ 0, got {}", manifest.noise)));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (i, pair) in regenerate(manifest).into_iter().enumerate() {
        let dir = pair_dir(root, i);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_ppm(&dir.join("frame1.ppm"), &pair.frame1)?;
        write_ppm(&dir.join("frame2.ppm"), &pair.frame2)?;
        if let Some(flow) = &pair.flow {
            write_flo(&dir.join("flow.flo"), flow)?;
        }
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let manifest = Manifest::parse(&text, &path.display().to_string())?;
    let mut pairs = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let dir = pair_dir(root, i);
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing pair directory {}", dir.display())));
        }
        let frame1 = read_ppm(&dir.join("frame1.ppm"))?;
        let frame2 = read_ppm(&dir.join("frame2.ppm"))?;
        let flow_path = dir.join("flow.flo");
        let flow = if flow_path.exists() {
            Some(read_flo(&flow_path)?)
        } else {
            None
        };
        let expected = [3, manifest.height, manifest.width];
        if frame1.shape() != expected || frame2.shape() != expected {
            return Err(Error::Dataset(format!(
                "{}: frames do not match the manifest size {}×{}",
                dir.display(),
                manifest.width,
                manifest.height
            )));
        }
        pairs.push(ScenePair {
            frame1,
            frame2,
            flow,
            seed: manifest.pair_seed(i),
        });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        pairs,
    })
}
