use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{generate_scene, netpbm, split_dataset, DataError, Result, Sample, SceneConfig, Split, SplitSpec, Subset};
use crate::mask;

pub const SPLIT_FILE: &str = "split.csv";
pub const CONFIG_FILE: &str = "gen_config.txt";

/// A generated dataset together with the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scene: SceneConfig,
    pub split_spec: SplitSpec,
    /// Indexed by sample id.
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, subset: Subset) -> Vec<&Sample> {
        self.split.get(subset).iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn subset_cloned(&self, subset: Subset) -> Vec<Sample> {
        self.subset(subset).into_iter().cloned().collect()
    }
}

pub fn generate_dataset(scene: &SceneConfig, count: usize, split_spec: &SplitSpec) -> Result<Dataset> {
    scene.validate()?;
    let split = split_dataset(count, split_spec)?;
    let samples = (0..count).map(|i| generate_scene(scene, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        scene: scene.clone(),
        split_spec: *split_spec,
        samples,
        split,
    })
}

fn config_text(ds: &Dataset) -> String {
    let c = &ds.scene;
    let s = &ds.split_spec;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
    kv("count", ds.len().to_string());
    kv("size", c.size.to_string());
    kv("channels", c.channels.to_string());
    kv("buildings_min", c.buildings.0.to_string());
    kv("buildings_max", c.buildings.1.to_string());
    kv("building_size_min", c.building_size.0.to_string());
    kv("building_size_max", c.building_size.1.to_string());
    kv("texture_amplitude", c.texture_amplitude.to_string());
    kv("boundary_radius", c.boundary_radius.to_string());
    kv("rotated_fraction", c.rotated_fraction.to_string());
    kv("seed", c.seed.to_string());
    kv("train_ratio", s.ratios[0].to_string());
    kv("val_ratio", s.ratios[1].to_string());
    kv("test_ratio", s.ratios[2].to_string());
    kv("split_seed", s.seed.to_string());
    out
}

fn parse_config(text: &str) -> Result<(SceneConfig, SplitSpec, usize)> {
    let mut map = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::Malformed(format!("{CONFIG_FILE}: bad line `{line}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
        let raw = map
            .get(key)
            .ok_or_else(|| DataError::Malformed(format!("{CONFIG_FILE}: missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| DataError::Malformed(format!("{CONFIG_FILE}: invalid value `{raw}` for `{key}`")))
    }
    let scene = SceneConfig {
        size: get(&map, "size")?,
        channels: get(&map, "channels")?,
        buildings: (get(&map, "buildings_min")?, get(&map, "buildings_max")?),
        building_size: (get(&map, "building_size_min")?, get(&map, "building_size_max")?),
        texture_amplitude: get(&map, "texture_amplitude")?,
        boundary_radius: get(&map, "boundary_radius")?,
        rotated_fraction: get(&map, "rotated_fraction")?,
        seed: get(&map, "seed")?,
    };
    let spec = SplitSpec {
        ratios: [get(&map, "train_ratio")?, get(&map, "val_ratio")?, get(&map, "test_ratio")?],
        seed: get(&map, "split_seed")?,
    };
    Ok((scene, spec, get(&map, "count")?))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

/// Writes every sample plus `split.csv` and `gen_config.txt` into `dir`,
/// creating it if needed. Existing files of the same name are overwritten.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    for s in &ds.samples {
        let id = s.id;
        for (name, t) in [("img", &s.image), ("seg", &s.seg_mask), ("bnd", &s.bnd_mask)] {
            let ext = if name == "img" { "ppm" } else { "pgm" };
            let path = dir.join(format!("{name}_{id}.{ext}"));
            let bytes = netpbm::encode(t)?;
            write_file(&path, &bytes)?;
        }
    }
    let mut csv = String::from("id,subset\n");
    for (id, subset) in ds.split.assignments() {
        writeln!(csv, "{id},{subset}").unwrap();
    }
    write_file(&dir.join(SPLIT_FILE), csv.as_bytes())?;
    write_file(&dir.join(CONFIG_FILE), config_text(ds).as_bytes())
}

fn read_mask(path: &Path) -> Result<crate::tensor::Tensor> {
    let t = netpbm::read_netpbm(path).map_err(|e| match e {
        netpbm::NetpbmError::Io(io) => DataError::io(path, io),
        other => other.into(),
    })?;
    if let Some(v) = mask::first_non_binary(&t) {
        return Err(DataError::NonBinary(v));
    }
    Ok(t)
}

/// Reads a directory produced by [`write_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let read_text = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| DataError::io(&p, e))
    };
    let (scene, split_spec, count) = parse_config(&read_text(CONFIG_FILE)?)?;

    let mut split = Split::default();
    let mut seen = vec![false; count];
    let text = read_text(SPLIT_FILE)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("id,subset") {
        return Err(DataError::Malformed(format!("{SPLIT_FILE}: expected header `id,subset`")));
    }
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (id, subset) = line
            .split_once(',')
            .ok_or_else(|| DataError::Malformed(format!("{SPLIT_FILE}: bad row `{line}`")))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| DataError::Malformed(format!("{SPLIT_FILE}: bad id `{id}`")))?;
        if id >= count || std::mem::replace(&mut seen[id], true) {
            return Err(DataError::Malformed(format!("{SPLIT_FILE}: id {id} out of range or repeated")));
        }
        split.get_mut(subset.parse()?).push(id);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(DataError::Malformed(format!("{SPLIT_FILE}: id {missing} not assigned")));
    }

    let samples = (0..count)
        .map(|id| {
            let p = dir.join(format!("img_{id}.ppm"));
            let image = netpbm::read_netpbm(&p).map_err(|e| match e {
                netpbm::NetpbmError::Io(io) => DataError::io(&p, io),
                other => other.into(),
            })?;
            let seg_mask = read_mask(&dir.join(format!("seg_{id}.pgm")))?;
            let bnd_mask = read_mask(&dir.join(format!("bnd_{id}.pgm")))?;
            let (h, w) = (image.shape().h, image.shape().w);
            if [seg_mask.shape(), bnd_mask.shape()].iter().any(|s| s.h != h || s.w != w) {
                return Err(DataError::Malformed(format!("sample {id}: mask size differs from image")));
            }
            Ok(Sample {
                id,
                image,
                seg_mask,
                bnd_mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        scene,
        split_spec,
        samples,
        split,
    })
}
