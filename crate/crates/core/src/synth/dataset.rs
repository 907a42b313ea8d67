//! On-disk pose datasets: generation from a planar scene, loading, and
//! ingestion of 7-Scenes style sequences.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::io::{parse_poses, read_image, write_image, write_poses};
use super::{render, Image, PlanarScene, Texture};
use crate::error::{ensure, Error, Result};
use crate::geom::{quat_from_matrix, CameraIntrinsics, Frame, Mat3, Quat, Se2Motion, Se3Pose};
use crate::tensor::seeded_rng;

/// Ordered `key = value` metadata stored next to `poses.txt`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Meta {
    entries: Vec<(String, String)>,
}

impl Meta {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text: String = self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut meta = Meta::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `key = value`"))?;
            meta.set(k.trim(), v.trim());
        }
        Ok(meta)
    }

    fn parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::contract(format!("metadata lacks `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::contract(format!("metadata `{key}` has invalid value `{raw}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseRecord {
    /// Image path relative to the dataset root.
    pub path: String,
    pub pose: Se3Pose,
}

/// A validated split: every record's image exists under `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseDataset {
    pub root: PathBuf,
    pub records: Vec<PoseRecord>,
    pub meta: Meta,
}

impl PoseDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].path)
    }

    pub fn load_image(&self, i: usize) -> Result<Image> {
        read_image(&self.image_path(i))
    }

    pub fn load_images(&self) -> Result<Vec<Image>> {
        (0..self.len()).map(|i| self.load_image(i)).collect()
    }

    pub fn poses(&self) -> Vec<Se3Pose> {
        self.records.iter().map(|r| r.pose).collect()
    }
}

/// Parameters of a synthetic planar dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub texture: Texture,
    /// Cells per side of the scene grid.
    pub grid: usize,
    /// Side of the textured square in meters.
    pub extent: f64,
    /// Texture blur in grid cells.
    pub blur: f64,
    pub f: f64,
    pub z0: f64,
    pub width: usize,
    pub height: usize,
    /// Translations are drawn uniformly from `[-t_range, t_range]^2`.
    pub t_range: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Training roll angles lie within `arc/2` degrees of zero and test roll
    /// angles outside it. `None` draws both from the full circle.
    pub held_out_arc: Option<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            texture: Texture::Noise,
            grid: 256,
            extent: 1.0,
            blur: 8.0,
            f: 64.0,
            z0: 1.0,
            width: 32,
            height: 32,
            t_range: 0.1,
            n_train: 200,
            n_test: 100,
            held_out_arc: Some(60.0),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.width >= 1 && self.height >= 1, "image size must be positive");
        ensure!(self.t_range >= 0.0 && self.t_range.is_finite(), "t_range must be non-negative");
        if let Some(arc) = self.held_out_arc {
            ensure!(arc > 0.0 && arc < 360.0, "held-out arc must lie in (0, 360) degrees");
        }
        CameraIntrinsics::new(self.f, self.z0)?;
        Ok(())
    }

    pub fn scene(&self, seed: u64) -> Result<PlanarScene> {
        let cam = CameraIntrinsics::new(self.f, self.z0)?;
        PlanarScene::procedural(self.texture, self.grid, self.extent, self.blur, cam, seed)
    }

    fn write_meta(&self, meta: &mut Meta, seed: u64) {
        meta.set("texture", self.texture.name());
        meta.set("grid", self.grid);
        meta.set("extent", self.extent);
        meta.set("blur", self.blur);
        meta.set("f", self.f);
        meta.set("z0", self.z0);
        meta.set("width", self.width);
        meta.set("height", self.height);
        meta.set("t_range", self.t_range);
        meta.set("n_train", self.n_train);
        meta.set("n_test", self.n_test);
        meta.set(
            "held_out_arc",
            self.held_out_arc.map_or("none".to_string(), |a| a.to_string()),
        );
        meta.set("seed", seed);
    }

    /// The spec and seed recorded by [`generate_dataset`].
    pub fn from_meta(meta: &Meta) -> Result<(Self, u64)> {
        let arc = match meta.get("held_out_arc") {
            Some("none") => None,
            _ => Some(meta.parsed("held_out_arc")?),
        };
        let texture: String = meta.parsed("texture")?;
        let spec = Self {
            texture: texture.parse()?,
            grid: meta.parsed("grid")?,
            extent: meta.parsed("extent")?,
            blur: meta.parsed("blur")?,
            f: meta.parsed("f")?,
            z0: meta.parsed("z0")?,
            width: meta.parsed("width")?,
            height: meta.parsed("height")?,
            t_range: meta.parsed("t_range")?,
            n_train: meta.parsed("n_train")?,
            n_test: meta.parsed("n_test")?,
            held_out_arc: arc,
        };
        Ok((spec, meta.parsed("seed")?))
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub train: PoseDataset,
    pub test: PoseDataset,
    pub scene: PlanarScene,
}

/// The scene-frame planar motion of a camera pose that rolls about `z` only.
pub fn planar_motion(pose: &Se3Pose) -> Result<Se2Motion> {
    let [w, x, y, z] = pose.q.as_array();
    ensure!(
        x.abs() < 1e-9 && y.abs() < 1e-9,
        "pose rotates about an axis other than z"
    );
    Ok(Se2Motion::new(2.0 * z.atan2(w), [pose.t[0], pose.t[1]], Frame::Scene))
}

fn sample_theta(rng: &mut impl Rng, arc: Option<f64>, train: bool) -> f64 {
    match arc {
        None => rng.gen_range(-PI..PI),
        Some(a) => {
            let half = a.to_radians() / 2.0;
            if train {
                rng.gen_range(-half..=half)
            } else {
                let theta = rng.gen_range(half..2.0 * PI - half);
                crate::geom::normalize_angle(theta)
            }
        }
    }
}

/// Renders `root/train` and `root/test`, each with quantized PGM images,
/// `poses.txt` and `meta.txt`. Images are rendered from exactly the poses
/// that [`load_dataset`] returns, so regeneration is bit-exact.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64, root: &Path) -> Result<GeneratedDataset> {
    spec.validate()?;
    let scene = spec.scene(seed)?;
    let mut rng = seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut splits = Vec::new();
    for (name, count, train) in [("train", spec.n_train, true), ("test", spec.n_test, false)] {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let theta = sample_theta(&mut rng, spec.held_out_arc, train);
            let t = [
                rng.gen_range(-spec.t_range..=spec.t_range),
                rng.gen_range(-spec.t_range..=spec.t_range),
            ];
            let drawn = Se3Pose::from_planar(&Se2Motion::new(theta, t, Frame::Scene))?;
            // The loader renormalizes what it reads; render from that.
            let pose = Se3Pose::new(drawn.t, Quat::new(drawn.q.as_array())?);
            let img = render(&scene, &planar_motion(&pose)?, spec.width, spec.height)?.quantized();
            let file = format!("img_{i:05}.pgm");
            write_image(&dir.join(&file), &img)?;
            records.push((file, drawn));
        }
        write_poses(&dir.join("poses.txt"), &records)?;
        let mut meta = Meta::default();
        meta.set("format", "epose-v1");
        meta.set("frame", "camera-to-world");
        meta.set("split", name);
        meta.set("count", count);
        spec.write_meta(&mut meta, seed);
        meta.write(&dir.join("meta.txt"))?;
        splits.push(load_dataset(&dir)?);
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(GeneratedDataset { train, test, scene })
}

/// Loads a split directory holding `poses.txt` and optionally `meta.txt`.
pub fn load_dataset(path: &Path) -> Result<PoseDataset> {
    let poses = path.join("poses.txt");
    let mut records = Vec::new();
    for (line, name, pose) in parse_poses(&poses)? {
        if !path.join(&name).is_file() {
            return Err(Error::parse(&poses, line, format!("image `{name}` does not exist")));
        }
        records.push(PoseRecord { path: name, pose });
    }
    let meta_path = path.join("meta.txt");
    let meta = if meta_path.is_file() {
        Meta::read(&meta_path)?
    } else {
        Meta::default()
    };
    if let Some(count) = meta.get("count") {
        if count.parse::<usize>().ok() != Some(records.len()) {
            return Err(Error::parse(
                &meta_path,
                1,
                format!("count {count} disagrees with {} records", records.len()),
            ));
        }
    }
    Ok(PoseDataset {
        root: path.to_path_buf(),
        records,
        meta,
    })
}

fn read_pose_matrix(path: &Path) -> Result<[[f64; 4]; 4]> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::parse(path, i + 1, "invalid number"))?;
        if vals.len() != 4 {
            return Err(Error::parse(path, i + 1, format!("expected 4 values, found {}", vals.len())));
        }
        rows.push(([vals[0], vals[1], vals[2], vals[3]], i + 1));
    }
    if rows.len() != 4 {
        return Err(Error::parse(path, rows.len().max(1), format!("expected 4 rows, found {}", rows.len())));
    }
    let mut m = [[0.0; 4]; 4];
    for (r, (row, _)) in rows.iter().enumerate() {
        m[r] = *row;
    }
    let last = m[3];
    if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > 1e-6 {
        return Err(Error::parse(path, rows[3].1, "last row must be 0 0 0 1"));
    }
    Ok(m)
}

/// Converts a directory of `frame-*.pose.txt` camera-to-world matrices and
/// matching `frame-*.color.{pgm,ppm}` images into the `poses.txt` layout.
pub fn convert_7scenes(src: &Path, dst: &Path) -> Result<PoseDataset> {
    let entries = fs::read_dir(src).map_err(|e| Error::io(src, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(src, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".pose.txt") {
            if stem.starts_with("frame-") {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    ensure!(!stems.is_empty(), "no frame-*.pose.txt files in {}", src.display());
    fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    let mut records = Vec::with_capacity(stems.len());
    for stem in &stems {
        let pose_path = src.join(format!("{stem}.pose.txt"));
        let m = read_pose_matrix(&pose_path)?;
        let r: Mat3 = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        let q = quat_from_matrix(&r).map_err(|e| Error::parse(&pose_path, 1, e.to_string()))?;
        let image = ["color.pgm", "color.ppm"]
            .iter()
            .map(|ext| format!("{stem}.{ext}"))
            .find(|f| src.join(f).is_file())
            .ok_or_else(|| Error::contract(format!("no color image for {stem} in {}", src.display())))?;
        let to = dst.join(&image);
        fs::copy(src.join(&image), &to).map_err(|e| Error::io(&to, e))?;
        records.push((image, Se3Pose::new([m[0][3], m[1][3], m[2][3]], q)));
    }
    write_poses(&dst.join("poses.txt"), &records)?;
    let mut meta = Meta::default();
    meta.set("format", "epose-v1");
    meta.set("frame", "camera-to-world");
    meta.set("source", "7scenes");
    meta.set("count", records.len());
    meta.write(&dst.join("meta.txt"))?;
    load_dataset(dst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("meta.txt");
        let mut m = Meta::default();
        m.set("a", 1.5);
        m.set("b", "x y");
        m.write(&p).unwrap();
        assert_eq!(Meta::read(&p).unwrap(), m);
    }

    #[test]
    fn planar_motion_inverts_from_planar() {
        let m = Se2Motion::new(2.5, [0.1, -0.2], Frame::Scene);
        let back = planar_motion(&Se3Pose::from_planar(&m).unwrap()).unwrap();
        assert!((back.theta() - 2.5).abs() < 1e-12);
        assert_eq!(back.translation(), [0.1, -0.2]);
    }

    #[test]
    fn tilted_pose_is_not_planar() {
        let q = Quat::new([0.9, 0.3, 0.0, 0.1]).unwrap();
        assert!(planar_motion(&Se3Pose::new([0.0; 3], q)).is_err());
    }

    #[test]
    fn held_out_arc_separates_splits() {
        let mut rng = seeded_rng(3);
        for _ in 0..1000 {
            let a = sample_theta(&mut rng, Some(90.0), true);
            let b = sample_theta(&mut rng, Some(90.0), false);
            assert!(a.abs() <= PI / 4.0 + 1e-12);
            assert!(b.abs() >= PI / 4.0 - 1e-12);
        }
    }

    #[test]
    fn missing_image_cites_the_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("poses.txt"), "# epose-v1\nnope.pgm 0 0 0 1 0 0 0\n").unwrap();
        let e = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(e.contains("poses.txt:2"), "{e}");
    }

    #[test]
    fn malformed_pose_matrix_cites_the_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("frame-000000.pose.txt"), "1 0 0 0\n0 1 0 0\n0 0 1 0\n").unwrap();
        let e = convert_7scenes(dir.path(), &dir.path().join("out")).unwrap_err().to_string();
        assert!(e.contains("frame-000000.pose.txt"), "{e}");
    }
}
