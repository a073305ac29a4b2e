//! Synthetic two-domain, multi-camera identity data.
//!
//! Every identity owns a latent centroid. An image is the centroid plus
//! latent noise, pushed through its camera's affine map into observation
//! space, plus observation noise. Each domain has its own cameras, and the
//! target centroids are offset by a fixed domain shift. Because the latents
//! and camera maps are kept, a target image can be re-rendered through any
//! other target camera exactly, which serves as the camera-style transfer.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, l2_normalize, DenseMat, Prng, EPS};

pub const SOURCE_TRAIN_FILE: &str = "source_train.jsonl";
pub const TARGET_TRAIN_FILE: &str = "target_train.jsonl";
pub const TARGET_CAMSTYLE_FILE: &str = "target_camstyle.jsonl";
pub const TARGET_QUERY_FILE: &str = "target_query.jsonl";
pub const TARGET_GALLERY_FILE: &str = "target_gallery.jsonl";
pub const TARGET_TRAIN_GT_FILE: &str = "target_train_gt.jsonl";
pub const GEN_CONFIG_FILE: &str = "gen_config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One observation. `index` is the position of the sample inside its own
/// split file; for camera-transferred samples `origin_index` is the
/// target-train index of the real image and `transferred_to_camera` the
/// rendering camera, while `camera_id` stays the real image's camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub index: usize,
    #[serde(rename = "pid")]
    pub person_id: Option<u32>,
    #[serde(rename = "cam")]
    pub camera_id: u32,
    pub domain: Domain,
    pub vec: Vec<f64>,
    #[serde(rename = "origin")]
    pub origin_index: usize,
    #[serde(rename = "to_cam")]
    pub transferred_to_camera: Option<u32>,
}

/// Identity label of one target-train image, kept apart from the training
/// files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub index: usize,
    pub pid: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_source_ids: usize,
    pub n_target_ids: usize,
    pub cameras_source: usize,
    pub cameras_target: usize,
    pub images_per_id_per_camera: usize,
    pub query_per_id_per_camera: usize,
    pub gallery_per_id_per_camera: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub camera_transform_scale: f64,
    pub noise_sigma: f64,
    pub domain_shift_scale: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_source_ids: 25,
            n_target_ids: 25,
            cameras_source: 4,
            cameras_target: 4,
            images_per_id_per_camera: 8,
            query_per_id_per_camera: 1,
            gallery_per_id_per_camera: 2,
            latent_dim: 16,
            obs_dim: 32,
            camera_transform_scale: 0.5,
            noise_sigma: 0.3,
            domain_shift_scale: 2.0,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_source_ids", self.n_source_ids),
            ("n_target_ids", self.n_target_ids),
            ("cameras_source", self.cameras_source),
            ("cameras_target", self.cameras_target),
            ("images_per_id_per_camera", self.images_per_id_per_camera),
            ("query_per_id_per_camera", self.query_per_id_per_camera),
            ("gallery_per_id_per_camera", self.gallery_per_id_per_camera),
            ("latent_dim", self.latent_dim),
            ("obs_dim", self.obs_dim),
        ];
        for (field, value) in counts {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        let reals = [
            ("camera_transform_scale", self.camera_transform_scale),
            ("noise_sigma", self.noise_sigma),
            ("domain_shift_scale", self.domain_shift_scale),
        ];
        for (field, value) in reals {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        if self
            .n_source_ids
            .checked_add(self.n_target_ids)
            .is_none_or(|n| n > u32::MAX as usize)
        {
            return Err(Error::config("n_target_ids", "too many identities"));
        }
        Ok(())
    }

    pub fn n_source_train(&self) -> usize {
        self.n_source_ids * self.cameras_source * self.images_per_id_per_camera
    }

    pub fn n_target_train(&self) -> usize {
        self.n_target_ids * self.cameras_target * self.images_per_id_per_camera
    }

    pub fn n_camstyle(&self) -> usize {
        self.n_target_train() * (self.cameras_target - 1)
    }

    pub fn n_query(&self) -> usize {
        self.n_target_ids * self.cameras_target * self.query_per_id_per_camera
    }

    pub fn n_gallery(&self) -> usize {
        self.n_target_ids * self.cameras_target * self.gallery_per_id_per_camera
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub config: GenConfig,
    pub source_train: Vec<Sample>,
    /// Target-train samples carry no person id.
    pub target_train: Vec<Sample>,
    pub target_camstyle: Vec<Sample>,
    pub target_query: Vec<Sample>,
    pub target_gallery: Vec<Sample>,
    /// Labels of `target_train`, for evaluation only; `None` when the file
    /// is absent.
    pub ground_truth: Option<Vec<GroundTruth>>,
}

/// Affine camera map `z ↦ A·z + b` from latent to observation space.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraMap {
    pub linear: DenseMat,
    pub offset: Vec<f64>,
}

impl CameraMap {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.linear.matvec(z);
        axpy(&mut out, 1.0, &self.offset);
        out
    }
}

/// Generator state that is not written to disk: camera maps, the latents of
/// the target-train images, and the stream used for transfer noise.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub source_cameras: Vec<CameraMap>,
    pub target_cameras: Vec<CameraMap>,
    pub target_train_latents: Vec<Vec<f64>>,
    transfer_rng: Prng,
}

fn gaussian_mat(rng: &mut Prng, rows: usize, cols: usize, scale: f64) -> DenseMat {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    DenseMat::from_vec(rows, cols, data).expect("shape")
}

fn gaussian_vec(rng: &mut Prng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn camera_rig(rng: &mut Prng, base: &DenseMat, cameras: usize, scale: f64) -> Vec<CameraMap> {
    let (obs, latent) = (base.rows(), base.cols());
    (0..cameras)
        .map(|_| {
            let noise = gaussian_mat(rng, obs, latent, 1.0 / (latent as f64).sqrt());
            let linear: Vec<f64> = base
                .as_slice()
                .iter()
                .zip(noise.as_slice())
                .map(|(b, n)| b + scale * n)
                .collect();
            let offset = gaussian_vec(rng, obs, scale);
            CameraMap {
                linear: DenseMat::from_vec(obs, latent, linear).expect("shape"),
                offset,
            }
        })
        .collect()
}

fn add_noise(v: &mut [f64], rng: &mut Prng, sigma: f64) {
    for x in v {
        *x += sigma * rng.normal();
    }
}

/// Draw the identities, cameras, and all real images. Camera-transferred
/// samples are left empty; see [`camstyle_augment`].
pub fn generate_world(cfg: &GenConfig) -> Result<(DatasetBundle, SyntheticWorld)> {
    cfg.validate()?;
    let root = Prng::new(cfg.seed);
    let mut world_rng = root.fork(1);
    let mut image_rng = root.fork(2);
    let transfer_rng = root.fork(3);

    let (latent, obs) = (cfg.latent_dim, cfg.obs_dim);
    let base = gaussian_mat(&mut world_rng, obs, latent, 1.0 / (latent as f64).sqrt());
    let source_cameras = camera_rig(
        &mut world_rng,
        &base,
        cfg.cameras_source,
        cfg.camera_transform_scale,
    );
    let target_cameras = camera_rig(
        &mut world_rng,
        &base,
        cfg.cameras_target,
        cfg.camera_transform_scale,
    );
    let shift_dir = l2_normalize(&gaussian_vec(&mut world_rng, latent, 1.0), EPS);
    let source_centroids: Vec<Vec<f64>> = (0..cfg.n_source_ids)
        .map(|_| gaussian_vec(&mut world_rng, latent, 1.0))
        .collect();
    let target_centroids: Vec<Vec<f64>> = (0..cfg.n_target_ids)
        .map(|_| {
            let mut c = gaussian_vec(&mut world_rng, latent, 1.0);
            axpy(&mut c, cfg.domain_shift_scale, &shift_dir);
            c
        })
        .collect();

    let sigma = cfg.noise_sigma;
    let mut render = |centroid: &[f64], cam: &CameraMap| -> (Vec<f64>, Vec<f64>) {
        let mut z = centroid.to_vec();
        add_noise(&mut z, &mut image_rng, sigma);
        let mut v = cam.apply(&z);
        add_noise(&mut v, &mut image_rng, sigma);
        (z, v)
    };

    let source_pid = |id: usize| id as u32;
    let target_pid = |id: usize| (cfg.n_source_ids + id) as u32;

    let mut source_train = Vec::with_capacity(cfg.n_source_train());
    for (id, centroid) in source_centroids.iter().enumerate() {
        for (c, cam) in source_cameras.iter().enumerate() {
            for _ in 0..cfg.images_per_id_per_camera {
                let (_, vec) = render(centroid, cam);
                let index = source_train.len();
                source_train.push(Sample {
                    index,
                    person_id: Some(source_pid(id)),
                    camera_id: c as u32,
                    domain: Domain::Source,
                    vec,
                    origin_index: index,
                    transferred_to_camera: None,
                });
            }
        }
    }

    let mut target_train = Vec::with_capacity(cfg.n_target_train());
    let mut ground_truth = Vec::with_capacity(cfg.n_target_train());
    let mut latents = Vec::with_capacity(cfg.n_target_train());
    for (id, centroid) in target_centroids.iter().enumerate() {
        for (c, cam) in target_cameras.iter().enumerate() {
            for _ in 0..cfg.images_per_id_per_camera {
                let (z, vec) = render(centroid, cam);
                let index = target_train.len();
                target_train.push(Sample {
                    index,
                    person_id: None,
                    camera_id: c as u32,
                    domain: Domain::Target,
                    vec,
                    origin_index: index,
                    transferred_to_camera: None,
                });
                ground_truth.push(GroundTruth {
                    index,
                    pid: target_pid(id),
                });
                latents.push(z);
            }
        }
    }

    let mut held_out = |per_camera: usize| {
        let mut out = Vec::new();
        for (id, centroid) in target_centroids.iter().enumerate() {
            for (c, cam) in target_cameras.iter().enumerate() {
                for _ in 0..per_camera {
                    let (_, vec) = render(centroid, cam);
                    let index = out.len();
                    out.push(Sample {
                        index,
                        person_id: Some(target_pid(id)),
                        camera_id: c as u32,
                        domain: Domain::Target,
                        vec,
                        origin_index: index,
                        transferred_to_camera: None,
                    });
                }
            }
        }
        out
    };
    let target_query = held_out(cfg.query_per_id_per_camera);
    let target_gallery = held_out(cfg.gallery_per_id_per_camera);

    let bundle = DatasetBundle {
        config: cfg.clone(),
        source_train,
        target_train,
        target_camstyle: Vec::new(),
        target_query,
        target_gallery,
        ground_truth: Some(ground_truth),
    };
    let world = SyntheticWorld {
        source_cameras,
        target_cameras,
        target_train_latents: latents,
        transfer_rng,
    };
    Ok((bundle, world))
}

/// Render every real target-train image through each of the other target
/// cameras, `C − 1` transfers per image, replacing any previous transfers.
pub fn camstyle_augment(bundle: &mut DatasetBundle, world: &mut SyntheticWorld) {
    let sigma = bundle.config.noise_sigma;
    let rng = &mut world.transfer_rng;
    let mut out = Vec::with_capacity(bundle.config.n_camstyle());
    for real in &bundle.target_train {
        let z = &world.target_train_latents[real.index];
        for (c, cam) in world.target_cameras.iter().enumerate() {
            if c as u32 == real.camera_id {
                continue;
            }
            let mut vec = cam.apply(z);
            add_noise(&mut vec, rng, sigma);
            out.push(Sample {
                index: out.len(),
                person_id: None,
                camera_id: real.camera_id,
                domain: Domain::Target,
                vec,
                origin_index: real.index,
                transferred_to_camera: Some(c as u32),
            });
        }
    }
    bundle.target_camstyle = out;
}

/// Full bundle: real images plus camera-style transfers.
pub fn generate(cfg: &GenConfig) -> Result<DatasetBundle> {
    let (mut bundle, mut world) = generate_world(cfg)?;
    camstyle_augment(&mut bundle, &mut world);
    Ok(bundle)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parse a JSON document, reporting syntax errors with their byte offset.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        let offset = byte_offset(&text, e.line(), e.column());
        Error::Schema {
            path: path.to_path_buf(),
            line: e.line(),
            message: format!("byte offset {offset}: {e}"),
        }
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let preceding: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    preceding + column.saturating_sub(1)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

struct SplitRules {
    domain: Domain,
    labeled: bool,
    transferred: bool,
    cameras: usize,
}

fn validate_split(
    path: &Path,
    samples: &[Sample],
    obs_dim: usize,
    rules: SplitRules,
) -> Result<()> {
    for (pos, s) in samples.iter().enumerate() {
        let fail = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: pos + 1,
            message,
        };
        if s.index != pos {
            return Err(fail(format!(
                "index {} does not match line position {pos}",
                s.index
            )));
        }
        if s.vec.len() != obs_dim {
            return Err(fail(format!(
                "vec has length {}, expected obs_dim {obs_dim}",
                s.vec.len()
            )));
        }
        if s.vec.iter().any(|x| !x.is_finite()) {
            return Err(fail("vec contains a non-finite value".into()));
        }
        if s.domain != rules.domain {
            return Err(fail(format!(
                "domain {:?} not allowed in this file",
                s.domain
            )));
        }
        if s.person_id.is_some() != rules.labeled {
            return Err(fail(if rules.labeled {
                "pid is required in this file".into()
            } else {
                "pid must be null in this file".into()
            }));
        }
        if s.camera_id as usize >= rules.cameras {
            return Err(fail(format!(
                "cam {} out of range (C = {})",
                s.camera_id, rules.cameras
            )));
        }
        match (rules.transferred, s.transferred_to_camera) {
            (false, None) => {
                if s.origin_index != s.index {
                    return Err(fail("origin must equal index for a real sample".into()));
                }
            }
            (true, Some(to)) => {
                if to == s.camera_id || to as usize >= rules.cameras {
                    return Err(fail(format!("invalid to_cam {to} for cam {}", s.camera_id)));
                }
            }
            (false, Some(_)) => return Err(fail("to_cam must be null in this file".into())),
            (true, None) => return Err(fail("to_cam is required in this file".into())),
        }
    }
    Ok(())
}

/// Write every split plus `gen_config.json` into `dir`.
pub fn write_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json_pretty(&dir.join(GEN_CONFIG_FILE), &bundle.config)?;
    write_jsonl(&dir.join(SOURCE_TRAIN_FILE), &bundle.source_train)?;
    write_jsonl(&dir.join(TARGET_TRAIN_FILE), &bundle.target_train)?;
    write_jsonl(&dir.join(TARGET_CAMSTYLE_FILE), &bundle.target_camstyle)?;
    write_jsonl(&dir.join(TARGET_QUERY_FILE), &bundle.target_query)?;
    write_jsonl(&dir.join(TARGET_GALLERY_FILE), &bundle.target_gallery)?;
    if let Some(gt) = &bundle.ground_truth {
        write_jsonl(&dir.join(TARGET_TRAIN_GT_FILE), gt)?;
    }
    Ok(())
}

/// Read and validate a dataset directory. The ground-truth file is optional.
pub fn read_dataset(dir: &Path) -> Result<DatasetBundle> {
    let config: GenConfig = read_json(&dir.join(GEN_CONFIG_FILE))?;
    config.validate()?;
    let obs = config.obs_dim;
    let path = |name: &str| -> PathBuf { dir.join(name) };

    let source_train: Vec<Sample> = read_jsonl(&path(SOURCE_TRAIN_FILE))?;
    validate_split(
        &path(SOURCE_TRAIN_FILE),
        &source_train,
        obs,
        SplitRules {
            domain: Domain::Source,
            labeled: true,
            transferred: false,
            cameras: config.cameras_source,
        },
    )?;
    let target_train: Vec<Sample> = read_jsonl(&path(TARGET_TRAIN_FILE))?;
    validate_split(
        &path(TARGET_TRAIN_FILE),
        &target_train,
        obs,
        SplitRules {
            domain: Domain::Target,
            labeled: false,
            transferred: false,
            cameras: config.cameras_target,
        },
    )?;
    let target_camstyle: Vec<Sample> = read_jsonl(&path(TARGET_CAMSTYLE_FILE))?;
    validate_split(
        &path(TARGET_CAMSTYLE_FILE),
        &target_camstyle,
        obs,
        SplitRules {
            domain: Domain::Target,
            labeled: false,
            transferred: true,
            cameras: config.cameras_target,
        },
    )?;
    for (pos, s) in target_camstyle.iter().enumerate() {
        let origin = target_train
            .get(s.origin_index)
            .ok_or_else(|| Error::Schema {
                path: path(TARGET_CAMSTYLE_FILE),
                line: pos + 1,
                message: format!("origin {} is not a target-train index", s.origin_index),
            })?;
        if origin.camera_id != s.camera_id {
            return Err(Error::Schema {
                path: path(TARGET_CAMSTYLE_FILE),
                line: pos + 1,
                message: "cam differs from the origin image's camera".into(),
            });
        }
    }
    let held_out = |name: &str| -> Result<Vec<Sample>> {
        let rows: Vec<Sample> = read_jsonl(&path(name))?;
        validate_split(
            &path(name),
            &rows,
            obs,
            SplitRules {
                domain: Domain::Target,
                labeled: true,
                transferred: false,
                cameras: config.cameras_target,
            },
        )?;
        Ok(rows)
    };
    let target_query = held_out(TARGET_QUERY_FILE)?;
    let target_gallery = held_out(TARGET_GALLERY_FILE)?;

    let gt_path = path(TARGET_TRAIN_GT_FILE);
    let ground_truth = if gt_path.exists() {
        let gt: Vec<GroundTruth> = read_jsonl(&gt_path)?;
        for (pos, g) in gt.iter().enumerate() {
            if g.index != pos || pos >= target_train.len() {
                return Err(Error::Schema {
                    path: gt_path.clone(),
                    line: pos + 1,
                    message: format!("index {} does not match a target-train line", g.index),
                });
            }
        }
        Some(gt)
    } else {
        None
    };

    Ok(DatasetBundle {
        config,
        source_train,
        target_train,
        target_camstyle,
        target_query,
        target_gallery,
        ground_truth,
    })
}
