//! Dataset generation, persistence, and loading.
//!
//! Layout: `<root>/manifest.json` plus `<root>/tensors/<id>.{rgb,depth,mask}.bin`
//! raw tensor files. Everything round-trips bit-exactly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use misdd_core::tensorfile::{read_tensor, write_tensor, RawTensor, TensorData};
use misdd_core::{derive_seed, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::{FileSet, Manifest, SampleRecord, MANIFEST_FORMAT, MANIFEST_VERSION};
use crate::synth::{generate_normal, inject_defect};
use crate::types::{DatasetSpec, DefectType, Mask, PairedSample, Split};
use crate::{DataError, Result};

#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    samples: Vec<PairedSample>,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.manifest.spec
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<(&SampleRecord, &PairedSample)> {
        self.by_id
            .get(id)
            .map(|&i| (&self.manifest.samples[i], &self.samples[i]))
    }

    /// Samples of one split, in manifest order.
    pub fn iter_split(&self, split: Split) -> impl Iterator<Item = (&SampleRecord, &PairedSample)> {
        self.manifest
            .samples
            .iter()
            .zip(&self.samples)
            .filter(move |(rec, _)| rec.split == split)
    }

    /// Samples of one class and split, in manifest order.
    pub fn iter_class_split<'a>(
        &'a self,
        class_name: &'a str,
        split: Split,
    ) -> impl Iterator<Item = (&'a SampleRecord, &'a PairedSample)> + 'a {
        self.iter_split(split)
            .filter(move |(rec, _)| rec.class_name == class_name)
    }

    /// Re-serialize the dataset into `dir` with the exact on-disk format
    /// of [`generate_dataset`].
    pub fn save_to(&self, dir: &Path) -> Result<()> {
        write_all(dir, &self.manifest, &self.samples)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn file_set(id: &str) -> FileSet {
    FileSet {
        rgb: format!("tensors/{id}.rgb.bin"),
        depth: format!("tensors/{id}.depth.bin"),
        mask: format!("tensors/{id}.mask.bin"),
    }
}

fn write_sample(root: &Path, files: &FileSet, sample: &PairedSample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let mut rgb_data = Vec::with_capacity(3 * h * w);
    for plane in &sample.rgb {
        rgb_data.extend_from_slice(plane.data());
    }
    write_tensor(
        &root.join(&files.rgb),
        &RawTensor::from_f64(vec![3, h, w], rgb_data),
    )?;
    write_tensor(&root.join(&files.depth), &RawTensor::from_matrix(&sample.depth))?;
    write_tensor(
        &root.join(&files.mask),
        &RawTensor::from_u8(vec![h, w], sample.gt_mask.bytes().to_vec()),
    )?;
    Ok(())
}

fn write_all(root: &Path, manifest: &Manifest, samples: &[PairedSample]) -> Result<()> {
    let tensor_dir = root.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(io_err(&tensor_dir))?;
    for (rec, sample) in manifest.samples.iter().zip(samples) {
        write_sample(root, &rec.files, sample)?;
    }
    // Manifest last, atomically: a readable manifest implies complete tensors.
    let manifest_path = root.join("manifest.json");
    let tmp = root.join("manifest.json.tmp-write");
    fs::write(&tmp, manifest.to_json_bytes()?).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &manifest_path).map_err(io_err(&manifest_path))?;
    Ok(())
}

/// Generate the corpus described by `spec` into `out_dir`.
/// Deterministic: dataset content is a pure function of the spec.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Dataset> {
    spec.validate()?;

    let mut records = Vec::new();
    let mut samples = Vec::new();

    for class in &spec.classes {
        // Training split: normals only.
        for i in 0..spec.n_train_normal {
            let id = format!("{class}_train_{i:04}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("sample.{id}")));
            let sample = generate_normal(&id, class, spec.image_size, &mut rng)?;
            records.push(SampleRecord {
                id: id.clone(),
                class_name: class.clone(),
                split: Split::Train,
                label: 0,
                defect_type: None,
                files: file_set(&id),
                mean_abs_delta_rgb: 0.0,
                mean_abs_delta_depth: 0.0,
            });
            samples.push(sample);
        }

        // Test split: normals first, then anomalies with defect types
        // assigned in blocks from the exact largest-remainder counts.
        let counts = spec.defect_mix.counts(spec.n_test_anomalous);
        let mut type_blocks = Vec::with_capacity(spec.n_test_anomalous);
        for (ty, &count) in DefectType::ALL.iter().zip(&counts) {
            type_blocks.extend(std::iter::repeat(*ty).take(count));
        }

        for i in 0..spec.n_test_normal + spec.n_test_anomalous {
            let id = format!("{class}_test_{i:04}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("sample.{id}")));
            let base = generate_normal(&id, class, spec.image_size, &mut rng)?;
            let (sample, defect_type) = if i < spec.n_test_normal {
                (base, None)
            } else {
                let ty = type_blocks[i - spec.n_test_normal];
                let mut defect_rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("defect.{id}")));
                (inject_defect(&base, ty, &mut defect_rng)?, Some(ty))
            };

            // Bookkeeping: per-channel mean absolute change inside the mask.
            let (delta_rgb, delta_depth) = if let Some(_ty) = defect_type {
                let base_again = {
                    let mut rng2 = ChaCha8Rng::seed_from_u64(derive_seed(
                        spec.seed,
                        &format!("sample.{id}"),
                    ));
                    generate_normal(&id, class, spec.image_size, &mut rng2)?
                };
                mask_deltas(&base_again, &sample)
            } else {
                (0.0, 0.0)
            };

            records.push(SampleRecord {
                id: id.clone(),
                class_name: class.clone(),
                split: Split::Test,
                label: sample.label,
                defect_type,
                files: file_set(&id),
                mean_abs_delta_rgb: delta_rgb,
                mean_abs_delta_depth: delta_depth,
            });
            samples.push(sample);
        }
    }

    let test_split_degenerate = spec.n_test_anomalous == 0 || spec.n_test_normal == 0;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        test_split_degenerate,
        samples: records,
    };

    write_all(out_dir, &manifest, &samples)?;

    let by_id = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), i))
        .collect();
    Ok(Dataset {
        root: out_dir.to_path_buf(),
        manifest,
        samples,
        by_id,
    })
}

/// Mean absolute per-pixel change inside the mask, per channel group.
fn mask_deltas(base: &PairedSample, defective: &PairedSample) -> (f64, f64) {
    let mask = &defective.gt_mask;
    let n = mask.count().max(1) as f64;
    let mut rgb_sum = 0.0;
    let mut depth_sum = 0.0;
    for r in 0..base.height() {
        for c in 0..base.width() {
            if !mask.get(r, c) {
                continue;
            }
            for k in 0..3 {
                rgb_sum += (defective.rgb[k].get(r, c) - base.rgb[k].get(r, c)).abs();
            }
            depth_sum += (defective.depth.get(r, c) - base.depth.get(r, c)).abs();
        }
    }
    (rgb_sum / (3.0 * n), depth_sum / n)
}

fn read_plane_rank2(root: &Path, rel: &str, id: &str) -> Result<Tensor> {
    let path = root.join(rel);
    if !path.exists() {
        return Err(DataError::MissingFile {
            id: id.to_string(),
            path,
        });
    }
    let raw = read_tensor(&path)?;
    raw.to_matrix().map_err(DataError::Core)
}

/// Load a dataset directory produced by [`generate_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = path.join("manifest.json");
    let bytes = fs::read(&manifest_path).map_err(|e| DataError::Manifest {
        path: manifest_path.clone(),
        reason: format!("unreadable: {e}"),
    })?;
    let manifest = Manifest::from_json_bytes(&manifest_path, &bytes)?;
    let size = manifest.spec.image_size;

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let rgb_path = path.join(&rec.files.rgb);
        if !rgb_path.exists() {
            return Err(DataError::MissingFile {
                id: rec.id.clone(),
                path: rgb_path,
            });
        }
        let raw_rgb = read_tensor(&rgb_path)?;
        let rgb = match (&raw_rgb.dims[..], &raw_rgb.data) {
            ([3, h, w], TensorData::F64(data)) if *h == size && *w == size => {
                let plane = |k: usize| {
                    Tensor::from_vec(size, size, data[k * size * size..(k + 1) * size * size].to_vec())
                };
                [plane(0), plane(1), plane(2)]
            }
            _ => {
                return Err(DataError::SampleInvalid {
                    id: rec.id.clone(),
                    detail: format!(
                        "rgb tensor dims {:?} inconsistent with manifest image_size {size}",
                        raw_rgb.dims
                    ),
                })
            }
        };

        let depth = read_plane_rank2(path, &rec.files.depth, &rec.id)?;
        if depth.shape() != (size, size) {
            return Err(DataError::SampleInvalid {
                id: rec.id.clone(),
                detail: format!(
                    "depth tensor is {}x{}, manifest says {size}x{size}",
                    depth.rows(),
                    depth.cols()
                ),
            });
        }

        let mask_path = path.join(&rec.files.mask);
        if !mask_path.exists() {
            return Err(DataError::MissingFile {
                id: rec.id.clone(),
                path: mask_path,
            });
        }
        let raw_mask = read_tensor(&mask_path)?;
        let gt_mask = match (&raw_mask.dims[..], &raw_mask.data) {
            ([h, w], TensorData::U8(data)) if *h == size && *w == size => {
                Mask::from_bytes(size, size, data.clone())
            }
            _ => {
                return Err(DataError::SampleInvalid {
                    id: rec.id.clone(),
                    detail: format!("mask tensor dims {:?} invalid", raw_mask.dims),
                })
            }
        };

        let sample = PairedSample {
            id: rec.id.clone(),
            class_name: rec.class_name.clone(),
            rgb,
            depth,
            gt_mask,
            label: rec.label,
        };
        sample.validate()?;
        samples.push(sample);
    }

    let by_id = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), i))
        .collect();
    Ok(Dataset {
        root: path.to_path_buf(),
        manifest,
        samples,
        by_id,
    })
}
