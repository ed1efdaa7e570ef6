//! Synthetic labelled two-modality volumes with class-dependent lesions.
//!
//! Every case shares the same anatomy: a flat background, a bright fixed
//! reference disk that anchors per-volume min-max scaling, and Gaussian noise.
//! Classes differ by an ellipsoidal lesion centred on the middle slice whose
//! in-plane radius and contrast come from the spec. The lesion is bright in
//! T2 and dark in T1.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_volume, write_manifest, DataError, ManifestEntry, Modality, Volume};
use crate::seed::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub cases_per_class: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Lesion radius per class as a fraction of the smaller in-plane extent.
    pub lesion_radius: [f64; 3],
    /// Lesion intensity offset per class; must increase strictly with class.
    pub lesion_contrast: [f64; 3],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            cases_per_class: 20,
            depth: 11,
            height: 16,
            width: 16,
            lesion_radius: [0.0, 0.25, 0.375],
            lesion_contrast: [0.0, 0.8, 1.2],
            noise_sigma: 0.04,
            seed: 7,
        }
    }
}

const T2_BACKGROUND: f64 = 0.3;
const T1_BACKGROUND: f64 = 0.6;
const ANCHOR_T2: f64 = 2.0;
const ANCHOR_T1: f64 = 1.5;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |field: &str, msg: String| {
            Err(DataError::Spec {
                field: field.into(),
                msg,
            })
        };
        for (field, v) in [
            ("depth", self.depth),
            ("height", self.height),
            ("width", self.width),
        ] {
            if v == 0 {
                return bad(field, "must be at least 1".into());
            }
        }
        if let Some(r) = self
            .lesion_radius
            .iter()
            .find(|r| !(0.0..=0.5).contains(*r))
        {
            return bad("lesion_radius", format!("{r} outside [0, 0.5]"));
        }
        if self
            .lesion_contrast
            .iter()
            .any(|c| !c.is_finite() || *c < 0.0)
        {
            return bad(
                "lesion_contrast",
                "values must be finite and non-negative".into(),
            );
        }
        if !self.lesion_contrast.windows(2).all(|w| w[0] < w[1]) {
            return bad(
                "lesion_contrast",
                "must increase strictly with class".into(),
            );
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return bad(
                "noise_sigma",
                format!("{} must be finite and non-negative", self.noise_sigma),
            );
        }
        Ok(())
    }

    /// Case identifier for the `index`-th case of `class`.
    pub fn case_id(class: usize, index: usize) -> String {
        format!("syn_c{class}_{index:04}")
    }

    /// Generates both volumes of one case in memory.
    pub fn generate_case(&self, class: usize, index: usize) -> (Volume, Volume) {
        let mut rng = rng_for(self.seed, &[stream::SYNTH, class as u64, index as u64]);
        let (d, h, w) = (self.depth, self.height, self.width);
        let extent = h.min(w) as f64;
        let jitter = extent / 8.0;
        let cy = (h as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
        let cx = (w as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
        let cz = (d as f64 - 1.0) / 2.0;
        let z_radius = (d as f64 / 2.0).max(1.0);
        let radius = self.lesion_radius[class] * extent;
        let contrast = self.lesion_contrast[class];
        let anchor = (0.15 * h as f64, 0.15 * w as f64, (0.08 * extent).max(1.0));
        let noise = Normal::new(0.0, self.noise_sigma).expect("validated sigma");

        let mut t1 = Vec::with_capacity(d * h * w);
        let mut t2 = Vec::with_capacity(d * h * w);
        for z in 0..d {
            let dz = (z as f64 - cz) / z_radius;
            let r_slice = radius * (1.0 - dz * dz).max(0.0).sqrt();
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = (y as f64, x as f64);
                    let in_anchor =
                        (fy - anchor.0).powi(2) + (fx - anchor.1).powi(2) <= anchor.2.powi(2);
                    let in_lesion =
                        r_slice > 0.0 && (fy - cy).powi(2) + (fx - cx).powi(2) <= r_slice * r_slice;
                    let (mut a, mut b) = if in_anchor {
                        (ANCHOR_T1, ANCHOR_T2)
                    } else if in_lesion {
                        (T1_BACKGROUND - 0.4 * contrast, T2_BACKGROUND + contrast)
                    } else {
                        (T1_BACKGROUND, T2_BACKGROUND)
                    };
                    a += noise.sample(&mut rng);
                    b += noise.sample(&mut rng);
                    t1.push(a as f32);
                    t2.push(b as f32);
                }
            }
        }
        let id = Self::case_id(class, index);
        (
            Volume::new((d, h, w), t1, Modality::T1, id.clone()).expect("finite by construction"),
            Volume::new((d, h, w), t2, Modality::T2, id).expect("finite by construction"),
        )
    }
}

/// Writes `volumes/<id>_t{1,2}.rvf` and `manifest.jsonl` under `out_dir`.
///
/// Cases are ordered by index, then class, so classes interleave.
pub fn gen_synthetic(
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>, DataError> {
    spec.validate()?;
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| DataError::io(&vol_dir, e))?;
    let mut entries = Vec::with_capacity(3 * spec.cases_per_class);
    for index in 0..spec.cases_per_class {
        for class in 0..3 {
            let (t1, t2) = spec.generate_case(class, index);
            let id = SyntheticSpec::case_id(class, index);
            let p1 = vol_dir.join(format!("{id}_t1.rvf"));
            let p2 = vol_dir.join(format!("{id}_t2.rvf"));
            save_volume(&t1, &p1)?;
            save_volume(&t2, &p2)?;
            entries.push(ManifestEntry {
                id,
                t1: p1,
                t2: p2,
                label: class,
            });
        }
    }
    write_manifest(&entries, &out_dir.join("manifest.jsonl"), out_dir)?;
    Ok(entries)
}
