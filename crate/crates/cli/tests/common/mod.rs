#![allow(dead_code)]

use std::path::{Path, PathBuf};

use safer_core::geometry::synth::SyntheticFace;
use safer_core::geometry::{write_sidecar, FaceBox};
use safer_core::raster::save_gray_png;
use safer_core::{DatasetManifest, EmotionLabel, SampleRecord};

/// Writes `per_class` scenes per emotion (64×64, face box at (22, 8, 20, 20))
/// with landmark sidecars, person masks and alternating gender tags, plus
/// `manifest.jsonl`. Returns the manifest path.
pub fn write_dataset(dir: &Path, per_class: usize) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let face_box = FaceBox::new(22.0, 8.0, 20.0, 20.0).unwrap();
    let mut records = Vec::new();
    for label in EmotionLabel::ALL {
        for i in 0..per_class {
            let id = format!("{}_{i}", label.name().to_lowercase());
            let tint = label.code() as f32 / 7.0;
            let (img, det, person) = SyntheticFace::for_label(label).render_scene(64, 64, face_box, |x, y| {
                [tint, 0.5 * y as f32 / 64.0, 0.7 * x as f32 / 64.0]
            });
            img.save_png(dir.join(format!("{id}.png"))).unwrap();
            write_sidecar(&dir.join(format!("{id}.json")), &[det]).unwrap();
            save_gray_png(&person.mapv(|v| if v { 1.0 } else { 0.0 }), dir.join(format!("{id}_mask.png"))).unwrap();
            let mut r = SampleRecord::new(&id, format!("{id}.png")).with_label(label);
            r.landmark_path = Some(format!("{id}.json").into());
            r.person_mask_path = Some(format!("{id}_mask.png").into());
            let gender = if i % 2 == 0 { "male" } else { "female" };
            r.demographic_tags = Some([("gender".to_string(), gender.to_string())].into());
            records.push(r);
        }
    }
    let path = dir.join("manifest.jsonl");
    DatasetManifest::new("fixture", records).unwrap().save(&path).unwrap();
    path
}
