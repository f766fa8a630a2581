use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{contrast, iou, normalize_minmax, snr, MetricsError, RegionMask, Result};
use crate::stack::ImageStack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    /// Defect class id; `None` for the aggregate row.
    pub class_id: Option<u8>,
    pub depth_mm: Option<f64>,
    pub contrast: f64,
    pub snr_linear: f64,
    pub snr_db: f64,
    /// Stack index of the winning image; `None` for the aggregate row.
    pub image_index: Option<usize>,
    pub n_defect: usize,
    pub n_sound: usize,
}

impl ClassEntry {
    fn class_label(&self) -> String {
        match (self.class_id, self.depth_mm) {
            (None, _) => "all".to_string(),
            (Some(_), Some(d)) => format!("{d}"),
            (Some(c), None) => format!("class{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouEntry {
    pub name: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub image_id: String,
    /// One entry per class followed by the aggregate.
    pub classes: Vec<ClassEntry>,
    pub iou: Vec<IouEntry>,
}

impl MetricsReport {
    pub fn aggregate(&self) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.class_id.is_none())
    }

    pub fn class(&self, id: u8) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.class_id == Some(id))
    }

    pub fn add_iou(&mut self, name: impl Into<String>, pred: &RegionMask, gt: &RegionMask) -> Result<f64> {
        let value = iou(pred, gt)?;
        self.iou.push(IouEntry {
            name: name.into(),
            iou: value,
        });
        Ok(value)
    }

    /// `method,class_mm,contrast,snr_db,image_index`, full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,class_mm,contrast,snr_db,image_index\n");
        for c in &self.classes {
            let idx = c.image_index.map(|i| i.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{}",
                self.method,
                c.class_label(),
                c.contrast,
                c.snr_db,
                idx
            );
        }
        out
    }

    pub fn iou_csv(&self) -> String {
        let mut out = String::from("name,iou\n");
        for e in &self.iou {
            let _ = writeln!(out, "{},{:?}", e.name, e.iou);
        }
        out
    }
}

/// Scores every image of the stack after min-max normalization and keeps,
/// for each defect class, the image with the highest contrast (first index on
/// ties). The aggregate row averages the per-class winners.
///
/// Constant images cannot be normalized and are skipped.
pub fn best_of_stack(stack: &ImageStack, mask: &RegionMask) -> Result<MetricsReport> {
    if stack.n_y != mask.n_y() || stack.n_x != mask.n_x() {
        return Err(MetricsError::DimensionMismatch(format!(
            "stack {}x{} vs mask {}x{}",
            stack.n_y,
            stack.n_x,
            mask.n_y(),
            mask.n_x()
        )));
    }
    let normalized: Vec<Option<Vec<f64>>> = stack.images.iter().map(|img| normalize_minmax(img)).collect();
    let n_sound = mask.sound_count();
    let mut classes = Vec::with_capacity(mask.n_classes() + 1);
    for class in mask.class_ids() {
        let mut best: Option<(usize, f64)> = None;
        for (i, img) in normalized.iter().enumerate() {
            let Some(img) = img else { continue };
            let c = match contrast(img, mask, Some(class)) {
                Ok(c) => c,
                Err(MetricsError::ZeroMeanSum) => continue,
                Err(e) => return Err(e),
            };
            if best.map_or(true, |(_, b)| c > b) {
                best = Some((i, c));
            }
        }
        let (index, c) = best.ok_or_else(|| MetricsError::NoScorableImage(class.to_string()))?;
        let img = normalized[index].as_ref().expect("winner was scored");
        let s = match snr(img, mask, Some(class)) {
            Ok(s) => s,
            Err(MetricsError::DegenerateSound) => super::Snr::from_linear(f64::MAX),
            Err(e) => return Err(e),
        };
        classes.push(ClassEntry {
            class_id: Some(class),
            depth_mm: mask.depths()[class as usize - 1],
            contrast: c,
            snr_linear: s.linear,
            snr_db: s.db,
            image_index: Some(index),
            n_defect: mask.count(Some(class)),
            n_sound,
        });
    }
    if classes.is_empty() {
        return Err(MetricsError::EmptyRegion("defect"));
    }
    let n = classes.len() as f64;
    let aggregate = ClassEntry {
        class_id: None,
        depth_mm: None,
        contrast: classes.iter().map(|c| c.contrast).sum::<f64>() / n,
        snr_linear: classes.iter().map(|c| c.snr_linear).sum::<f64>() / n,
        snr_db: classes.iter().map(|c| c.snr_db).sum::<f64>() / n,
        image_index: None,
        n_defect: mask.count(None),
        n_sound,
    };
    classes.push(aggregate);
    Ok(MetricsReport {
        method: stack.method.clone(),
        image_id: String::new(),
        classes,
        iou: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(seed: u64, count: usize) -> (ImageStack, RegionMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = vec![0u8; 36];
        labels[7] = 1;
        labels[8] = 1;
        labels[27] = 2;
        let mask = RegionMask::with_depths(6, 6, labels, vec![0.5, 2.0]).unwrap();
        let images = (0..count)
            .map(|_| (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        (ImageStack::new(6, 6, "test", images).unwrap(), mask)
    }

    #[test]
    fn single_image_equals_direct_scores() {
        let (stack, mask) = fixture(1, 1);
        let report = best_of_stack(&stack, &mask).unwrap();
        let norm = normalize_minmax(&stack.images[0]).unwrap();
        for class in [1u8, 2] {
            let entry = report.class(class).unwrap();
            assert_eq!(entry.contrast, contrast(&norm, &mask, Some(class)).unwrap());
            assert_eq!(entry.snr_db, snr(&norm, &mask, Some(class)).unwrap().db);
            assert_eq!(entry.image_index, Some(0));
        }
        let agg = report.aggregate().unwrap();
        assert_eq!(agg.n_defect, 3);
        assert_eq!(agg.n_sound, 33);
    }

    #[test]
    fn constant_image_never_lowers_the_max() {
        let (mut stack, mask) = fixture(2, 4);
        let before = best_of_stack(&stack, &mask).unwrap();
        stack.images.push(vec![0.3; 36]);
        stack.labels.push("const".into());
        let after = best_of_stack(&stack, &mask).unwrap();
        for (a, b) in after.classes.iter().zip(&before.classes) {
            assert!(a.contrast >= b.contrast);
        }
    }

    #[test]
    fn permutation_only_remaps_index() {
        let (stack, mask) = fixture(3, 5);
        let base = best_of_stack(&stack, &mask).unwrap();
        let order = [3usize, 0, 4, 1, 2];
        let permuted = ImageStack::new(6, 6, "test", order.iter().map(|&i| stack.images[i].clone()).collect()).unwrap();
        let report = best_of_stack(&permuted, &mask).unwrap();
        for (a, b) in report.classes.iter().zip(&base.classes) {
            assert_eq!(a.contrast, b.contrast);
            assert_eq!(a.snr_db, b.snr_db);
            assert_eq!(a.image_index.map(|i| order[i]), b.image_index);
        }
    }

    #[test]
    fn positive_rescaling_invariant() {
        let (stack, mask) = fixture(4, 3);
        let base = best_of_stack(&stack, &mask).unwrap();
        let scaled: Vec<Vec<f64>> = stack
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| img.iter().map(|v| v * (i as f64 + 0.5) * 3.0).collect())
            .collect();
        let report = best_of_stack(&ImageStack::new(6, 6, "test", scaled).unwrap(), &mask).unwrap();
        for (a, b) in report.classes.iter().zip(&base.classes) {
            assert!((a.contrast - b.contrast).abs() < 1e-12);
            assert!((a.snr_db - b.snr_db).abs() < 1e-9);
            assert_eq!(a.image_index, b.image_index);
        }
    }

    #[test]
    fn csv_layout() {
        let (stack, mask) = fixture(5, 2);
        let csv = best_of_stack(&stack, &mask).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,class_mm,contrast,snr_db,image_index");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("test,0.5,"));
        assert!(lines[3].starts_with("test,all,"));
        assert!(lines[3].ends_with(','));
    }
}
