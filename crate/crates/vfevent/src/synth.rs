//! Synthetic toy datasets with controllable text/image information content.
//! Used by the verification suites and handy for smoke-testing the CLI
//! without any external data.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageArray;
use crate::error::Result;
use crate::seeding;

fn noisy_image(base: [f64; 3], noise: f64, resolution: usize, rng: &mut ChaCha8Rng) -> ImageArray {
    let mut pixels = Vec::with_capacity(3 * resolution * resolution);
    for _ in 0..resolution * resolution {
        for c in base {
            let v = c + rng.gen_range(-noise..noise);
            pixels.push(v.clamp(-1.0, 1.0));
        }
    }
    ImageArray { pixels, height: resolution, width: resolution }
}

fn write_record(
    manifest: &mut fs::File,
    dir: &Path,
    id: &str,
    text: &str,
    label: &str,
    image: &ImageArray,
) -> Result<()> {
    let rel = format!("images/{id}.png");
    crate::data::save_image(image, &dir.join(&rel))?;
    writeln!(
        manifest,
        r#"{{"id":"{id}","text":"{text}","event_type":"{label}","image":"{rel}"}}"#
    )?;
    Ok(())
}

/// Two color-coded classes plus "none": the class determines the dominant
/// channel (red vs blue) and the text names the color.
pub fn color_two_class(
    dir: &Path,
    per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    let manifest_path = dir.join("color.jsonl");
    let mut manifest = fs::File::create(&manifest_path)?;
    let mut rng = seeding::rng_from(seeding::derive_seed(seed, "color-two-class"));

    let specs: [(&str, &str, [f64; 3]); 3] = [
        ("bluish", "blue square picture", [-0.8, -0.8, 0.8]),
        ("reddish", "red square picture", [0.8, -0.8, -0.8]),
        ("none", "plain gray nothing", [0.0, 0.0, 0.0]),
    ];
    for (label, text, base) in specs {
        for j in 0..per_class {
            let img = noisy_image(base, 0.1, resolution, &mut rng);
            write_record(
                &mut manifest,
                dir,
                &format!("{label}-{j}"),
                text,
                label,
                &img,
            )?;
        }
    }
    Ok(manifest_path)
}

/// Mean training image per class of the color dataset (without noise).
pub fn color_class_means() -> [(&'static str, [f64; 3]); 2] {
    [("bluish", [-0.8, -0.8, 0.8]), ("reddish", [0.8, -0.8, -0.8])]
}

/// Four event types plus "none", where the label is a deterministic function
/// of two binary features: one always present in the text, the other present
/// in the text with probability `text_rate` and encoded in the image channels
/// with probability `image_rate` (a neutral image otherwise). With
/// `text_rate` = 0.7, 30% of the label information is missing from the text;
/// keeping `image_rate` below 1 ensures neither modality is sufficient on
/// its own, so a trained model must use both.
pub fn keyword_channel_dataset(
    dir: &Path,
    per_class: usize,
    resolution: usize,
    seed: u64,
    text_rate: f64,
    image_rate: f64,
) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    let manifest_path = dir.join("events.jsonl");
    let mut manifest = fs::File::create(&manifest_path)?;
    let mut rng = seeding::rng_from(seeding::derive_seed(seed, "keyword-channel"));

    // label = (b1, b2): b1 from the always-present keyword, b2 from the
    // sometimes-missing keyword and always from the image.
    let classes: [(&str, usize, usize); 4] = [
        ("alpha", 0, 0),
        ("bravo", 0, 1),
        ("charlie", 1, 0),
        ("delta", 1, 1),
    ];
    for (label, b1, b2) in classes {
        for j in 0..per_class {
            let w1 = if b1 == 0 { "north" } else { "south" };
            let w2 = if rng.gen::<f64>() < text_rate {
                if b2 == 0 {
                    "daylight"
                } else {
                    "midnight"
                }
            } else {
                "sometime"
            };
            let text = format!("{w1} incident {w2} report");
            let base = if rng.gen::<f64>() >= image_rate {
                [0.0, 0.0, 0.0]
            } else if b2 == 0 {
                [0.7, -0.7, 0.0]
            } else {
                [-0.7, 0.7, 0.0]
            };
            let img = noisy_image(base, 0.1, resolution, &mut rng);
            write_record(&mut manifest, dir, &format!("{label}-{j}"), &text, label, &img)?;
        }
    }
    for j in 0..per_class {
        let img = noisy_image([0.0, 0.0, -0.5], 0.1, resolution, &mut rng);
        write_record(
            &mut manifest,
            dir,
            &format!("none-{j}"),
            "calm quiet afternoon report",
            "none",
            &img,
        )?;
    }
    Ok(manifest_path)
}
