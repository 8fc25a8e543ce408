#![allow(dead_code)]

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swapkit_core::backend::{ToyBackend, ToyConfig};
use swapkit_core::{BBox, PixelImage, SwapConfig};

pub const SOURCE_PROMPT: &str = "a photo of a dog on the grass";
pub const TARGET_PROMPT: &str = "a photo of a sks cat on the grass";

pub fn dog_box() -> BBox {
    BBox::new(4, 5, 10, 11, (16, 16)).unwrap()
}

pub fn toy_config(seed: u64) -> ToyConfig {
    ToyConfig {
        seed,
        ..ToyConfig::default()
    }
    .plant("dog", dog_box())
}

pub fn toy(seed: u64) -> ToyBackend {
    ToyBackend::new(toy_config(seed)).unwrap()
}

pub fn random_image(h: usize, w: usize, c: usize, seed: u64) -> PixelImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PixelImage::new(Array3::from_shape_fn((h, w, c), |_| rng.random::<f64>()))
}

pub fn swap_config(seed: u64) -> SwapConfig {
    SwapConfig {
        source_prompt: SOURCE_PROMPT.into(),
        target_prompt: TARGET_PROMPT.into(),
        source_concept: "dog".into(),
        target_concept: "sks cat".into(),
        seed,
        ..SwapConfig::default()
    }
}

/// Guided pattern `P_u + s (P_c - P_u)` of one branch with its hooks active.
pub fn guided_pattern(
    backend: &ToyBackend,
    prompt: &str,
    branch: swapkit_core::backend::Branch,
    guidance: f64,
) -> Array3<f64> {
    use swapkit_core::DenoiserBackend;
    let cond = backend.pattern(&backend.embed_prompt(prompt).unwrap(), Some(branch)).unwrap();
    let uncond = backend.pattern(&backend.embed_prompt("").unwrap(), Some(branch)).unwrap();
    uncond.values() + &((cond.values() - uncond.values()) * guidance)
}

/// Writes a benchmark layout with `concepts × swaps` pairs of random images.
pub fn write_layout(root: &Path, concepts: usize, swaps: usize, size: usize, channels: usize) {
    let mut tsv = String::from("swap_image\tsource_prompt\tsource_concept\n");
    for k in 0..concepts {
        let dir = root.join("concepts").join(format!("concept{k}"));
        fs::create_dir_all(&dir).unwrap();
        random_image(size, size, channels, 1000 + k as u64)
            .save_png(dir.join("0.png"))
            .unwrap();
    }
    fs::create_dir_all(root.join("swaps")).unwrap();
    fs::create_dir_all(root.join("gt_bboxes")).unwrap();
    for s in 0..swaps {
        let stem = format!("img{s:04}");
        random_image(size, size, channels, s as u64)
            .save_png(root.join("swaps").join(format!("{stem}.png")))
            .unwrap();
        let b = BBox::new(1, 2, size / 2, size - 2, (size, size)).unwrap();
        fs::write(
            root.join("gt_bboxes").join(format!("{stem}.json")),
            serde_json::to_string(&b).unwrap(),
        )
        .unwrap();
        tsv.push_str(&format!("{stem}.png\ta photo of a dog\tdog\n"));
    }
    fs::write(root.join("prompts.tsv"), tsv).unwrap();
}

