//! Patch tokenization and batched model inputs.

use crate::error::{Error, Result};
use crate::geometry::{plucker_ray_map, projection_matrix, Intrinsics, Pose, ProjectionMatrix, TokenFrames};
use crate::scenegen::{CameraView, Episode, Image};
use crate::tensor::{Scalar, Tensor};

use super::ModelConfig;

/// Frame in which Plücker rays are written into tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RayFrame {
    World,
    /// Rays relative to their own camera; pose information then enters only
    /// through relative attention.
    Camera,
}

fn check_patch(height: usize, width: usize, p: usize) -> Result<()> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::config(format!("patch size {p} does not divide {height}x{width}")));
    }
    Ok(())
}

/// Splits an image into `p x p` patches, each flattened row-major as
/// `(py, px, channel)`: output `[(H/p)(W/p), 3p^2]`.
pub fn patchify_pixels(image: &Image, p: usize) -> Result<Vec<f32>> {
    let (h, w) = (image.height, image.width);
    check_patch(h, w, p)?;
    let mut out = Vec::with_capacity(h * w * 3);
    for ty in 0..h / p {
        for tx in 0..w / p {
            for py in 0..p {
                let start = ((ty * p + py) * w + tx * p) * 3;
                out.extend_from_slice(&image.data[start..start + 3 * p]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify_pixels`].
pub fn unpatchify(tokens: &[f32], height: usize, width: usize, p: usize) -> Result<Image> {
    check_patch(height, width, p)?;
    if tokens.len() != height * width * 3 {
        return Err(Error::dim(format!(
            "{} patch values for a {height}x{width} image",
            tokens.len()
        )));
    }
    let mut data = vec![0.0; tokens.len()];
    let mut src = tokens.chunks_exact(3 * p);
    for ty in 0..height / p {
        for tx in 0..width / p {
            for py in 0..p {
                let start = ((ty * p + py) * width + tx * p) * 3;
                data[start..start + 3 * p].copy_from_slice(src.next().unwrap());
            }
        }
    }
    Image::new(height, width, data)
}

/// Plücker rays grouped per patch: `[(H/p)(W/p), 6p^2]`.
fn ray_patches(pose: &Pose, k: &Intrinsics, height: usize, width: usize, p: usize, frame: RayFrame) -> Result<Vec<f64>> {
    check_patch(height, width, p)?;
    let pose = match frame {
        RayFrame::World => *pose,
        RayFrame::Camera => Pose::identity(),
    };
    let map = plucker_ray_map(&pose, k, height, width)?;
    let mut out = Vec::with_capacity(height * width * 6);
    for ty in 0..height / p {
        for tx in 0..width / p {
            for py in 0..p {
                let start = ((ty * p + py) * width + tx * p) * 6;
                out.extend_from_slice(&map.data[start..start + 6 * p]);
            }
        }
    }
    Ok(out)
}

/// Raw (pre-embedding) tokens of one posed view: pixels then rays per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedView {
    /// Row-major `[count, width]`.
    pub tokens: Vec<f64>,
    pub count: usize,
    /// `9 p^2`.
    pub width: usize,
}

pub fn patchify(view: &CameraView, p: usize, frame: RayFrame) -> Result<TokenizedView> {
    let pixels = patchify_pixels(&view.image, p)?;
    let rays = ray_patches(&view.pose, &view.intrinsics, view.image.height, view.image.width, p, frame)?;
    let count = (view.image.height / p) * (view.image.width / p);
    let (pw, rw) = (3 * p * p, 6 * p * p);
    let mut tokens = Vec::with_capacity(count * (pw + rw));
    for (px, ray) in pixels.chunks_exact(pw).zip(rays.chunks_exact(rw)) {
        tokens.extend(px.iter().map(|&v| v as f64));
        tokens.extend_from_slice(ray);
    }
    Ok(TokenizedView {
        tokens,
        count,
        width: pw + rw,
    })
}

fn frames_for<T: Scalar>(cams: &[(Pose, Intrinsics)], per_view: usize) -> Result<TokenFrames<T>> {
    let mut list: Vec<ProjectionMatrix> = Vec::with_capacity(cams.len() * per_view);
    for (pose, k) in cams {
        let p = projection_matrix(pose, k)?;
        list.extend(std::iter::repeat_n(p, per_view));
    }
    Ok(TokenFrames::new(&list))
}

/// Context views of `batch` scenes, tokenized for one model.
#[derive(Clone, Debug)]
pub struct ContextBatch<T> {
    pub batch: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// `[B, V_C hw, 9p^2]`.
    pub tokens: Tensor<T>,
    /// `[B, V_C hw, 6p^2]`.
    pub rays: Tensor<T>,
    pub frames: TokenFrames<T>,
}

impl<T: Scalar> ContextBatch<T> {
    pub fn new(config: &ModelConfig, scenes: &[&[CameraView]]) -> Result<Self> {
        let first = scenes
            .first()
            .and_then(|s| s.first())
            .ok_or_else(|| Error::config("context batch needs at least one view"))?;
        let (h, w, p) = (first.image.height, first.image.width, config.patch_size);
        config.check_resolution(h, w)?;
        let views = scenes[0].len();
        let hw = config.tokens_per_view(h, w);
        let frame = config.ray_frame();
        let (mut tokens, mut rays, mut cams) = (Vec::new(), Vec::new(), Vec::new());
        for scene in scenes {
            if scene.len() != views {
                return Err(Error::dim("every scene in a batch needs the same V_C"));
            }
            for v in scene.iter() {
                if (v.image.height, v.image.width) != (h, w) {
                    return Err(Error::dim("context views differ in resolution"));
                }
                let t = patchify(v, p, frame)?;
                for row in t.tokens.chunks_exact(t.width) {
                    tokens.extend(row.iter().map(|&x| T::of(x)));
                    rays.extend(row[3 * p * p..].iter().map(|&x| T::of(x)));
                }
                cams.push((v.pose, v.intrinsics));
            }
        }
        let b = scenes.len();
        Ok(ContextBatch {
            batch: b,
            views,
            height: h,
            width: w,
            patch: p,
            tokens: Tensor::new(&[b, views * hw, 9 * p * p], tokens)?,
            rays: Tensor::new(&[b, views * hw, 6 * p * p], rays)?,
            frames: frames_for(&cams, hw)?,
        })
    }

    pub fn tokens_per_view(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
}

/// Target cameras of `batch` scenes, optionally with ground-truth images.
#[derive(Clone, Debug)]
pub struct TargetBatch<T> {
    pub batch: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Ray-only query tokens `[B, V_T hw, 6p^2]`.
    pub tokens: Tensor<T>,
    pub frames: TokenFrames<T>,
    /// Patchified ground truth `[B, V_T hw, 3p^2]`.
    pub images: Option<Tensor<T>>,
}

impl<T: Scalar> TargetBatch<T> {
    pub fn new(config: &ModelConfig, cams: &[Vec<(Pose, Intrinsics)>], height: usize, width: usize) -> Result<Self> {
        config.check_resolution(height, width)?;
        let p = config.patch_size;
        let views = cams.first().map_or(0, Vec::len);
        if views == 0 {
            return Err(Error::config("target batch needs at least one view"));
        }
        let hw = config.tokens_per_view(height, width);
        let frame = config.ray_frame();
        let mut tokens = Vec::with_capacity(cams.len() * views * hw * 6 * p * p);
        for scene in cams {
            if scene.len() != views {
                return Err(Error::dim("every scene in a batch needs the same V_T"));
            }
            for (pose, k) in scene {
                tokens.extend(ray_patches(pose, k, height, width, p, frame)?.into_iter().map(T::of));
            }
        }
        let flat: Vec<(Pose, Intrinsics)> = cams.iter().flatten().copied().collect();
        Ok(TargetBatch {
            batch: cams.len(),
            views,
            height,
            width,
            patch: p,
            tokens: Tensor::new(&[cams.len(), views * hw, 6 * p * p], tokens)?,
            frames: frames_for(&flat, hw)?,
            images: None,
        })
    }

    /// Targets with their images as supervision.
    pub fn with_images(config: &ModelConfig, scenes: &[&[CameraView]]) -> Result<Self> {
        let first = scenes
            .first()
            .and_then(|s| s.first())
            .ok_or_else(|| Error::config("target batch needs at least one view"))?;
        let (h, w) = (first.image.height, first.image.width);
        let cams: Vec<Vec<(Pose, Intrinsics)>> = scenes
            .iter()
            .map(|s| s.iter().map(|v| (v.pose, v.intrinsics)).collect())
            .collect();
        let mut batch = Self::new(config, &cams, h, w)?;
        let mut px = Vec::with_capacity(batch.tokens.numel() / 2);
        for v in scenes.iter().flat_map(|s| s.iter()) {
            px.extend(patchify_pixels(&v.image, config.patch_size)?.into_iter().map(|x| T::of(x as f64)));
        }
        let p2 = config.patch_size * config.patch_size;
        let n = batch.views * config.tokens_per_view(h, w);
        batch.images = Some(Tensor::new(&[batch.batch, n, 3 * p2], px)?);
        Ok(batch)
    }

    pub fn tokens_per_view(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
}

/// Context and supervised target batches for a set of episodes.
pub fn episode_batches<T: Scalar>(config: &ModelConfig, episodes: &[Episode]) -> Result<(ContextBatch<T>, TargetBatch<T>)> {
    let ctx: Vec<&[CameraView]> = episodes.iter().map(|e| e.context.as_slice()).collect();
    let tgt: Vec<&[CameraView]> = episodes.iter().map(|e| e.targets.as_slice()).collect();
    Ok((ContextBatch::new(config, &ctx)?, TargetBatch::with_images(config, &tgt)?))
}
