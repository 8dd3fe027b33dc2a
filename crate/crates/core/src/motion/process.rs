//! Gesture representation: joint exponential maps plus root velocities, frame-rate
//! conversion, clip segmentation and per-channel standardization.

use nalgebra::{Matrix3, Vector3};
use ndarray::{s, Array2, ArrayView2, Axis as NdAxis};
use serde::{Deserialize, Serialize};

use super::bvh::{Bvh, Channel, Skeleton};
use super::rotation::{
    axis_rotation, closest_representative, euler_to_matrix, expmap_to_quat, from_expmap, heading,
    matrix_to_euler, quat_to_expmap, to_expmap, Axis,
};
use crate::error::{Error, Result};

/// Channels appended after the joint rotations.
pub const ROOT_CHANNELS: usize = 6;

/// Per-frame rotation of every joint (identity where a joint has no rotation channels).
fn joint_rotations(skeleton: &Skeleton, row: &[f64]) -> Result<Vec<Matrix3<f64>>> {
    let offsets = skeleton.channel_offsets();
    skeleton
        .joints
        .iter()
        .zip(offsets)
        .map(|(j, o)| {
            let Some(order) = j.rotation_order()? else {
                return Ok(Matrix3::identity());
            };
            let mut deg = [0.0; 3];
            let mut k = 0;
            for (c, ch) in j.channels.iter().enumerate() {
                if let Channel::Rotation(_) = ch {
                    deg[k] = row[o + c];
                    k += 1;
                }
            }
            Ok(euler_to_matrix(deg, order))
        })
        .collect()
}

/// Root translation from the root's position channels, offset otherwise.
fn root_position(skeleton: &Skeleton, row: &[f64]) -> Vector3<f64> {
    let root = &skeleton.joints[0];
    let mut p = Vector3::from(root.offset);
    for (c, ch) in root.channels.iter().enumerate() {
        if let Channel::Position(a) = ch {
            p[a.index()] = row[c];
        }
    }
    p
}

/// Joint exponential maps `T x 3J` (continuity-fixed per joint) and root positions `T x 3`.
pub fn bvh_to_expmap(bvh: &Bvh) -> Result<(Array2<f64>, Array2<f64>)> {
    let sk = &bvh.skeleton;
    let t_len = bvh.motion.nrows();
    let d = sk.rotation_dims();
    let mut rot = Array2::zeros((t_len, d));
    let mut pos = Array2::zeros((t_len, 3));
    for t in 0..t_len {
        let row = bvh.motion.row(t).to_vec();
        for (j, r) in joint_rotations(sk, &row)?.iter().enumerate() {
            let mut v = to_expmap(r);
            if t > 0 {
                let prev = Vector3::new(rot[[t - 1, 3 * j]], rot[[t - 1, 3 * j + 1]], rot[[t - 1, 3 * j + 2]]);
                v = closest_representative(&v, &prev);
            }
            rot.slice_mut(s![t, 3 * j..3 * j + 3]).assign(&ndarray::arr1(v.as_slice()));
        }
        let p = root_position(sk, &row);
        pos.slice_mut(s![t, ..]).assign(&ndarray::arr1(p.as_slice()));
    }
    Ok((rot, pos))
}

fn vec3_at(a: &ArrayView2<f64>, t: usize, c: usize) -> Vector3<f64> {
    Vector3::new(a[[t, c]], a[[t, c + 1]], a[[t, c + 2]])
}

fn yaw(psi: f64) -> Matrix3<f64> {
    axis_rotation(Axis::Y, psi)
}

/// `T x 6`: per-frame root displacement in the previous frame's heading frame, then the
/// per-frame body rotation `expmap(R_{t-1}^T R_t)`. Row 0 copies row 1.
pub fn root_velocities(positions: ArrayView2<f64>, rotations: &[Matrix3<f64>]) -> Result<Array2<f64>> {
    let t_len = positions.nrows();
    if t_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "root velocities need at least 2 frames, got {t_len}"
        )));
    }
    if rotations.len() != t_len || positions.ncols() != 3 {
        return Err(Error::shape("root positions and rotations disagree"));
    }
    let mut out = Array2::zeros((t_len, ROOT_CHANNELS));
    for t in 1..t_len {
        let dp = vec3_at(&positions, t, 0) - vec3_at(&positions, t - 1, 0);
        let local = yaw(heading(&rotations[t - 1])).transpose() * dp;
        let w = to_expmap(&(rotations[t - 1].transpose() * rotations[t]));
        for k in 0..3 {
            out[[t, k]] = local[k];
            out[[t, 3 + k]] = w[k];
        }
    }
    let first = out.row(1).to_owned();
    out.row_mut(0).assign(&first);
    Ok(out)
}

/// Integrates positional velocities from `start`, taking headings from `rotations`.
pub fn integrate_root(velocities: ArrayView2<f64>, rotations: &[Matrix3<f64>], start: Vector3<f64>) -> Array2<f64> {
    let t_len = velocities.nrows();
    let mut out = Array2::zeros((t_len, 3));
    let mut p = start;
    for t in 0..t_len {
        if t > 0 {
            let v = vec3_at(&velocities, t, 0);
            p += yaw(heading(&rotations[t - 1])) * v;
        }
        out.slice_mut(s![t, ..]).assign(&ndarray::arr1(p.as_slice()));
    }
    out
}

/// Resamples `T x C` motion whose first `3 * rot_triples` columns are expmap triples.
/// Rotations are slerped, remaining channels interpolated linearly. Downsampling only.
pub fn resample_fps(motion: ArrayView2<f64>, rot_triples: usize, src_fps: f64, dst_fps: f64) -> Result<Array2<f64>> {
    if !(src_fps > 0.0 && dst_fps > 0.0) {
        return Err(Error::InvalidArgument("frame rates must be positive".into()));
    }
    if dst_fps > src_fps * (1.0 + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample from {src_fps} to {dst_fps} fps"
        )));
    }
    let (t_len, cols) = motion.dim();
    if 3 * rot_triples > cols {
        return Err(Error::shape("more rotation triples than columns"));
    }
    if t_len == 0 || (src_fps - dst_fps).abs() < 1e-9 * src_fps {
        return Ok(motion.to_owned());
    }
    let ratio = src_fps / dst_fps;
    let n_out = (((t_len - 1) as f64 / ratio) + 1e-9).floor() as usize + 1;
    let mut out = Array2::zeros((n_out, cols));
    for k in 0..n_out {
        let u = k as f64 * ratio;
        let mut i = u.floor() as usize;
        let mut f = u - i as f64;
        if f < 1e-9 {
            f = 0.0;
        } else if f > 1.0 - 1e-9 {
            i += 1;
            f = 0.0;
        }
        let i1 = (i + 1).min(t_len - 1);
        for j in 0..rot_triples {
            let a = vec3_at(&motion, i, 3 * j);
            let v = if f == 0.0 {
                a
            } else {
                let b = vec3_at(&motion, i1, 3 * j);
                let q = expmap_to_quat(&a).slerp(&expmap_to_quat(&b), f);
                let mut v = quat_to_expmap(&q);
                if k > 0 {
                    v = closest_representative(&v, &vec3_at(&out.view(), k - 1, 3 * j));
                }
                v
            };
            for c in 0..3 {
                out[[k, 3 * j + c]] = v[c];
            }
        }
        for c in 3 * rot_triples..cols {
            out[[k, c]] = (1.0 - f) * motion[[i, c]] + f * motion[[i1, c]];
        }
    }
    Ok(out)
}

/// `T x (D + 6)` gesture features at `fps`.
pub fn gesture_from_bvh(bvh: &Bvh, fps: f64) -> Result<Array2<f64>> {
    let (rot, pos) = bvh_to_expmap(bvh)?;
    let d = rot.ncols();
    let joined = ndarray::concatenate(NdAxis(1), &[rot.view(), pos.view()]).expect("same rows");
    let res = resample_fps(joined.view(), d / 3, bvh.fps(), fps)?;
    let rot = res.slice(s![.., ..d]);
    let root_rot: Vec<Matrix3<f64>> = (0..res.nrows()).map(|t| from_expmap(&vec3_at(&rot, t, 0))).collect();
    let vel = root_velocities(res.slice(s![.., d..]), &root_rot)?;
    Ok(ndarray::concatenate(NdAxis(1), &[rot, vel.view()]).expect("same rows"))
}

/// Inverse of [`gesture_from_bvh`]: expmaps back to each joint's Euler order, root path
/// integrated from `start`. Channels the gesture does not carry take values from `template`.
pub fn gesture_to_bvh(skeleton: &Skeleton, gesture: ArrayView2<f64>, fps: f64, template: &[f64], start: Vector3<f64>) -> Result<Bvh> {
    let d = skeleton.rotation_dims();
    if gesture.ncols() != d + ROOT_CHANNELS {
        return Err(Error::shape(format!(
            "gesture has {} channels, skeleton needs {}",
            gesture.ncols(),
            d + ROOT_CHANNELS
        )));
    }
    if template.len() != skeleton.num_channels() {
        return Err(Error::shape("template row does not match the skeleton"));
    }
    let t_len = gesture.nrows();
    let root_rot: Vec<Matrix3<f64>> = (0..t_len).map(|t| from_expmap(&vec3_at(&gesture, t, 0))).collect();
    let path = integrate_root(gesture.slice(s![.., d..d + 3]), &root_rot, start);
    let offsets = skeleton.channel_offsets();
    let mut motion = Array2::zeros((t_len, skeleton.num_channels()));
    for t in 0..t_len {
        motion.row_mut(t).assign(&ndarray::arr1(template));
        for (j, joint) in skeleton.joints.iter().enumerate() {
            let o = offsets[j];
            if let Some(order) = joint.rotation_order()? {
                let r = from_expmap(&vec3_at(&gesture, t, 3 * j));
                let deg = matrix_to_euler(&r, order);
                let mut k = 0;
                for (c, ch) in joint.channels.iter().enumerate() {
                    if let Channel::Rotation(_) = ch {
                        motion[[t, o + c]] = deg[k];
                        k += 1;
                    }
                }
            }
            if j == 0 {
                for (c, ch) in joint.channels.iter().enumerate() {
                    if let Channel::Position(a) = ch {
                        motion[[t, o + c]] = path[[t, a.index()]];
                    }
                }
            }
        }
    }
    Ok(Bvh {
        skeleton: skeleton.clone(),
        motion,
        frame_time: 1.0 / fps,
    })
}

/// Root position of the first frame, used to anchor integrated paths.
pub fn first_root_position(bvh: &Bvh) -> Vector3<f64> {
    if bvh.motion.nrows() == 0 {
        return Vector3::from(bvh.skeleton.joints[0].offset);
    }
    root_position(&bvh.skeleton, &bvh.motion.row(0).to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipPair {
    pub gesture: Array2<f64>,
    pub audio: Vec<f32>,
}

/// Non-overlapping `clip_s` windows; a trailing remainder is dropped.
pub fn segment_clips(
    gesture: ArrayView2<f64>,
    fps: f64,
    audio: &[f32],
    sample_rate: u32,
    clip_s: f64,
) -> Result<Vec<ClipPair>> {
    if clip_s <= 0.0 || fps <= 0.0 || sample_rate == 0 {
        return Err(Error::InvalidArgument("clip length and rates must be positive".into()));
    }
    let frames = (clip_s * fps).round() as usize;
    let samples = (clip_s * sample_rate as f64).round() as usize;
    let count = (gesture.nrows() / frames).min(audio.len() / samples);
    Ok((0..count)
        .map(|i| ClipPair {
            gesture: gesture.slice(s![i * frames..(i + 1) * frames, ..]).to_owned(),
            audio: audio[i * samples..(i + 1) * samples].to_vec(),
        })
        .collect())
}

pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and standard deviation (population form, floored).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(clips: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Result<Self> {
        let clips: Vec<_> = clips.into_iter().collect();
        let cols = clips
            .first()
            .ok_or_else(|| Error::Empty("no clips to fit statistics on".into()))?
            .ncols();
        if clips.iter().any(|c| c.ncols() != cols) {
            return Err(Error::shape("clips differ in channel count"));
        }
        let n: usize = clips.iter().map(|c| c.nrows()).sum();
        if n == 0 {
            return Err(Error::Empty("clips have no frames".into()));
        }
        let mut mean = vec![0.0; cols];
        for c in &clips {
            for row in c.rows() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; cols];
        for c in &clips {
            for row in c.rows() {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var.iter().map(|s| (s / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Standardizer { mean, std })
    }

    fn check(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.mean.len() {
            return Err(Error::shape(format!(
                "{} channels, statistics cover {}",
                x.ncols(),
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn standardize(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&x)?;
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn destandardize(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&x)?;
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }
}
