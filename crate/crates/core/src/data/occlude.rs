//! Compositing a sprite from one sequence on top of another.

use rand::Rng;

use super::{DataError, Result, SyntheticSample};

/// Copies the pixels, ids and flow of donor instance `sprite` onto `host`,
/// shifted by the integer `offset`, on every frame. Host points under the
/// pasted mask become invisible. The donor's own trajectories on that sprite
/// are appended, visible wherever they land on the pasted pixels.
pub fn paste_occluder(host: &SyntheticSample, donor: &SyntheticSample, sprite: u32, offset: [i64; 2]) -> Result<SyntheticSample> {
    if (host.len, host.height, host.width) != (donor.len, donor.height, donor.width) {
        return Err(DataError::Invalid(format!(
            "donor is {}x{}x{}, host {}x{}x{}",
            donor.len, donor.height, donor.width, host.len, host.height, host.width
        )));
    }
    if sprite == 0 {
        return Err(DataError::Invalid("the background cannot be pasted as an occluder".into()));
    }
    let (h, w) = (host.height, host.width);
    let px = h * w;
    let new_id = host.instance_ids.iter().copied().max().unwrap_or(0) + 1;
    let mut out = host.clone();
    for t in 0..host.len {
        for y in 0..h {
            for x in 0..w {
                if donor.id(t, x, y) != sprite {
                    continue;
                }
                let (hx, hy) = (x as i64 + offset[0], y as i64 + offset[1]);
                if hx < 0 || hy < 0 || hx >= w as i64 || hy >= h as i64 {
                    continue;
                }
                let src = y * w + x;
                let dst = hy as usize * w + hx as usize;
                for c in 0..3 {
                    out.frames[(t * 3 + c) * px + dst] = donor.frames[(t * 3 + c) * px + src];
                }
                out.instance_ids[t * px + dst] = new_id;
                for c in 0..2 {
                    if t + 1 < host.len {
                        out.fwd_flow[(t * 2 + c) * px + dst] = donor.fwd_flow[(t * 2 + c) * px + src];
                    }
                    if t > 0 {
                        out.bwd_flow[((t - 1) * 2 + c) * px + dst] = donor.bwd_flow[((t - 1) * 2 + c) * px + src];
                    }
                }
            }
        }
    }
    for n in 0..out.trajs.len() {
        for t in 0..out.len {
            let p = out.trajs[n][t];
            if out.id_nearest(t, [p[0] as f64, p[1] as f64]) == Some(new_id) {
                out.vis[n][t] = 0;
            }
        }
    }
    for n in 0..donor.trajs.len() {
        if donor.vis[n][0] == 0 || donor.trajectory_instance(n) != Some(sprite) {
            continue;
        }
        let shifted: Vec<[f32; 2]> =
            donor.trajs[n].iter().map(|p| [p[0] + offset[0] as f32, p[1] + offset[1] as f32]).collect();
        let vis = shifted
            .iter()
            .enumerate()
            .map(|(t, p)| u8::from(out.id_nearest(t, [p[0] as f64, p[1] as f64]) == Some(new_id)))
            .collect();
        out.trajs.push(shifted);
        out.vis.push(vis);
    }
    Ok(out)
}

/// Pastes a uniformly chosen donor sprite (among those visible on frame 0)
/// so that its frame-0 centroid lands on a uniformly chosen host pixel.
pub fn paste_random_occluder<R: Rng>(host: &SyntheticSample, donor: &SyntheticSample, rng: &mut R) -> Result<SyntheticSample> {
    let px = donor.height * donor.width;
    let mut present: Vec<u32> = donor.instance_ids[..px].iter().copied().filter(|&id| id > 0).collect();
    present.sort_unstable();
    present.dedup();
    if present.is_empty() {
        return Err(DataError::Invalid("donor has no sprite on its first frame".into()));
    }
    let sprite = present[rng.gen_range(0..present.len())];
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0.0);
    for (i, _) in donor.instance_ids[..px].iter().enumerate().filter(|(_, &id)| id == sprite) {
        sx += (i % donor.width) as f64;
        sy += (i / donor.width) as f64;
        count += 1.0;
    }
    let tx = rng.gen_range(0..host.width) as f64;
    let ty = rng.gen_range(0..host.height) as f64;
    let offset = [(tx - sx / count).round() as i64, (ty - sy / count).round() as i64];
    paste_occluder(host, donor, sprite, offset)
}
